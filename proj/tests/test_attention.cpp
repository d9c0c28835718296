#include <gtest/gtest.h>

#include <cmath>

#include "paml/attention.hpp"
#include "test_util.hpp"

using namespace paml;
using namespace paml::testing;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    for (std::size_t c = 0; c < t.dim(1); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

Mat affine(const Mat& x, const Linear& l) {
  const Mat w = to_mat(l.weight);
  Mat out(x.size(), std::vector<double>(w[0].size(), 0.0));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t o = 0; o < w[0].size(); ++o) {
      double s = l.bias.defined() ? l.bias[o] : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) s += x[r][i] * w[i][o];
      out[r][o] = s;
    }
  }
  return out;
}

// Loop-level multi-head attention with an optional additive bias per head,
// the bias indexed by cumulative row/column counts of a full grid.
Mat naive_attention(const Mat& qs, const Mat& ks, const Mat& vs, const MultiHeadAttention& attn,
                    const RpeTable* rpe, std::size_t gh, std::size_t gw) {
  const std::size_t heads = attn.config().heads, hd = attn.config().head_dim();
  const std::size_t d = attn.config().model_dim;
  const Mat q = affine(qs, attn.wq), k = affine(ks, attn.wk), v = affine(vs, attn.wv);
  Mat merged(q.size(), std::vector<double>(d, 0.0));
  Mat ky, kx;
  std::vector<long> yy, xx;
  if (rpe != nullptr) {
    const Mat py = to_mat(rpe->p_y), px = to_mat(rpe->p_x), wk = to_mat(attn.wk.weight);
    ky.assign(py.size(), std::vector<double>(d, 0.0));
    kx.assign(px.size(), std::vector<double>(d, 0.0));
    for (std::size_t r = 0; r < py.size(); ++r) {
      for (std::size_t o = 0; o < d; ++o) {
        for (std::size_t i = 0; i < d / 2; ++i) {
          ky[r][o] += py[r][i] * wk[i][o];
          kx[r][o] += px[r][i] * wk[d / 2 + i][o];
        }
      }
    }
    for (std::size_t i = 0; i < gh; ++i) {
      for (std::size_t j = 0; j < gw; ++j) {
        yy.push_back(static_cast<long>(j) + 1);  // running count along the row
        xx.push_back(static_cast<long>(i) + 1);  // running count down the column
      }
    }
  }
  const long off = rpe != nullptr ? static_cast<long>(rpe->offset()) : 0;
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t a = 0; a < q.size(); ++a) {
      std::vector<double> logits(k.size());
      for (std::size_t b = 0; b < k.size(); ++b) {
        double dot = 0.0, bias = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += q[a][h * hd + c] * k[b][h * hd + c];
        if (rpe != nullptr) {
          const auto iy = static_cast<std::size_t>(yy[a] - yy[b] + off);
          const auto ix = static_cast<std::size_t>(xx[a] - xx[b] + off);
          for (std::size_t c = 0; c < hd; ++c) {
            bias += q[a][h * hd + c] * (ky[iy][h * hd + c] + kx[ix][h * hd + c]);
          }
        }
        logits[b] = (dot + bias) / std::sqrt(static_cast<double>(hd));
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t c = 0; c < hd; ++c) {
        double s = 0.0;
        for (std::size_t b = 0; b < k.size(); ++b) s += logits[b] / z * v[b][h * hd + c];
        merged[a][h * hd + c] = s;
      }
    }
  }
  return affine(merged, attn.wo);
}

void expect_close(const Tensor& t, const Mat& m, double tol) {
  ASSERT_EQ(t.dim(0), m.size());
  for (std::size_t r = 0; r < m.size(); ++r) {
    for (std::size_t c = 0; c < m[r].size(); ++c) EXPECT_NEAR(t.at(r, c), m[r][c], tol);
  }
}

void zero(Tensor t) {
  for (double& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST(Attention, SingleKeyReturnsItsValue) {
  Rng rng(1);
  const Tensor q = random_const(rng, {3, 4});
  const Tensor k = random_const(rng, {1, 4});
  const Tensor v = random_const(rng, {1, 5});
  const auto r = scaled_dot_attention(q, k, v);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 5; ++c) EXPECT_DOUBLE_EQ(r.output.at(i, c), v.at(0, c));
  }
}

TEST(Attention, IdenticalKeysAverageValues) {
  Rng rng(2);
  const Tensor q = random_const(rng, {2, 4});
  const Tensor k = Tensor::constant({3, 4}, std::vector<double>(12, 0.3));
  const Tensor v = random_const(rng, {3, 2});
  const auto r = scaled_dot_attention(q, k, v);
  for (std::size_t c = 0; c < 2; ++c) {
    const double mean = (v.at(0, c) + v.at(1, c) + v.at(2, c)) / 3.0;
    EXPECT_NEAR(r.output.at(0, c), mean, 1e-12);
  }
}

TEST(Attention, WeightsAreRowStochastic) {
  Rng rng(3);
  ParamStore store;
  MultiHeadAttention attn(store, "a", {8, 2}, 6, 5, 4, rng);
  const auto r = mca(random_const(rng, {3, 6}), random_const(rng, {7, 5}), random_const(rng, {7, 4}), attn);
  ASSERT_EQ(r.weights.size(), 2u);
  for (const auto& w : r.weights) {
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 7; ++j) s += w.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
  EXPECT_EQ(r.output.shape(), (Shape{3, 8}));
}

TEST(Attention, MatchesLoopOracle) {
  Rng rng(4);
  ParamStore store;
  MultiHeadAttention attn(store, "a", {8, 2}, 6, 5, 4, rng);
  const Tensor q = random_const(rng, {3, 6}), k = random_const(rng, {7, 5}), v = random_const(rng, {7, 4});
  expect_close(mca(q, k, v, attn).output, naive_attention(to_mat(q), to_mat(k), to_mat(v), attn, nullptr, 0, 0), 1e-12);
}

TEST(Attention, Errors) {
  EXPECT_THROW((AttentionConfig{10, 3}.validate()), ConfigError);
  EXPECT_THROW(scaled_dot_attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 4})),
               DimensionError);
  EXPECT_THROW(scaled_dot_attention(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), Tensor::zeros({3, 4})),
               DimensionError);
  Rng rng(5);
  ParamStore store;
  MultiHeadAttention attn(store, "a", {4, 2}, 4, 4, 4, rng);
  EXPECT_THROW(mca(Tensor::zeros({1, 4}), Tensor::zeros({3, 4}), Tensor::zeros({2, 4}), attn), DimensionError);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  ParamStore store;
  MultiHeadAttention attn(store, "a", {8, 2}, 6, 5, 4, rng);
  std::vector<Tensor> in{random_param(rng, {3, 6}), random_param(rng, {4, 5}), random_param(rng, {4, 4})};
  for (const auto& e : store.entries()) in.push_back(e.tensor);
  EXPECT_LT(finite_diff_check([&] { return probe(mca(in[0], in[1], in[2], attn).output); }, in), 1e-4);
}

TEST(RelativePositions, CumulativeCountsOnFullGrid) {
  const auto pos = relative_positions(GridMask::all_ones(2, 2), 1, 3);
  EXPECT_EQ(pos.yy, (std::vector<std::int64_t>{1, 2, 1, 2}));
  EXPECT_EQ(pos.xx, (std::vector<std::int64_t>{1, 1, 2, 2}));
  // token 1 (row 0, col 1) against token 2 (row 1, col 0): Δyy = 1, Δxx = -1
  EXPECT_EQ(pos.index_y[1 * 4 + 2], 2u);
  EXPECT_EQ(pos.index_x[1 * 4 + 2], 0u);
}

TEST(RelativePositions, MaskedTokensDoNotAdvanceCounts) {
  GridMask m{2, 3, {1, 0, 1, 1, 1, 0}};
  const auto pos = relative_positions(m, 2, 5);
  EXPECT_EQ(pos.yy, (std::vector<std::int64_t>{1, 1, 2, 1, 2, 2}));
  EXPECT_EQ(pos.xx, (std::vector<std::int64_t>{1, 0, 1, 2, 1, 1}));
}

TEST(RelativePositions, TableTooSmallIsConfigError) {
  EXPECT_THROW(relative_positions(GridMask::all_ones(4, 4), 1, 3), ConfigError);
}

TEST(Mharpe, ZeroTablesEqualPlainCrossAttention) {
  Rng rng(7);
  ParamStore store;
  MultiHeadAttention attn(store, "a", {8, 2}, 8, 8, 8, rng);
  RpeTable rpe(store, "rpe", 8, 3, rng);
  zero(rpe.p_y);
  zero(rpe.p_x);
  const Tensor q = random_const(rng, {9, 8}), k = random_const(rng, {9, 8}), v = random_const(rng, {9, 8});
  const Tensor a = mharpe(q, k, v, GridMask::all_ones(3, 3), attn, rpe).output;
  const Tensor b = mca(q, k, v, attn).output;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Mharpe, MatchesLoopOracle) {
  Rng rng(8);
  ParamStore store;
  MultiHeadAttention attn(store, "a", {8, 2}, 8, 8, 8, rng);
  RpeTable rpe(store, "rpe", 8, 3, rng);
  const Tensor q = random_const(rng, {6, 8}), k = random_const(rng, {6, 8}), v = random_const(rng, {6, 8});
  expect_close(mharpe(q, k, v, GridMask::all_ones(2, 3), attn, rpe).output,
               naive_attention(to_mat(q), to_mat(k), to_mat(v), attn, &rpe, 2, 3), 1e-12);
}

TEST(Mharpe, GradientsMatchFiniteDifferences) {
  Rng rng(9);
  ParamStore store;
  MultiHeadAttention attn(store, "a", {8, 2}, 8, 8, 8, rng);
  RpeTable rpe(store, "rpe", 8, 2, rng);
  std::vector<Tensor> in{random_param(rng, {4, 8}), random_param(rng, {4, 8})};
  for (const auto& e : store.entries()) in.push_back(e.tensor);
  const GridMask mask = GridMask::all_ones(2, 2);
  EXPECT_LT(finite_diff_check([&] { return probe(mharpe(in[0], in[0], in[1], mask, attn, rpe).output); }, in),
            1e-4);
}

TEST(Mharpe, FrozenTablesGetNoGradient) {
  Rng rng(10);
  ParamStore store;
  MultiHeadAttention attn(store, "a", {4, 1}, 4, 4, 4, rng);
  RpeTable rpe(store, "rpe", 4, 2, rng, false);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    const Tensor x = Tensor::full({4, 4}, 0.5);
    loss = probe(mharpe(x, x, x, GridMask::all_ones(2, 2), attn, rpe).output);
  }
  tape.backward(loss);
  EXPECT_FALSE(rpe.p_y.has_grad());
  EXPECT_TRUE(attn.wk.weight.has_grad());
}

#include <gtest/gtest.h>

#include <cmath>

#include "paml/vdfe.hpp"
#include "test_util.hpp"

using namespace paml;
using namespace paml::testing;

namespace {

Tensor s(double v) { return Tensor::scalar(v); }
Tensor col(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::constant({n, 1}, std::move(v));
}

VdfeConfig small_config(TransformMode mode = TransformMode::BlendLearnable) {
  VdfeConfig c;
  c.in_dim = 8;
  c.dim = 8;
  c.heads = 2;
  c.max_extent = 2;
  c.mode = mode;
  return c;
}

void set(Tensor t, const std::vector<double>& v) {
  auto d = t.mutable_data();
  std::copy(v.begin(), v.end(), d.begin());
}

std::vector<double> eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return v;
}

}  // namespace

TEST(Similarity, KnownValues) {
  const Tensor a = Tensor::constant({3, 2}, {1, 2, 1, 0, 3, -1});
  const Tensor b = Tensor::constant({3, 2}, {1, 2, 0, 5, -3, 1});
  const Tensor phi = similarity_score(a, b);
  EXPECT_NEAR(phi[0], 1.0, 1e-12);
  EXPECT_NEAR(phi[1], 0.0, 1e-12);
  EXPECT_NEAR(phi[2], -1.0, 1e-12);
}

TEST(Similarity, ZeroRowIsFloored) {
  const Tensor phi = similarity_score(Tensor::zeros({1, 3}), Tensor::constant({1, 3}, {1, 2, 3}));
  EXPECT_TRUE(std::isfinite(phi[0]));
  EXPECT_EQ(phi[0], 0.0);
  EXPECT_THROW(similarity_score(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), DimensionError);
}

TEST(Transforms, Gaussian) {
  const Tensor g = gaussian_transform(col({1.0, 0.0, -1.0}), s(0.5));
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_NEAR(g[1], std::exp(-2.0), 1e-12);
  EXPECT_NEAR(g[1], 0.1353, 1e-4);
  EXPECT_DOUBLE_EQ(g[2], 1.0);
}

TEST(Transforms, Laplacian) {
  const Tensor l = laplacian_transform(col({1.0, 0.5, -1.0}), s(1.0));
  EXPECT_DOUBLE_EQ(l[0], 1.0);
  EXPECT_NEAR(l[1], 0.6065, 1e-4);
  EXPECT_NEAR(l[2], 0.1353, 1e-4);
}

TEST(Transforms, BlendEndpointsAndMidpoint) {
  const Tensor g = col({0.1353}), l = col({0.6065});
  EXPECT_EQ(blend(g, l, s(1.0))[0], 0.1353);
  EXPECT_EQ(blend(g, l, s(0.0))[0], 0.6065);
  EXPECT_NEAR(blend(g, l, s(0.5))[0], 0.3709, 1e-4);
}

TEST(Transforms, OutputsStayInUnitInterval) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Tensor phi = col({rng.uniform(-1.0, 1.0)});
    const Tensor sig = s(rng.uniform(0.05, 3.0)), b = s(rng.uniform(0.05, 3.0));
    const double g = gaussian_transform(phi, sig)[0], l = laplacian_transform(phi, b)[0];
    const double v = blend(col({g}), col({l}), s(rng.uniform()))[0];
    for (double x : {g, l, v}) {
      EXPECT_GT(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(Transforms, BlendIsAffineInLambda) {
  Rng rng(2);
  const Tensor g = random_const(rng, {5, 1}, 0.0, 1.0), l = random_const(rng, {5, 1}, 0.0, 1.0);
  Tensor lambda = Tensor::parameter({1}, {0.3});
  for (std::size_t i = 0; i < 5; ++i) {
    lambda.zero_grad();
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = reshape(slice(blend(g, l, lambda), 0, i, 1), {1});
    }
    tape.backward(y);
    EXPECT_NEAR(lambda.grad()[0], g[i] - l[i], 1e-15);
  }
}

TEST(Transforms, Gradients) {
  Rng rng(3);
  std::vector<Tensor> in{random_param(rng, {6, 1}, -0.9, 0.9), Tensor::parameter({1}, {0.7}),
                         Tensor::parameter({1}, {1.3}), Tensor::parameter({1}, {0.4})};
  auto f = [&] {
    return probe(blend(gaussian_transform(in[0], in[1]), laplacian_transform(in[0], in[2]), in[3]));
  };
  EXPECT_LT(finite_diff_check(f, in), 1e-4);
}

TEST(Modulate, AdditiveAndMultiplicativePaths) {
  Rng rng(4);
  const Tensor info = random_const(rng, {3, 4}), f_v = random_const(rng, {3, 4});
  const Tensor zero = Tensor::zeros({4, 4}), id = Tensor::constant({4, 4}, eye(4));
  const Tensor a = modulate(info, f_v, zero, id);
  const Tensor b = modulate(info, Tensor::full({3, 4}, 1.0), id, zero);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_DOUBLE_EQ(a[i], info[i]);
    EXPECT_DOUBLE_EQ(b[i], info[i]);
  }
}

TEST(Modulate, Gradients) {
  Rng rng(5);
  std::vector<Tensor> in{random_param(rng, {8, 8}), random_param(rng, {8, 8})};
  const Tensor info = random_const(rng, {4, 8}), f_v = random_const(rng, {4, 8});
  EXPECT_LT(finite_diff_check([&] { return probe(modulate(info, f_v, in[0], in[1])); }, in), 1e-4);
}

TEST(Discriminative, GateClosesAndOpens) {
  Rng rng(6);
  ParamStore store;
  LayerNorm n1(store, "n1", 4), n2(store, "n2", 4);
  const Tensor f_v = random_const(rng, {2, 4}), f_lcv = random_const(rng, {2, 4});
  const Tensor d = discriminative_features(f_v, f_lcv, col({0.0, 1.0}), n1, n2);
  const Tensor open = add(n1(f_v), n2(f_lcv));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(d.at(0, c), 0.0);
    EXPECT_DOUBLE_EQ(d.at(1, c), open.at(1, c));
  }
}

TEST(Vdfe, SingleTextTokenGivesIdenticalLanguageInfoRows) {
  Rng rng(7);
  ParamStore store;
  Vdfe v(store, "v", small_config(), rng);
  const Tensor f_v = random_const(rng, {4, 8}), f_l = random_const(rng, {1, 8});
  const Tensor info = v.language_info(f_v, f_l);
  const Tensor expect = v.mca1.wo(v.mca1.wv(f_l));
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(info.at(r, c), expect.at(0, c), 1e-12);
  }
}

TEST(Vdfe, ZeroTablesContextualizeLikeCrossAttention) {
  Rng rng(8);
  ParamStore store;
  Vdfe v(store, "v", small_config(), rng);
  set(v.rpe.p_y, std::vector<double>(v.rpe.p_y.numel(), 0.0));
  set(v.rpe.p_x, std::vector<double>(v.rpe.p_x.numel(), 0.0));
  const Tensor f_mv = random_const(rng, {4, 8}), f_v = random_const(rng, {4, 8});
  const Tensor a = v.contextualize(f_mv, f_v, GridMask::all_ones(2, 2));
  const Tensor b = mca(f_mv, f_mv, f_v, v.context_attn).output;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Vdfe, OutputShapesAndRanges) {
  Rng rng(9);
  ParamStore store;
  Vdfe v(store, "v", small_config(), rng);
  const VdfeOutput out = v({random_const(rng, {4, 8}), 2, 2}, random_const(rng, {3, 8}));
  EXPECT_EQ(out.fused.shape(), (Shape{4, 16}));
  EXPECT_EQ(out.phi_v.shape(), (Shape{4, 1}));
  for (double p : out.phi_sim.data()) {
    EXPECT_GE(p, -1.0 - 1e-12);
    EXPECT_LE(p, 1.0 + 1e-12);
  }
  for (double p : out.phi_v.data()) {
    EXPECT_GT(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
  EXPECT_NEAR(v.sigma()[0], 0.5, 1e-12);
  EXPECT_NEAR(v.b()[0], 1.0, 1e-12);
  EXPECT_NEAR(v.lambda()[0], 0.5, 1e-12);
}

TEST(Vdfe, GridMismatchIsShapeError) {
  Rng rng(10);
  ParamStore store;
  Vdfe v(store, "v", small_config(), rng);
  EXPECT_THROW(v({random_const(rng, {4, 8}), 2, 3}, random_const(rng, {3, 8})), DimensionError);
}

TEST(Vdfe, GradientsMatchFiniteDifferences) {
  for (auto mode : {TransformMode::BlendLearnable, TransformMode::Gaussian, TransformMode::Laplacian}) {
    Rng rng(11);
    ParamStore store;
    Vdfe v(store, "v", small_config(mode), rng);
    std::vector<Tensor> in{random_param(rng, {4, 8}), random_param(rng, {3, 8})};
    for (const auto& e : store.entries()) in.push_back(e.tensor);
    FiniteDiffOptions opt;
    opt.max_coords_per_tensor = 16;
    EXPECT_LT(finite_diff_check([&] { return probe(v({in[0], 2, 2}, in[1]).fused); }, in, opt), 1e-4)
        << to_string(mode);
  }
}

TEST(Vdfe, PinnedModesGiveUnusedScalarsExactlyZeroGradient) {
  struct Case {
    TransformMode mode;
    bool sigma, b, lambda;
  };
  for (const Case c : {Case{TransformMode::Gaussian, true, false, false},
                       Case{TransformMode::Laplacian, false, true, false},
                       Case{TransformMode::BlendFixed, true, true, false},
                       Case{TransformMode::BlendLearnable, true, true, true}}) {
    Rng rng(12);
    ParamStore store;
    Vdfe v(store, "v", small_config(c.mode), rng);
    store.zero_grad();
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = probe(v({random_const(rng, {4, 8}), 2, 2}, random_const(rng, {3, 8})).fused);
    }
    tape.backward(loss);
    auto grad = [](const Tensor& t) { return t.has_grad() ? t.grad()[0] : 0.0; };
    EXPECT_EQ(grad(v.sigma_raw) != 0.0, c.sigma) << to_string(c.mode);
    EXPECT_EQ(grad(v.b_raw) != 0.0, c.b) << to_string(c.mode);
    EXPECT_EQ(grad(v.lambda_raw) != 0.0, c.lambda) << to_string(c.mode);
  }
}

TEST(Vdfe, ModeNamesRoundTrip) {
  for (auto m : {TransformMode::Gaussian, TransformMode::Laplacian, TransformMode::BlendFixed,
                 TransformMode::BlendLearnable}) {
    EXPECT_EQ(parse_transform_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_transform_mode("cauchy"), ConfigError);
}

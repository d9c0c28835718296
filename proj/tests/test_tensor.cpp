#include <gtest/gtest.h>

#include <cmath>

#include "paml/errors.hpp"
#include "test_util.hpp"

using namespace paml;
using namespace paml::testing;

namespace {

constexpr double kTol = 1e-4;

double check_unary(const std::function<Tensor(const Tensor&)>& op, Shape shape, double lo = -1.0,
                   double hi = 1.0, std::uint64_t seed = 1) {
  Rng rng(seed);
  Tensor x = random_param(rng, std::move(shape), lo, hi);
  return finite_diff_check([&](const Tensor& t) { return probe(op(t)); }, x);
}

double check_binary(const std::function<Tensor(const Tensor&, const Tensor&)>& op, Shape sa,
                    Shape sb, double lo = -1.0, double hi = 1.0, std::uint64_t seed = 2) {
  Rng rng(seed);
  std::vector<Tensor> in{random_param(rng, std::move(sa), lo, hi),
                         random_param(rng, std::move(sb), lo, hi)};
  return finite_diff_check([&] { return probe(op(in[0], in[1])); }, in);
}

}  // namespace

TEST(TensorGradients, Elementwise) {
  EXPECT_LT(check_binary([](auto& a, auto& b) { return add(a, b); }, {3, 4}, {3, 4}), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return sub(a, b); }, {3, 4}, {3, 4}), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return hadamard(a, b); }, {3, 4}, {3, 4}), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return div(a, b); }, {3, 4}, {3, 4}, 0.5, 2.0), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return minimum(a, b); }, {3, 4}, {3, 4}), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return maximum(a, b); }, {3, 4}, {3, 4}), kTol);
}

TEST(TensorGradients, ScalarBroadcast) {
  EXPECT_LT(check_binary([](auto& a, auto& b) { return add(a, b); }, {3, 4}, {1}), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return hadamard(a, b); }, {1}, {2, 5}), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return div(a, b); }, {3, 2}, {1}, 0.5, 2.0), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return div(a, b); }, {1}, {3, 2}, 0.5, 2.0), kTol);
}

TEST(TensorGradients, Unary) {
  EXPECT_LT(check_unary([](auto& x) { return scale(x, -2.5); }, {2, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return add_scalar(x, 0.7); }, {2, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return neg(x); }, {2, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return exp(x); }, {2, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return log(x); }, {2, 3}, 0.2, 3.0), kTol);
  EXPECT_LT(check_unary([](auto& x) { return sqrt(x); }, {2, 3}, 0.2, 3.0), kTol);
  EXPECT_LT(check_unary([](auto& x) { return square(x); }, {2, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return abs(x); }, {2, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return sigmoid(x); }, {2, 3}, -4.0, 4.0), kTol);
  EXPECT_LT(check_unary([](auto& x) { return softplus(x); }, {2, 3}, -4.0, 4.0), kTol);
  EXPECT_LT(check_unary([](auto& x) { return relu(x); }, {2, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return clamp_min(x, 0.1); }, {2, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return clamp(x, -0.3, 0.4); }, {2, 3}), kTol);
}

TEST(TensorGradients, Structural) {
  EXPECT_LT(check_binary([](auto& a, auto& b) { return matmul(a, b); }, {3, 4}, {4, 2}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return transpose(x); }, {3, 4}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return reshape(x, {6, 2}); }, {3, 4}), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return concat({a, b}, 0); }, {2, 3}, {4, 3}), kTol);
  EXPECT_LT(check_binary([](auto& a, auto& b) { return concat({a, b}, 1); }, {2, 3}, {2, 5}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return slice(x, 0, 1, 2); }, {4, 3}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return slice(x, 1, 2, 3); }, {4, 6}), kTol);
}

TEST(TensorGradients, Reductions) {
  EXPECT_LT(check_unary([](auto& x) { return scale(sum(x), 0.3); }, {3, 4}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return scale(mean(x), 0.3); }, {3, 4}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return sum(x, 0); }, {3, 4}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return sum(x, 1); }, {3, 4}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return mean(x, 0); }, {3, 4}), kTol);
  EXPECT_LT(check_unary([](auto& x) { return mean(x, 1); }, {3, 4}), kTol);
}

TEST(TensorGradients, SoftmaxAndNorm) {
  EXPECT_LT(check_unary([](auto& x) { return softmax(x, 1); }, {3, 5}, -3.0, 3.0), kTol);
  EXPECT_LT(check_unary([](auto& x) { return softmax(x, 0); }, {3, 5}, -3.0, 3.0), kTol);
  EXPECT_LT(check_unary([](auto& x) { return softmax(x, 0); }, {6}, -3.0, 3.0), kTol);
  Rng rng(5);
  std::vector<Tensor> in{random_param(rng, {3, 6}), random_param(rng, {6}, 0.5, 1.5),
                         random_param(rng, {6})};
  EXPECT_LT(finite_diff_check([&] { return probe(layer_norm(in[0], in[1], in[2], 1e-5)); }, in), kTol);
}

TEST(TensorGradients, LinearAndRowGate) {
  Rng rng(6);
  std::vector<Tensor> in{random_param(rng, {3, 4}), random_param(rng, {4, 5}), random_param(rng, {5})};
  EXPECT_LT(finite_diff_check([&] { return probe(linear(in[0], in[1], in[2])); }, in), kTol);
  std::vector<Tensor> g{random_param(rng, {3, 4}), random_param(rng, {3, 1})};
  EXPECT_LT(finite_diff_check([&] { return probe(mul_rows(g[0], g[1])); }, g), kTol);
}

TEST(TensorGradients, Indexing) {
  const std::vector<std::size_t> ids{2, 0, 2, 1};
  EXPECT_LT(check_unary([&](auto& t) { return gather_rows(t, ids); }, {3, 4}), kTol);
  const std::vector<std::size_t> cols{4, 1, 0, 3, 3, 2};  // 3 rows x 2
  EXPECT_LT(check_unary([&](auto& t) { return gather_cols(t, cols, 2); }, {3, 5}), kTol);
  const std::vector<std::size_t> dst{4, 1, 0, 3, 2, 1};
  EXPECT_LT(check_unary([&](auto& t) { return scatter_cols(t, dst, 5); }, {3, 2}), kTol);
}

TEST(TensorGradients, CompositeChain) {
  Rng rng(8);
  std::vector<Tensor> in{random_param(rng, {4, 3}), random_param(rng, {3, 3})};
  auto f = [&] {
    const Tensor h = softmax(matmul(in[0], in[1]), 1);
    return sum(log(add_scalar(hadamard(h, h), 1.0)));
  };
  EXPECT_LT(finite_diff_check(f, in), kTol);
}

TEST(TensorForward, Values) {
  const Tensor a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::constant({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(values(transpose(a)), (std::vector<double>{1, 3, 2, 4}));
  EXPECT_EQ(values(sum(a, 0)), (std::vector<double>{4, 6}));
  EXPECT_EQ(values(sum(a, 1)), (std::vector<double>{3, 7}));
  EXPECT_DOUBLE_EQ(sum(a).item(), 10.0);
  EXPECT_EQ(values(concat({a, b}, 1)), (std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8}));
  EXPECT_EQ(values(slice(b, 1, 1, 1)), (std::vector<double>{6, 8}));
}

TEST(TensorForward, SoftmaxRowsAreStochastic) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_const(rng, {4, 7}, -30.0, 30.0);
    const Tensor s = softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(s.at(r, c), 0.0);
        total += s.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(TensorForward, SoftmaxIsShiftStable) {
  const Tensor big = softmax(Tensor::constant({1, 3}, {1000.0, 1001.0, 1002.0}), 1);
  const Tensor small = softmax(Tensor::constant({1, 3}, {0.0, 1.0, 2.0}), 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(big[i], small[i], 1e-12);
}

TEST(TensorForward, LayerNormStatistics) {
  Rng rng(12);
  const Tensor x = random_const(rng, {3, 8}, -5.0, 5.0);
  const Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-5);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 8; ++c) m += y.at(r, c) / 8.0;
    for (std::size_t c = 0; c < 8; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 8.0;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(TensorForward, StraightThroughForwardAndBackward) {
  Rng rng(13);
  Tensor x = random_param(rng, {3, 2});
  Tensor q = random_param(rng, {3, 2});
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    const Tensor y = straight_through(x, q);
    EXPECT_EQ(values(y), values(q));
    loss = probe(y);
  }
  tape.backward(loss);
  Rng r(99);
  const auto weights = random_values(r, 6);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(x.grad()[i], weights[i]);
  EXPECT_FALSE(q.has_grad());
}

TEST(TensorForward, StopGradientBlocks) {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(hadamard(stop_gradient(x), x));
  }
  tape.backward(loss);
  EXPECT_EQ(values(Tensor::constant({2}, {x.grad()[0], x.grad()[1]})), (std::vector<double>{1.0, 2.0}));
}

TEST(Tape, BackwardTwiceWithoutResetThrows) {
  Tensor x = Tensor::parameter({1}, {2.0});
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = square(x);
  }
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_THROW(tape.backward(y), std::logic_error);
  tape.reset();
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, GradientsAccumulateAcrossTapes) {
  Tensor x = Tensor::parameter({1}, {3.0});
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = scale(x, 2.0);
    }
    tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad() && x.grad()[0] != 0.0);
}

TEST(Tape, NoActiveTapeProducesConstants) {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  const Tensor y = exp(x);
  EXPECT_FALSE(y.requires_grad());
  Tape tape;
  {
    TapeScope scope(tape);
    NoGradScope off;
    EXPECT_FALSE(exp(x).requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, NonScalarRootRejected) {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = exp(x);
  }
  EXPECT_THROW(tape.backward(y), DimensionError);
}

TEST(TensorErrors, ShapeMismatch) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(matmul(a, a), DimensionError);
  EXPECT_THROW(concat({a, b}, 0), DimensionError);
  EXPECT_THROW(slice(a, 1, 2, 2), DimensionError);
  EXPECT_THROW(reshape(a, {5}), DimensionError);
  const std::vector<std::size_t> bad{7};
  EXPECT_THROW(gather_rows(a, bad), DimensionError);
}

TEST(TensorErrors, ConstantsAreReadOnly) {
  Tensor c = Tensor::constant({1}, {1.0});
  EXPECT_NO_THROW(c.mutable_data());  // leaves are writable
  Tensor p = Tensor::parameter({1}, {1.0});
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = exp(p);
  }
  EXPECT_THROW(y.mutable_data(), std::logic_error);
}

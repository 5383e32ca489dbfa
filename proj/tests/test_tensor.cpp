#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "ctrlcap/optim.hpp"
#include "ctrlcap/rng.hpp"
#include "ctrlcap/tensor.hpp"
#include "test_util.hpp"

using namespace ctrlcap;
using testutil::analytic_grad;
using testutil::max_rel_error;
using testutil::numeric_grad;
using testutil::random_tensor;

namespace {

// Weighted sum keeps every output entry's gradient distinct.
Tensor weighted(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  const Tensor w = random_tensor(rng, y.shape(), -1.0, 1.0, false);
  return sum(mul(y, w));
}

void expect_grad_matches(const std::function<Tensor()>& f, Tensor& leaf, double tol = 1e-6) {
  const auto a = analytic_grad(f, leaf);
  NoGradGuard ng;
  const auto n = numeric_grad([&] { return f().item(); }, leaf);
  EXPECT_LT(max_rel_error(a, n), tol);
}

}  // namespace

TEST(Tensor, FactoryValidation) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::from({0}, {}), DimensionError);
  EXPECT_THROW(Tensor::from({1}, {std::nan("")}), NumericError);
  const Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(t.item(), UsageError);
}

TEST(Tensor, ForwardValues) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(matmul(a, b).to_vector(), (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(matmul(a, Tensor::vector({1, 1})).to_vector(), (std::vector<double>{3, 7}));
  EXPECT_EQ(transpose(a).to_vector(), (std::vector<double>{1, 3, 2, 4}));
  EXPECT_EQ(add_rowwise(a, Tensor::vector({10, 20})).to_vector(), (std::vector<double>{11, 22, 13, 24}));
  EXPECT_EQ(mean_rows(a).to_vector(), (std::vector<double>{2, 3}));
  EXPECT_EQ(concat_cols({a, b}).to_vector(), (std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8}));
  EXPECT_EQ(stack({Tensor::vector({1, 2}), Tensor::vector({3, 4})}).to_vector(), a.to_vector());
  EXPECT_EQ(slice(Tensor::vector({1, 2, 3, 4}), 1, 2).to_vector(), (std::vector<double>{2, 3}));
  EXPECT_DOUBLE_EQ(sum(a).item(), 10.0);
  EXPECT_DOUBLE_EQ(mse(a, b).item(), 16.0);
  EXPECT_THROW(matmul(a, Tensor::vector({1, 2, 3})), DimensionError);
  EXPECT_THROW(add(a, Tensor::vector({1, 2})), DimensionError);
}

TEST(Tensor, SoftmaxIsStableAndNormalized) {
  const Tensor x = Tensor::vector({1000.0, 1001.0, 999.0});
  const auto p = softmax(x).to_vector();
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-15);
  const auto lp = log_softmax(x).to_vector();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(std::exp(lp[i]), p[i], 1e-15);
}

TEST(Tensor, NormalizeRowsAndCols) {
  const Tensor m = Tensor::from({2, 2}, {1, 3, 2, 2});
  EXPECT_EQ(normalize_rows(m).to_vector(), (std::vector<double>{0.25, 0.75, 0.5, 0.5}));
  const auto c = normalize_cols(m).to_vector();
  EXPECT_DOUBLE_EQ(c[0] + c[2], 1.0);
  EXPECT_DOUBLE_EQ(c[1] + c[3], 1.0);
}

TEST(Tensor, LogRejectsNonPositiveAndClampedLogDoesNot) {
  EXPECT_THROW(log(Tensor::vector({0.0})), NumericError);
  EXPECT_DOUBLE_EQ(log_clamped(Tensor::vector({0.0}), 1e-12).item(), std::log(1e-12));
}

TEST(TensorGrad, ElementwiseOps) {
  Rng rng(1);
  Tensor x = random_tensor(rng, {5}, 0.2, 1.5);
  Tensor y = random_tensor(rng, {5}, 0.2, 1.5);
  const std::vector<std::function<Tensor()>> fs = {
      [&] { return weighted(add(x, y)); },     [&] { return weighted(sub(x, y)); },
      [&] { return weighted(mul(x, y)); },     [&] { return weighted(div(x, y)); },
      [&] { return weighted(scale(x, 2.5)); }, [&] { return weighted(add_scalar(x, 3.0)); },
      [&] { return weighted(sigmoid(x)); },    [&] { return weighted(tanh(x)); },
      [&] { return weighted(exp(x)); },        [&] { return weighted(square(x)); },
      [&] { return weighted(log(x)); },        [&] { return weighted(log_clamped(x, 1e-12)); },
      [&] { return weighted(relu(add_scalar(x, -0.7))); }};
  for (const auto& f : fs) {
    expect_grad_matches(f, x);
    expect_grad_matches(f, y);
  }
}

TEST(TensorGrad, MatrixOps) {
  Rng rng(2);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {4, 2});
  Tensor v = random_tensor(rng, {4});
  Tensor r = random_tensor(rng, {2});
  const std::vector<std::function<Tensor()>> fs = {
      [&] { return weighted(matmul(a, b)); },
      [&] { return weighted(matmul(a, v)); },
      [&] { return weighted(transpose(a)); },
      [&] { return weighted(add_rowwise(matmul(a, b), r)); },
      [&] { return weighted(mean_rows(a)); },
      [&] { return weighted(concat_cols({matmul(a, b), a})); },
      [&] { return weighted(stack({v, v})); },
      [&] { return weighted(reshape(a, {12})); },
      [&] { return weighted(row(a, 1)); },
      [&] { return mse(matmul(a, b), Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6})); }};
  for (const auto& f : fs) {
    expect_grad_matches(f, a);
    expect_grad_matches(f, b);
    expect_grad_matches(f, v);
    expect_grad_matches(f, r);
  }
}

TEST(TensorGrad, NormalizationsAndSlicing) {
  Rng rng(3);
  Tensor x = random_tensor(rng, {6}, -2.0, 2.0);
  Tensor m = random_tensor(rng, {3, 3}, 0.1, 2.0);
  const std::vector<std::function<Tensor()>> fs = {
      [&] { return weighted(softmax(x)); },
      [&] { return weighted(log_softmax(x)); },
      [&] { return weighted(normalize_rows(m)); },
      [&] { return weighted(normalize_cols(m)); },
      [&] { return weighted(concat({slice(x, 1, 3), index(x, 0), x})); },
      [&] { return mean(x); }};
  for (const auto& f : fs) {
    expect_grad_matches(f, x);
    expect_grad_matches(f, m);
  }
}

TEST(TensorGrad, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::vector({0.3, -0.4}, true);
  // f = sum(x*x + x) -> df/dx = 2x + 1
  const auto g = analytic_grad([&] { return sum(add(mul(x, x), x)); }, x);
  EXPECT_DOUBLE_EQ(g[0], 1.6);
  EXPECT_DOUBLE_EQ(g[1], 0.2);
}

TEST(TensorGrad, LeafGradientsAccumulateAcrossBackwardCalls) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  backward(sum(x));
  backward(sum(scale(x, 2.0)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{3.0, 3.0}));
}

TEST(TensorGrad, BackwardPreconditions) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  EXPECT_THROW(backward(x), UsageError);  // not a scalar
  EXPECT_THROW(backward(Tensor::scalar(1.0)), UsageError);  // no graph
}

TEST(TensorGrad, GraphIsReleasedUnlessRetained) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  Tensor y = sum(square(x));
  backward(y, true);
  EXPECT_EQ(y.node()->parents.size(), 1u);
  backward(y);
  EXPECT_TRUE(y.node()->parents.empty());
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{4.0, 8.0}));
}

TEST(TensorGrad, NoGradGuardStopsRecording) {
  Tensor x = Tensor::vector({1.0}, true);
  {
    NoGradGuard ng;
    const Tensor y = square(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(backward(y), UsageError);
  }
  EXPECT_TRUE(square(x).requires_grad());
}

TEST(Optim, ClipGradNormScalesToLimit) {
  Tensor a = Tensor::vector({0.0, 0.0}, true);
  a.mutable_grad()[0] = 3.0;
  a.mutable_grad()[1] = 4.0;
  NamedParams ps{{"a", a}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(grad_norm(ps), 1.0, 1e-15);
}

TEST(Optim, AdamWithZeroLearningRateLeavesParamsBitwiseUnchanged) {
  Rng rng(4);
  Tensor a = random_tensor(rng, {7});
  const auto before = a.to_vector();
  NamedParams ps{{"a", a}};
  backward(sum(square(a)));
  Adam adam;
  adam.step(ps, 0.0);
  EXPECT_EQ(a.to_vector(), before);
}

TEST(Optim, AdamMinimizesQuadratic) {
  Tensor a = Tensor::vector({3.0, -2.0}, true);
  NamedParams ps{{"a", a}};
  Adam adam;
  for (int i = 0; i < 2000; ++i) {
    zero_grads(ps);
    backward(sum(square(a)));
    adam.step(ps, 0.05);
  }
  EXPECT_LT(std::abs(a.at(0)) + std::abs(a.at(1)), 1e-3);
}

TEST(Rng, DeterministicAndInRange) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const int k = r.between(2, 5);
    EXPECT_GE(k, 2);
    EXPECT_LE(k, 5);
  }
  auto p = r.permutation(10);
  std::sort(p.begin(), p.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(p[i], i);
}

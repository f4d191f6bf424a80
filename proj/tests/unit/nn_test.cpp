#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mtrl/nn.hpp"
#include "mtrl/random.hpp"

using namespace mtrl;
using namespace mtrl::nn;

namespace {

GradStore grads_for(const Tensor& param, std::vector<double> g) {
  GradStore store;
  store.slot(param) = std::move(g);
  return store;
}

}  // namespace

TEST(DenseLayerTest, InitWithinFanInBound) {
  Rng rng(1);
  const auto layer = DenseLayer::create(16, 4, Activation::relu, rng);
  EXPECT_EQ(layer.weight.shape(), (Shape{16, 4}));
  EXPECT_EQ(layer.bias.shape(), (Shape{4}));
  const double bound = std::sqrt(1.0 / 16.0);
  for (double w : layer.weight.data()) EXPECT_LE(std::abs(w), bound);
  for (double b : layer.bias.data()) EXPECT_LE(std::abs(b), bound);
  EXPECT_TRUE(layer.weight.requires_grad());
}

TEST(DenseLayerTest, ForwardIsAffineThenActivation) {
  DenseLayer layer{Tensor({2, 1}, {1.0, -1.0}), Tensor({1}, {0.5}), Activation::relu};
  const Tensor out = layer.forward(Tensor({2, 2}, {1.0, 3.0, 3.0, 1.0}));
  EXPECT_EQ(out[0], 0.0);  // 1 - 3 + 0.5 < 0
  EXPECT_EQ(out[1], 2.5);
}

TEST(DenseLayerTest, SameSeedSameWeights) {
  Rng a(7), b(7);
  const auto la = DenseLayer::create(5, 3, Activation::none, a);
  const auto lb = DenseLayer::create(5, 3, Activation::none, b);
  EXPECT_TRUE(std::equal(la.weight.data().begin(), la.weight.data().end(), lb.weight.data().begin()));
}

TEST(DropoutTest, DisabledIsIdentityAndConsumesNoDraws) {
  const Tensor x = Tensor::full({10}, 2.0);
  Rng rng(3), reference(3);
  const Tensor y = dropout_forward(x, {0.5, false}, rng);
  EXPECT_EQ(y.id(), x.id());
  EXPECT_EQ(rng.next(), reference.next());
  const Tensor z = dropout_forward(x, {0.0, true}, rng);
  EXPECT_EQ(z.id(), x.id());
}

TEST(DropoutTest, PreservesExpectationWithinTwoPercent) {
  // Monte-Carlo: mean of inverted dropout over many entries stays at 1.
  Rng rng(5);
  const Tensor x = Tensor::full({200000}, 1.0);
  const Tensor y = dropout_forward(x, {0.5, true}, rng);
  const double m = std::accumulate(y.data().begin(), y.data().end(), 0.0) / 200000.0;
  EXPECT_NEAR(m, 1.0, 0.02);
  for (double v : y.data()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(DropoutTest, RejectsInvalidProbability) {
  EXPECT_THROW((DropoutSpec{1.0, true}.validate()), std::invalid_argument);
  EXPECT_THROW((DropoutSpec{-0.1, true}.validate()), std::invalid_argument);
  EXPECT_NO_THROW((DropoutSpec{0.0, true}.validate()));
}

TEST(LossTest, CrossEntropyOfUniformLogitsIsLogK) {
  const std::vector<int> labels{0, 2, 4};
  const double ce = cross_entropy_loss(Tensor::zeros({3, 5}), labels).item();
  EXPECT_NEAR(ce, std::log(5.0), 1e-12);
}

TEST(LossTest, CrossEntropyRejectsOutOfRangeLabel) {
  const std::vector<int> labels{3};
  EXPECT_THROW(cross_entropy_loss(Tensor::zeros({1, 3}), labels), std::out_of_range);
}

TEST(LossTest, L2IsMeanSquaredError) {
  EXPECT_DOUBLE_EQ(l2_loss(Tensor({2}, {1.0, 2.0}), Tensor::zeros({2})).item(), 2.5);
}

TEST(LossTest, LossFnDispatches) {
  Targets t;
  t.values = Tensor::zeros({2, 1});
  EXPECT_DOUBLE_EQ(loss_fn(LossKind::l2, Tensor({2, 1}, {1.0, 2.0}), t).item(), 2.5);
  t.labels = {1, 1};
  EXPECT_NEAR(loss_fn(LossKind::softmax_cross_entropy, Tensor::zeros({2, 4}), t).item(), std::log(4.0), 1e-12);
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  Tensor p({3}, {1.0, -2.0, 0.5}, true);
  const GradStore g = grads_for(p, {0.3, -4.0, 1e-3});
  AdamState adam({.lr = 0.01});
  std::array params{p};
  adam.step(g, params);
  // m_hat = g, v_hat = g^2, so the step is lr * |g| / (|g| + eps).
  const std::array<double, 3> grads{0.3, -4.0, 1e-3};
  const std::array<double, 3> start{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = start[i] - 0.01 * grads[i] / (std::abs(grads[i]) + 1e-8);
    EXPECT_NEAR(p[i], expected, 1e-15);
  }
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(AdamTest, ConstantGradientGivesEqualSteps) {
  Tensor p({1}, {0.0}, true);
  AdamState adam({.lr = 0.1});
  std::array params{p};
  adam.step(grads_for(p, {0.5}), params);
  const double first = p[0];
  adam.step(grads_for(p, {0.5}), params);
  EXPECT_NEAR(p[0] - first, first, 1e-12);
}

TEST(AdamTest, DecoupledWeightDecayShrinksWithoutGradient) {
  Tensor p({1}, {2.0}, true);
  AdamState adam({.lr = 0.1, .weight_decay = 0.5});
  std::array params{p};
  adam.step(grads_for(p, {0.0}), params);
  EXPECT_NEAR(p[0], 2.0 * (1.0 - 0.1 * 0.5), 1e-12);
}

TEST(AdamTest, MissingGradientThrows) {
  Tensor p({1}, {2.0}, true);
  AdamState adam;
  std::array params{p};
  EXPECT_THROW(adam.step(GradStore{}, params), std::invalid_argument);
}

TEST(ClipTest, ScalesToMaxNorm) {
  Tensor p({2}, {0.0, 0.0}, true);
  GradStore g = grads_for(p, {3.0, 4.0});
  std::array params{p};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, params, 1.0), 5.0);
  EXPECT_NEAR(g.view(p)[0], 0.6, 1e-15);
  EXPECT_NEAR(g.view(p)[1], 0.8, 1e-15);
}

TEST(ClipTest, LeavesSmallGradientsAlone) {
  Tensor p({2}, {0.0, 0.0}, true);
  GradStore g = grads_for(p, {0.3, 0.4});
  std::array params{p};
  clip_grad_norm(g, params, 1.0);
  EXPECT_EQ(g.view(p)[0], 0.3);
  EXPECT_EQ(g.view(p)[1], 0.4);
}

TEST(ClipTest, NormIsGlobalAcrossParameters) {
  Tensor a({1}, {0.0}, true), b({1}, {0.0}, true);
  GradStore g;
  g.slot(a) = {3.0};
  g.slot(b) = {4.0};
  std::array params{a, b};
  EXPECT_DOUBLE_EQ(grad_norm(g, params), 5.0);
}

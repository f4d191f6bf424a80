#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mtrl/gumbel.hpp"
#include "mtrl/random.hpp"

using namespace mtrl;
using namespace mtrl::routing;

namespace {

// Allocation with the given active probabilities for a single task.
AllocationLayer with_probabilities(const std::vector<double>& p) {
  AllocationLayer layer = AllocationLayer::init(1, p.size(), 0.5);
  auto v = layer.logits().mutable_data();
  for (std::size_t j = 0; j < p.size(); ++j) {
    v[2 * j] = std::log(p[j]);
    v[2 * j + 1] = std::log1p(-p[j]);
  }
  return layer;
}

}  // namespace

TEST(AllocationTest, InitSetsProbability) {
  const auto layer = AllocationLayer::init(3, 4, 0.7);
  EXPECT_EQ(layer.logits().shape(), (Shape{3, 4, 2}));
  EXPECT_TRUE(layer.trainable());
  for (double p : layer.probabilities()) EXPECT_NEAR(p, 0.7, 1e-15);
}

TEST(AllocationTest, InitRejectsDegenerateProbability) {
  EXPECT_THROW(AllocationLayer::init(1, 1, 0.0), std::invalid_argument);
  EXPECT_THROW(AllocationLayer::init(1, 1, 1.0), std::invalid_argument);
}

TEST(AllocationTest, FrozenPatternIsNotTrainable) {
  const auto layer = AllocationLayer::frozen({{1, 0}, {0, 1}});
  EXPECT_FALSE(layer.trainable());
  EXPECT_NEAR(layer.probability(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(layer.probability(0, 1), 0.0, 1e-15);
  EXPECT_EQ(ml_allocation(layer, 1), (std::vector<int>{0, 1}));
}

TEST(GumbelTest, NoiseOfInverseEIsZero) { EXPECT_NEAR(gumbel_noise(std::exp(-1.0)), 0.0, 1e-15); }

TEST(GumbelTest, ExtremeUniformDrawsStayFinite) {
  EXPECT_TRUE(std::isfinite(gumbel_noise(kUlp)));
  EXPECT_TRUE(std::isfinite(gumbel_noise(1.0 - kUlp)));
}

TEST(GumbelTest, MeanIsEulerGamma) {
  Rng rng(2024);
  double total = 0.0;
  constexpr int n = 1000000;
  for (int i = 0; i < n; ++i) total += draw_gumbel(rng);
  EXPECT_NEAR(total / n, std::numbers::egamma, 0.01);
}

TEST(SampleTest, CertainEntriesAlwaysAgree) {
  const auto layer = with_probabilities({1.0 - kUlp, kUlp});
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_EQ(sample_allocation(layer, 0, 1.0, rng).hard(), (std::vector<int>{1, 0}));
  }
}

TEST(SampleTest, ActiveFrequencyMatchesProbability) {
  const auto layer = with_probabilities({0.3});
  Rng rng(8);
  int on = 0;
  constexpr int n = 100000;
  for (int i = 0; i < n; ++i) on += sample_allocation(layer, 0, 1.0, rng).hard()[0];
  EXPECT_NEAR(static_cast<double>(on) / n, 0.3, 0.01);
}

TEST(SampleTest, GateForwardIsHardAndSoftSumsToOne) {
  const auto layer = with_probabilities({0.2, 0.6, 0.9});
  Rng rng(4);
  const auto draw = sample_allocation(layer, 0, 0.5, rng);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(draw.gates[j], static_cast<double>(draw.samples[j].hard));
    EXPECT_NEAR(draw.samples[j].soft[0] + draw.samples[j].soft[1], 1.0, 1e-15);
    EXPECT_EQ(draw.samples[j].tau, 0.5);
  }
}

TEST(SampleTest, TiesResolveToActive) {
  const auto draw = straight_through_gates(Tensor({1, 2}, {0.25, 0.25}), 1.0);
  EXPECT_EQ(draw.samples[0].hard, 1);
}

TEST(SampleTest, RejectsNonPositiveTemperature) {
  const auto layer = with_probabilities({0.5});
  Rng rng(0);
  EXPECT_THROW(sample_allocation(layer, 0, 0.0, rng), std::invalid_argument);
  EXPECT_THROW(sample_allocation(layer, 1, 1.0, rng), std::out_of_range);
}

TEST(SampleTest, GateGradientIsSoftmaxDerivative) {
  Tensor v({1, 2}, {0.4, -0.3}, true);
  const double tau = 0.7;
  Tape tape;
  Tensor loss;
  {
    Tape::Recording rec(tape);
    loss = sum(straight_through_gates(v, tau).gates);
  }
  const GradStore g = backward(loss, tape);
  const double s = 1.0 / (1.0 + std::exp(-(0.4 + 0.3) / tau));
  EXPECT_NEAR(g.view(v)[0], s * (1.0 - s) / tau, 1e-12);
  EXPECT_NEAR(g.view(v)[1], -s * (1.0 - s) / tau, 1e-12);
}

TEST(MlAllocationTest, ThresholdsAtOneHalf) {
  EXPECT_EQ(ml_allocation(with_probabilities({0.97, 0.03, 0.51}), 0), (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(ml_allocation(with_probabilities({0.5}), 0), (std::vector<int>{1}));
}

TEST(MlAllocationTest, InvariantUnderEqualLogitShift) {
  Rng rng(12);
  AllocationLayer layer = AllocationLayer::init(2, 6, 0.5);
  auto v = layer.logits().mutable_data();
  for (double& x : v) x = rng.uniform(-3.0, 3.0);
  const auto before0 = ml_allocation(layer, 0);
  const auto before1 = ml_allocation(layer, 1);
  for (std::size_t i = 0; i < v.size(); i += 2) {
    const double shift = rng.uniform(-50.0, 50.0);
    v[i] += shift;
    v[i + 1] += shift;
  }
  EXPECT_EQ(ml_allocation(layer, 0), before0);
  EXPECT_EQ(ml_allocation(layer, 1), before1);
}

TEST(ActiveFractionTest, MeanOverAllEntries) {
  const std::vector<AllocationLayer> layers{with_probabilities({1.0 - kUlp, 0.5}),
                                            with_probabilities({0.5, 1.0 - kUlp})};
  EXPECT_NEAR(expected_active_fraction(layers), 0.75, 1e-12);
  EXPECT_NEAR(expected_active_fraction_tensor(layers).item(), 0.75, 1e-12);
}

TEST(BudgetTest, HingeValues) {
  const BudgetConfig cfg{0.5, 1.0};
  EXPECT_DOUBLE_EQ(budget_penalty(Tensor::scalar(0.4), cfg).item(), 0.0);
  EXPECT_NEAR(budget_penalty(Tensor::scalar(0.55), cfg).item(), 0.05, 1e-15);
  EXPECT_NEAR(budget_penalty(Tensor::scalar(0.55), {0.5, 10.0}).item(), 0.5, 1e-14);
}

TEST(BudgetTest, RejectsInvalidConfig) {
  EXPECT_THROW(budget_penalty(Tensor::scalar(0.5), {0.0, 1.0}), std::invalid_argument);
  EXPECT_THROW(budget_penalty(Tensor::scalar(0.5), {1.1, 1.0}), std::invalid_argument);
  EXPECT_THROW(budget_penalty(Tensor::scalar(0.5), {0.5, -1.0}), std::invalid_argument);
}

TEST(BudgetTest, DerivativeIsLambdaOverEntryCount) {
  // Above budget each probability carries dpenalty/dp = lambda / count.
  std::vector<AllocationLayer> layers{AllocationLayer::init(2, 3, 0.9)};
  const double lambda = 4.0;
  Tape tape;
  Tensor penalty;
  {
    Tape::Recording rec(tape);
    penalty = budget_penalty(expected_active_fraction_tensor(layers), {0.5, lambda});
  }
  const GradStore g = backward(penalty, tape);
  const auto grad = g.view(layers[0].logits());
  const double p = 0.9;
  // dp/d(active logit) = p (1 - p).
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(grad[2 * i], lambda / 6.0 * p * (1.0 - p), 1e-12);
    EXPECT_NEAR(grad[2 * i + 1], -lambda / 6.0 * p * (1.0 - p), 1e-12);
  }
}

TEST(EmbeddingTest, ConcatenatesLayersInOrder) {
  const std::vector<AllocationLayer> layers{with_probabilities({0.9, 0.1}), with_probabilities({0.2, 0.8, 0.6})};
  EXPECT_EQ(task_embedding(layers, 0), (std::vector<int>{1, 0, 0, 1, 1}));
}

TEST(CosineTest, Examples) {
  const std::vector<int> a{1, 1, 0}, b{1, 0, 1}, zero{0, 0, 0};
  EXPECT_DOUBLE_EQ(cosine_similarity(a, b), 0.5);
  EXPECT_EQ(cosine_similarity(a, a), 1.0);
  EXPECT_EQ(cosine_similarity(a, zero), 0.0);
  EXPECT_EQ(cosine_similarity(zero, zero), 0.0);
}

TEST(CosineTest, SymmetricAndBounded) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> a(10), b(10);
    for (int& x : a) x = static_cast<int>(rng.index(2));
    for (int& x : b) x = static_cast<int>(rng.index(2));
    const double ab = cosine_similarity(a, b);
    EXPECT_EQ(ab, cosine_similarity(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(CosineTest, LengthMismatchThrows) {
  const std::vector<int> a{1}, b{1, 0};
  EXPECT_THROW(cosine_similarity(a, b), std::invalid_argument);
}

TEST(TemperatureTest, DecaysToFloor) {
  const TemperatureSchedule s{2.0, 0.5, 0.3};
  EXPECT_EQ(s.at(0), 2.0);
  EXPECT_EQ(s.at(1), 1.0);
  EXPECT_EQ(s.at(10), 0.3);
  const TemperatureSchedule fixed;
  EXPECT_EQ(fixed.at(5000), 1.0);
}

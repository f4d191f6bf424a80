#pragma once

// Learned task-to-component allocation. Each (task, component) entry keeps a
// pair of logits (active, inactive); sampling perturbs their log-probabilities
// with Gumbel noise, takes the argmax on the forward pass and the tempered
// softmax on the backward pass.

#include <array>
#include <span>
#include <vector>

#include "mtrl/random.hpp"
#include "mtrl/tensor.hpp"

namespace mtrl::routing {

// Smallest probability used for frozen allocations and the clamp applied to
// uniform draws before the double logarithm.
inline constexpr double kUlp = 0x1p-52;

enum class RoutingMode { train_sample, max_likelihood };

class AllocationLayer {
 public:
  AllocationLayer() = default;

  // Every entry starts at probability p_init; logits are trainable.
  static AllocationLayer init(std::size_t tasks, std::size_t components, double p_init);
  // pattern[t][c] != 0 pins entry (t, c) to probability 1 - ulp, otherwise to
  // ulp. Logits are not trainable.
  static AllocationLayer frozen(const std::vector<std::vector<int>>& pattern);

  std::size_t tasks() const { return tasks_; }
  std::size_t components() const { return components_; }
  bool trainable() const { return logits_.requires_grad(); }

  // Shape tasks x components x 2, last axis = (active, inactive).
  const Tensor& logits() const { return logits_; }
  Tensor& logits() { return logits_; }

  double probability(std::size_t task, std::size_t component) const;
  // Row-major tasks x components.
  std::vector<double> probabilities() const;

 private:
  AllocationLayer(Tensor logits, std::size_t tasks, std::size_t components);

  Tensor logits_;
  std::size_t tasks_ = 0;
  std::size_t components_ = 0;
};

double gumbel_noise(double u);
// Uniform draw clamped to [ulp, 1 - ulp], mapped through gumbel_noise.
double draw_gumbel(Rng& rng);

struct GumbelSample {
  int hard = 0;                   // 1 = active
  std::array<double, 2> soft{};   // softmax(v / tau), (active, inactive)
  double tau = 1.0;
};

struct AllocationDraw {
  std::vector<GumbelSample> samples;
  // Shape {components}: forward value = hard z, gradient flows through the
  // active entry of softmax(v / tau).
  Tensor gates;

  std::vector<int> hard() const;
};

// v = log pi + [g0, g1] for each component of `task`. Noise is drawn g0 then
// g1, component by component.
AllocationDraw sample_allocation(const AllocationLayer& layer, std::size_t task, double tau, Rng& rng);

// Straight-through gate from perturbed logits v (shape C x 2). Exposed for
// verification of the estimator.
AllocationDraw straight_through_gates(const Tensor& perturbed, double tau);

// Component j is active iff p(task, j) >= 0.5.
std::vector<int> ml_allocation(const AllocationLayer& layer, std::size_t task);

double expected_active_fraction(std::span<const AllocationLayer> layers);
// Differentiable mean of p over all entries of all layers (scalar tensor).
Tensor expected_active_fraction_tensor(std::span<const AllocationLayer> layers);

struct BudgetConfig {
  double budget = 1.0;    // b in (0, 1]
  double strength = 0.0;  // lambda >= 0

  void validate() const;
};

// strength * max(0, e_c - budget).
Tensor budget_penalty(const Tensor& expected_fraction, const BudgetConfig& cfg);

// Concatenation of ml_allocation over layers, in network order.
std::vector<int> task_embedding(std::span<const AllocationLayer> layers, std::size_t task);

// a.b / (|a||b|); 0 when either vector is all zeros.
double cosine_similarity(std::span<const int> a, std::span<const int> b);

// tau_t = max(min(tau_min, tau0), tau0 * decay^t).
struct TemperatureSchedule {
  double tau0 = 1.0;
  double decay = 1.0;
  double tau_min = 0.1;

  double at(std::size_t step) const;
};

}  // namespace mtrl::routing

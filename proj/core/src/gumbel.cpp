#include "mtrl/gumbel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mtrl::routing {

AllocationLayer::AllocationLayer(Tensor logits, std::size_t tasks, std::size_t components)
    : logits_(std::move(logits)), tasks_(tasks), components_(components) {}

AllocationLayer AllocationLayer::init(std::size_t tasks, std::size_t components, double p_init) {
  if (!(p_init > 0.0 && p_init < 1.0)) {
    throw std::invalid_argument("p_init must lie in (0, 1), got " + std::to_string(p_init));
  }
  if (tasks == 0 || components == 0) throw std::invalid_argument("allocation needs tasks and components");
  std::vector<double> values(tasks * components * 2);
  const double active = std::log(p_init);
  const double inactive = std::log1p(-p_init);
  for (std::size_t i = 0; i < tasks * components; ++i) {
    values[2 * i] = active;
    values[2 * i + 1] = inactive;
  }
  return AllocationLayer(Tensor({tasks, components, 2}, std::move(values), true), tasks, components);
}

AllocationLayer AllocationLayer::frozen(const std::vector<std::vector<int>>& pattern) {
  if (pattern.empty() || pattern[0].empty()) throw std::invalid_argument("empty allocation pattern");
  const std::size_t tasks = pattern.size();
  const std::size_t components = pattern[0].size();
  const double high = std::log1p(-kUlp);
  const double low = std::log(kUlp);
  std::vector<double> values(tasks * components * 2);
  for (std::size_t t = 0; t < tasks; ++t) {
    if (pattern[t].size() != components) throw std::invalid_argument("ragged allocation pattern");
    for (std::size_t c = 0; c < components; ++c) {
      const bool on = pattern[t][c] != 0;
      values[2 * (t * components + c)] = on ? high : low;
      values[2 * (t * components + c) + 1] = on ? low : high;
    }
  }
  return AllocationLayer(Tensor({tasks, components, 2}, std::move(values), false), tasks, components);
}

namespace {

double pair_probability(double active, double inactive) {
  // exp(a) / (exp(a) + exp(b)) evaluated as a logistic of the gap.
  return 1.0 / (1.0 + std::exp(inactive - active));
}

void check_task(const AllocationLayer& layer, std::size_t task) {
  if (task >= layer.tasks()) {
    throw std::out_of_range("task " + std::to_string(task) + " out of range for " +
                            std::to_string(layer.tasks()) + " tasks");
  }
}

}  // namespace

double AllocationLayer::probability(std::size_t task, std::size_t component) const {
  auto v = logits_.data();
  const std::size_t at = 2 * (task * components_ + component);
  return pair_probability(v[at], v[at + 1]);
}

std::vector<double> AllocationLayer::probabilities() const {
  std::vector<double> out(tasks_ * components_);
  for (std::size_t t = 0; t < tasks_; ++t) {
    for (std::size_t c = 0; c < components_; ++c) out[t * components_ + c] = probability(t, c);
  }
  return out;
}

double gumbel_noise(double u) { return -std::log(-std::log(u)); }

double draw_gumbel(Rng& rng) { return gumbel_noise(std::clamp(rng.uniform(), kUlp, 1.0 - kUlp)); }

std::vector<int> AllocationDraw::hard() const {
  std::vector<int> z;
  z.reserve(samples.size());
  for (const auto& s : samples) z.push_back(s.hard);
  return z;
}

AllocationDraw straight_through_gates(const Tensor& perturbed, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (perturbed.dim() != 2 || perturbed.shape()[1] != 2) {
    throw ShapeError("straight_through_gates: expected C x 2 logits, got " + shape_str(perturbed.shape()));
  }
  const std::size_t components = perturbed.shape()[0];
  auto v = perturbed.data();
  std::vector<double> hard(components * 2);
  AllocationDraw draw;
  draw.samples.resize(components);
  for (std::size_t j = 0; j < components; ++j) {
    const int z = v[2 * j] >= v[2 * j + 1] ? 1 : 0;
    hard[2 * j] = z;
    hard[2 * j + 1] = 1 - z;
    draw.samples[j].hard = z;
    draw.samples[j].tau = tau;
  }
  Tensor soft = softmax_lastdim(scalar_mul(perturbed, 1.0 / tau));
  for (std::size_t j = 0; j < components; ++j) {
    draw.samples[j].soft = {soft[2 * j], soft[2 * j + 1]};
  }
  Tensor gated = straight_through(soft, Tensor(perturbed.shape(), std::move(hard)));
  draw.gates = pick_lastdim(gated, 0);
  return draw;
}

AllocationDraw sample_allocation(const AllocationLayer& layer, std::size_t task, double tau, Rng& rng) {
  check_task(layer, task);
  const std::size_t components = layer.components();
  std::vector<double> noise(components * 2);
  for (double& g : noise) g = draw_gumbel(rng);
  Tensor log_pi = log_softmax_lastdim(select_row(layer.logits(), task));
  Tensor perturbed = add(log_pi, Tensor({components, 2}, std::move(noise)));
  return straight_through_gates(perturbed, tau);
}

std::vector<int> ml_allocation(const AllocationLayer& layer, std::size_t task) {
  check_task(layer, task);
  std::vector<int> z(layer.components());
  for (std::size_t j = 0; j < z.size(); ++j) z[j] = layer.probability(task, j) >= 0.5 ? 1 : 0;
  return z;
}

double expected_active_fraction(std::span<const AllocationLayer> layers) {
  if (layers.empty()) throw std::invalid_argument("expected_active_fraction: no layers");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& layer : layers) {
    for (double p : layer.probabilities()) total += p;
    count += layer.tasks() * layer.components();
  }
  return total / static_cast<double>(count);
}

Tensor expected_active_fraction_tensor(std::span<const AllocationLayer> layers) {
  if (layers.empty()) throw std::invalid_argument("expected_active_fraction: no layers");
  Tensor total;
  std::size_t count = 0;
  for (const auto& layer : layers) {
    Tensor part = sum(pick_lastdim(softmax_lastdim(layer.logits()), 0));
    total = total.defined() ? add(total, part) : part;
    count += layer.tasks() * layer.components();
  }
  return scalar_mul(total, 1.0 / static_cast<double>(count));
}

void BudgetConfig::validate() const {
  if (!(budget > 0.0 && budget <= 1.0)) {
    throw std::invalid_argument("budget must lie in (0, 1], got " + std::to_string(budget));
  }
  if (!(strength >= 0.0)) throw std::invalid_argument("budget strength must be >= 0");
}

Tensor budget_penalty(const Tensor& expected_fraction, const BudgetConfig& cfg) {
  cfg.validate();
  Tensor excess = relu(sub(expected_fraction, Tensor(expected_fraction.shape(), {cfg.budget})));
  return scalar_mul(excess, cfg.strength);
}

std::vector<int> task_embedding(std::span<const AllocationLayer> layers, std::size_t task) {
  std::vector<int> embedding;
  for (const auto& layer : layers) {
    auto part = ml_allocation(layer, task);
    embedding.insert(embedding.end(), part.begin(), part.end());
  }
  return embedding;
}

double cosine_similarity(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine_similarity: lengths differ (" + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()) + ")");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  // Identical vectors compare exactly equal to 1.
  if (dot == na && dot == nb) return 1.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double TemperatureSchedule::at(std::size_t step) const {
  // A starting temperature below the floor is kept as given.
  return std::max(std::min(tau_min, tau0), tau0 * std::pow(decay, static_cast<double>(step)));
}

}  // namespace mtrl::routing

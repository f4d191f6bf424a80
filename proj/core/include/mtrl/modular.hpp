#pragma once

#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "mtrl/gumbel.hpp"
#include "mtrl/nn.hpp"
#include "mtrl/random.hpp"
#include "mtrl/tensor.hpp"

namespace mtrl::modular {

struct AvgPool {
  std::size_t window = 2;
};

// Collapses every dimension after the batch axis.
struct Flatten {};

using Stage = std::variant<nn::DenseLayer, nn::Conv2dLayer, AvgPool, Flatten>;

// A sequential sub-network. An empty component is the identity.
struct Component {
  std::vector<Stage> stages;

  Tensor forward(const Tensor& x) const;
  Shape output_shape(const Shape& input) const;
  std::vector<Tensor> parameters() const;
  bool empty() const { return stages.empty(); }
};

struct ModularLayer {
  std::vector<Component> components;
  routing::AllocationLayer allocation;
  // Applied to the averaged output (e.g. pooling between modular layers).
  Component post;

  std::size_t width() const { return components.size(); }
};

struct LayerResult {
  Tensor output;
  std::vector<int> gates;  // hard gate per component
};

// Evaluates the components and averages those whose gate is active:
// Σ_j gate_j · out_j / n_active, with n_active the hard count held constant
// in the backward pass. The exact zero tensor is returned when no component is
// active. In train_sample mode on a trainable allocation every component is
// evaluated so that inactive ones still feed the allocation gradient (an
// all-off row uses denominator 1, keeping its gates differentiable);
// otherwise inactive components are skipped.
LayerResult layer_forward(const ModularLayer& layer, const Tensor& x, std::size_t task,
                          routing::RoutingMode mode, double tau, Rng& noise);

struct ForwardResult {
  Tensor prediction;
  std::vector<std::vector<int>> gates;  // per layer
};

class MultiTaskNetwork {
 public:
  std::size_t tasks = 0;
  Component stem;
  std::vector<ModularLayer> layers;
  std::vector<nn::DenseLayer> heads;  // empty: the last layer's output is the prediction
  nn::DropoutSpec dropout;            // applied right before the heads while training

  // Dry-run shape propagation for one input example shape (no batch axis).
  // Throws ShapeError naming the first inconsistency.
  Shape check_shapes(const Shape& example_shape) const;

  ForwardResult forward(const Tensor& batch, std::size_t task, routing::RoutingMode mode, double tau,
                        Rng& noise, Rng& dropout_rng, bool training) const;

  std::vector<Tensor> weight_parameters() const;
  std::vector<Tensor> allocation_parameters() const;
  std::vector<routing::AllocationLayer> allocations() const;
};

// Task loss plus the budget penalty on the expected active fraction.
struct LossBreakdown {
  Tensor total;
  double task_loss = 0.0;
  double penalty = 0.0;
  ForwardResult forward;
};

LossBreakdown total_loss(const MultiTaskNetwork& net, const Tensor& batch, const nn::Targets& targets,
                         nn::LossKind kind, std::size_t task, const routing::BudgetConfig& budget,
                         routing::RoutingMode mode, double tau, Rng& noise, Rng& dropout_rng,
                         bool training);

}  // namespace mtrl::modular

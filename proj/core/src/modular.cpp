#include "mtrl/modular.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace mtrl::modular {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

Tensor flatten(const Tensor& x) {
  if (x.dim() <= 2) return x;
  return reshape(x, {x.shape()[0], x.numel() / x.shape()[0]});
}

std::size_t conv_extent(std::size_t in, std::size_t k, const Conv2dAttrs& attrs) {
  if (attrs.padding == Padding::same) return (in + attrs.stride - 1) / attrs.stride;
  if (in < k) throw ShapeError("conv kernel " + std::to_string(k) + " larger than input " + std::to_string(in));
  return (in - k) / attrs.stride + 1;
}

}  // namespace

Tensor Component::forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& stage : stages) {
    h = std::visit(Overloaded{
                       [&](const nn::DenseLayer& l) { return l.forward(h); },
                       [&](const nn::Conv2dLayer& l) { return l.forward(h); },
                       [&](const AvgPool& p) { return avgpool2d(h, p.window); },
                       [&](const Flatten&) { return flatten(h); },
                   },
                   stage);
  }
  return h;
}

Shape Component::output_shape(const Shape& input) const {
  Shape s = input;
  for (const auto& stage : stages) {
    s = std::visit(
        Overloaded{
            [&](const nn::DenseLayer& l) -> Shape {
              if (s.size() != 2 || s[1] != l.in_features()) {
                throw ShapeError("dense layer expects [N, " + std::to_string(l.in_features()) +
                                 "], got " + shape_str(s));
              }
              return {s[0], l.out_features()};
            },
            [&](const nn::Conv2dLayer& l) -> Shape {
              const Shape& k = l.kernel.shape();
              if (s.size() != 4 || s[1] != k[1]) {
                throw ShapeError("conv layer expects [N, " + std::to_string(k[1]) + ", H, W], got " +
                                 shape_str(s));
              }
              return {s[0], k[0], conv_extent(s[2], k[2], l.attrs), conv_extent(s[3], k[3], l.attrs)};
            },
            [&](const AvgPool& p) -> Shape {
              if (s.size() != 4 || s[2] < p.window || s[3] < p.window) {
                throw ShapeError("avgpool expects [N, C, H, W] of at least the window, got " + shape_str(s));
              }
              return {s[0], s[1], s[2] / p.window, s[3] / p.window};
            },
            [&](const Flatten&) -> Shape {
              if (s.size() <= 2) return s;
              return {s[0], shape_numel(s) / s[0]};
            },
        },
        stage);
  }
  return s;
}

std::vector<Tensor> Component::parameters() const {
  std::vector<Tensor> params;
  for (const auto& stage : stages) {
    if (auto* d = std::get_if<nn::DenseLayer>(&stage)) {
      for (auto& p : d->parameters()) params.push_back(p);
    } else if (auto* c = std::get_if<nn::Conv2dLayer>(&stage)) {
      for (auto& p : c->parameters()) params.push_back(p);
    }
  }
  return params;
}

LayerResult layer_forward(const ModularLayer& layer, const Tensor& x, std::size_t task,
                          routing::RoutingMode mode, double tau, Rng& noise) {
  const std::size_t width = layer.width();
  if (layer.allocation.components() != width) {
    throw std::invalid_argument("allocation width " + std::to_string(layer.allocation.components()) +
                                " does not match " + std::to_string(width) + " components");
  }
  LayerResult result;
  Tensor gates;
  if (mode == routing::RoutingMode::train_sample) {
    routing::AllocationDraw draw = routing::sample_allocation(layer.allocation, task, tau, noise);
    result.gates = draw.hard();
    gates = draw.gates;
  } else {
    result.gates = routing::ml_allocation(layer.allocation, task);
  }

  std::size_t active = 0;
  for (int z : result.gates) active += static_cast<std::size_t>(z);
  const bool evaluate_all = gates.defined() && gates.requires_grad();
  if (active == 0 && !evaluate_all) {
    result.output = Tensor::zeros(layer.components[0].output_shape(x.shape()));
    return result;
  }

  std::vector<Tensor> outputs;
  if (evaluate_all) {
    outputs.reserve(width);
    for (const auto& component : layer.components) outputs.push_back(component.forward(x));
  } else {
    for (std::size_t j = 0; j < width; ++j) {
      if (result.gates[j]) outputs.push_back(layer.components[j].forward(x));
    }
    gates = Tensor::full({outputs.size()}, 1.0);
  }
  // With every gate off the weighted sum skips all terms, so the value is the
  // exact zero tensor while the gates still receive gradient (denominator 1).
  const double denom = static_cast<double>(std::max<std::size_t>(active, 1));
  result.output = scalar_mul(weighted_sum(outputs, gates), 1.0 / denom);
  return result;
}

Shape MultiTaskNetwork::check_shapes(const Shape& example_shape) const {
  Shape s{1};
  s.insert(s.end(), example_shape.begin(), example_shape.end());
  s = stem.output_shape(s);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.components.empty()) throw ShapeError("modular layer " + std::to_string(l) + " has no components");
    if (layer.allocation.components() != layer.width() || layer.allocation.tasks() != tasks) {
      throw ShapeError("modular layer " + std::to_string(l) + ": allocation is " +
                       std::to_string(layer.allocation.tasks()) + "x" +
                       std::to_string(layer.allocation.components()) + ", expected " +
                       std::to_string(tasks) + "x" + std::to_string(layer.width()));
    }
    const Shape common = layer.components[0].output_shape(s);
    for (std::size_t j = 1; j < layer.width(); ++j) {
      const Shape other = layer.components[j].output_shape(s);
      if (other != common) {
        throw ShapeError("modular layer " + std::to_string(l) + ": component " + std::to_string(j) +
                         " yields " + shape_str(other) + ", component 0 yields " + shape_str(common));
      }
    }
    s = layer.post.output_shape(common);
  }
  if (s.size() > 2) s = {s[0], shape_numel(s) / s[0]};
  if (!heads.empty()) {
    if (heads.size() != tasks) {
      throw ShapeError("network has " + std::to_string(heads.size()) + " heads for " +
                       std::to_string(tasks) + " tasks");
    }
    for (const auto& head : heads) {
      if (s.size() != 2 || head.in_features() != s[1]) {
        throw ShapeError("task head expects " + std::to_string(head.in_features()) +
                         " features, got " + shape_str(s));
      }
    }
    s = {s[0], heads[0].out_features()};
  }
  return Shape(s.begin() + 1, s.end());
}

ForwardResult MultiTaskNetwork::forward(const Tensor& batch, std::size_t task, routing::RoutingMode mode,
                                        double tau, Rng& noise, Rng& dropout_rng, bool training) const {
  if (task >= tasks) {
    throw std::out_of_range("task " + std::to_string(task) + " out of range for " +
                            std::to_string(tasks) + " tasks");
  }
  ForwardResult result;
  Tensor h = stem.forward(batch);
  for (const auto& layer : layers) {
    LayerResult lr = layer_forward(layer, h, task, mode, tau, noise);
    h = layer.post.forward(lr.output);
    result.gates.push_back(std::move(lr.gates));
  }
  h = flatten(h);
  if (!heads.empty()) {
    nn::DropoutSpec spec = dropout;
    spec.enabled = spec.enabled && training;
    h = heads[task].forward(nn::dropout_forward(h, spec, dropout_rng));
  }
  result.prediction = h;
  return result;
}

std::vector<Tensor> MultiTaskNetwork::weight_parameters() const {
  std::vector<Tensor> params = stem.parameters();
  for (const auto& layer : layers) {
    for (const auto& component : layer.components) {
      for (auto& p : component.parameters()) params.push_back(p);
    }
    for (auto& p : layer.post.parameters()) params.push_back(p);
  }
  for (const auto& head : heads) {
    for (auto& p : head.parameters()) params.push_back(p);
  }
  return params;
}

std::vector<Tensor> MultiTaskNetwork::allocation_parameters() const {
  std::vector<Tensor> params;
  for (const auto& layer : layers) {
    if (layer.allocation.trainable()) params.push_back(layer.allocation.logits());
  }
  return params;
}

std::vector<routing::AllocationLayer> MultiTaskNetwork::allocations() const {
  std::vector<routing::AllocationLayer> out;
  out.reserve(layers.size());
  for (const auto& layer : layers) out.push_back(layer.allocation);
  return out;
}

LossBreakdown total_loss(const MultiTaskNetwork& net, const Tensor& batch, const nn::Targets& targets,
                         nn::LossKind kind, std::size_t task, const routing::BudgetConfig& budget,
                         routing::RoutingMode mode, double tau, Rng& noise, Rng& dropout_rng,
                         bool training) {
  LossBreakdown out;
  out.forward = net.forward(batch, task, mode, tau, noise, dropout_rng, training);
  Tensor task_loss = nn::loss_fn(kind, out.forward.prediction, targets);
  out.task_loss = task_loss.item();
  out.total = task_loss;
  if (budget.strength > 0.0) {
    auto allocations = net.allocations();
    Tensor penalty = routing::budget_penalty(routing::expected_active_fraction_tensor(allocations), budget);
    out.penalty = penalty.item();
    out.total = add(task_loss, penalty);
  }
  return out;
}

}  // namespace mtrl::modular

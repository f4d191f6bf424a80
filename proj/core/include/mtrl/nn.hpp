#pragma once

// Training substrate: dense and convolutional layers, dropout, losses, Adam,
// and global-norm gradient clipping.

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "mtrl/random.hpp"
#include "mtrl/tensor.hpp"

namespace mtrl::nn {

enum class Activation { none, relu };

// Weights and biases drawn from U(-b, b) with b = sqrt(1 / fan_in).
struct DenseLayer {
  Tensor weight;  // in x out
  Tensor bias;    // out
  Activation activation = Activation::none;

  static DenseLayer create(std::size_t in, std::size_t out, Activation activation, Rng& rng);
  Tensor forward(const Tensor& x) const;
  std::vector<Tensor> parameters() const { return {weight, bias}; }
  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }
};

struct Conv2dLayer {
  Tensor kernel;  // out_ch x in_ch x kh x kw
  Tensor bias;    // out_ch
  Conv2dAttrs attrs;
  Activation activation = Activation::none;

  static Conv2dLayer create(std::size_t in_channels, std::size_t out_channels, std::size_t kh,
                            std::size_t kw, Conv2dAttrs attrs, Activation activation, Rng& rng);
  Tensor forward(const Tensor& x) const;
  std::vector<Tensor> parameters() const { return {kernel, bias}; }
};

struct DropoutSpec {
  double p_drop = 0.0;
  bool enabled = true;  // false at evaluation

  void validate() const;
};

// Inverted dropout: survivors scaled by 1 / (1 - p_drop); identity when
// disabled or p_drop == 0 (no draws are consumed in that case).
Tensor dropout_forward(const Tensor& x, const DropoutSpec& spec, Rng& rng);

enum class LossKind { l2, softmax_cross_entropy };

// Mean squared error over all elements.
Tensor l2_loss(const Tensor& prediction, const Tensor& target);
// logits: N x K, labels: N class indices. Mean negative log-softmax of the true class.
Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels);

struct Targets {
  Tensor values;            // regression
  std::vector<int> labels;  // classification
};

Tensor loss_fn(LossKind kind, const Tensor& prediction, const Targets& target);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

class AdamState {
 public:
  explicit AdamState(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return step_; }

  // Bias-corrected Adam update applied in place. Every param must have a
  // gradient entry in `grads`.
  void step(const GradStore& grads, std::span<Tensor> params);

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::unordered_map<std::uint64_t, Moments> moments_;
};

inline void adam_step(AdamState& state, const GradStore& grads, std::span<Tensor> params) {
  state.step(grads, params);
}

// Global L2 norm of the gradients of `params`.
double grad_norm(const GradStore& grads, std::span<const Tensor> params);

// Scales the gradients of `params` by max_norm / N when the global norm N
// exceeds max_norm. Returns N (before clipping).
double clip_grad_norm(GradStore& grads, std::span<const Tensor> params, double max_norm);

}  // namespace mtrl::nn

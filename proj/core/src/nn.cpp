#include "mtrl/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mtrl::nn {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values), true);
}

Tensor activate(const Tensor& x, Activation activation) {
  return activation == Activation::relu ? relu(x) : x;
}

}  // namespace

DenseLayer DenseLayer::create(std::size_t in, std::size_t out, Activation activation, Rng& rng) {
  if (in == 0 || out == 0) throw std::invalid_argument("DenseLayer: extents must be positive");
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  DenseLayer layer;
  layer.weight = uniform_tensor({in, out}, bound, rng);
  layer.bias = uniform_tensor({out}, bound, rng);
  layer.activation = activation;
  return layer;
}

Tensor DenseLayer::forward(const Tensor& x) const {
  return activate(bias_add(matmul(x, weight), bias), activation);
}

Conv2dLayer Conv2dLayer::create(std::size_t in_channels, std::size_t out_channels, std::size_t kh,
                                std::size_t kw, Conv2dAttrs attrs, Activation activation, Rng& rng) {
  if (kh == 0 || kw == 0) throw std::invalid_argument("Conv2dLayer: kernel extents must be >= 1");
  if (attrs.stride == 0) throw std::invalid_argument("Conv2dLayer: stride must be >= 1");
  const double bound = std::sqrt(1.0 / static_cast<double>(in_channels * kh * kw));
  Conv2dLayer layer;
  layer.kernel = uniform_tensor({out_channels, in_channels, kh, kw}, bound, rng);
  layer.bias = uniform_tensor({out_channels}, bound, rng);
  layer.attrs = attrs;
  layer.activation = activation;
  return layer;
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return activate(conv2d(x, kernel, bias, attrs), activation);
}

void DropoutSpec::validate() const {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) {
    throw std::invalid_argument("dropout probability must be in [0, 1), got " + std::to_string(p_drop));
  }
}

Tensor dropout_forward(const Tensor& x, const DropoutSpec& spec, Rng& rng) {
  spec.validate();
  if (!spec.enabled || spec.p_drop == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - spec.p_drop);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < spec.p_drop ? 0.0 : keep_scale;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor l2_loss(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("l2_loss: shape mismatch " + shape_str(prediction.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  Tensor diff = sub(prediction, target);
  return mean(mul(diff, diff));
}

Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2 || logits.shape()[0] != labels.size()) {
    throw ShapeError("cross_entropy_loss: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  std::vector<double> onehot(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::out_of_range("cross_entropy_loss: class index " + std::to_string(labels[i]) +
                              " out of range for " + std::to_string(k) + " classes");
    }
    onehot[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Tensor picked = sum(mul(log_softmax_lastdim(logits), Tensor({n, k}, std::move(onehot))));
  return scalar_mul(picked, -1.0 / static_cast<double>(n));
}

Tensor loss_fn(LossKind kind, const Tensor& prediction, const Targets& target) {
  if (kind == LossKind::l2) return l2_loss(prediction, target.values);
  return cross_entropy_loss(prediction, target.labels);
}

void AdamState::step(const GradStore& grads, std::span<Tensor> params) {
  for (const Tensor& p : params) {
    if (!grads.contains(p)) {
      throw std::invalid_argument("adam_step: no gradient for parameter of shape " +
                                  shape_str(p.shape()) + " (id " + std::to_string(p.id()) + ")");
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);
  for (Tensor& p : params) {
    auto g = grads.view(p);
    auto [it, inserted] = moments_.try_emplace(p.id());
    Moments& mo = it->second;
    if (inserted) {
      mo.m.assign(p.numel(), 0.0);
      mo.v.assign(p.numel(), 0.0);
    }
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      mo.m[i] = config_.beta1 * mo.m[i] + (1.0 - config_.beta1) * g[i];
      mo.v[i] = config_.beta2 * mo.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = mo.m[i] / correction1;
      const double v_hat = mo.v[i] / correction2;
      values[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      if (config_.weight_decay != 0.0) values[i] -= config_.lr * config_.weight_decay * values[i];
    }
  }
}

double grad_norm(const GradStore& grads, std::span<const Tensor> params) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    for (double g : grads.view(p)) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(GradStore& grads, std::span<const Tensor> params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  const double norm = grad_norm(grads, params);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const Tensor& p : params) {
      for (double& g : grads.mutable_view(p)) g *= scale;
    }
  }
  return norm;
}

}  // namespace mtrl::nn

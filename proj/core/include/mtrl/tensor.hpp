#pragma once

// Dense row-major tensors of doubles with define-by-run reverse-mode
// differentiation. Operations record onto the thread's active Tape when any
// operand is grad-tracked; backward() replays the tape in reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mtrl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // In-place mutation of values. Only legal on leaf tensors outside a
  // recorded forward pass (optimizer updates, test perturbations).
  std::span<double> mutable_data();

  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  // Stable identity used to key gradients; never reused within a process.
  std::uint64_t id() const;

  // Copy of the values with no tape history and no grad tracking.
  Tensor detach() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

class GradStore {
 public:
  bool contains(const Tensor& t) const;
  // dLoss/dt; zeros of t's shape when t was not reached.
  Tensor grad(const Tensor& t) const;
  std::span<const double> view(const Tensor& t) const;
  std::span<double> mutable_view(const Tensor& t);
  std::size_t size() const { return grads_.size(); }

  // Returns the slot for t, zero-initialised on first access.
  std::vector<double>& slot(const Tensor& t);

 private:
  std::unordered_map<std::uint64_t, std::vector<double>> grads_;
};

enum class OpKind {
  matmul,
  add,
  sub,
  mul,
  scalar_mul,
  relu,
  softmax_lastdim,
  log,
  exp,
  mean,
  sum,
  reshape,
  concat_lastdim,
  conv2d,
  avgpool2d,
  log_softmax_lastdim,
  bias_add,
  select_row,
  pick_lastdim,
  weighted_sum,
  straight_through,
};

std::string_view op_name(OpKind kind);
std::span<const OpKind> all_op_kinds();

enum class Padding { valid, same };

struct Conv2dAttrs {
  std::size_t stride = 1;
  Padding padding = Padding::valid;
};

struct OpAttrs {
  double scalar = 1.0;
  Shape shape;
  Conv2dAttrs conv;
  std::size_t pool = 2;
  std::size_t index = 0;
};

// One recorded operation. grad_in[i] is null when inputs[i] is not tracked.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<std::vector<double>* const> grad_in)>;

struct TapeNode {
  OpKind kind;
  std::vector<Tensor> inputs;
  Tensor output;
  BackwardFn backward;
};

class Tape {
 public:
  // Installs a tape as the thread's recording target for its lifetime.
  class Recording {
   public:
    explicit Recording(Tape& tape);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  void record(TapeNode node) { nodes_.push_back(std::move(node)); }
  const std::vector<TapeNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
};

GradStore backward(const Tensor& loss, const Tape& tape);

// Generic dispatch over every op kind; the named functions below are the
// usual entry points.
Tensor forward_op(OpKind kind, std::span<const Tensor> operands, const OpAttrs& attrs = {});

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& x, double factor);
Tensor scalar_mul(const Tensor& x, const Tensor& factor);
Tensor relu(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_lastdim(std::span<const Tensor> parts);
// x: N x C x H x W, kernel: O x C x KH x KW, bias: O or undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, Conv2dAttrs attrs);
// Non-overlapping window; trailing rows/columns that do not fill a window are dropped.
Tensor avgpool2d(const Tensor& x, std::size_t window);
// x: [..., D], bias: [D].
Tensor bias_add(const Tensor& x, const Tensor& bias);
// x: [R, ...] -> [...] at row `row`.
Tensor select_row(const Tensor& x, std::size_t row);
// x: [..., D] -> [...] taking entry `index` of the last dimension.
Tensor pick_lastdim(const Tensor& x, std::size_t index);
// Σ_k weights[k] · parts[k]; weights has shape {K}. Terms with weight 0 are
// skipped on the forward pass but still receive gradients.
Tensor weighted_sum(std::span<const Tensor> parts, const Tensor& weights);
// Forward value of `hard`, gradient routed to `soft` unchanged.
Tensor straight_through(const Tensor& soft, const Tensor& hard);

}  // namespace mtrl

#include "mtrl/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mtrl {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::uint64_t id = 0;
};

namespace {

std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  impl_->id = next_tensor_id();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  static const Shape empty;
  return impl_ ? impl_->shape : empty;
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw std::logic_error("set_requires_grad on undefined tensor");
  impl_->requires_grad = flag;
}

std::uint64_t Tensor::id() const { return impl_ ? impl_->id : 0; }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

// ---------------------------------------------------------------------------
// GradStore

bool GradStore::contains(const Tensor& t) const { return grads_.contains(t.id()); }

Tensor GradStore::grad(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), it->second);
}

std::span<const double> GradStore::view(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return {};
  return it->second;
}

std::span<double> GradStore::mutable_view(const Tensor& t) {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return {};
  return it->second;
}

std::vector<double>& GradStore::slot(const Tensor& t) {
  auto [it, inserted] = grads_.try_emplace(t.id());
  if (inserted) it->second.assign(t.numel(), 0.0);
  return it->second;
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Recording::Recording(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Recording::~Recording() { g_active_tape = previous_; }
Tape* Tape::active() { return g_active_tape; }

GradStore backward(const Tensor& loss, const Tape& tape) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss is not reachable from any grad-tracked tensor");
  }
  GradStore store;
  store.slot(loss)[0] = 1.0;

  std::vector<std::vector<double>*> grad_in;
  const auto& nodes = tape.nodes();
  for (auto node = nodes.rbegin(); node != nodes.rend(); ++node) {
    if (!store.contains(node->output)) continue;
    // unordered_map keeps element references stable across inserts.
    const std::vector<double>& grad_out = store.slot(node->output);
    grad_in.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      if (node->inputs[i].requires_grad()) grad_in[i] = &store.slot(node->inputs[i]);
    }
    node->backward(grad_out, grad_in);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Ops

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::relu: return "relu";
    case OpKind::softmax_lastdim: return "softmax_lastdim";
    case OpKind::log: return "log";
    case OpKind::exp: return "exp";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::reshape: return "reshape";
    case OpKind::concat_lastdim: return "concat_lastdim";
    case OpKind::conv2d: return "conv2d";
    case OpKind::avgpool2d: return "avgpool2d";
    case OpKind::log_softmax_lastdim: return "log_softmax_lastdim";
    case OpKind::bias_add: return "bias_add";
    case OpKind::select_row: return "select_row";
    case OpKind::pick_lastdim: return "pick_lastdim";
    case OpKind::weighted_sum: return "weighted_sum";
    case OpKind::straight_through: return "straight_through";
  }
  return "unknown";
}

std::span<const OpKind> all_op_kinds() {
  static constexpr OpKind kinds[] = {
      OpKind::matmul,          OpKind::add,        OpKind::sub,
      OpKind::mul,             OpKind::scalar_mul, OpKind::relu,
      OpKind::softmax_lastdim, OpKind::log,        OpKind::exp,
      OpKind::mean,            OpKind::sum,        OpKind::reshape,
      OpKind::concat_lastdim,  OpKind::conv2d,     OpKind::avgpool2d,
      OpKind::log_softmax_lastdim, OpKind::bias_add, OpKind::select_row,
      OpKind::pick_lastdim,    OpKind::weighted_sum, OpKind::straight_through,
  };
  return kinds;
}

namespace {

[[noreturn]] void mismatch(OpKind kind, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a) + " vs " +
                   shape_str(b));
}

void require_defined(OpKind kind, const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument(std::string(op_name(kind)) + ": undefined operand");
}

// Wraps a freshly computed value; records a node if tracking applies.
Tensor emit(OpKind kind, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
            BackwardFn fn) {
  Tape* tape = Tape::active();
  bool track = false;
  if (tape) {
    track = std::any_of(inputs.begin(), inputs.end(),
                        [](const Tensor& t) { return t.requires_grad(); });
  }
  Tensor out(std::move(shape), std::move(data), track);
  if (track) tape->record(TapeNode{kind, std::move(inputs), out, std::move(fn)});
  return out;
}

// Leading extent for ops that act on rows of the last dimension.
std::size_t last_extent(const Tensor& t) { return t.dim() == 0 ? 1 : t.shape().back(); }

Tensor elementwise_binary(OpKind kind, const Tensor& a, const Tensor& b) {
  require_defined(kind, a);
  require_defined(kind, b);
  if (a.shape() != b.shape()) mismatch(kind, a.shape(), b.shape());
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(av.size());
  switch (kind) {
    case OpKind::add:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
      break;
    case OpKind::sub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
      break;
    default:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
      break;
  }
  return emit(kind, a.shape(), std::move(out), {a, b},
              [kind, a, b](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                const std::size_t n = g.size();
                if (kind == OpKind::mul) {
                  auto av = a.data();
                  auto bv = b.data();
                  if (gin[0]) for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[i] * bv[i];
                  if (gin[1]) for (std::size_t i = 0; i < n; ++i) (*gin[1])[i] += g[i] * av[i];
                  return;
                }
                const double sign_b = kind == OpKind::sub ? -1.0 : 1.0;
                if (gin[0]) for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[i];
                if (gin[1]) for (std::size_t i = 0; i < n; ++i) (*gin[1])[i] += sign_b * g[i];
              });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(OpKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(OpKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary(OpKind::mul, a, b); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(OpKind::matmul, a);
  require_defined(OpKind::matmul, b);
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    mismatch(OpKind::matmul, a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return emit(OpKind::matmul, {m, n}, std::move(out), {a, b},
              [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                auto av = a.data();
                auto bv = b.data();
                if (gin[0]) {
                  auto& ga = *gin[0];
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                      const double* brow = bv.data() + p * n;
                      double acc = 0.0;
                      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                      ga[i * k + p] += acc;
                    }
                  }
                }
                if (gin[1]) {
                  auto& gb = *gin[1];
                  for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = g.data() + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                      const double aip = av[i * k + p];
                      double* gbrow = gb.data() + p * n;
                      for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                    }
                  }
                }
              });
}

Tensor scalar_mul(const Tensor& x, double factor) {
  require_defined(OpKind::scalar_mul, x);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * xv[i];
  return emit(OpKind::scalar_mul, x.shape(), std::move(out), {x},
              [factor](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
              });
}

Tensor scalar_mul(const Tensor& x, const Tensor& factor) {
  require_defined(OpKind::scalar_mul, x);
  require_defined(OpKind::scalar_mul, factor);
  if (factor.numel() != 1) mismatch(OpKind::scalar_mul, x.shape(), factor.shape());
  const double f = factor.item();
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f * xv[i];
  return emit(OpKind::scalar_mul, x.shape(), std::move(out), {x, factor},
              [x, f](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                auto xv = x.data();
                if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += f * g[i];
                if (gin[1]) {
                  double acc = 0.0;
                  for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
                  (*gin[1])[0] += acc;
                }
              });
}

Tensor relu(const Tensor& x) {
  require_defined(OpKind::relu, x);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return emit(OpKind::relu, x.shape(), std::move(out), {x},
              [x](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                auto xv = x.data();
                for (std::size_t i = 0; i < g.size(); ++i) {
                  if (xv[i] > 0.0) (*gin[0])[i] += g[i];
                }
              });
}

Tensor softmax_lastdim(const Tensor& x) {
  require_defined(OpKind::softmax_lastdim, x);
  const std::size_t d = last_extent(x);
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  std::vector<double> y = out;
  return emit(OpKind::softmax_lastdim, x.shape(), std::move(out), {x},
              [y = std::move(y), d, rows](std::span<const double> g,
                                          std::span<std::vector<double>* const> gin) {
                auto& gx = *gin[0];
                for (std::size_t r = 0; r < rows; ++r) {
                  const double* yr = y.data() + r * d;
                  const double* gr = g.data() + r * d;
                  double dot = 0.0;
                  for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                  for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += yr[j] * (gr[j] - dot);
                }
              });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  require_defined(OpKind::log_softmax_lastdim, x);
  const std::size_t d = last_extent(x);
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  std::vector<double> out(xv.size());
  std::vector<double> probs(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    const double mx = *std::max_element(in, in + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = in[j] - lse;
      probs[r * d + j] = std::exp(in[j] - lse);
    }
  }
  return emit(OpKind::log_softmax_lastdim, x.shape(), std::move(out), {x},
              [probs = std::move(probs), d, rows](std::span<const double> g,
                                                  std::span<std::vector<double>* const> gin) {
                auto& gx = *gin[0];
                for (std::size_t r = 0; r < rows; ++r) {
                  const double* gr = g.data() + r * d;
                  double total = 0.0;
                  for (std::size_t j = 0; j < d; ++j) total += gr[j];
                  for (std::size_t j = 0; j < d; ++j) {
                    gx[r * d + j] += gr[j] - probs[r * d + j] * total;
                  }
                }
              });
}

Tensor log(const Tensor& x) {
  require_defined(OpKind::log, x);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  return emit(OpKind::log, x.shape(), std::move(out), {x},
              [x](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                auto xv = x.data();
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] / xv[i];
              });
}

Tensor exp(const Tensor& x) {
  require_defined(OpKind::exp, x);
  auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  std::vector<double> y = out;
  return emit(OpKind::exp, x.shape(), std::move(out), {x},
              [y = std::move(y)](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * y[i];
              });
}

Tensor sum(const Tensor& x) {
  require_defined(OpKind::sum, x);
  auto xv = x.data();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return emit(OpKind::sum, {}, {total}, {x},
              [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                for (double& v : *gin[0]) v += g[0];
              });
}

Tensor mean(const Tensor& x) {
  require_defined(OpKind::mean, x);
  auto xv = x.data();
  const double n = static_cast<double>(xv.size());
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return emit(OpKind::mean, {}, {total / n}, {x},
              [n](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                const double share = g[0] / n;
                for (double& v : *gin[0]) v += share;
              });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(OpKind::reshape, x);
  if (shape_numel(shape) != x.numel()) mismatch(OpKind::reshape, x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  return emit(OpKind::reshape, std::move(shape), std::move(out), {x},
              [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
              });
}

Tensor concat_lastdim(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_lastdim: no operands");
  for (const auto& p : parts) require_defined(OpKind::concat_lastdim, p);
  const Shape& first = parts[0].shape();
  if (first.empty()) throw ShapeError("concat_lastdim: operands must have at least one dimension");
  const Shape lead(first.begin(), first.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      mismatch(OpKind::concat_lastdim, first, s);
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return emit(OpKind::concat_lastdim, std::move(shape), std::move(out),
              std::vector<Tensor>(parts.begin(), parts.end()),
              [widths, rows, total](std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
                std::size_t offset = 0;
                for (std::size_t k = 0; k < widths.size(); ++k) {
                  if (gin[k]) {
                    auto& gk = *gin[k];
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < widths[k]; ++j) {
                        gk[r * widths[k] + j] += g[r * total + offset + j];
                      }
                    }
                  }
                  offset += widths[k];
                }
              });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride;
  std::ptrdiff_t pad_top, pad_left;
};

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, Padding padding) {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  return (in - k) / stride + 1;
}

std::ptrdiff_t same_pad_before(std::size_t in, std::size_t k, std::size_t stride, std::size_t out) {
  const std::ptrdiff_t needed =
      static_cast<std::ptrdiff_t>((out - 1) * stride + k) - static_cast<std::ptrdiff_t>(in);
  return std::max<std::ptrdiff_t>(needed, 0) / 2;
}

// Output index range [lo, hi) whose input coordinate o*stride + k - pad lies in [0, in).
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t k,
                                                std::size_t stride, std::ptrdiff_t pad) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad;
  std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
  std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in) - 1 - shift;
  std::ptrdiff_t hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Offset within an input plane of output row r, column 0, for kernel tap (ki, kj).
// Σ a[i] * b[i * stride] over four interleaved partial sums, so the loop is
// not one serial floating-point dependency chain.
double strided_dot(const double* a, const double* b, std::size_t len, std::size_t stride) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= len; i += 4) {
    acc[0] += a[i] * b[i * stride];
    acc[1] += a[i + 1] * b[(i + 1) * stride];
    acc[2] += a[i + 2] * b[(i + 2) * stride];
    acc[3] += a[i + 3] * b[(i + 3) * stride];
  }
  for (; i < len; ++i) acc[0] += a[i] * b[i * stride];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

std::ptrdiff_t input_offset(const ConvGeometry& g, std::size_t r, std::size_t ki, std::size_t kj) {
  const auto ih = static_cast<std::ptrdiff_t>(r * g.stride + ki) - g.pad_top;
  return ih * static_cast<std::ptrdiff_t>(g.w) + static_cast<std::ptrdiff_t>(kj) - g.pad_left;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, Conv2dAttrs attrs) {
  require_defined(OpKind::conv2d, x);
  require_defined(OpKind::conv2d, kernel);
  if (attrs.stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (x.dim() != 4 || kernel.dim() != 4 || x.shape()[1] != kernel.shape()[1]) {
    mismatch(OpKind::conv2d, x.shape(), kernel.shape());
  }
  ConvGeometry g{};
  g.n = x.shape()[0];
  g.c = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.o = kernel.shape()[0];
  g.kh = kernel.shape()[2];
  g.kw = kernel.shape()[3];
  g.stride = attrs.stride;
  if (attrs.padding == Padding::valid && (g.h < g.kh || g.w < g.kw)) {
    mismatch(OpKind::conv2d, x.shape(), kernel.shape());
  }
  if (bias.defined() && (bias.dim() != 1 || bias.shape()[0] != g.o)) {
    mismatch(OpKind::conv2d, kernel.shape(), bias.shape());
  }
  g.oh = conv_out_extent(g.h, g.kh, g.stride, attrs.padding);
  g.ow = conv_out_extent(g.w, g.kw, g.stride, attrs.padding);
  g.pad_top = attrs.padding == Padding::same ? same_pad_before(g.h, g.kh, g.stride, g.oh) : 0;
  g.pad_left = attrs.padding == Padding::same ? same_pad_before(g.w, g.kw, g.stride, g.ow) : 0;

  auto xv = x.data();
  auto kv = kernel.data();
  std::vector<double> out(g.n * g.o * g.oh * g.ow, 0.0);
  const std::size_t in_plane = g.h * g.w;
  const std::size_t out_plane = g.oh * g.ow;

  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t o = 0; o < g.o; ++o) {
      double* oplane = out.data() + (n * g.o + o) * out_plane;
      if (bias.defined()) std::fill_n(oplane, out_plane, bias.data()[o]);
      for (std::size_t c = 0; c < g.c; ++c) {
        const double* iplane = xv.data() + (n * g.c + c) * in_plane;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          auto [r_lo, r_hi] = valid_range(g.oh, g.h, ki, g.stride, g.pad_top);
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            auto [c_lo, c_hi] = valid_range(g.ow, g.w, kj, g.stride, g.pad_left);
            const double wv = kv[((o * g.c + c) * g.kh + ki) * g.kw + kj];
            for (std::size_t r = r_lo; r < r_hi; ++r) {
              const std::ptrdiff_t base = input_offset(g, r, ki, kj);
              double* orow = oplane + r * g.ow;
              for (std::size_t col = c_lo; col < c_hi; ++col) {
                orow[col] += wv * iplane[base + static_cast<std::ptrdiff_t>(col * g.stride)];
              }
            }
          }
        }
      }
    }
  }

  std::vector<Tensor> inputs{x, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return emit(
      OpKind::conv2d, {g.n, g.o, g.oh, g.ow}, std::move(out), std::move(inputs),
      [x, kernel, g](std::span<const double> grad, std::span<std::vector<double>* const> gin) {
        auto xv = x.data();
        auto kv = kernel.data();
        const std::size_t in_plane = g.h * g.w;
        const std::size_t out_plane = g.oh * g.ow;
        std::vector<double>* gx = gin[0];
        std::vector<double>* gk = gin[1];
        std::vector<double>* gb = gin.size() > 2 ? gin[2] : nullptr;
        for (std::size_t n = 0; n < g.n; ++n) {
          for (std::size_t o = 0; o < g.o; ++o) {
            const double* gplane = grad.data() + (n * g.o + o) * out_plane;
            if (gb) {
              double acc = 0.0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += gplane[i];
              (*gb)[o] += acc;
            }
            for (std::size_t c = 0; c < g.c; ++c) {
              const std::size_t in_off = (n * g.c + c) * in_plane;
              for (std::size_t ki = 0; ki < g.kh; ++ki) {
                auto [r_lo, r_hi] = valid_range(g.oh, g.h, ki, g.stride, g.pad_top);
                for (std::size_t kj = 0; kj < g.kw; ++kj) {
                  auto [c_lo, c_hi] = valid_range(g.ow, g.w, kj, g.stride, g.pad_left);
                  const std::size_t widx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                  const double wv = kv[widx];
                  double wacc = 0.0;
                  for (std::size_t r = r_lo; r < r_hi; ++r) {
                    const std::ptrdiff_t base = input_offset(g, r, ki, kj);
                    const double* grow = gplane + r * g.ow;
                    const double* iplane = xv.data() + in_off;
                    if (gk && c_hi > c_lo) {
                      wacc += strided_dot(grow + c_lo, iplane + base + static_cast<std::ptrdiff_t>(c_lo * g.stride),
                                          c_hi - c_lo, g.stride);
                    }
                    if (gx) {
                      double* gxplane = gx->data() + in_off;
                      for (std::size_t col = c_lo; col < c_hi; ++col) {
                        gxplane[base + static_cast<std::ptrdiff_t>(col * g.stride)] += wv * grow[col];
                      }
                    }
                  }
                  if (gk) (*gk)[widx] += wacc;
                }
              }
            }
          }
        }
      });
}

Tensor avgpool2d(const Tensor& x, std::size_t window) {
  require_defined(OpKind::avgpool2d, x);
  if (window == 0) throw std::invalid_argument("avgpool2d: window must be >= 1");
  if (x.dim() != 4 || x.shape()[2] < window || x.shape()[3] < window) {
    mismatch(OpKind::avgpool2d, x.shape(), Shape{window, window});
  }
  const std::size_t planes = x.shape()[0] * x.shape()[1];
  const std::size_t h = x.shape()[2], w = x.shape()[3];
  const std::size_t oh = h / window, ow = w / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  auto xv = x.data();
  std::vector<double> out(planes * oh * ow, 0.0);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            acc += xv[p * h * w + (r * window + i) * w + c * window + j];
          }
        }
        out[(p * oh + r) * ow + c] = acc * inv;
      }
    }
  }
  return emit(OpKind::avgpool2d, {x.shape()[0], x.shape()[1], oh, ow}, std::move(out), {x},
              [planes, h, w, oh, ow, window, inv](std::span<const double> g,
                                                  std::span<std::vector<double>* const> gin) {
                auto& gx = *gin[0];
                for (std::size_t p = 0; p < planes; ++p) {
                  for (std::size_t r = 0; r < oh; ++r) {
                    for (std::size_t c = 0; c < ow; ++c) {
                      const double share = g[(p * oh + r) * ow + c] * inv;
                      for (std::size_t i = 0; i < window; ++i) {
                        for (std::size_t j = 0; j < window; ++j) {
                          gx[p * h * w + (r * window + i) * w + c * window + j] += share;
                        }
                      }
                    }
                  }
                }
              });
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  require_defined(OpKind::bias_add, x);
  require_defined(OpKind::bias_add, bias);
  if (x.dim() == 0 || bias.dim() != 1 || bias.shape()[0] != x.shape().back()) {
    mismatch(OpKind::bias_add, x.shape(), bias.shape());
  }
  const std::size_t d = bias.numel();
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto bv = bias.data();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + bv[j];
  }
  return emit(OpKind::bias_add, x.shape(), std::move(out), {x, bias},
              [d, rows](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                if (gin[1]) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) (*gin[1])[j] += g[r * d + j];
                  }
                }
              });
}

Tensor select_row(const Tensor& x, std::size_t row) {
  require_defined(OpKind::select_row, x);
  if (x.dim() == 0 || row >= x.shape()[0]) {
    throw ShapeError("select_row: row " + std::to_string(row) + " out of range for shape " +
                     shape_str(x.shape()));
  }
  Shape shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t width = shape_numel(shape);
  std::vector<double> out(x.data().begin() + row * width, x.data().begin() + (row + 1) * width);
  return emit(OpKind::select_row, std::move(shape), std::move(out), {x},
              [row, width](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                for (std::size_t i = 0; i < width; ++i) (*gin[0])[row * width + i] += g[i];
              });
}

Tensor pick_lastdim(const Tensor& x, std::size_t index) {
  require_defined(OpKind::pick_lastdim, x);
  if (x.dim() == 0 || index >= x.shape().back()) {
    throw ShapeError("pick_lastdim: index " + std::to_string(index) + " out of range for shape " +
                     shape_str(x.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = x.data()[r * d + index];
  return emit(OpKind::pick_lastdim, std::move(shape), std::move(out), {x},
              [d, index](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                for (std::size_t r = 0; r < g.size(); ++r) (*gin[0])[r * d + index] += g[r];
              });
}

Tensor weighted_sum(std::span<const Tensor> parts, const Tensor& weights) {
  if (parts.empty()) throw std::invalid_argument("weighted_sum: no operands");
  require_defined(OpKind::weighted_sum, weights);
  if (weights.dim() != 1 || weights.numel() != parts.size()) {
    mismatch(OpKind::weighted_sum, Shape{parts.size()}, weights.shape());
  }
  for (const auto& p : parts) {
    require_defined(OpKind::weighted_sum, p);
    if (p.shape() != parts[0].shape()) mismatch(OpKind::weighted_sum, parts[0].shape(), p.shape());
  }
  auto wv = weights.data();
  std::vector<double> out(parts[0].numel(), 0.0);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (wv[k] == 0.0) continue;
    auto pv = parts[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wv[k] * pv[i];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  inputs.push_back(weights);
  const std::size_t count = parts.size();
  return emit(OpKind::weighted_sum, parts[0].shape(), std::move(out), inputs,
              [inputs, count](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                auto wv = inputs[count].data();
                for (std::size_t k = 0; k < count; ++k) {
                  if (gin[k]) {
                    for (std::size_t i = 0; i < g.size(); ++i) (*gin[k])[i] += wv[k] * g[i];
                  }
                  if (gin[count]) {
                    auto pv = inputs[k].data();
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += pv[i] * g[i];
                    (*gin[count])[k] += acc;
                  }
                }
              });
}

Tensor straight_through(const Tensor& soft, const Tensor& hard) {
  require_defined(OpKind::straight_through, soft);
  require_defined(OpKind::straight_through, hard);
  if (soft.shape() != hard.shape()) mismatch(OpKind::straight_through, soft.shape(), hard.shape());
  std::vector<double> out(hard.data().begin(), hard.data().end());
  return emit(OpKind::straight_through, soft.shape(), std::move(out), {soft, hard},
              [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
              });
}

Tensor forward_op(OpKind kind, std::span<const Tensor> operands, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (operands.size() != n) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                                  " operands, got " + std::to_string(operands.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(operands[0], operands[1]);
    case OpKind::add: need(2); return add(operands[0], operands[1]);
    case OpKind::sub: need(2); return sub(operands[0], operands[1]);
    case OpKind::mul: need(2); return mul(operands[0], operands[1]);
    case OpKind::scalar_mul:
      if (operands.size() == 2) return scalar_mul(operands[0], operands[1]);
      need(1);
      return scalar_mul(operands[0], attrs.scalar);
    case OpKind::relu: need(1); return relu(operands[0]);
    case OpKind::softmax_lastdim: need(1); return softmax_lastdim(operands[0]);
    case OpKind::log: need(1); return log(operands[0]);
    case OpKind::exp: need(1); return exp(operands[0]);
    case OpKind::mean: need(1); return mean(operands[0]);
    case OpKind::sum: need(1); return sum(operands[0]);
    case OpKind::reshape: need(1); return reshape(operands[0], attrs.shape);
    case OpKind::concat_lastdim: return concat_lastdim(operands);
    case OpKind::conv2d:
      if (operands.size() == 3) return conv2d(operands[0], operands[1], operands[2], attrs.conv);
      need(2);
      return conv2d(operands[0], operands[1], Tensor{}, attrs.conv);
    case OpKind::avgpool2d: need(1); return avgpool2d(operands[0], attrs.pool);
    case OpKind::log_softmax_lastdim: need(1); return log_softmax_lastdim(operands[0]);
    case OpKind::bias_add: need(2); return bias_add(operands[0], operands[1]);
    case OpKind::select_row: need(1); return select_row(operands[0], attrs.index);
    case OpKind::pick_lastdim: need(1); return pick_lastdim(operands[0], attrs.index);
    case OpKind::weighted_sum:
      if (operands.size() < 2) need(2);
      return weighted_sum(operands.first(operands.size() - 1), operands.back());
    case OpKind::straight_through: need(2); return straight_through(operands[0], operands[1]);
  }
  throw std::invalid_argument("forward_op: unknown op kind");
}

}  // namespace mtrl

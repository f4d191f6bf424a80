#include "mtrl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace mtrl {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) { return f(x).item(); }

}  // namespace

double gradient_check(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("gradient_check: eps must be positive");

  Tensor probe(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  std::vector<double> analytic(x.numel(), 0.0);
  {
    Tape tape;
    Tensor out;
    {
      Tape::Recording rec(tape);
      out = f(probe);
    }
    if (out.numel() != 1) throw ShapeError("gradient_check: f must return a scalar");
    // A constant function leaves the output untracked: gradient is zero.
    if (out.requires_grad()) {
      GradStore grads = backward(out, tape);
      auto g = grads.view(probe);
      if (!g.empty()) std::copy(g.begin(), g.end(), analytic.begin());
    }
  }

  Tensor shifted(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  auto values = shifted.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + eps;
    const double up = evaluate(f, shifted);
    values[i] = original - eps;
    const double down = evaluate(f, shifted);
    values[i] = original;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace mtrl

#pragma once

#include <functional>

#include "mtrl/tensor.hpp"

namespace mtrl {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must return a scalar; x is copied and never modified.
double gradient_check(const ScalarFn& f, const Tensor& x, double eps = 1e-4);

}  // namespace mtrl

#pragma once

#include <functional>
#include <span>

#include "difflens/core/tensor.hpp"

namespace difflens::core {

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Maximum over coordinates of |fd - g| / max(1e-8, |fd| + |g|), where fd is
/// the central difference (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
/// Throws NumericError if f returns a non-finite value.
double gradient_check(const ScalarFunction& f, std::span<const double> x,
                      std::span<const double> analytic_grad, double eps);

inline double gradient_check(const ScalarFunction& f, const Tensor& x, const Tensor& analytic_grad,
                             double eps) {
  return gradient_check(f, x.data(), analytic_grad.data(), eps);
}

}  // namespace difflens::core

#include "difflens/core/gradient_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "difflens/core/error.hpp"

namespace difflens::core {

double gradient_check(const ScalarFunction& f, std::span<const double> x,
                      std::span<const double> analytic_grad, double eps) {
  if (!(eps > 0.0)) throw ConfigError("gradient_check: eps must be positive");
  if (x.size() != analytic_grad.size())
    throw ConfigError("gradient_check: gradient length does not match x");

  std::vector<double> probe(x.begin(), x.end());
  auto eval = [&]() {
    const double v = f(probe);
    if (!std::isfinite(v)) throw NumericError("gradient_check: non-finite function value");
    return v;
  };
  eval();

  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval();
    probe[i] = x[i] - eps;
    const double down = eval();
    probe[i] = x[i];
    const double fd = (up - down) / (2.0 * eps);
    const double g = analytic_grad[i];
    const double rel = std::abs(fd - g) / std::max(1e-8, std::abs(fd) + std::abs(g));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace difflens::core

#include <cmath>

#include "difflens/core/error.hpp"
#include "difflens/diffusion.hpp"

namespace difflens::diffusion {

using core::Tensor;

void DiffusionSchedule::validate() const {
  const auto n = static_cast<std::size_t>(T);
  if (T < 2 || alpha.size() != n || alpha_bar.size() != n || sigma.size() != n)
    throw ConfigError("schedule: inconsistent lengths");
  for (int t = 0; t < T; ++t) {
    if (!(alpha[t] > 0.0 && alpha[t] < 1.0)) throw ConfigError("schedule: alpha outside (0, 1)");
    if (!(sigma[t] >= 0.0)) throw ConfigError("schedule: negative sigma");
    if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1]))
      throw ConfigError("schedule: alpha_bar not strictly decreasing");
  }
}

DiffusionSchedule make_schedule(int T, double beta_min, double beta_max) {
  if (T < 2) throw ConfigError("make_schedule: T must be at least 2");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw ConfigError("make_schedule: need 0 < beta_min <= beta_max < 1");
  DiffusionSchedule s;
  s.T = T;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.assign(T, 0.0);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const double beta = beta_min + (beta_max - beta_min) * t / (T - 1);
    s.alpha[t] = 1.0 - beta;
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  s.validate();
  return s;
}

namespace {

void check_step(int t, const DiffusionSchedule& schedule) {
  if (t < 0 || t >= schedule.T) throw ConfigError("timestep out of range");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) throw ConfigError(std::string(what) + ": shape mismatch");
}

}  // namespace

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& schedule) {
  check_step(t, schedule);
  check_same_shape(x0, eps, "forward_noise");
  const double a = std::sqrt(schedule.alpha_bar[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor clean_prediction(const Tensor& x_t, int t, const Tensor& eps_hat,
                        const DiffusionSchedule& schedule) {
  check_step(t, schedule);
  check_same_shape(x_t, eps_hat, "clean_prediction");
  const double a = std::sqrt(schedule.alpha_bar[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - b * eps_hat[i]) / a;
  return out;
}

Tensor ddim_update(const Tensor& x_t, const Tensor& eps_hat, double alpha_bar,
                   double alpha_bar_prev, double sigma, const Tensor& z) {
  check_same_shape(x_t, eps_hat, "ddim_update");
  check_same_shape(x_t, z, "ddim_update");
  const double dir2 = 1.0 - alpha_bar_prev - sigma * sigma;
  if (dir2 < 0.0) throw ConfigError("ddim_update: 1 - alpha_bar_prev - sigma^2 < 0");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  const double ap = std::sqrt(alpha_bar_prev);
  const double d = std::sqrt(dir2);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double p = (x_t[i] - b * eps_hat[i]) / a;
    out[i] = ap * p + d * eps_hat[i] + sigma * z[i];
  }
  return out;
}

Tensor ddim_step(const Tensor& x_t, int t, const Tensor& eps_hat, const DiffusionSchedule& schedule,
                 const Tensor& z) {
  check_step(t, schedule);
  return ddim_update(x_t, eps_hat, schedule.alpha_bar[t], schedule.alpha_bar_prev(t),
                     schedule.sigma[t], z);
}

}  // namespace difflens::diffusion

#include <cmath>

#include "difflens/core/error.hpp"
#include "difflens/core/rng.hpp"
#include "difflens/diffusion.hpp"

namespace difflens::diffusion {

using core::Tensor;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::vector<Tensor> sample(const DenoiserParams& params, const DiffusionSchedule& schedule,
                           std::size_t n, std::uint64_t seed, const Hook& hook, HiddenTrace* trace) {
  return sample_range(params, schedule, 0, n, seed, hook, trace);
}

std::vector<Tensor> sample_range(const DenoiserParams& params, const DiffusionSchedule& schedule,
                                 std::size_t first, std::size_t n, std::uint64_t seed,
                                 const Hook& hook, HiddenTrace* trace) {
  const auto& a = params.arch;
  const auto P = a.pixels();
  const auto nb = a.bottleneck;
  const int T = schedule.T;
  const core::Shape shape{static_cast<std::size_t>(a.side), static_cast<std::size_t>(a.side)};

  // Timestep-embedding contributions to the two conditioned layers.
  MatrixXd c1(a.hidden1, T), c3(a.hidden2, T);
  for (int t = 0; t < T; ++t) {
    const VectorXd emb = timestep_embedding(t, a.embed);
    c1.col(t) = params.W1.rightCols(a.embed) * emb + params.b1;
    c3.col(t) = params.W3.rightCols(a.embed) * emb + params.b3;
  }
  const auto W1x = params.W1.leftCols(P);
  const auto W3h = params.W3.leftCols(nb);

  std::vector<Tensor> out;
  out.reserve(n);
  if (trace) trace->assign(n, MatrixXd(nb, T));

  VectorXd x(P), z1(a.hidden1), z3(a.hidden2), x0(P), eps(P);
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t chain = first + c;
    core::RngStream rng(seed, chain);
    for (Eigen::Index i = 0; i < P; ++i) x[i] = rng.normal();

    for (int t = T - 1; t >= 0; --t) {
      z1.noalias() = W1x * x;
      z1 += c1.col(t);
      z1 = z1.array() / (1.0 + (-z1.array()).exp());
      HiddenState h{(params.W2 * z1 + params.b2).array().tanh().matrix(), t};
      if (trace) (*trace)[c].col(t) = h.h;
      if (hook) {
        h = hook(h, chain);
        if (h.h.size() != nb) throw ConfigError("sample: hook changed the hidden-state length");
      }
      z3.noalias() = W3h * h.h;
      z3 += c3.col(t);
      z3 = z3.array() / (1.0 + (-z3.array()).exp());
      x0.noalias() = params.W4 * z3;
      x0 += params.b4;

      const double ab = schedule.alpha_bar[t];
      const double abp = schedule.alpha_bar_prev(t);
      const double dir2 = 1.0 - abp - schedule.sigma[t] * schedule.sigma[t];
      if (dir2 < 0.0) throw ConfigError("sample: 1 - alpha_bar_prev - sigma^2 < 0");
      eps = (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
      // Same arithmetic as ddim_step.
      const VectorXd pt = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
      x = std::sqrt(abp) * pt + std::sqrt(dir2) * eps;
      if (schedule.sigma[t] > 0.0)
        for (Eigen::Index i = 0; i < P; ++i) x[i] += schedule.sigma[t] * rng.normal();
    }
    Tensor img(shape);
    img.flat() = x.cwiseMax(-1.0).cwiseMin(1.0);
    img.check_finite("sample");
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace difflens::diffusion

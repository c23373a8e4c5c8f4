#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "difflens/core/tensor.hpp"

namespace difflens::diffusion {

// Timesteps are 0-based: t = 0 is the least noisy level and T-1 the noisiest.
struct DiffusionSchedule {
  int T = 0;
  double beta_min = 0.0;
  double beta_max = 0.0;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  /// alpha_bar at the level a step from t lands on; 1 for t = 0.
  double alpha_bar_prev(int t) const { return t == 0 ? 1.0 : alpha_bar[t - 1]; }
  void validate() const;
};

/// Linear beta schedule, alpha_t = 1 - beta_t, sigma_t = 0.
DiffusionSchedule make_schedule(int T, double beta_min, double beta_max);

core::Tensor forward_noise(const core::Tensor& x0, int t, const core::Tensor& eps,
                           const DiffusionSchedule& schedule);

/// P_t = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
core::Tensor clean_prediction(const core::Tensor& x_t, int t, const core::Tensor& eps_hat,
                              const DiffusionSchedule& schedule);

/// One DDIM update expressed in cumulative products:
///   sqrt(abar_prev) P + sqrt(1 - abar_prev - sigma^2) eps_hat + sigma z.
core::Tensor ddim_update(const core::Tensor& x_t, const core::Tensor& eps_hat, double alpha_bar,
                         double alpha_bar_prev, double sigma, const core::Tensor& z);

core::Tensor ddim_step(const core::Tensor& x_t, int t, const core::Tensor& eps_hat,
                       const DiffusionSchedule& schedule, const core::Tensor& z);

struct DenoiserArch {
  int side = 16;
  int hidden1 = 256;
  int bottleneck = 64;
  int hidden2 = 256;
  int embed = 32;

  int pixels() const { return side * side; }
  void validate() const;
};

/// Sinusoidal timestep embedding of even width `dim`.
Eigen::VectorXd timestep_embedding(int t, int dim);

// MLP: [x, emb(t)] -> silu(hidden1) -> tanh(bottleneck h) -> [h, emb(t)] -> silu(hidden2)
// -> x0_hat. The noise estimate is derived from x0_hat and the schedule.
struct DenoiserParams {
  DenoiserArch arch;
  Eigen::MatrixXd W1, W2, W3, W4;
  Eigen::VectorXd b1, b2, b3, b4;

  static DenoiserParams zeros(const DenoiserArch& arch);
  /// Weights N(0, 1/fan_in), biases zero.
  static DenoiserParams init(const DenoiserArch& arch, std::uint64_t seed);

  std::size_t num_params() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
  bool all_finite() const;
};

struct HiddenState {
  Eigen::VectorXd h;
  int t = 0;
};

struct DenoiserOutput {
  core::Tensor eps_hat;
  core::Tensor x0_hat;
  HiddenState h;
};

using Hook = std::function<HiddenState(const HiddenState&, std::size_t chain)>;

DenoiserOutput denoiser_forward(const core::Tensor& x_t, int t, const DenoiserParams& params,
                                const DiffusionSchedule& schedule);

/// Training minibatch: columns are examples.
struct DenoiserBatch {
  Eigen::MatrixXd x_t;
  Eigen::MatrixXd x0;
  std::vector<int> t;
};

/// Mean over pixels and examples of (x0_hat - x0)^2. When `grad` is non-null it
/// receives dL/dparams in the same layout as the parameters.
double denoiser_loss(const DenoiserParams& params, const DenoiserBatch& batch,
                     DenoiserParams* grad = nullptr);

struct DenoiserTrainConfig {
  int epochs = 150;
  double lr = 0.1;
  int batch = 64;
  std::uint64_t seed = 0;
};

struct DenoiserTrainResult {
  DenoiserParams params;
  std::vector<double> epoch_loss;
};

/// Plain SGD on x0-MSE with t ~ U{0..T-1} and fresh noise per example.
/// `images` holds one flattened image per column. Throws NumericError naming
/// the epoch if the loss becomes non-finite.
DenoiserTrainResult train_denoiser(const Eigen::MatrixXd& images, const DiffusionSchedule& schedule,
                                   const DenoiserArch& arch, const DenoiserTrainConfig& config,
                                   const std::function<void(int, double)>& on_epoch = {});

/// Hidden states recorded while sampling: one n x T matrix per chain, column t
/// holding the bottleneck vector the denoiser produced at timestep t.
using HiddenTrace = std::vector<Eigen::MatrixXd>;

/// Runs the reverse chain t = T-1 ... 0 for chains 0..n-1. Chain c starts from
/// noise drawn from RngStream(seed, c) and is evaluated on its own, so its
/// result does not depend on n. The hook, if any, rewrites h at every step.
/// Final images are clipped to [-1, 1].
std::vector<core::Tensor> sample(const DenoiserParams& params, const DiffusionSchedule& schedule,
                                 std::size_t n, std::uint64_t seed, const Hook& hook = {},
                                 HiddenTrace* trace = nullptr);

/// Same as `sample` for the chains [first, first + n).
std::vector<core::Tensor> sample_range(const DenoiserParams& params,
                                       const DiffusionSchedule& schedule, std::size_t first,
                                       std::size_t n, std::uint64_t seed, const Hook& hook = {},
                                       HiddenTrace* trace = nullptr);

void save_denoiser(const std::filesystem::path& path, const DenoiserParams& params,
                   const DiffusionSchedule& schedule, std::uint64_t seed);
struct DenoiserCheckpoint {
  DenoiserParams params;
  DiffusionSchedule schedule;
  std::uint64_t seed = 0;
};
DenoiserCheckpoint load_denoiser(const std::filesystem::path& path);

}  // namespace difflens::diffusion

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace difflens::sae {

struct SaeParams {
  Eigen::MatrixXd W_enc;  // m x n
  Eigen::MatrixXd W_dec;  // n x m
  Eigen::VectorXd b_pre;  // n
  int k = 1;

  int m() const { return static_cast<int>(W_enc.rows()); }
  int n() const { return static_cast<int>(W_enc.cols()); }
  /// Shapes, 1 <= k <= m, finiteness. m > n is enforced by train_sae only, so
  /// square identity configurations remain constructible.
  void validate() const;
};

struct SparseCode {
  Eigen::VectorXd s;
  std::vector<int> support;  // ascending
};

/// Keeps the k largest entries by value; ties go to the lower index.
SparseCode topk_mask(const Eigen::VectorXd& v, int k);

Eigen::VectorXd pre_activation(const Eigen::VectorXd& h, const SaeParams& sae);
SparseCode encode(const Eigen::VectorXd& h, const SaeParams& sae);
Eigen::VectorXd decode(const Eigen::VectorXd& s, const SaeParams& sae);
/// Sums only the support columns.
Eigen::VectorXd decode(const SparseCode& code, const SaeParams& sae);

/// Column-wise encode of an n x N matrix into a dense m x N code matrix.
Eigen::MatrixXd encode_batch(const Eigen::MatrixXd& H, const SaeParams& sae);

/// Mean over columns of ||h - h_hat||^2. Gradients use the straight-through
/// rule: TopK passes the gradient on fired coordinates and blocks the rest.
/// With `frozen_support` the code is z restricted to the given supports
/// instead of a fresh TopK, which makes the loss smooth in the parameters.
double sae_loss(const SaeParams& sae, const Eigen::MatrixXd& H, SaeParams* grad = nullptr,
                const std::vector<std::vector<int>>* frozen_support = nullptr);

/// Sum of squared reconstruction errors over total sum of squares about the
/// mean. Throws NumericError when the activations have zero variance.
double fvu(const SaeParams& sae, const Eigen::MatrixXd& H);

/// W_enc ~ N(0, 1/n), W_dec = W_enc^T, b_pre = column mean of H.
SaeParams init_sae(const Eigen::MatrixXd& H, int m, int k, std::uint64_t seed);

struct SaeTrainConfig {
  double lr = 0.01;
  int epochs = 5;
  int batch = 64;
  std::uint64_t seed = 0;
};

struct SaeTrainResult {
  SaeParams params;
  double initial_fvu = 0.0;
  std::vector<double> epoch_fvu;
  std::vector<int> dead_features;  // per epoch, features that never fired
};

SaeTrainResult train_sae(const Eigen::MatrixXd& H, int m, int k, const SaeTrainConfig& config,
                         const std::function<void(int, double, int)>& on_epoch = {});

struct CosineStats {
  double mean_abs = 0.0;
  double max_abs = 0.0;
};
/// Off-diagonal |cosine| between decoder columns (zero columns skipped).
CosineStats decoder_cosine_stats(const SaeParams& sae);

void save_sae(const std::filesystem::path& path, const SaeParams& sae, std::uint64_t seed);
SaeParams load_sae(const std::filesystem::path& path);

}  // namespace difflens::sae

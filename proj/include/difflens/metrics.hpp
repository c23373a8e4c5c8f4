#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace difflens::metrics {

struct FairnessReport {
  Eigen::VectorXd expected;   // mean softmax
  Eigen::VectorXd reference;  // target distribution
  double fd = 0.0;
  std::size_t count = 0;
};

/// ||reference - mean column of probs||_2; `probs` is classes x N. An empty
/// reference means uniform.
FairnessReport fairness_discrepancy(const Eigen::MatrixXd& probs, const Eigen::VectorXd& reference = {});

struct PcaModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // d x dim, orthonormal rows

  Eigen::MatrixXd project(const Eigen::MatrixXd& X) const;
};

/// Top-d principal directions of the columns of X; each direction's sign is
/// fixed so its largest-magnitude entry is positive.
PcaModel fit_pca(const Eigen::MatrixXd& X, int d);
void save_pca(const std::filesystem::path& path, const PcaModel& pca);
PcaModel load_pca(const std::filesystem::path& path);

struct FrechetResult {
  double value = 0.0;
  bool ridged = false;  // a rank-deficient covariance got a 1e-6 ridge
};

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).
FrechetResult gaussian_frechet(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& S1,
                               const Eigen::VectorXd& mu2, const Eigen::MatrixXd& S2);

/// Frechet distance between Gaussian fits of two feature sets (columns).
FrechetResult frechet_features(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

/// Frechet distance on PCA coefficients of two image sets (columns). Each set
/// needs at least 2 d images.
FrechetResult desk_frechet(const Eigen::MatrixXd& samples, const Eigen::MatrixXd& reference, const PcaModel& pca);

/// Per-pixel standardization; pixels with zero spread keep unit scale.
struct PixelWhitener {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static PixelWhitener fit(const Eigen::MatrixXd& X);
  static PixelWhitener identity(Eigen::Index dim);
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
};

struct SimilarityResult {
  double mean = 0.0;
  std::size_t pairs = 0;
  std::size_t skipped = 0;  // pairs with a zero-norm image
};

/// Mean cosine similarity of whitened image pairs (column j of each).
SimilarityResult pairwise_similarity(const Eigen::MatrixXd& originals, const Eigen::MatrixXd& edited,
                                     const PixelWhitener& whitener);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// log((count_pos + 1) / (count_neg + 1)).
double smoothed_log_ratio(std::size_t count_pos, std::size_t count_neg);

struct CurvePoint {
  double beta = 1.0;
  std::size_t n = 0;
  std::size_t count_pos = 0;  // oracle argmax == positive class
  double ratio = 0.0;         // count_pos / n
  double log_ratio = 0.0;     // smoothed log(pos / rest)
  double frechet = 0.0;
  double similarity = 0.0;
};

struct ControlCurve {
  std::vector<CurvePoint> points;

  std::vector<double> betas() const;
  std::vector<double> log_ratios() const;
  /// Spearman between log beta and log ratio.
  double rank_correlation() const;
};

/// Evaluates each beta of a nonempty grid (sorted ascending, positive) in order.
ControlCurve control_curve(const std::vector<double>& betas, const std::function<CurvePoint(double)>& evaluate);

/// n points spaced evenly in log between lo and hi.
std::vector<double> log_grid(double lo, double hi, int n);

}  // namespace difflens::metrics

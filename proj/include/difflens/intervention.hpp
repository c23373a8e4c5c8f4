#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "difflens/attribution.hpp"
#include "difflens/core/tensor.hpp"
#include "difflens/diffusion.hpp"
#include "difflens/sae.hpp"

namespace difflens::intervention {

enum class Mode { scaling, adding };

Mode parse_mode(const std::string& name);
std::string mode_name(Mode mode);

/// The beta that leaves a code unchanged: 1 for scaling, 0 for adding.
double identity_beta(Mode mode);

struct FeatureEdit {
  std::vector<int> A;
  double beta = 1.0;
  Mode mode = Mode::scaling;
};

/// s'_i = beta s_i (scaling) or s_i + beta (adding) for i in A, s'_i = s_i
/// elsewhere. The result is dense: adding may switch on unfired features.
Eigen::VectorXd intervene_code(const Eigen::VectorXd& s, const std::vector<int>& A, double beta, Mode mode);
/// Applies the edits in order.
Eigen::VectorXd intervene_code(const Eigen::VectorXd& s, const std::vector<FeatureEdit>& edits);

/// h + W_dec (s' - s), accumulated over the coordinates where s' differs from s.
Eigen::VectorXd apply_delta(const Eigen::VectorXd& h, const Eigen::VectorXd& s, const Eigen::VectorXd& s_new,
                            const sae::SaeParams& sae);

struct InterventionSpec {
  std::string attribute;
  std::vector<FeatureEdit> entries;  // one per class
  std::vector<double> probs;         // class-selection probabilities
  std::uint64_t seed = 0;

  void validate(int m) const;
  bool is_identity() const;
};

/// Class whose entry steers `chain`: a categorical draw from `probs` on a
/// stream keyed by (spec.seed, chain), identical at every timestep.
int drawn_class(const InterventionSpec& spec, std::size_t chain);

/// Bottleneck hook: encode h, apply the drawn class's edit of every spec, and
/// write back through the decoder delta.
diffusion::Hook make_hook(const std::vector<InterventionSpec>& specs, const sae::SaeParams& sae);
diffusion::Hook make_hook(const InterventionSpec& spec, const sae::SaeParams& sae);

/// Spec that applies `edit` to every chain.
InterventionSpec single_edit_spec(const std::string& attribute, const FeatureEdit& edit, std::uint64_t seed = 0);

void save_spec(const std::filesystem::path& path, const InterventionSpec& spec);
InterventionSpec load_spec(const std::filesystem::path& path);

struct CalibrationStep {
  double beta = 1.0;
  double ratio = 0.0;
};

struct CalibrationResult {
  double beta = 1.0;   // best beta found
  double ratio = 0.0;  // ratio at `beta`
  bool reached = false;
  double range_lo = 0.0;  // smallest and largest ratio observed
  double range_hi = 0.0;
  std::vector<CalibrationStep> trace;
};

/// Bisection on log beta in [lo, hi] for ratio_at(beta) == target. Both bounds
/// are evaluated first; if the target lies outside the ratios they give the
/// search stops unreached. Otherwise it halves the bracket until the ratio is
/// within tol or max_iter midpoints were tried. `reached` reports success and
/// `beta` is always the closest evaluated point.
CalibrationResult calibrate_beta(const std::function<double(double)>& ratio_at, double target, double lo,
                                 double hi, double tol = 0.03, int max_iter = 12);

struct ImageGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<core::Tensor> images;  // row-major

  const core::Tensor& at(std::size_t r, std::size_t c) const { return images[r * cols + c]; }
};

/// Chains 0..rows-1 sampled once per beta with only feature i scaled by beta.
/// Rows are chains, columns follow `betas`.
ImageGrid feature_gallery(const diffusion::DenoiserParams& params, const diffusion::DiffusionSchedule& schedule,
                          const sae::SaeParams& sae, int feature, const std::vector<double>& betas,
                          std::size_t rows, std::uint64_t seed);

/// Binary PGM of the grid with one-pixel separators, pixels mapped from [-1, 1].
void write_pgm(const std::filesystem::path& path, const ImageGrid& grid, int scale = 2);

}  // namespace difflens::intervention

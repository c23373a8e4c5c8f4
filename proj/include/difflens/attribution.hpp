#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "difflens/core/exact_sum.hpp"
#include "difflens/probe.hpp"
#include "difflens/sae.hpp"

namespace difflens::attribution {

/// Differentiable scalar function of a code: value and gradient.
using CodeFunction = std::function<probe::ValueGrad(const Eigen::VectorXd&)>;

/// Right-endpoint Riemann integrated gradients:
///   score_i = (s_i - s'_i) (1/q) sum_{k=1..q} dF(s' + (k/q)(s - s'))/ds_i.
/// Throws NumericError on a non-finite gradient.
Eigen::VectorXd ig_scores(const Eigen::VectorXd& s, const Eigen::VectorXd& s_base,
                          const CodeFunction& F, int q);

enum class BaselineMode { zero, per_input };

struct AttributionConfig {
  int q = 50;
  int tau = 16;
  BaselineMode baseline = BaselineMode::zero;
  int y = 0;
  int support_size = 256;

  void validate(int m) const;
};

/// One generated sample: its bottleneck vectors at every timestep (n x T).
struct SupportSample {
  std::size_t id = 0;
  Eigen::MatrixXd H;
};

struct AttributionTable {
  std::string attribute;
  int y = 0;
  std::vector<double> scores;
  std::map<std::string, std::string> provenance;
};

struct BiasFeatureSet {
  std::string attribute;
  int y = 0;
  std::vector<int> A;  // ascending
};

/// Sums ig_scores of F(s) = Pr(y | s) over every support sample and every
/// timestep except the last (T-1). Codes are fresh encodes of the cached h.
/// per_input uses, at each timestep, the mean support code as the baseline.
/// Summation is exact, so the table does not depend on support order.
AttributionTable aggregate(const std::vector<SupportSample>& support, const probe::ProbeParams& probe,
                           const sae::SaeParams& sae, const AttributionConfig& cfg);

/// The unrounded per-feature sums behind aggregate(). Sums over disjoint
/// supports add up exactly to the sums over their union.
std::vector<core::ExactSum> aggregate_sums(const std::vector<SupportSample>& support, const probe::ProbeParams& probe,
                                           const sae::SaeParams& sae, const AttributionConfig& cfg);

/// Indices of the tau largest scores (ties to the lower index), ascending.
std::vector<int> top_tau(const std::vector<double>& scores, int tau);
BiasFeatureSet select_top_tau(const AttributionTable& table, int tau);

/// Feature set for steering `target` alongside an edit already using `taken`
/// for `other`'s class: up to tau positive-score features of `target`, none in
/// `taken` and none with a negative score in `other`. Amplifying a feature
/// that opposes the other class would undo that edit.
BiasFeatureSet select_compatible(const AttributionTable& target, const AttributionTable& other,
                                 const std::vector<int>& taken, int tau);

/// Mean code value per feature over all support codes at t < T-1 (unfired
/// entries count as zero); the tau largest. `y` only labels the result.
BiasFeatureSet activation_select(const std::vector<SupportSample>& support, const sae::SaeParams& sae,
                                 int tau, const std::string& attribute = "", int y = -1);

void save_table(const std::filesystem::path& path, const AttributionTable& table);
AttributionTable load_table(const std::filesystem::path& path);
void save_feature_set(const std::filesystem::path& path, const BiasFeatureSet& set);
BiasFeatureSet load_feature_set(const std::filesystem::path& path);

}  // namespace difflens::attribution

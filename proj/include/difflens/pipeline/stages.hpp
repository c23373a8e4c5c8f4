#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "difflens/attribution.hpp"
#include "difflens/diffusion.hpp"
#include "difflens/intervention.hpp"
#include "difflens/metrics.hpp"
#include "difflens/pipeline/config.hpp"
#include "difflens/pipeline/workspace.hpp"
#include "difflens/probe.hpp"
#include "difflens/sae.hpp"

namespace difflens::pipeline {

struct StageInfo {
  std::string name;
  std::vector<std::string> deps;
  std::vector<std::string> sections;
};

/// Stages in execution order.
const std::vector<StageInfo>& stage_table();
const StageInfo& stage_info(const std::string& name);

/// Hash of the stage's own config sections chained with its dependencies' hashes.
std::string stage_config_hash(const ExperimentConfig& cfg, const std::string& stage);

enum class StageStatus { ran, up_to_date };

struct RunOptions {
  bool force = false;
  std::ostream* log = nullptr;
};

/// Runs one stage. Missing or stale dependencies raise DependencyError naming
/// the artifact; an existing result from a different config raises ConfigError
/// unless `force` is set; an intact result from the same config is left alone.
StageStatus run_stage(const std::string& stage, const ExperimentConfig& cfg, const Workspace& ws,
                      const RunOptions& options = {});
void run_all(const ExperimentConfig& cfg, const Workspace& ws, const RunOptions& options = {});

/// Trained models and fixed evaluation data, loaded from a workspace that has
/// completed train-probe.
struct Models {
  diffusion::DenoiserCheckpoint den;
  sae::SaeParams sae;
  probe::OracleParams oracle_a;
  probe::OracleParams oracle_b;
  probe::ProbeParams probe_a;
  probe::ProbeParams probe_b;
  metrics::PcaModel pca;
  metrics::PixelWhitener whitener;
  Eigen::MatrixXd reference;  // held-out real images, one per column

  static Models load(const Workspace& ws);
  const probe::OracleParams& oracle(const std::string& attribute) const;
};

/// Chains 0..n-1 of `seed`, one flattened image per column.
Eigen::MatrixXd generate(const Models& models, std::size_t n, std::uint64_t seed, const diffusion::Hook& hook = {});

/// Fraction of columns the oracle assigns to `cls`.
double class_ratio(const Models& models, const Eigen::MatrixXd& images, const std::string& attribute, int cls);

/// Least frequent attr_a class of the training data.
int minority_class(const ExperimentConfig& cfg);

/// Spec steering every chain toward `cls` of `attribute`: p is one-hot on
/// `cls`, whose entry edits `features` by beta; other classes are identity.
intervention::InterventionSpec steering_spec(const std::string& attribute, int num_classes, int cls,
                                             const std::vector<int>& features, double beta,
                                             intervention::Mode mode, std::uint64_t seed);

/// Calibrates beta for `features` so that the oracle ratio of `cls` reaches
/// the configured target on cfg.intervention.samples chains of `seed`.
intervention::CalibrationResult calibrate_features(const Models& models, const ExperimentConfig& cfg,
                                                   const std::vector<int>& features, int cls, std::uint64_t seed);

struct RunMetrics {
  std::size_t n = 0;
  std::size_t count_pos = 0;
  double ratio = 0.0;
  double fd = 0.0;
  double frechet = 0.0;
  double similarity = 0.0;
  std::size_t similarity_skipped = 0;
};

/// Oracle ratio of `cls` and FD for attr_a, Frechet against the reference
/// set, similarity to `unedited` (same chains).
RunMetrics evaluate_images(const Models& models, const Eigen::MatrixXd& images, const Eigen::MatrixXd& unedited,
                           int cls);

/// Oracle log ratio of `cls` vs the rest under beta scaling of `features`.
metrics::ControlCurve run_control_curve(const Models& models, const ExperimentConfig& cfg,
                                        const std::vector<int>& features, int cls, std::uint64_t seed);

}  // namespace difflens::pipeline

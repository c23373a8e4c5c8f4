#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace difflens::pipeline {

struct DataConfig {
  int side = 16;
  int n_train = 10000;
  int n_heldout = 2000;
  std::vector<double> attr_a_probs{0.7, 0.3};
  std::vector<double> attr_b_probs{0.5, 0.3, 0.2};
  std::uint64_t seed = 1;
};

struct ScheduleConfig {
  int T = 50;
  double beta_min = 1e-4;
  double beta_max = 0.2;
};

struct DenoiserConfig {
  int hidden1 = 256;
  int bottleneck = 64;
  int hidden2 = 256;
  int embed = 32;
  int epochs = 150;
  double lr = 0.1;
  int batch = 64;
  std::uint64_t seed = 2;
};

struct DumpConfig {
  int chains = 2000;
  std::uint64_t seed = 3;
};

struct SaeConfig {
  int m = 512;
  int k = 32;
  double lr = 0.01;
  int epochs = 5;
  int batch = 64;
  std::uint64_t seed = 4;
};

struct ProbeConfig {
  double lr = 0.5;
  int iterations = 300;
  double holdout = 0.2;
  int oracle_hidden = 64;
  int oracle_epochs = 20;
  double oracle_lr = 0.1;
  int oracle_batch = 64;
  double oracle_min_accuracy = 0.9;
  std::uint64_t oracle_seed = 5;
  int pca_dim = 16;
};

struct AttributionSection {
  int q = 50;
  int tau = 16;
  int support = 256;
  std::string baseline = "zero";
};

struct InterventionConfig {
  std::string attribute = "attr_a";
  std::string mode = "scaling";
  double target_ratio = 0.5;
  double beta_lo = 0.125;
  double beta_hi = 8.0;
  double tolerance = 0.01;
  int max_iter = 12;
  int samples = 2000;
  std::uint64_t seed = 6;
};

struct EvaluationConfig {
  int samples = 1000;
  std::uint64_t seed = 7;
  double curve_lo = 0.25;
  double curve_hi = 4.0;
  int curve_points = 9;
  int curve_samples = 200;
};

struct GalleryConfig {
  int rows = 6;
  int features = 4;
  std::vector<double> betas{0.25, 0.5, 1.0, 2.0, 4.0};
  std::uint64_t seed = 8;
};

struct ExperimentConfig {
  DataConfig data;
  ScheduleConfig schedule;
  DenoiserConfig denoiser;
  DumpConfig dump;
  SaeConfig sae;
  ProbeConfig probe;
  AttributionSection attribution;
  InterventionConfig intervention;
  EvaluationConfig evaluation;
  GalleryConfig gallery;

  /// Checks every field against the preconditions of the module that uses it.
  void validate() const;

  /// Canonical "[section]\nkey = value" text of one section, including defaults.
  std::string section_text(const std::string& section) const;
  std::string to_ini() const;

  static const std::vector<std::string>& section_names();
};

/// Parses an INI file over the defaults. Unknown sections or keys and
/// unparsable values raise ConfigError; the result is validated.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Sets one field from its text form; does not validate the whole config.
void set_field(ExperimentConfig& cfg, const std::string& section, const std::string& key, const std::string& value);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace difflens::pipeline

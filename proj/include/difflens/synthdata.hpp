#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "difflens/core/rng.hpp"
#include "difflens/core/tensor.hpp"

namespace difflens::synth {

inline constexpr int kClassesA = 2;  // glyph family: 0 = disc, 1 = cross
inline constexpr int kClassesB = 3;  // glyph radius: small / medium / large
inline constexpr int kDefaultSide = 16;

struct FactorVector {
  int attr_a = 0;
  int attr_b = 0;
  double nuisance = 0.0;               // background shade in [0, 1]
  std::array<double, 2> jitter{0, 0};  // glyph offset in [-1, 1]^2 (x, y)

  void validate() const;
  friend bool operator==(const FactorVector&, const FactorVector&) = default;
};

struct BiasSpec {
  std::array<double, kClassesA> attr_a_probs{0.7, 0.3};
  std::array<double, kClassesB> attr_b_probs{0.5, 0.3, 0.2};

  void validate() const;
};

struct LabeledImage {
  core::Tensor image;  // side x side, entries in [-1, 1]
  FactorVector factors;
};

/// Background level for a nuisance value; glyph pixels are always +1.
double background_level(double nuisance);

/// Renders one glyph with 4x4 supersampled coverage. Throws ConfigError for
/// side < 8 or invalid factors.
core::Tensor render(const FactorVector& factors, int side = kDefaultSide);

std::vector<LabeledImage> sample_dataset(std::size_t n, const BiasSpec& spec, int side,
                                         core::RngStream& rng);

// On disk: <dir>/manifest.txt with a header line and one record per sample
//   file attr_a attr_b nuisance jitter_x jitter_y
// plus <dir>/<file> tensors in the core container format.
void save_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& data);
std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir);

/// Images as columns of a (side*side) x n matrix.
Eigen::MatrixXd image_matrix(const std::vector<LabeledImage>& data);
std::vector<int> labels(const std::vector<LabeledImage>& data, bool attr_b);

}  // namespace difflens::synth

#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "difflens/core/tensor.hpp"

namespace difflens::core {

/// Philox4x64-10 block function (Salmon et al., Random123). Counter-based:
/// the output depends only on (counter, key).
std::array<std::uint64_t, 4> philox4x64(std::array<std::uint64_t, 4> counter,
                                        std::array<std::uint64_t, 2> key);

/// Reproducible random stream keyed by (seed, stream_id). Two streams with the
/// same key produce the same draws in the same order; different stream ids
/// give statistically independent sequences, so parallel workers each take
/// their own id.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return key_[0]; }
  std::uint64_t stream_id() const { return key_[1]; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal (Box-Muller).
  double normal();
  /// Index drawn with the given (normalized) probabilities.
  std::size_t categorical(std::span<const double> probs);

 private:
  void refill();

  std::array<std::uint64_t, 2> key_;
  std::uint64_t block_ = 0;
  std::array<std::uint64_t, 4> buffer_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Tensor of i.i.d. standard normals.
Tensor gaussian_draw(RngStream& rng, Shape shape);
void fill_gaussian(RngStream& rng, std::span<double> out);

/// Fisher-Yates over [0, n), independent of the standard library's shuffle.
std::vector<std::size_t> permutation(RngStream& rng, std::size_t n);

}  // namespace difflens::core

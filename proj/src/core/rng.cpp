#include "difflens/core/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "difflens/core/error.hpp"

namespace difflens::core {

namespace {

constexpr std::uint64_t kMul0 = 0xD2E7470EE14C6C93ULL;
constexpr std::uint64_t kMul1 = 0xCA5A826395121157ULL;
constexpr std::uint64_t kWeyl0 = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kWeyl1 = 0xBB67AE8584CAA73BULL;

inline void mulhilo(std::uint64_t a, std::uint64_t b, std::uint64_t& hi, std::uint64_t& lo) {
  const unsigned __int128 p = static_cast<unsigned __int128>(a) * b;
  hi = static_cast<std::uint64_t>(p >> 64);
  lo = static_cast<std::uint64_t>(p);
}

}  // namespace

std::array<std::uint64_t, 4> philox4x64(std::array<std::uint64_t, 4> c,
                                        std::array<std::uint64_t, 2> k) {
  for (int round = 0; round < 10; ++round) {
    std::uint64_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, c[0], hi0, lo0);
    mulhilo(kMul1, c[2], hi1, lo1);
    c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    k[0] += kWeyl0;
    k[1] += kWeyl1;
  }
  return c;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id) : key_{seed, stream_id} {}

void RngStream::refill() {
  buffer_ = philox4x64({block_, 0, 0, 0}, key_);
  ++block_;
  used_ = 0;
}

std::uint64_t RngStream::next_u64() {
  if (used_ == 4) refill();
  return buffer_[used_++];
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw ConfigError("RngStream::below requires n > 0");
  // Rejection sampling keeps the draw exactly uniform.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - 
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t RngStream::categorical(std::span<const double> probs) {
  if (probs.empty()) throw ConfigError("categorical draw over an empty distribution");
  const double u = uniform();
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    acc += probs[i];
    if (u < acc && probs[i] > 0.0) return i;
  }
  return last_positive;
}

Tensor gaussian_draw(RngStream& rng, Shape shape) {
  Tensor t(std::move(shape));
  fill_gaussian(rng, t.data());
  return t;
}

void fill_gaussian(RngStream& rng, std::span<double> out) {
  for (double& v : out) v = rng.normal();
}

std::vector<std::size_t> permutation(RngStream& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace difflens::core

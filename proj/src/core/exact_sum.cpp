#include "difflens/core/exact_sum.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "difflens/core/error.hpp"

namespace difflens::core {

namespace {

constexpr int kFracBits = 160;
constexpr int kTotalBits = 256;

using Limbs = std::array<std::uint64_t, 4>;

void add_limbs(Limbs& a, const Limbs& b) {
  unsigned __int128 carry = 0;
  for (int i = 0; i < 4; ++i) {
    const unsigned __int128 s = static_cast<unsigned __int128>(a[i]) + b[i] + carry;
    a[i] = static_cast<std::uint64_t>(s);
    carry = s >> 64;
  }
}

void negate(Limbs& a) {
  for (auto& l : a) l = ~l;
  add_limbs(a, Limbs{1, 0, 0, 0});
}

bool is_negative(const Limbs& a) { return (a[3] >> 63) != 0; }

}  // namespace

void ExactSum::add_shifted(std::uint64_t mantissa, int shift, bool negative) {
  Limbs term{};
  const int limb = shift / 64;
  const int bit = shift % 64;
  term[limb] = mantissa << bit;
  if (bit != 0 && limb + 1 < 4) term[limb + 1] = mantissa >> (64 - bit);
  if (negative) negate(term);
  add_limbs(limbs_, term);
}

void ExactSum::add(double x) {
  if (x == 0.0) return;
  if (!std::isfinite(x)) throw NumericError("ExactSum: non-finite addend");
  int exp2 = 0;
  const double frac = std::frexp(std::abs(x), &exp2);  // |x| = frac * 2^exp2
  auto mantissa = static_cast<std::uint64_t>(std::ldexp(frac, 53));
  int shift = exp2 - 53 + kFracBits;
  if (shift < 0) {
    if (shift <= -54) return;  // below half a grid unit
    const int drop = -shift;
    const std::uint64_t half = std::uint64_t{1} << (drop - 1);
    const std::uint64_t rem = mantissa & ((std::uint64_t{1} << drop) - 1);
    mantissa >>= drop;
    if (rem > half || (rem == half && (mantissa & 1))) ++mantissa;
    shift = 0;
    if (mantissa == 0) return;
  }
  if (shift + 54 >= kTotalBits) throw NumericError("ExactSum: addend magnitude out of range");
  add_shifted(mantissa, shift, x < 0.0);
}

void ExactSum::add(const ExactSum& other) { add_limbs(limbs_, other.limbs_); }

namespace {

// Correctly rounded double of the unsigned magnitude `mag` (little-endian
// limbs) scaled by 2^-frac_bits.
template <std::size_t N>
double to_double(const std::array<std::uint64_t, N>& mag, int frac_bits) {
  int top = -1;
  for (int i = static_cast<int>(N) - 1; i >= 0; --i) {
    if (mag[i] != 0) {
      top = i * 64 + 63 - std::countl_zero(mag[i]);
      break;
    }
  }
  if (top < 0) return 0.0;

  // Take the 64 bits ending at `top`, fold everything below into a sticky bit
  // so the u64 -> double conversion rounds correctly.
  const int low = top - 63;
  std::uint64_t window = 0;
  bool sticky = false;
  if (low <= 0) {
    window = mag[0];  // top < 64, so the higher limbs are zero
  } else {
    const int limb = low / 64;
    const int bit = low % 64;
    window = mag[limb] >> bit;
    if (bit != 0 && limb + 1 < static_cast<int>(N)) window |= mag[limb + 1] << (64 - bit);
    for (int i = 0; i < limb; ++i) sticky = sticky || mag[i] != 0;
    if (bit != 0) sticky = sticky || (mag[limb] & ((std::uint64_t{1} << bit) - 1)) != 0;
  }
  if (sticky) window |= 1;
  return std::ldexp(static_cast<double>(window), (low > 0 ? low : 0) - frac_bits);
}

}  // namespace

double ExactSum::value() const {
  Limbs mag = limbs_;
  const bool negative = is_negative(mag);
  if (negative) negate(mag);
  const double v = to_double(mag, kFracBits);
  return negative ? -v : v;
}

double ExactSum::quotient(std::uint64_t d) const {
  if (d == 0) throw ConfigError("ExactSum: division by zero");
  Limbs mag = limbs_;
  const bool negative = is_negative(mag);
  if (negative) negate(mag);
  // Widen by one limb of fraction so the quotient keeps 64 extra bits, then
  // long-divide; a nonzero remainder becomes a sticky low bit.
  std::array<std::uint64_t, 5> wide{0, mag[0], mag[1], mag[2], mag[3]};
  unsigned __int128 rem = 0;
  for (int i = 4; i >= 0; --i) {
    const unsigned __int128 cur = (rem << 64) | wide[i];
    wide[i] = static_cast<std::uint64_t>(cur / d);
    rem = cur % d;
  }
  if (rem != 0) wide[0] |= 1;
  const double v = to_double(wide, kFracBits + 64);
  return negative ? -v : v;
}

}  // namespace difflens::core

#pragma once

#include <array>
#include <cstdint>

namespace difflens::core {

/// Order-independent exact summation of doubles: a 256-bit two's-complement
/// fixed-point accumulator with 160 fractional bits. Any double with
/// 2^-107 <= |x| < 2^95 is represented exactly; smaller magnitudes are
/// rounded to the 2^-160 grid. Sums are therefore associative and commutative
/// bit for bit, and value() is the correctly rounded double of the exact sum.
class ExactSum {
 public:
  ExactSum() = default;
  explicit ExactSum(double x) { add(x); }

  void add(double x);
  void add(const ExactSum& other);
  double value() const;
  /// Correctly rounded double of the exact sum divided by d (d > 0).
  double quotient(std::uint64_t d) const;

  friend bool operator==(const ExactSum&, const ExactSum&) = default;

 private:
  void add_shifted(std::uint64_t mantissa, int shift, bool negative);

  std::array<std::uint64_t, 4> limbs_{};  // little-endian limbs
};

}  // namespace difflens::core

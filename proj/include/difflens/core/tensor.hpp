#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace difflens::core {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

/// Dense row-major array of doubles. An empty shape denotes a scalar holding
/// one entry.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor from_vector(const Eigen::VectorXd& v);
  /// Image/matrix view: rows x cols, row-major.
  static Tensor from_matrix(const Eigen::MatrixXd& m);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  Eigen::Map<const Eigen::VectorXd> flat() const {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }
  Eigen::Map<Eigen::VectorXd> flat() {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }

  /// Rank-2 tensor as an Eigen matrix (copy).
  Eigen::MatrixXd to_matrix() const;

  bool all_finite() const;
  /// Throws NumericError naming `context` if any entry is NaN/Inf.
  void check_finite(const char* context) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Same shape and identical bit patterns in every entry.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace difflens::core

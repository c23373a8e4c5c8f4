#include "difflens/core/tensor.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "difflens/core/error.hpp"

namespace difflens::core {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape size " + std::to_string(shape_size(shape_)));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::from_vector(const Eigen::VectorXd& v) {
  return Tensor({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data_.data(), m.rows(), m.cols()) = m;
  return t;
}

Eigen::MatrixXd Tensor::to_matrix() const {
  if (rank() != 2) throw ConfigError("to_matrix requires a rank-2 tensor");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      data_.data(), static_cast<Eigen::Index>(shape_[0]), static_cast<Eigen::Index>(shape_[1]));
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_finite(const char* context) const {
  if (!all_finite()) throw NumericError(std::string("non-finite value in ") + context);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

}  // namespace difflens::core

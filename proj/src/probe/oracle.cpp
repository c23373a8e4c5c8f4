#include <cmath>

#include "difflens/core/error.hpp"
#include "difflens/core/rng.hpp"
#include "difflens/core/tensor_io.hpp"
#include "difflens/probe.hpp"

namespace difflens::probe {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;

void check_input(const MatrixXd& X, const OracleParams& o) {
  if (X.rows() != o.W1.cols()) throw ConfigError("oracle: image size mismatch");
}

double accuracy(const MatrixXd& X, const std::vector<int>& labels, const OracleParams& o) {
  const auto pred = oracle_labels(X, o);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace

double oracle_loss(const OracleParams& o, const MatrixXd& X, const std::vector<int>& labels,
                   OracleParams* grad) {
  check_input(X, o);
  const MatrixXd A = ((o.W1 * X).colwise() + o.b1).array().tanh().matrix();
  MatrixXd gW2;
  VectorXd gb2;
  const double loss = linear_ce_loss(o.W2, o.b2, A, labels, grad ? &gW2 : nullptr, grad ? &gb2 : nullptr);
  if (!grad) return loss;
  const MatrixXd logits = (o.W2 * A).colwise() + o.b2;
  MatrixXd D(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    D.col(j) = softmax(logits.col(j));
    D(labels[static_cast<std::size_t>(j)], j) -= 1.0;
  }
  D /= static_cast<double>(X.cols());
  const MatrixXd dZ = (o.W2.transpose() * D).cwiseProduct((1.0 - A.array().square()).matrix());
  grad->num_classes = o.num_classes;
  grad->W2 = gW2;
  grad->b2 = gb2;
  grad->W1 = dZ * X.transpose();
  grad->b1 = dZ.rowwise().sum();
  return loss;
}

OracleParams train_oracle(const MatrixXd& X, const std::vector<int>& labels, int num_classes,
                          const MatrixXd& heldout_X, const std::vector<int>& heldout_labels,
                          const OracleTrainConfig& config, const std::string& attribute) {
  if (X.cols() == 0 || labels.size() != static_cast<std::size_t>(X.cols()))
    throw ConfigError("train_oracle: empty or inconsistent dataset");
  if (heldout_X.cols() == 0 || heldout_labels.size() != static_cast<std::size_t>(heldout_X.cols()))
    throw ConfigError("train_oracle: empty or inconsistent held-out set");
  if (config.hidden < 1 || config.epochs < 1 || config.batch < 1 || !(config.lr >= 0.0))
    throw ConfigError("train_oracle: invalid config");

  OracleParams o;
  o.attribute = attribute;
  o.num_classes = num_classes;
  o.W1.resize(config.hidden, X.rows());
  o.b1 = VectorXd::Zero(config.hidden);
  o.W2.resize(num_classes, config.hidden);
  o.b2 = VectorXd::Zero(num_classes);
  core::RngStream init(config.seed, kInitStream);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(X.rows()));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(config.hidden));
  for (Eigen::Index i = 0; i < o.W1.size(); ++i) o.W1.data()[i] = s1 * init.normal();
  for (Eigen::Index i = 0; i < o.W2.size(); ++i) o.W2.data()[i] = s2 * init.normal();

  core::RngStream rng(config.seed, kShuffleStream);
  const auto N = static_cast<std::size_t>(X.cols());
  OracleParams g;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = core::permutation(rng, N);
    for (std::size_t start = 0; start < N; start += static_cast<std::size_t>(config.batch)) {
      const std::size_t end = std::min(N, start + static_cast<std::size_t>(config.batch));
      MatrixXd xb(X.rows(), static_cast<Eigen::Index>(end - start));
      std::vector<int> yb;
      for (std::size_t j = start; j < end; ++j) {
        xb.col(static_cast<Eigen::Index>(j - start)) = X.col(static_cast<Eigen::Index>(order[j]));
        yb.push_back(labels[order[j]]);
      }
      const double loss = oracle_loss(o, xb, yb, &g);
      if (!std::isfinite(loss)) throw NumericError("train_oracle: non-finite loss in epoch " + std::to_string(epoch));
      o.W1 -= config.lr * g.W1;
      o.b1 -= config.lr * g.b1;
      o.W2 -= config.lr * g.W2;
      o.b2 -= config.lr * g.b2;
    }
  }
  o.heldout_accuracy = accuracy(heldout_X, heldout_labels, o);
  if (o.heldout_accuracy < config.min_accuracy)
    throw NumericError("train_oracle: held-out accuracy " + core::format_double(o.heldout_accuracy) +
                       " for '" + attribute + "' is below " + core::format_double(config.min_accuracy) +
                       "; regenerate the data or train longer");
  return o;
}

MatrixXd oracle_classify_batch(const MatrixXd& X, const OracleParams& o) {
  check_input(X, o);
  const MatrixXd logits = (o.W2 * ((o.W1 * X).colwise() + o.b1).array().tanh().matrix()).colwise() + o.b2;
  MatrixXd P(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) P.col(j) = softmax(logits.col(j));
  return P;
}

VectorXd oracle_classify(const core::Tensor& image, const OracleParams& o) {
  return oracle_classify_batch(MatrixXd(image.flat()), o).col(0);
}

std::vector<int> oracle_labels(const MatrixXd& X, const OracleParams& o) {
  const MatrixXd P = oracle_classify_batch(X, o);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(P.cols()));
  for (Eigen::Index j = 0; j < P.cols(); ++j) out.push_back(argmax(P.col(j)));
  return out;
}

void save_oracle(const std::filesystem::path& path, const OracleParams& o) {
  core::Archive ar;
  ar.header["attribute"] = o.attribute;
  ar.header["num_classes"] = std::to_string(o.num_classes);
  ar.header["heldout_accuracy"] = core::format_double(o.heldout_accuracy);
  ar.put("W1", core::Tensor::from_matrix(o.W1));
  ar.put("b1", core::Tensor::from_vector(o.b1));
  ar.put("W2", core::Tensor::from_matrix(o.W2));
  ar.put("b2", core::Tensor::from_vector(o.b2));
  ar.save(path);
}

OracleParams load_oracle(const std::filesystem::path& path) {
  const auto ar = core::Archive::load(path);
  OracleParams o;
  o.attribute = ar.meta("attribute");
  o.num_classes = static_cast<int>(ar.meta_int("num_classes"));
  o.heldout_accuracy = ar.meta_double("heldout_accuracy");
  o.W1 = ar.get("W1").to_matrix();
  o.b1 = ar.get("b1").flat();
  o.W2 = ar.get("W2").to_matrix();
  o.b2 = ar.get("b2").flat();
  if (o.W2.rows() != o.num_classes || o.W2.cols() != o.W1.rows() || o.b1.size() != o.W1.rows() ||
      o.b2.size() != o.num_classes)
    throw FormatError("oracle checkpoint: inconsistent shapes");
  return o;
}

}  // namespace difflens::probe

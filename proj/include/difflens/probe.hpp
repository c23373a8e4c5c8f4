#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "difflens/core/tensor.hpp"
#include "difflens/sae.hpp"

namespace difflens::probe {

/// Numerically stable softmax.
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

/// Mean softmax cross-entropy of logits W x + b over the columns of X. When
/// gW/gb are non-null they receive the gradient.
double linear_ce_loss(const Eigen::MatrixXd& W, const Eigen::VectorXd& b, const Eigen::MatrixXd& X,
                      const std::vector<int>& labels, Eigen::MatrixXd* gW = nullptr,
                      Eigen::VectorXd* gb = nullptr);

// One linear softmax head per timestep over the bottleneck vector h.
struct ProbeParams {
  std::string attribute;
  int num_classes = 2;
  std::vector<Eigen::MatrixXd> W;  // per t: num_classes x n
  std::vector<Eigen::VectorXd> b;  // per t: num_classes
  std::vector<double> heldout_accuracy;

  int T() const { return static_cast<int>(W.size()); }
  int n() const { return W.empty() ? 0 : static_cast<int>(W.front().cols()); }
};

struct ProbeExample {
  Eigen::VectorXd h;
  int t = 0;
  int label = 0;
};

struct ProbeTrainConfig {
  double lr = 0.5;
  int iterations = 300;
  double holdout_fraction = 0.2;
};

/// Full-batch gradient descent on each timestep's cross-entropy from a zero
/// head. The last `holdout_fraction` of each timestep's examples (in input
/// order) is held out for the accuracy log. Throws ConfigError listing any
/// timestep in [0, T) without examples.
ProbeParams train_probe(const std::vector<ProbeExample>& examples, int T, int num_classes,
                        const ProbeTrainConfig& config, const std::string& attribute = "");

Eigen::VectorXd probe_probs(const Eigen::VectorXd& h, int t, const ProbeParams& probe);
double probe_prob(const Eigen::VectorXd& h, int t, int y, const ProbeParams& probe);

struct ValueGrad {
  double value = 0.0;
  Eigen::VectorXd grad;
};

/// F(s) = softmax(W_t (W_dec s + b_pre) + b_t)_y and its gradient in s, taken on
/// the dense code (no TopK gating).
ValueGrad probe_prob_on_code(const Eigen::VectorXd& s, int t, int y, const ProbeParams& probe,
                             const sae::SaeParams& sae);

/// The same composition folded into one affine map of the code: logits = M s + c
/// with M = W_t W_dec and c = W_t b_pre + b_t.
struct CodeProbe {
  Eigen::MatrixXd M;
  Eigen::VectorXd c;
  int y = 0;

  static CodeProbe compose(const ProbeParams& probe, const sae::SaeParams& sae, int t, int y);
  ValueGrad operator()(const Eigen::VectorXd& s) const;
};

void save_probe(const std::filesystem::path& path, const ProbeParams& probe);
ProbeParams load_probe(const std::filesystem::path& path);

// Image-space classifier standing in for an external attribute classifier:
// tanh hidden layer, softmax output.
struct OracleParams {
  std::string attribute;
  int num_classes = 2;
  Eigen::MatrixXd W1;  // hidden x pixels
  Eigen::VectorXd b1;
  Eigen::MatrixXd W2;  // classes x hidden
  Eigen::VectorXd b2;
  double heldout_accuracy = 0.0;
};

struct OracleTrainConfig {
  int hidden = 64;
  int epochs = 20;
  double lr = 0.1;
  int batch = 64;
  std::uint64_t seed = 0;
  double min_accuracy = 0.9;
};

/// Mean cross-entropy over the columns of X; fills `grad` (same layout) if given.
double oracle_loss(const OracleParams& params, const Eigen::MatrixXd& X, const std::vector<int>& labels,
                   OracleParams* grad = nullptr);

/// Minibatch SGD. Accuracy on (heldout_X, heldout_labels) is recorded; below
/// config.min_accuracy the oracle is rejected with NumericError.
OracleParams train_oracle(const Eigen::MatrixXd& X, const std::vector<int>& labels, int num_classes,
                          const Eigen::MatrixXd& heldout_X, const std::vector<int>& heldout_labels,
                          const OracleTrainConfig& config, const std::string& attribute = "");

Eigen::VectorXd oracle_classify(const core::Tensor& image, const OracleParams& oracle);
/// Softmax per column, classes x N.
Eigen::MatrixXd oracle_classify_batch(const Eigen::MatrixXd& X, const OracleParams& oracle);
std::vector<int> oracle_labels(const Eigen::MatrixXd& X, const OracleParams& oracle);

void save_oracle(const std::filesystem::path& path, const OracleParams& oracle);
OracleParams load_oracle(const std::filesystem::path& path);

/// First index of the maximum.
int argmax(const Eigen::VectorXd& v);

}  // namespace difflens::probe

#include "difflens/probe.hpp"

#include <cmath>

#include "difflens/core/error.hpp"
#include "difflens/core/tensor_io.hpp"

namespace difflens::probe {

using Eigen::MatrixXd;
using Eigen::VectorXd;

VectorXd softmax(const VectorXd& logits) {
  const double mx = logits.maxCoeff();
  VectorXd e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

int argmax(const VectorXd& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

double linear_ce_loss(const MatrixXd& W, const VectorXd& b, const MatrixXd& X,
                      const std::vector<int>& labels, MatrixXd* gW, VectorXd* gb) {
  const auto N = X.cols();
  if (N == 0 || labels.size() != static_cast<std::size_t>(N) || W.cols() != X.rows() || W.rows() != b.size())
    throw ConfigError("linear_ce_loss: inconsistent dimensions");
  const MatrixXd logits = (W * X).colwise() + b;
  MatrixXd D(W.rows(), N);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < N; ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= W.rows()) throw ConfigError("linear_ce_loss: label out of range");
    const VectorXd p = softmax(logits.col(j));
    loss -= std::log(p[y]);
    D.col(j) = p;
    D(y, j) -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(N);
  if (gW) *gW = D * X.transpose() * inv;
  if (gb) *gb = D.rowwise().sum() * inv;
  return loss * inv;
}

ProbeParams train_probe(const std::vector<ProbeExample>& examples, int T, int num_classes,
                        const ProbeTrainConfig& config, const std::string& attribute) {
  if (T < 1 || num_classes < 2) throw ConfigError("train_probe: need T >= 1 and at least 2 classes");
  if (!(config.lr >= 0.0) || config.iterations < 0 || !(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0))
    throw ConfigError("train_probe: invalid config");
  if (examples.empty()) throw ConfigError("train_probe: no examples");
  const auto n = examples.front().h.size();
  std::vector<std::vector<const ProbeExample*>> by_t(static_cast<std::size_t>(T));
  for (const auto& ex : examples) {
    if (ex.t < 0 || ex.t >= T) throw ConfigError("train_probe: timestep out of range");
    if (ex.label < 0 || ex.label >= num_classes) throw ConfigError("train_probe: label out of range");
    if (ex.h.size() != n) throw ConfigError("train_probe: inconsistent hidden-state lengths");
    by_t[static_cast<std::size_t>(ex.t)].push_back(&ex);
  }
  std::string missing;
  for (int t = 0; t < T; ++t)
    if (by_t[static_cast<std::size_t>(t)].empty()) missing += (missing.empty() ? "" : ",") + std::to_string(t);
  if (!missing.empty()) throw ConfigError("train_probe: no examples for timesteps " + missing);

  ProbeParams probe;
  probe.attribute = attribute;
  probe.num_classes = num_classes;
  for (int t = 0; t < T; ++t) {
    const auto& group = by_t[static_cast<std::size_t>(t)];
    const auto count = group.size();
    const auto held = static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(count)));
    const auto train = count - held;
    MatrixXd X(n, static_cast<Eigen::Index>(count));
    std::vector<int> y(count);
    for (std::size_t j = 0; j < count; ++j) {
      X.col(static_cast<Eigen::Index>(j)) = group[j]->h;
      y[j] = group[j]->label;
    }
    const MatrixXd Xtr = X.leftCols(static_cast<Eigen::Index>(train));
    const std::vector<int> ytr(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(train));
    MatrixXd W = MatrixXd::Zero(num_classes, n);
    VectorXd b = VectorXd::Zero(num_classes);
    MatrixXd gW;
    VectorXd gb;
    for (int it = 0; it < config.iterations; ++it) {
      const double loss = linear_ce_loss(W, b, Xtr, ytr, &gW, &gb);
      if (!std::isfinite(loss)) throw NumericError("train_probe: non-finite loss at t=" + std::to_string(t));
      W -= config.lr * gW;
      b -= config.lr * gb;
    }
    const std::size_t eval_begin = held > 0 ? train : 0;
    std::size_t correct = 0;
    for (std::size_t j = eval_begin; j < count; ++j)
      correct += argmax(W * X.col(static_cast<Eigen::Index>(j)) + b) == y[j] ? 1 : 0;
    probe.heldout_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(count - eval_begin));
    probe.W.push_back(std::move(W));
    probe.b.push_back(std::move(b));
  }
  return probe;
}

VectorXd probe_probs(const VectorXd& h, int t, const ProbeParams& probe) {
  if (t < 0 || t >= probe.T()) throw ConfigError("probe: timestep out of range");
  if (h.size() != probe.n()) throw ConfigError("probe: hidden-state length mismatch");
  return softmax(probe.W[static_cast<std::size_t>(t)] * h + probe.b[static_cast<std::size_t>(t)]);
}

double probe_prob(const VectorXd& h, int t, int y, const ProbeParams& probe) {
  if (y < 0 || y >= probe.num_classes) throw ConfigError("probe: class out of range");
  return probe_probs(h, t, probe)[y];
}

ValueGrad probe_prob_on_code(const VectorXd& s, int t, int y, const ProbeParams& probe,
                             const sae::SaeParams& sae) {
  if (s.size() != sae.m() || probe.n() != sae.n()) throw ConfigError("probe_prob_on_code: dimension mismatch");
  if (y < 0 || y >= probe.num_classes) throw ConfigError("probe: class out of range");
  const VectorXd h = sae::decode(s, sae);
  const VectorXd p = probe_probs(h, t, probe);
  VectorXd dlogits = -p[y] * p;
  dlogits[y] += p[y];
  const VectorXd dh = probe.W[static_cast<std::size_t>(t)].transpose() * dlogits;
  return {p[y], sae.W_dec.transpose() * dh};
}

CodeProbe CodeProbe::compose(const ProbeParams& probe, const sae::SaeParams& sae, int t, int y) {
  if (probe.n() != sae.n()) throw ConfigError("CodeProbe: probe and sae disagree on n");
  if (t < 0 || t >= probe.T()) throw ConfigError("CodeProbe: timestep out of range");
  if (y < 0 || y >= probe.num_classes) throw ConfigError("CodeProbe: class out of range");
  const auto& W = probe.W[static_cast<std::size_t>(t)];
  return {W * sae.W_dec, W * sae.b_pre + probe.b[static_cast<std::size_t>(t)], y};
}

ValueGrad CodeProbe::operator()(const VectorXd& s) const {
  if (s.size() != M.cols()) throw ConfigError("CodeProbe: code length mismatch");
  const VectorXd p = softmax(M * s + c);
  VectorXd dlogits = -p[y] * p;
  dlogits[y] += p[y];
  return {p[y], M.transpose() * dlogits};
}

void save_probe(const std::filesystem::path& path, const ProbeParams& probe) {
  core::Archive ar;
  ar.header["attribute"] = probe.attribute;
  ar.header["num_classes"] = std::to_string(probe.num_classes);
  ar.header["T"] = std::to_string(probe.T());
  ar.header["n"] = std::to_string(probe.n());
  std::vector<double> acc = probe.heldout_accuracy;
  acc.resize(static_cast<std::size_t>(probe.T()), 0.0);
  ar.put("heldout_accuracy", core::Tensor({acc.size()}, acc));
  for (int t = 0; t < probe.T(); ++t) {
    ar.put("W_" + std::to_string(t), core::Tensor::from_matrix(probe.W[static_cast<std::size_t>(t)]));
    ar.put("b_" + std::to_string(t), core::Tensor::from_vector(probe.b[static_cast<std::size_t>(t)]));
  }
  ar.save(path);
}

ProbeParams load_probe(const std::filesystem::path& path) {
  const auto ar = core::Archive::load(path);
  ProbeParams p;
  p.attribute = ar.meta("attribute");
  p.num_classes = static_cast<int>(ar.meta_int("num_classes"));
  const auto T = ar.meta_int("T");
  for (long long t = 0; t < T; ++t) {
    p.W.push_back(ar.get("W_" + std::to_string(t)).to_matrix());
    p.b.push_back(ar.get("b_" + std::to_string(t)).flat());
    if (p.W.back().rows() != p.num_classes || p.b.back().size() != p.num_classes)
      throw FormatError("probe checkpoint: head shape mismatch");
  }
  const auto acc = ar.get("heldout_accuracy").data();
  p.heldout_accuracy.assign(acc.begin(), acc.end());
  return p;
}

}  // namespace difflens::probe

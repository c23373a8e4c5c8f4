#include "difflens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "difflens/core/error.hpp"
#include "difflens/core/tensor_io.hpp"

namespace difflens::metrics {

using Eigen::MatrixXd;
using Eigen::VectorXd;

FairnessReport fairness_discrepancy(const MatrixXd& probs, const VectorXd& reference) {
  if (probs.cols() == 0 || probs.rows() == 0) throw ConfigError("fairness_discrepancy: empty input");
  FairnessReport r;
  r.count = static_cast<std::size_t>(probs.cols());
  r.expected = probs.rowwise().mean();
  r.reference = reference.size() == 0 ? VectorXd::Constant(probs.rows(), 1.0 / static_cast<double>(probs.rows()))
                                      : reference;
  if (r.reference.size() != probs.rows()) throw ConfigError("fairness_discrepancy: reference has wrong length");
  r.fd = (r.reference - r.expected).norm();
  return r;
}

MatrixXd PcaModel::project(const MatrixXd& X) const {
  if (X.rows() != mean.size()) throw ConfigError("pca: input dimension mismatch");
  return components * (X.colwise() - mean);
}

PcaModel fit_pca(const MatrixXd& X, int d) {
  if (d < 1 || d > X.rows()) throw ConfigError("fit_pca: d must lie in [1, dim]");
  if (X.cols() < 2) throw ConfigError("fit_pca: need at least two samples");
  PcaModel pca;
  pca.mean = X.rowwise().mean();
  const MatrixXd C = X.colwise() - pca.mean;
  const MatrixXd cov = C * C.transpose() / static_cast<double>(X.cols() - 1);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("fit_pca: eigendecomposition failed");
  pca.components.resize(d, X.rows());
  for (int i = 0; i < d; ++i) {
    VectorXd v = es.eigenvectors().col(X.rows() - 1 - i);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    pca.components.row(i) = v.transpose();
  }
  return pca;
}

void save_pca(const std::filesystem::path& path, const PcaModel& pca) {
  core::Archive ar;
  ar.header["d"] = std::to_string(pca.components.rows());
  ar.put("mean", core::Tensor::from_vector(pca.mean));
  ar.put("components", core::Tensor::from_matrix(pca.components));
  ar.save(path);
}

PcaModel load_pca(const std::filesystem::path& path) {
  const auto ar = core::Archive::load(path);
  PcaModel pca{ar.get("mean").flat(), ar.get("components").to_matrix()};
  if (pca.components.cols() != pca.mean.size()) throw FormatError("pca file: inconsistent shapes");
  return pca;
}

namespace {

struct SqrtResult {
  MatrixXd root;
  bool ridged = false;
};

bool rank_deficient(const VectorXd& eig) {
  const double top = std::max(1.0, eig.cwiseAbs().maxCoeff());
  return eig.minCoeff() <= 1e-12 * top;
}

SqrtResult regularized_sqrt(MatrixXd S) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
  bool ridged = false;
  if (rank_deficient(es.eigenvalues())) {
    S += 1e-6 * MatrixXd::Identity(S.rows(), S.cols());
    es.compute(S);
    ridged = true;
  }
  const VectorXd r = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return {es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose(), ridged};
}

std::pair<VectorXd, MatrixXd> gaussian_fit(const MatrixXd& F) {
  const VectorXd mu = F.rowwise().mean();
  const MatrixXd C = F.colwise() - mu;
  return {mu, C * C.transpose() / static_cast<double>(F.cols() - 1)};
}

}  // namespace

FrechetResult gaussian_frechet(const VectorXd& mu1, const MatrixXd& S1, const VectorXd& mu2, const MatrixXd& S2) {
  const auto d = mu1.size();
  if (mu2.size() != d || S1.rows() != d || S1.cols() != d || S2.rows() != d || S2.cols() != d)
    throw ConfigError("gaussian_frechet: dimension mismatch");
  MatrixXd A = S1, B = S2;
  bool ridged = false;
  for (MatrixXd* S : {&A, &B}) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(*S, Eigen::EigenvaluesOnly);
    if (rank_deficient(es.eigenvalues())) {
      *S += 1e-6 * MatrixXd::Identity(d, d);
      ridged = true;
    }
  }
  const auto ra = regularized_sqrt(A);
  const MatrixXd inner = ra.root * B * ra.root;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu1 - mu2).squaredNorm() + A.trace() + B.trace() - 2.0 * tr_sqrt;
  return {std::max(0.0, value), ridged || ra.ridged};
}

FrechetResult frechet_features(const MatrixXd& A, const MatrixXd& B) {
  if (A.rows() != B.rows()) throw ConfigError("frechet: feature dimension mismatch");
  if (A.cols() < 2 * A.rows() || B.cols() < 2 * B.rows())
    throw ConfigError("frechet: each set needs at least twice as many samples as features");
  const auto [mu1, S1] = gaussian_fit(A);
  const auto [mu2, S2] = gaussian_fit(B);
  return gaussian_frechet(mu1, S1, mu2, S2);
}

FrechetResult desk_frechet(const MatrixXd& samples, const MatrixXd& reference, const PcaModel& pca) {
  return frechet_features(pca.project(samples), pca.project(reference));
}

PixelWhitener PixelWhitener::fit(const MatrixXd& X) {
  if (X.cols() < 2) throw ConfigError("PixelWhitener: need at least two samples");
  PixelWhitener w;
  w.mean = X.rowwise().mean();
  w.scale.resize(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    // A constant pixel's mean can be off by rounding; pin it to the value.
    if (X.row(i).maxCoeff() == X.row(i).minCoeff()) {
      w.mean[i] = X(i, 0);
      w.scale[i] = 1.0;
      continue;
    }
    const double var = (X.row(i).array() - w.mean[i]).square().sum() / static_cast<double>(X.cols() - 1);
    w.scale[i] = std::sqrt(var);
  }
  return w;
}

PixelWhitener PixelWhitener::identity(Eigen::Index dim) {
  return {VectorXd::Zero(dim), VectorXd::Ones(dim)};
}

VectorXd PixelWhitener::apply(const VectorXd& x) const {
  if (x.size() != mean.size()) throw ConfigError("PixelWhitener: dimension mismatch");
  return (x - mean).cwiseQuotient(scale);
}

SimilarityResult pairwise_similarity(const MatrixXd& originals, const MatrixXd& edited, const PixelWhitener& whitener) {
  if (originals.rows() != edited.rows() || originals.cols() != edited.cols())
    throw ConfigError("pairwise_similarity: lists must be equally long and shaped");
  SimilarityResult r;
  double sum = 0.0;
  for (Eigen::Index j = 0; j < originals.cols(); ++j) {
    const VectorXd a = whitener.apply(originals.col(j));
    const VectorXd b = whitener.apply(edited.col(j));
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) {
      ++r.skipped;
      continue;
    }
    sum += a.dot(b) / (na * nb);
    ++r.pairs;
  }
  r.mean = r.pairs ? sum / static_cast<double>(r.pairs) : 0.0;
  return r;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman: need two equal-length series of length >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const Eigen::Map<const VectorXd> a(rx.data(), static_cast<Eigen::Index>(rx.size()));
  const Eigen::Map<const VectorXd> b(ry.data(), static_cast<Eigen::Index>(ry.size()));
  const VectorXd ca = a.array() - a.mean();
  const VectorXd cb = b.array() - b.mean();
  const double denom = ca.norm() * cb.norm();
  return denom > 0.0 ? ca.dot(cb) / denom : 0.0;
}

double smoothed_log_ratio(std::size_t count_pos, std::size_t count_neg) {
  return std::log((static_cast<double>(count_pos) + 1.0) / (static_cast<double>(count_neg) + 1.0));
}

std::vector<double> ControlCurve::betas() const {
  std::vector<double> out;
  for (const auto& p : points) out.push_back(p.beta);
  return out;
}

std::vector<double> ControlCurve::log_ratios() const {
  std::vector<double> out;
  for (const auto& p : points) out.push_back(p.log_ratio);
  return out;
}

double ControlCurve::rank_correlation() const {
  std::vector<double> lb;
  for (double b : betas()) lb.push_back(std::log(b));
  return spearman(lb, log_ratios());
}

ControlCurve control_curve(const std::vector<double>& betas, const std::function<CurvePoint(double)>& evaluate) {
  if (betas.empty()) throw ConfigError("control_curve: empty beta grid");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0) || !std::isfinite(betas[i])) throw ConfigError("control_curve: betas must be positive");
    if (i > 0 && !(betas[i] > betas[i - 1])) throw ConfigError("control_curve: betas must be ascending");
  }
  ControlCurve curve;
  for (double b : betas) {
    curve.points.push_back(evaluate(b));
    curve.points.back().beta = b;
  }
  return curve;
}

std::vector<double> log_grid(double lo, double hi, int n) {
  if (n < 1 || !(lo > 0.0) || !(hi >= lo)) throw ConfigError("log_grid: need n >= 1 and 0 < lo <= hi");
  std::vector<double> out;
  for (int i = 0; i < n; ++i)
    out.push_back(n == 1 ? lo : std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (n - 1)));
  if (n > 1) {
    out.front() = lo;
    out.back() = hi;
  }
  return out;
}

}  // namespace difflens::metrics

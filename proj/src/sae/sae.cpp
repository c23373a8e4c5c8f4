#include "difflens/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "difflens/core/error.hpp"
#include "difflens/core/rng.hpp"
#include "difflens/core/tensor_io.hpp"

namespace difflens::sae {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;

void check_h(const VectorXd& h, const SaeParams& sae) {
  if (h.size() != sae.n()) throw ConfigError("sae: hidden-state length does not match n");
}

std::vector<int> topk_indices(const double* v, int m, int k) {
  std::vector<int> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  auto before = [v](int a, int b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
  if (k < m) std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), before);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

void check_finite(const double* v, Eigen::Index n) {
  for (Eigen::Index i = 0; i < n; ++i)
    if (!std::isfinite(v[i])) throw NumericError("sae: non-finite pre-activation");
}

}  // namespace

void SaeParams::validate() const {
  const auto mm = W_enc.rows();
  const auto nn = W_enc.cols();
  if (mm < 1 || nn < 1) throw ConfigError("sae: empty parameters");
  if (W_dec.rows() != nn || W_dec.cols() != mm || b_pre.size() != nn)
    throw ConfigError("sae: inconsistent parameter shapes");
  if (k < 1 || k > mm) throw ConfigError("sae: k must lie in [1, m]");
  if (!W_enc.allFinite() || !W_dec.allFinite() || !b_pre.allFinite())
    throw NumericError("sae: non-finite parameters");
}

SparseCode topk_mask(const VectorXd& v, int k) {
  const auto m = static_cast<int>(v.size());
  if (k < 1 || k > m) throw ConfigError("topk_mask: k must lie in [1, m]");
  check_finite(v.data(), v.size());
  SparseCode code{VectorXd::Zero(m), topk_indices(v.data(), m, k)};
  for (int i : code.support) code.s[i] = v[i];
  return code;
}

VectorXd pre_activation(const VectorXd& h, const SaeParams& sae) {
  check_h(h, sae);
  return sae.W_enc * (h - sae.b_pre);
}

SparseCode encode(const VectorXd& h, const SaeParams& sae) {
  return topk_mask(pre_activation(h, sae), sae.k);
}

VectorXd decode(const VectorXd& s, const SaeParams& sae) {
  if (s.size() != sae.m()) throw ConfigError("decode: code length does not match m");
  return sae.W_dec * s + sae.b_pre;
}

VectorXd decode(const SparseCode& code, const SaeParams& sae) {
  if (code.s.size() != sae.m()) throw ConfigError("decode: code length does not match m");
  VectorXd out = sae.b_pre;
  for (int i : code.support) out += code.s[i] * sae.W_dec.col(i);
  return out;
}

MatrixXd encode_batch(const MatrixXd& H, const SaeParams& sae) {
  if (H.rows() != sae.n()) throw ConfigError("encode_batch: row count does not match n");
  // Column by column, so a code never depends on the rest of the batch.
  MatrixXd S = MatrixXd::Zero(sae.m(), H.cols());
  VectorXd z(sae.m());
  for (Eigen::Index j = 0; j < H.cols(); ++j) {
    z.noalias() = sae.W_enc * (H.col(j) - sae.b_pre);
    check_finite(z.data(), z.size());
    for (int i : topk_indices(z.data(), sae.m(), sae.k)) S(i, j) = z[i];
  }
  return S;
}

namespace {

double loss_impl(const SaeParams& sae, const MatrixXd& H, SaeParams* grad,
                 const std::vector<std::vector<int>>* frozen_support, std::vector<char>* fired) {
  if (H.rows() != sae.n() || H.cols() == 0) throw ConfigError("sae_loss: malformed batch");
  const auto B = H.cols();
  if (frozen_support && frozen_support->size() != static_cast<std::size_t>(B))
    throw ConfigError("sae_loss: support count mismatch");
  const MatrixXd X = H.colwise() - sae.b_pre;
  const MatrixXd Z = sae.W_enc * X;
  MatrixXd S = MatrixXd::Zero(Z.rows(), B);
  MatrixXd mask = MatrixXd::Zero(Z.rows(), B);
  for (Eigen::Index j = 0; j < B; ++j) {
    std::vector<int> support;
    if (frozen_support) {
      support = (*frozen_support)[static_cast<std::size_t>(j)];
    } else {
      check_finite(Z.col(j).data(), Z.rows());
      support = topk_indices(Z.col(j).data(), sae.m(), sae.k);
    }
    for (int i : support) {
      S(i, j) = Z(i, j);
      mask(i, j) = 1.0;
      if (fired) (*fired)[static_cast<std::size_t>(i)] = 1;
    }
  }
  const MatrixXd R = (sae.W_dec * S).colwise() + sae.b_pre - H;
  const double loss = R.squaredNorm() / static_cast<double>(B);
  if (!grad) return loss;

  const MatrixXd dR = R * (2.0 / static_cast<double>(B));
  grad->k = sae.k;
  grad->W_dec = dR * S.transpose();
  const MatrixXd dZ = (sae.W_dec.transpose() * dR).cwiseProduct(mask);
  grad->W_enc = dZ * X.transpose();
  grad->b_pre = dR.rowwise().sum() - sae.W_enc.transpose() * dZ.rowwise().sum();
  return loss;
}

}  // namespace

double sae_loss(const SaeParams& sae, const MatrixXd& H, SaeParams* grad,
                const std::vector<std::vector<int>>* frozen_support) {
  return loss_impl(sae, H, grad, frozen_support, nullptr);
}

double fvu(const SaeParams& sae, const MatrixXd& H) {
  if (H.cols() == 0) throw ConfigError("fvu: empty activation set");
  const VectorXd mean = H.rowwise().mean();
  const double total = (H.colwise() - mean).squaredNorm();
  if (!(total > 0.0)) throw NumericError("fvu: activations have zero variance");
  double err = 0.0;
  constexpr Eigen::Index kChunk = 4096;
  for (Eigen::Index start = 0; start < H.cols(); start += kChunk) {
    const Eigen::Index len = std::min(kChunk, H.cols() - start);
    const MatrixXd Hc = H.middleCols(start, len);
    err += ((sae.W_dec * encode_batch(Hc, sae)).colwise() + sae.b_pre - Hc).squaredNorm();
  }
  return err / total;
}

SaeParams init_sae(const MatrixXd& H, int m, int k, std::uint64_t seed) {
  const auto n = static_cast<int>(H.rows());
  if (H.cols() == 0 || n == 0) throw ConfigError("init_sae: empty activation set");
  if (k < 1 || k > m) throw ConfigError("init_sae: k must lie in [1, m]");
  SaeParams p;
  p.k = k;
  p.W_enc.resize(m, n);
  core::RngStream rng(seed, kInitStream);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (Eigen::Index i = 0; i < p.W_enc.size(); ++i) p.W_enc.data()[i] = scale * rng.normal();
  p.W_dec = p.W_enc.transpose();
  p.b_pre = H.rowwise().mean();
  return p;
}

SaeTrainResult train_sae(const MatrixXd& H, int m, int k, const SaeTrainConfig& config,
                         const std::function<void(int, double, int)>& on_epoch) {
  if (H.cols() == 0) throw ConfigError("train_sae: empty activation stream");
  if (m <= H.rows()) throw ConfigError("train_sae: dictionary size m must exceed n");
  if (config.epochs < 1 || config.batch < 1 || !(config.lr >= 0.0))
    throw ConfigError("train_sae: epochs and batch must be positive, lr nonnegative");

  SaeTrainResult result{init_sae(H, m, k, config.seed), 0.0, {}, {}};
  SaeParams& p = result.params;
  result.initial_fvu = fvu(p, H);
  core::RngStream rng(config.seed, kShuffleStream);
  const auto N = static_cast<std::size_t>(H.cols());
  SaeParams g;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = core::permutation(rng, N);
    std::vector<char> fired(static_cast<std::size_t>(m), 0);
    for (std::size_t start = 0; start < N; start += static_cast<std::size_t>(config.batch)) {
      const std::size_t end = std::min(N, start + static_cast<std::size_t>(config.batch));
      MatrixXd batch(H.rows(), static_cast<Eigen::Index>(end - start));
      for (std::size_t j = start; j < end; ++j)
        batch.col(static_cast<Eigen::Index>(j - start)) = H.col(static_cast<Eigen::Index>(order[j]));
      const double loss = loss_impl(p, batch, &g, nullptr, &fired);
      if (!std::isfinite(loss)) throw NumericError("train_sae: non-finite loss in epoch " + std::to_string(epoch));
      p.W_enc -= config.lr * g.W_enc;
      p.W_dec -= config.lr * g.W_dec;
      p.b_pre -= config.lr * g.b_pre;
    }
    const double f = fvu(p, H);
    if (!std::isfinite(f)) throw NumericError("train_sae: non-finite FVU in epoch " + std::to_string(epoch));
    const int dead = static_cast<int>(std::count(fired.begin(), fired.end(), 0));
    result.epoch_fvu.push_back(f);
    result.dead_features.push_back(dead);
    if (on_epoch) on_epoch(epoch, f, dead);
  }
  return result;
}

CosineStats decoder_cosine_stats(const SaeParams& sae) {
  std::vector<VectorXd> cols;
  for (int i = 0; i < sae.m(); ++i) {
    const double norm = sae.W_dec.col(i).norm();
    if (norm > 0.0) cols.push_back(sae.W_dec.col(i) / norm);
  }
  CosineStats st;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < cols.size(); ++i)
    for (std::size_t j = i + 1; j < cols.size(); ++j) {
      const double c = std::abs(cols[i].dot(cols[j]));
      st.mean_abs += c;
      st.max_abs = std::max(st.max_abs, c);
      ++pairs;
    }
  if (pairs) st.mean_abs /= static_cast<double>(pairs);
  return st;
}

void save_sae(const std::filesystem::path& path, const SaeParams& sae, std::uint64_t seed) {
  core::Archive ar;
  ar.header["m"] = std::to_string(sae.m());
  ar.header["n"] = std::to_string(sae.n());
  ar.header["k"] = std::to_string(sae.k);
  ar.header["seed"] = std::to_string(seed);
  ar.put("W_enc", core::Tensor::from_matrix(sae.W_enc));
  ar.put("W_dec", core::Tensor::from_matrix(sae.W_dec));
  ar.put("b_pre", core::Tensor::from_vector(sae.b_pre));
  ar.save(path);
}

SaeParams load_sae(const std::filesystem::path& path) {
  const auto ar = core::Archive::load(path);
  SaeParams p;
  p.k = static_cast<int>(ar.meta_int("k"));
  p.W_enc = ar.get("W_enc").to_matrix();
  p.W_dec = ar.get("W_dec").to_matrix();
  p.b_pre = ar.get("b_pre").flat();
  if (p.m() != ar.meta_int("m") || p.n() != ar.meta_int("n"))
    throw FormatError("sae checkpoint: header does not match tensor shapes");
  p.validate();
  return p;
}

}  // namespace difflens::sae

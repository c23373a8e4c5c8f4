#include <cmath>
#include <numbers>

#include "difflens/core/error.hpp"
#include "difflens/core/rng.hpp"
#include "difflens/core/tensor_io.hpp"
#include "difflens/diffusion.hpp"

namespace difflens::diffusion {

using core::Tensor;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kTrainStream = 2;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Applies silu in place to `z`, storing it in `a`; `slope` gets silu'(z).
void silu(const MatrixXd& z, MatrixXd& a, MatrixXd* slope) {
  a.resize(z.rows(), z.cols());
  if (slope) slope->resize(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double s = sigmoid(z.data()[i]);
    a.data()[i] = z.data()[i] * s;
    if (slope) slope->data()[i] = s * (1.0 + z.data()[i] * (1.0 - s));
  }
}

MatrixXd embeddings(const std::vector<int>& ts, int dim) {
  MatrixXd e(dim, static_cast<Eigen::Index>(ts.size()));
  for (std::size_t j = 0; j < ts.size(); ++j) e.col(static_cast<Eigen::Index>(j)) = timestep_embedding(ts[j], dim);
  return e;
}

void fill_normal(core::RngStream& rng, MatrixXd& m, double scale) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
}

template <typename F>
void for_each_block(DenoiserParams& p, F&& f) {
  f(p.W1.data(), p.W1.size());
  f(p.b1.data(), p.b1.size());
  f(p.W2.data(), p.W2.size());
  f(p.b2.data(), p.b2.size());
  f(p.W3.data(), p.W3.size());
  f(p.b3.data(), p.b3.size());
  f(p.W4.data(), p.W4.size());
  f(p.b4.data(), p.b4.size());
}

}  // namespace

void DenoiserArch::validate() const {
  if (side < 8) throw ConfigError("denoiser: side must be at least 8");
  if (hidden1 < 1 || bottleneck < 1 || hidden2 < 1) throw ConfigError("denoiser: widths must be positive");
  if (embed < 2 || embed % 2 != 0) throw ConfigError("denoiser: embed must be a positive even number");
}

VectorXd timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  VectorXd e(dim);
  for (int i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * i / half);
    e[i] = std::sin(t * w);
    e[half + i] = std::cos(t * w);
  }
  return e;
}

DenoiserParams DenoiserParams::zeros(const DenoiserArch& arch) {
  arch.validate();
  DenoiserParams p;
  p.arch = arch;
  p.W1 = MatrixXd::Zero(arch.hidden1, arch.pixels() + arch.embed);
  p.b1 = VectorXd::Zero(arch.hidden1);
  p.W2 = MatrixXd::Zero(arch.bottleneck, arch.hidden1);
  p.b2 = VectorXd::Zero(arch.bottleneck);
  p.W3 = MatrixXd::Zero(arch.hidden2, arch.bottleneck + arch.embed);
  p.b3 = VectorXd::Zero(arch.hidden2);
  p.W4 = MatrixXd::Zero(arch.pixels(), arch.hidden2);
  p.b4 = VectorXd::Zero(arch.pixels());
  return p;
}

DenoiserParams DenoiserParams::init(const DenoiserArch& arch, std::uint64_t seed) {
  DenoiserParams p = zeros(arch);
  core::RngStream rng(seed, kInitStream);
  fill_normal(rng, p.W1, 1.0 / std::sqrt(static_cast<double>(p.W1.cols())));
  fill_normal(rng, p.W2, 1.0 / std::sqrt(static_cast<double>(p.W2.cols())));
  fill_normal(rng, p.W3, 1.0 / std::sqrt(static_cast<double>(p.W3.cols())));
  fill_normal(rng, p.W4, 1.0 / std::sqrt(static_cast<double>(p.W4.cols())));
  return p;
}

std::size_t DenoiserParams::num_params() const {
  std::size_t n = 0;
  for_each_block(const_cast<DenoiserParams&>(*this), [&](double*, Eigen::Index len) { n += static_cast<std::size_t>(len); });
  return n;
}

std::vector<double> DenoiserParams::flatten() const {
  std::vector<double> out;
  out.reserve(num_params());
  for_each_block(const_cast<DenoiserParams&>(*this),
                 [&](double* d, Eigen::Index len) { out.insert(out.end(), d, d + len); });
  return out;
}

void DenoiserParams::unflatten(std::span<const double> flat) {
  if (flat.size() != num_params()) throw ConfigError("DenoiserParams::unflatten: length mismatch");
  std::size_t off = 0;
  for_each_block(*this, [&](double* d, Eigen::Index len) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), len, d);
    off += static_cast<std::size_t>(len);
  });
}

bool DenoiserParams::all_finite() const {
  return W1.allFinite() && W2.allFinite() && W3.allFinite() && W4.allFinite() && b1.allFinite() &&
         b2.allFinite() && b3.allFinite() && b4.allFinite();
}

DenoiserOutput denoiser_forward(const Tensor& x_t, int t, const DenoiserParams& params,
                                const DiffusionSchedule& schedule) {
  const auto& a = params.arch;
  if (x_t.size() != static_cast<std::size_t>(a.pixels()))
    throw ConfigError("denoiser_forward: input size does not match the denoiser");
  if (t < 0 || t >= schedule.T) throw ConfigError("denoiser_forward: timestep out of range");
  const VectorXd emb = timestep_embedding(t, a.embed);
  const auto P = a.pixels();
  const auto n = a.bottleneck;

  const VectorXd c1 = params.W1.rightCols(a.embed) * emb + params.b1;
  const VectorXd c3 = params.W3.rightCols(a.embed) * emb + params.b3;
  VectorXd z1 = params.W1.leftCols(P) * x_t.flat();
  z1 += c1;
  const VectorXd a1 = z1.array() / (1.0 + (-z1.array()).exp());
  HiddenState h{(params.W2 * a1 + params.b2).array().tanh().matrix(), t};
  VectorXd z3 = params.W3.leftCols(n) * h.h;
  z3 += c3;
  const VectorXd a3 = z3.array() / (1.0 + (-z3.array()).exp());

  DenoiserOutput out{Tensor(x_t.shape()), Tensor(x_t.shape()), std::move(h)};
  out.x0_hat.flat() = params.W4 * a3 + params.b4;
  const double ra = std::sqrt(schedule.alpha_bar[t]);
  const double rb = std::sqrt(1.0 - schedule.alpha_bar[t]);
  out.eps_hat.flat() = (x_t.flat() - ra * out.x0_hat.flat()) / rb;
  return out;
}

double denoiser_loss(const DenoiserParams& params, const DenoiserBatch& batch, DenoiserParams* grad) {
  const auto& a = params.arch;
  const auto P = a.pixels();
  const auto n = a.bottleneck;
  const auto B = batch.x_t.cols();
  if (batch.x_t.rows() != P || batch.x0.rows() != P || batch.x0.cols() != B ||
      batch.t.size() != static_cast<std::size_t>(B) || B == 0)
    throw ConfigError("denoiser_loss: malformed batch");

  const MatrixXd emb = embeddings(batch.t, a.embed);
  const MatrixXd z1 = (params.W1.leftCols(P) * batch.x_t + params.W1.rightCols(a.embed) * emb).colwise() + params.b1;
  MatrixXd a1, s1;
  silu(z1, a1, grad ? &s1 : nullptr);
  const MatrixXd h = ((params.W2 * a1).colwise() + params.b2).array().tanh().matrix();
  const MatrixXd z3 = (params.W3.leftCols(n) * h + params.W3.rightCols(a.embed) * emb).colwise() + params.b3;
  MatrixXd a3, s3;
  silu(z3, a3, grad ? &s3 : nullptr);
  const MatrixXd diff = (params.W4 * a3).colwise() + params.b4 - batch.x0;
  const double denom = static_cast<double>(P) * static_cast<double>(B);
  const double loss = diff.squaredNorm() / denom;
  if (!grad) return loss;

  *grad = DenoiserParams::zeros(a);
  const MatrixXd d4 = diff * (2.0 / denom);
  grad->W4 = d4 * a3.transpose();
  grad->b4 = d4.rowwise().sum();
  const MatrixXd dz3 = (params.W4.transpose() * d4).cwiseProduct(s3);
  grad->W3.leftCols(n) = dz3 * h.transpose();
  grad->W3.rightCols(a.embed) = dz3 * emb.transpose();
  grad->b3 = dz3.rowwise().sum();
  const MatrixXd dz2 =
      (params.W3.leftCols(n).transpose() * dz3).cwiseProduct((1.0 - h.array().square()).matrix());
  grad->W2 = dz2 * a1.transpose();
  grad->b2 = dz2.rowwise().sum();
  const MatrixXd dz1 = (params.W2.transpose() * dz2).cwiseProduct(s1);
  grad->W1.leftCols(P) = dz1 * batch.x_t.transpose();
  grad->W1.rightCols(a.embed) = dz1 * emb.transpose();
  grad->b1 = dz1.rowwise().sum();
  return loss;
}

DenoiserTrainResult train_denoiser(const MatrixXd& images, const DiffusionSchedule& schedule,
                                   const DenoiserArch& arch, const DenoiserTrainConfig& config,
                                   const std::function<void(int, double)>& on_epoch) {
  if (images.cols() == 0) throw ConfigError("train_denoiser: empty dataset");
  if (images.rows() != arch.pixels()) throw ConfigError("train_denoiser: image size does not match arch");
  if (config.epochs < 1 || config.batch < 1 || !(config.lr >= 0.0))
    throw ConfigError("train_denoiser: epochs and batch must be positive, lr nonnegative");

  DenoiserTrainResult result{DenoiserParams::init(arch, config.seed), {}};
  DenoiserParams& p = result.params;
  DenoiserParams g;
  core::RngStream rng(config.seed, kTrainStream);
  const auto N = static_cast<std::size_t>(images.cols());
  const auto P = arch.pixels();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = core::permutation(rng, N);
    double total = 0.0;
    for (std::size_t start = 0; start < N; start += static_cast<std::size_t>(config.batch)) {
      const std::size_t end = std::min(N, start + static_cast<std::size_t>(config.batch));
      const auto B = static_cast<Eigen::Index>(end - start);
      DenoiserBatch batch{MatrixXd(P, B), MatrixXd(P, B), std::vector<int>(static_cast<std::size_t>(B))};
      for (Eigen::Index j = 0; j < B; ++j) {
        const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.T)));
        batch.t[static_cast<std::size_t>(j)] = t;
        batch.x0.col(j) = images.col(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(j)]));
        const double ra = std::sqrt(schedule.alpha_bar[t]);
        const double rb = std::sqrt(1.0 - schedule.alpha_bar[t]);
        for (Eigen::Index i = 0; i < P; ++i) batch.x_t(i, j) = ra * batch.x0(i, j) + rb * rng.normal();
      }
      const double loss = denoiser_loss(p, batch, &g);
      if (!std::isfinite(loss))
        throw NumericError("train_denoiser: non-finite loss in epoch " + std::to_string(epoch));
      total += loss * static_cast<double>(B);
      p.W1 -= config.lr * g.W1;
      p.b1 -= config.lr * g.b1;
      p.W2 -= config.lr * g.W2;
      p.b2 -= config.lr * g.b2;
      p.W3 -= config.lr * g.W3;
      p.b3 -= config.lr * g.b3;
      p.W4 -= config.lr * g.W4;
      p.b4 -= config.lr * g.b4;
    }
    const double mean = total / static_cast<double>(N);
    if (!std::isfinite(mean) || !p.all_finite())
      throw NumericError("train_denoiser: divergence in epoch " + std::to_string(epoch));
    result.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  return result;
}

void save_denoiser(const std::filesystem::path& path, const DenoiserParams& params,
                   const DiffusionSchedule& schedule, std::uint64_t seed) {
  core::Archive ar;
  const auto& a = params.arch;
  ar.header["side"] = std::to_string(a.side);
  ar.header["hidden1"] = std::to_string(a.hidden1);
  ar.header["bottleneck"] = std::to_string(a.bottleneck);
  ar.header["hidden2"] = std::to_string(a.hidden2);
  ar.header["embed"] = std::to_string(a.embed);
  ar.header["T"] = std::to_string(schedule.T);
  ar.header["beta_min"] = core::format_double(schedule.beta_min);
  ar.header["beta_max"] = core::format_double(schedule.beta_max);
  ar.header["seed"] = std::to_string(seed);
  ar.put("W1", Tensor::from_matrix(params.W1));
  ar.put("b1", Tensor::from_vector(params.b1));
  ar.put("W2", Tensor::from_matrix(params.W2));
  ar.put("b2", Tensor::from_vector(params.b2));
  ar.put("W3", Tensor::from_matrix(params.W3));
  ar.put("b3", Tensor::from_vector(params.b3));
  ar.put("W4", Tensor::from_matrix(params.W4));
  ar.put("b4", Tensor::from_vector(params.b4));
  ar.save(path);
}

DenoiserCheckpoint load_denoiser(const std::filesystem::path& path) {
  const auto ar = core::Archive::load(path);
  DenoiserArch a;
  a.side = static_cast<int>(ar.meta_int("side"));
  a.hidden1 = static_cast<int>(ar.meta_int("hidden1"));
  a.bottleneck = static_cast<int>(ar.meta_int("bottleneck"));
  a.hidden2 = static_cast<int>(ar.meta_int("hidden2"));
  a.embed = static_cast<int>(ar.meta_int("embed"));
  DenoiserCheckpoint ck{DenoiserParams::zeros(a),
                        make_schedule(static_cast<int>(ar.meta_int("T")), ar.meta_double("beta_min"),
                                      ar.meta_double("beta_max")),
                        std::stoull(ar.meta("seed"))};
  auto load = [&](const char* name, auto& dst) {
    const Tensor& t = ar.get(name);
    const bool ok = std::is_same_v<std::decay_t<decltype(dst)>, MatrixXd>
                        ? t.shape() == core::Shape{static_cast<std::size_t>(dst.rows()),
                                                   static_cast<std::size_t>(dst.cols())}
                        : t.size() == static_cast<std::size_t>(dst.size());
    if (!ok) throw FormatError(std::string("denoiser checkpoint: wrong shape for ") + name);
    if constexpr (std::is_same_v<std::decay_t<decltype(dst)>, MatrixXd>) dst = t.to_matrix();
    else dst = t.flat();
  };
  load("W1", ck.params.W1);
  load("b1", ck.params.b1);
  load("W2", ck.params.W2);
  load("b2", ck.params.b2);
  load("W3", ck.params.W3);
  load("b3", ck.params.b3);
  load("W4", ck.params.W4);
  load("b4", ck.params.b4);
  if (!ck.params.all_finite()) throw FormatError("denoiser checkpoint contains non-finite values");
  return ck;
}

}  // namespace difflens::diffusion

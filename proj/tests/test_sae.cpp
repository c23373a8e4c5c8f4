#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "difflens/core/error.hpp"
#include "difflens/core/gradient_check.hpp"
#include "difflens/core/rng.hpp"
#include "difflens/sae.hpp"

using namespace difflens;
using namespace difflens::sae;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd gaussian(std::uint64_t seed, int rows, int cols) {
  core::RngStream rng(seed, 0);
  return core::gaussian_draw(rng, {static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)}).to_matrix();
}

SaeParams random_sae(std::uint64_t seed, int m, int n, int k) {
  SaeParams p;
  p.W_enc = gaussian(seed, m, n);
  p.W_dec = gaussian(seed + 1000, n, m) * 0.3;
  p.b_pre = gaussian(seed + 2000, n, 1).col(0) * 0.1;
  p.k = k;
  return p;
}

SaeParams identity_sae(int n) {
  SaeParams p;
  p.W_enc = MatrixXd::Identity(n, n);
  p.W_dec = MatrixXd::Identity(n, n);
  p.b_pre = VectorXd::Zero(n);
  p.k = n;
  return p;
}

// Subspace data: r latent Gaussians mixed into n dimensions.
MatrixXd subspace_data(std::uint64_t seed, int n, int r, int N) {
  return gaussian(seed, n, r) * gaussian(seed + 1, r, N) / std::sqrt(static_cast<double>(r));
}

}  // namespace

TEST(TopK, Examples) {
  auto c = topk_mask((VectorXd(3) << 3, 1, 2).finished(), 2);
  EXPECT_EQ(c.s, (VectorXd(3) << 3, 0, 2).finished());
  EXPECT_EQ(c.support, (std::vector<int>{0, 2}));

  const VectorXd v = (VectorXd(4) << -1, 5, 0.5, 2).finished();
  c = topk_mask(v, 4);
  EXPECT_EQ(c.s, v);
  EXPECT_EQ(c.support, (std::vector<int>{0, 1, 2, 3}));

  c = topk_mask(VectorXd::Ones(3), 1);
  EXPECT_EQ(c.support, (std::vector<int>{0}));
  EXPECT_EQ(c.s, (VectorXd(3) << 1, 0, 0).finished());
}

TEST(TopK, SelectsByRawValueAndValidatesK) {
  const auto c = topk_mask((VectorXd(3) << -10, 1, 2).finished(), 1);
  EXPECT_EQ(c.support, (std::vector<int>{2}));
  EXPECT_THROW(topk_mask(VectorXd::Ones(3), 0), ConfigError);
  EXPECT_THROW(topk_mask(VectorXd::Ones(3), 4), ConfigError);
}

TEST(TopK, TieAtBoundaryPrefersLowIndex) {
  const auto c = topk_mask((VectorXd(5) << 1, 3, 2, 3, 3).finished(), 2);
  EXPECT_EQ(c.support, (std::vector<int>{1, 3}));
}

TEST(Encode, CenteredInputGivesZeroCode) {
  const auto p = random_sae(1, 12, 6, 3);
  const auto c = encode(p.b_pre, p);
  EXPECT_TRUE(c.s.isZero(0.0));
}

TEST(Encode, IdentityConfiguration) {
  const auto p = identity_sae(5);
  const VectorXd h = gaussian(2, 5, 1).col(0);
  EXPECT_EQ(encode(h, p).s, h);
  EXPECT_EQ(decode(encode(h, p), p), h);
}

TEST(Encode, MatchesBruteForce) {
  const auto p = random_sae(3, 8, 4, 2);
  for (int trial = 0; trial < 20; ++trial) {
    const VectorXd h = gaussian(100 + trial, 4, 1).col(0);
    VectorXd z(8);
    for (int i = 0; i < 8; ++i) {
      z[i] = 0;
      for (int j = 0; j < 4; ++j) z[i] += p.W_enc(i, j) * (h[j] - p.b_pre[j]);
    }
    std::vector<int> idx(8);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return z[a] > z[b] || (z[a] == z[b] && a < b); });
    VectorXd expect = VectorXd::Zero(8);
    expect[idx[0]] = z[idx[0]];
    expect[idx[1]] = z[idx[1]];
    const auto s = encode(h, p).s;
    EXPECT_LT((s - expect).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ((s.array() != 0).count(), 2);
  }
}

TEST(Encode, BatchMatchesSingleEncodesBitwise) {
  const auto p = random_sae(13, 96, 20, 9);
  const MatrixXd H = gaussian(14, 20, 37);
  for (Eigen::Index width : {1, 5, 37}) {
    const MatrixXd S = encode_batch(H.leftCols(width), p);
    for (Eigen::Index j = 0; j < width; ++j) EXPECT_EQ(S.col(j), encode(H.col(j), p).s) << width << ' ' << j;
  }
}

TEST(Encode, DimensionMismatch) {
  const auto p = random_sae(4, 8, 4, 2);
  EXPECT_THROW(encode(VectorXd::Zero(5), p), ConfigError);
  EXPECT_THROW(decode(VectorXd::Zero(7), p), ConfigError);
}

TEST(Encode, SparsityOnManyDraws) {
  const auto p = random_sae(5, 64, 16, 4);
  const MatrixXd H = gaussian(6, 16, 10000);
  const MatrixXd S = encode_batch(H, p);
  for (Eigen::Index c = 0; c < S.cols(); ++c) ASSERT_LE((S.col(c).array() != 0).count(), 4);
  EXPECT_EQ(S.col(17), encode(H.col(17), p).s);
}

TEST(Decode, Examples) {
  const auto p = random_sae(7, 10, 4, 3);
  EXPECT_EQ(decode(VectorXd::Zero(10), p), p.b_pre);
  VectorXd s = VectorXd::Zero(10);
  s[6] = 2.5;
  EXPECT_LT((decode(s, p) - (2.5 * p.W_dec.col(6) + p.b_pre)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Decode, InvertiblePairRoundTrip) {
  SaeParams p;
  p.W_enc = gaussian(8, 6, 6) + 3.0 * MatrixXd::Identity(6, 6);
  p.W_dec = p.W_enc.inverse();
  p.b_pre = VectorXd::Zero(6);
  p.k = 6;
  const VectorXd h = gaussian(9, 6, 1).col(0);
  EXPECT_LT((decode(encode(h, p), p) - h).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Decode, LinearityExactOnDyadicValues) {
  // Small dyadic rationals keep every product and sum exact.
  SaeParams p;
  p.W_dec = MatrixXd(3, 6);
  p.W_dec << 0.5, -1, 2, 0.25, 1.5, -0.75, 1, 0, -2, 0.125, 3, 1, -0.5, 2, 1, -1, 0.25, 0.5;
  p.W_enc = p.W_dec.transpose();
  p.b_pre = (VectorXd(3) << 0.25, -1.5, 2).finished();
  p.k = 6;
  const VectorXd a = (VectorXd(6) << 1, 0, -2, 0, 0.5, 0).finished();
  const VectorXd b = (VectorXd(6) << 0, 4, 0, 1.5, 0, -3).finished();
  EXPECT_EQ(decode(VectorXd(a + b), p) - p.b_pre, (decode(a, p) - p.b_pre) + (decode(b, p) - p.b_pre));
}

TEST(Decode, LinearityOnRandomCodes) {
  const auto p = random_sae(10, 16, 4, 4);
  VectorXd a = VectorXd::Zero(16), b = VectorXd::Zero(16);
  a[1] = 0.5;
  a[7] = -2.0;
  b[3] = 1.25;
  b[11] = 4.0;
  const VectorXd lhs = decode(VectorXd(a + b), p) - p.b_pre;
  const VectorXd rhs = (decode(a, p) - p.b_pre) + (decode(b, p) - p.b_pre);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Decode, SparseMatchesDense) {
  const auto p = random_sae(11, 16, 4, 3);
  const auto code = encode(gaussian(12, 4, 1).col(0), p);
  EXPECT_LT((decode(code, p) - decode(code.s, p)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(SaeLoss, FrozenSupportGradient) {
  for (std::uint64_t point = 0; point < 5; ++point) {
    const auto p = random_sae(20 + point, 12, 5, 3);
    const MatrixXd H = gaussian(40 + point, 5, 7);
    std::vector<std::vector<int>> supports;
    for (Eigen::Index c = 0; c < H.cols(); ++c) supports.push_back(encode(H.col(c), p).support);
    SaeParams grad;
    sae_loss(p, H, &grad, &supports);
    const int m = 12, n = 5;
    auto unpack = [&](std::span<const double> x) {
      SaeParams q = p;
      q.W_enc = Eigen::Map<const MatrixXd>(x.data(), m, n);
      q.W_dec = Eigen::Map<const MatrixXd>(x.data() + m * n, n, m);
      q.b_pre = Eigen::Map<const VectorXd>(x.data() + 2 * m * n, n);
      return q;
    };
    std::vector<double> x(p.W_enc.data(), p.W_enc.data() + m * n);
    x.insert(x.end(), p.W_dec.data(), p.W_dec.data() + m * n);
    x.insert(x.end(), p.b_pre.data(), p.b_pre.data() + n);
    std::vector<double> g(grad.W_enc.data(), grad.W_enc.data() + m * n);
    g.insert(g.end(), grad.W_dec.data(), grad.W_dec.data() + m * n);
    g.insert(g.end(), grad.b_pre.data(), grad.b_pre.data() + n);
    auto f = [&](std::span<const double> xs) { return sae_loss(unpack(xs), H, nullptr, &supports); };
    EXPECT_LT(core::gradient_check(f, x, g, 1e-5), 1e-4) << "point " << point;
  }
}

TEST(SaeLoss, StraightThroughEqualsFrozenAtCurrentSupport) {
  const auto p = random_sae(30, 12, 5, 3);
  const MatrixXd H = gaussian(31, 5, 9);
  std::vector<std::vector<int>> supports;
  for (Eigen::Index c = 0; c < H.cols(); ++c) supports.push_back(encode(H.col(c), p).support);
  SaeParams g1, g2;
  const double l1 = sae_loss(p, H, &g1);
  const double l2 = sae_loss(p, H, &g2, &supports);
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(g1.W_enc, g2.W_enc);
  EXPECT_EQ(g1.W_dec, g2.W_dec);
  EXPECT_EQ(g1.b_pre, g2.b_pre);
}

TEST(Fvu, Examples) {
  const MatrixXd H = gaussian(50, 6, 200);
  EXPECT_EQ(fvu(identity_sae(6), H), 0.0);

  SaeParams mean_sae = identity_sae(6);
  mean_sae.W_dec.setZero();
  mean_sae.b_pre = H.rowwise().mean();
  EXPECT_NEAR(fvu(mean_sae, H), 1.0, 1e-12);

  const auto p = random_sae(51, 20, 6, 4);
  double sse = 0, sst = 0;
  const VectorXd mu = H.rowwise().mean();
  for (Eigen::Index c = 0; c < H.cols(); ++c) {
    sse += (H.col(c) - decode(encode(H.col(c), p), p)).squaredNorm();
    sst += (H.col(c) - mu).squaredNorm();
  }
  EXPECT_NEAR(fvu(p, H), sse / sst, 1e-12);

  EXPECT_THROW(fvu(p, MatrixXd::Ones(6, 10)), NumericError);
}

TEST(Training, ZeroLearningRateKeepsInit) {
  const MatrixXd H = gaussian(60, 8, 100);
  const auto r = train_sae(H, 16, 4, {0.0, 1, 10, 3});
  const auto init = init_sae(H, 16, 4, 3);
  EXPECT_EQ(r.params.W_enc, init.W_enc);
  EXPECT_EQ(r.params.W_dec, init.W_dec);
  EXPECT_EQ(r.params.b_pre, init.b_pre);
  EXPECT_EQ(init.W_dec, init.W_enc.transpose());
}

TEST(Training, SubspaceDataReconstructed) {
  const MatrixXd H = subspace_data(61, 64, 8, 50000);
  const auto r = train_sae(H, 256, 8, SaeTrainConfig{.seed = 1});
  EXPECT_LT(r.epoch_fvu.back(), 1e-2);
  EXPECT_LT(r.epoch_fvu.back(), r.initial_fvu);
}

TEST(Training, MonotoneOnGenericData) {
  const MatrixXd H = gaussian(62, 8, 3000);
  const auto r = train_sae(H, 32, 4, {});
  EXPECT_LT(r.epoch_fvu.back(), r.epoch_fvu.front());
  EXPECT_EQ(r.dead_features.size(), r.epoch_fvu.size());
}

TEST(Training, Deterministic) {
  const MatrixXd H = gaussian(63, 8, 500);
  const auto a = train_sae(H, 16, 4, {0.01, 2, 32, 9});
  const auto b = train_sae(H, 16, 4, {0.01, 2, 32, 9});
  EXPECT_EQ(a.params.W_enc, b.params.W_enc);
  EXPECT_EQ(a.epoch_fvu, b.epoch_fvu);
}

TEST(Training, RejectsBadShapesAndDivergence) {
  const MatrixXd H = gaussian(64, 8, 100);
  EXPECT_THROW(train_sae(H, 8, 4, {}), ConfigError);
  EXPECT_THROW(train_sae(H, 16, 17, {}), ConfigError);
  EXPECT_THROW(train_sae(H * 1e3, 16, 4, {1e6, 3, 10, 1}), NumericError);
}

TEST(Checkpoint, RoundTripAndCosine) {
  const auto dir = std::filesystem::temp_directory_path() / "difflens_test_sae";
  std::filesystem::create_directories(dir);
  const auto p = random_sae(70, 16, 4, 3);
  save_sae(dir / "s.dlc", p, 70);
  const auto q = load_sae(dir / "s.dlc");
  EXPECT_EQ(q.W_enc, p.W_enc);
  EXPECT_EQ(q.W_dec, p.W_dec);
  EXPECT_EQ(q.k, 3);
  const auto cs = decoder_cosine_stats(identity_sae(4));
  EXPECT_EQ(cs.max_abs, 0.0);
  std::filesystem::remove_all(dir);
}

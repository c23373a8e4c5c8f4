#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "difflens/core/error.hpp"
#include "difflens/core/rng.hpp"
#include "difflens/intervention.hpp"

using namespace difflens;
using namespace difflens::intervention;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd gaussian(std::uint64_t seed, int rows, int cols) {
  core::RngStream rng(seed, 0);
  return core::gaussian_draw(rng, {static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)}).to_matrix();
}

sae::SaeParams random_sae(std::uint64_t seed, int m, int n, int k) {
  sae::SaeParams p;
  p.W_enc = gaussian(seed, m, n);
  p.W_dec = gaussian(seed + 1, n, m) * 0.3;
  p.b_pre = gaussian(seed + 2, n, 1).col(0) * 0.1;
  p.k = k;
  return p;
}

diffusion::DenoiserArch small_arch() { return {8, 16, 8, 16, 8}; }

diffusion::DiffusionSchedule schedule() { return diffusion::make_schedule(20, 1e-4, 0.2); }

diffusion::DenoiserParams random_params(std::uint64_t seed) {
  auto p = diffusion::DenoiserParams::init(small_arch(), seed);
  core::RngStream rng(seed, 99);
  p.b2 = core::gaussian_draw(rng, {8}).flat() * 0.3;
  return p;
}

bool same_samples(const std::vector<core::Tensor>& a, const std::vector<core::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!core::bitwise_equal(a[i], b[i])) return false;
  return true;
}

}  // namespace

TEST(InterveneCode, Examples) {
  VectorXd s(4);
  s << 0, 2, 0, 4;
  const VectorXd scaled = intervene_code(s, {1, 3}, 1.5, Mode::scaling);
  EXPECT_EQ(scaled, (VectorXd(4) << 0, 3, 0, 6).finished());
  EXPECT_EQ(intervene_code(s, {0, 1, 2, 3}, 1.0, Mode::scaling), s);
  EXPECT_EQ(intervene_code(s, {0, 1, 2, 3}, 0.0, Mode::adding), s);
  // Adding switches on an unfired feature.
  EXPECT_EQ(intervene_code(s, {0}, 0.5, Mode::adding)[0], 0.5);
  EXPECT_THROW(intervene_code(s, {4}, 1.0, Mode::scaling), ConfigError);
  EXPECT_THROW(intervene_code(s, {-1}, 1.0, Mode::scaling), ConfigError);
  EXPECT_THROW(intervene_code(s, {0}, std::nan(""), Mode::scaling), ConfigError);
}

TEST(InterveneCode, SequentialEqualsSimultaneousForDisjointSets) {
  core::RngStream rng(3, 0);
  for (int trial = 0; trial < 100; ++trial) {
    VectorXd s(40);
    for (auto& v : s) v = rng.uniform() < 0.3 ? rng.uniform(0, 4) : 0.0;
    const auto perm = core::permutation(rng, 40);
    std::vector<int> A1, A2;
    for (int j = 0; j < 6; ++j) A1.push_back(static_cast<int>(perm[j]));
    for (int j = 6; j < 11; ++j) A2.push_back(static_cast<int>(perm[j]));
    const double b1 = rng.uniform(0.1, 5), b2 = rng.uniform(0.1, 5);
    const Mode mode2 = trial % 2 == 0 ? Mode::scaling : Mode::adding;

    const VectorXd seq = intervene_code(intervene_code(s, A1, b1, Mode::scaling), A2, b2, mode2);
    const VectorXd list = intervene_code(s, {FeatureEdit{A1, b1, Mode::scaling}, FeatureEdit{A2, b2, mode2}});
    const VectorXd rev = intervene_code(s, {FeatureEdit{A2, b2, mode2}, FeatureEdit{A1, b1, Mode::scaling}});
    // Simultaneous: every coordinate edited once, straight from s.
    VectorXd sim = s;
    for (int i : A1) sim[i] = b1 * s[i];
    for (int i : A2) sim[i] = mode2 == Mode::scaling ? b2 * s[i] : s[i] + b2;
    EXPECT_EQ(seq, sim);
    EXPECT_EQ(list, sim);
    EXPECT_EQ(rev, sim);
  }
}

TEST(ApplyDelta, ZeroDeltaIsBitwiseIdentity) {
  const auto sae = random_sae(5, 16, 6, 4);
  const VectorXd h = gaussian(6, 6, 1).col(0);
  const VectorXd s = sae::encode(h, sae).s;
  const VectorXd out = apply_delta(h, s, s, sae);
  EXPECT_EQ(std::memcmp(out.data(), h.data(), sizeof(double) * 6), 0);
}

TEST(ApplyDelta, SingleFeatureMovesAlongItsColumn) {
  auto sae = random_sae(7, 16, 6, 4);
  // Dyadic decoder column and delta keep the arithmetic exact.
  sae.W_dec.col(5) << 0.5, -0.25, 1.0, 0.0, 2.0, -1.5;
  VectorXd h(6);
  h << 1.0, 2.0, -0.5, 0.25, 0.0, 3.0;
  VectorXd s = VectorXd::Zero(16);
  s[5] = 1.0;
  VectorXd s2 = s;
  s2[5] = 1.75;
  EXPECT_EQ(apply_delta(h, s, s2, sae) - h, 0.75 * sae.W_dec.col(5));
}

TEST(ApplyDelta, MatchesExpandedSum) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto sae = random_sae(10 + seed, 32, 8, 6);
    const VectorXd h = gaussian(40 + seed, 8, 1).col(0);
    const VectorXd s = sae::encode(h, sae).s;
    const VectorXd s2 = intervene_code(s, {1, 4, 9, 20}, 1.7, Mode::scaling);
    const VectorXd full = h + sae.W_dec * (s2 - s);
    VectorXd expanded = h;
    for (int i = 0; i < 32; ++i) expanded += (s2[i] - s[i]) * sae.W_dec.col(i);
    const VectorXd got = apply_delta(h, s, s2, sae);
    EXPECT_LT((got - full).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((got - expanded).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ApplyDelta, LocalityToChangedColumns) {
  auto sae = random_sae(11, 16, 6, 4);
  sae.W_dec.col(2).setZero();
  sae.W_dec.col(7).setZero();
  const VectorXd h = gaussian(12, 6, 1).col(0);
  VectorXd s = VectorXd::Zero(16);
  s[2] = 1.0;
  const VectorXd s2 = intervene_code(s, {2, 7}, 3.0, Mode::adding);
  EXPECT_EQ(apply_delta(h, s, s2, sae), h);
  EXPECT_THROW(apply_delta(VectorXd::Zero(5), s, s2, sae), ConfigError);
  EXPECT_THROW(apply_delta(h, VectorXd::Zero(15), s2, sae), ConfigError);
}

TEST(Spec, ValidationAndIdentity) {
  InterventionSpec spec{"attr_a", {{{1, 2}, 1.0, Mode::scaling}, {{3}, 0.0, Mode::adding}}, {0.5, 0.5}, 1};
  EXPECT_NO_THROW(spec.validate(8));
  EXPECT_TRUE(spec.is_identity());
  spec.entries[1].beta = 0.1;
  EXPECT_FALSE(spec.is_identity());
  EXPECT_THROW(spec.validate(3), ConfigError);
  spec.probs = {0.5, 0.6};
  EXPECT_THROW(spec.validate(8), ConfigError);
  spec.probs = {-0.5, 1.5};
  EXPECT_THROW(spec.validate(8), ConfigError);
  spec.probs = {1.0};
  EXPECT_THROW(spec.validate(8), ConfigError);
  EXPECT_THROW(parse_mode("shift"), ConfigError);
  EXPECT_EQ(parse_mode(mode_name(Mode::adding)), Mode::adding);
}

TEST(Spec, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "difflens_test_intervention";
  std::filesystem::create_directories(dir);
  const InterventionSpec spec{"attr_b", {{{0, 5}, 1.0 / 3.0, Mode::scaling}, {{}, 0.0, Mode::adding}, {{7}, 2.5, Mode::adding}},
                              {0.25, 0.5, 0.25}, 99};
  save_spec(dir / "s.ini", spec);
  const auto got = load_spec(dir / "s.ini");
  EXPECT_EQ(got.attribute, spec.attribute);
  EXPECT_EQ(got.seed, spec.seed);
  EXPECT_EQ(got.probs, spec.probs);
  ASSERT_EQ(got.entries.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(got.entries[c].A, spec.entries[c].A);
    EXPECT_EQ(got.entries[c].beta, spec.entries[c].beta);
    EXPECT_EQ(got.entries[c].mode, spec.entries[c].mode);
  }
  std::ofstream(dir / "bad.ini") << "attribute = x\nflavour = 3\n";
  EXPECT_THROW(load_spec(dir / "bad.ini"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(DrawnClass, FrequenciesAndStability) {
  InterventionSpec spec{"attr_a", {{{}, 1.0, Mode::scaling}, {{}, 1.0, Mode::scaling}}, {0.3, 0.7}, 17};
  const std::size_t N = 20000;
  std::size_t ones = 0;
  for (std::size_t c = 0; c < N; ++c) {
    const int y = drawn_class(spec, c);
    EXPECT_EQ(y, drawn_class(spec, c));
    ones += static_cast<std::size_t>(y);
  }
  // 4 binomial standard deviations.
  EXPECT_NEAR(static_cast<double>(ones) / N, 0.7, 4 * std::sqrt(0.21 / N));
  spec.probs = {1.0, 0.0};
  for (std::size_t c = 0; c < 1000; ++c) EXPECT_EQ(drawn_class(spec, c), 0);
}

TEST(Hook, IdentitySpecsGiveBitwiseIdenticalSamples) {
  const auto p = random_params(21);
  const auto sch = schedule();
  const auto sae = random_sae(22, 32, 8, 4);
  const auto plain = diffusion::sample(p, sch, 50, 5);
  const std::vector<int> all = [] {
    std::vector<int> v(32);
    for (int i = 0; i < 32; ++i) v[i] = i;
    return v;
  }();
  for (auto mode : {Mode::scaling, Mode::adding}) {
    const InterventionSpec spec{"attr_a", {{all, identity_beta(mode), mode}, {{0, 3}, identity_beta(mode), mode}},
                                {0.5, 0.5}, 3};
    EXPECT_TRUE(same_samples(plain, diffusion::sample(p, sch, 50, 5, make_hook(spec, sae))));
  }
  const auto edited = diffusion::sample(p, sch, 50, 5, make_hook(single_edit_spec("a", {all, 2.0, Mode::scaling}), sae));
  EXPECT_FALSE(same_samples(plain, edited));
}

TEST(Hook, OnlyDrawnClassIsEdited) {
  const auto sae = random_sae(31, 24, 8, 24);  // every feature fires
  InterventionSpec spec{"attr_a", {{{2}, 2.0, Mode::scaling}, {{5}, 3.0, Mode::scaling}}, {1.0, 0.0}, 4};
  const auto hook = make_hook(spec, sae);
  for (std::size_t chain = 0; chain < 30; ++chain) {
    const VectorXd h = gaussian(100 + chain, 8, 1).col(0);
    const VectorXd s = sae::encode(h, sae).s;
    const auto out = hook({h, 7}, chain);
    EXPECT_EQ(out.t, 7);
    EXPECT_EQ(out.h, apply_delta(h, s, intervene_code(s, {2}, 2.0, Mode::scaling), sae));
  }
}

TEST(Hook, ChainDecisionFixedAcrossTimesteps) {
  const auto sae = random_sae(41, 24, 8, 6);
  InterventionSpec spec{"attr_a", {{{0, 1, 2, 3}, 4.0, Mode::adding}, {{}, 0.0, Mode::adding}}, {0.5, 0.5}, 8};
  const auto hook = make_hook(spec, sae);
  const VectorXd h = gaussian(42, 8, 1).col(0);
  for (std::size_t chain = 0; chain < 20; ++chain) {
    const bool edited = drawn_class(spec, chain) == 0;
    for (int t = 0; t < 10; ++t) EXPECT_EQ(hook({h, t}, chain).h != h, edited) << chain << ' ' << t;
  }
}

TEST(Hook, MultiSpecComposesDisjointEdits) {
  const auto sae = random_sae(51, 24, 8, 8);
  const InterventionSpec a{"attr_a", {{{1, 2}, 1.5, Mode::scaling}}, {1.0}, 0};
  const InterventionSpec b{"attr_b", {{{7, 9}, 0.5, Mode::scaling}}, {1.0}, 0};
  const auto hook = make_hook(std::vector<InterventionSpec>{a, b}, sae);
  const VectorXd h = gaussian(52, 8, 1).col(0);
  const VectorXd s = sae::encode(h, sae).s;
  VectorXd sim = s;
  for (int i : {1, 2}) sim[i] = 1.5 * s[i];
  for (int i : {7, 9}) sim[i] = 0.5 * s[i];
  EXPECT_EQ(hook({h, 0}, 0).h, apply_delta(h, s, sim, sae));
  EXPECT_THROW(make_hook(single_edit_spec("a", {{30}, 2.0, Mode::scaling}), sae), ConfigError);
}

TEST(CalibrateBeta, MonotoneFunctionReachesTarget) {
  const auto f = [](double beta) { return beta / (1.0 + beta); };
  const auto res = calibrate_beta(f, 0.5, 0.25, 4.0, 1e-6, 60);
  EXPECT_TRUE(res.reached);
  EXPECT_NEAR(res.beta, 1.0, 1e-5);
  EXPECT_EQ(res.trace.front().beta, 0.25);
  EXPECT_EQ(res.trace[1].beta, 4.0);
  const auto dec = calibrate_beta([](double beta) { return 1.0 / (1.0 + beta); }, 0.25, 0.1, 10.0, 1e-4, 60);
  EXPECT_TRUE(dec.reached);
  EXPECT_NEAR(dec.beta, 3.0, 1e-2);
}

TEST(CalibrateBeta, FixedPointAndUnreachable) {
  const auto f = [](double beta) { return beta / (1.0 + beta); };
  const auto hit = calibrate_beta(f, 0.5, 1.0, 8.0, 1e-12);
  EXPECT_TRUE(hit.reached);
  EXPECT_EQ(hit.beta, 1.0);
  EXPECT_EQ(hit.trace.size(), 1u);

  const auto flat = calibrate_beta(f, 0.9, 1.0, 1.0);
  EXPECT_FALSE(flat.reached);
  EXPECT_EQ(flat.beta, 1.0);

  const auto out = calibrate_beta(f, 0.95, 0.25, 4.0, 0.01);
  EXPECT_FALSE(out.reached);
  EXPECT_EQ(out.beta, 4.0);
  EXPECT_DOUBLE_EQ(out.range_lo, 0.2);
  EXPECT_DOUBLE_EQ(out.range_hi, 0.8);
  EXPECT_EQ(out.trace.size(), 2u);

  EXPECT_THROW(calibrate_beta(f, 0.5, 0.0, 1.0), ConfigError);
  EXPECT_THROW(calibrate_beta(f, 0.5, 2.0, 1.0), ConfigError);
  EXPECT_THROW(calibrate_beta([](double) { return std::nan(""); }, 0.5, 1.0, 2.0), NumericError);
}

TEST(Gallery, ShapeAndIdentityColumn) {
  const auto p = random_params(61);
  const auto sch = schedule();
  const auto sae = random_sae(62, 32, 8, 4);
  const std::vector<double> betas{0.5, 1.0, 2.0};
  const auto grid = feature_gallery(p, sch, sae, 3, betas, 4, 9);
  EXPECT_EQ(grid.rows, 4u);
  EXPECT_EQ(grid.cols, 3u);
  ASSERT_EQ(grid.images.size(), 12u);
  const auto plain = diffusion::sample(p, sch, 4, 9);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_TRUE(core::bitwise_equal(grid.at(r, 1), plain[r]));
  EXPECT_THROW(feature_gallery(p, sch, sae, 32, betas, 1, 9), ConfigError);

  const auto path = std::filesystem::temp_directory_path() / "difflens_gallery_test.pgm";
  write_pgm(path, grid, 2);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0;
  in >> magic >> w >> h;
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 3 * (16 + 1) + 1);
  EXPECT_EQ(h, 4 * (16 + 1) + 1);
  std::filesystem::remove(path);
}

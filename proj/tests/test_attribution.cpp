#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include <gtest/gtest.h>

#include "difflens/attribution.hpp"
#include "difflens/core/error.hpp"
#include "difflens/core/rng.hpp"

using namespace difflens;
using namespace difflens::attribution;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd gaussian(std::uint64_t seed, int rows, int cols) {
  core::RngStream rng(seed, 0);
  return core::gaussian_draw(rng, {static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)}).to_matrix();
}

VectorXd gaussian_vec(std::uint64_t seed, int n) { return gaussian(seed, n, 1).col(0); }

sae::SaeParams random_sae(std::uint64_t seed, int m, int n, int k) {
  sae::SaeParams p;
  p.W_enc = gaussian(seed, m, n);
  p.W_dec = gaussian(seed + 1, n, m) * 0.3;
  p.b_pre = gaussian_vec(seed + 2, n) * 0.1;
  p.k = k;
  return p;
}

probe::ProbeParams random_probe(std::uint64_t seed, int T, int C, int n) {
  probe::ProbeParams p;
  p.num_classes = C;
  p.attribute = "attr_a";
  for (int t = 0; t < T; ++t) {
    p.W.push_back(gaussian(seed + 10 * t, C, n));
    p.b.push_back(gaussian_vec(seed + 10 * t + 5, C));
  }
  return p;
}

std::vector<SupportSample> random_support(std::uint64_t seed, std::size_t count, int n, int T) {
  std::vector<SupportSample> out;
  for (std::size_t j = 0; j < count; ++j) out.push_back({j, gaussian(seed + 100 * j, n, T)});
  return out;
}

CodeFunction linear(const VectorXd& w) {
  return [w](const VectorXd& s) { return probe::ValueGrad{w.dot(s), w}; };
}

// Sparse nonnegative code like a TopK output.
VectorXd random_code(std::uint64_t seed, int m, int k) {
  core::RngStream rng(seed, 0);
  VectorXd s = VectorXd::Zero(m);
  for (int j = 0; j < k; ++j) s[static_cast<Eigen::Index>(rng.below(m))] = rng.uniform(0.1, 3.0);
  return s;
}

// Composite trapezoid on a very fine grid of the exact path integral.
VectorXd fine_integral(const VectorXd& s, const VectorXd& base, const CodeFunction& F, int steps) {
  const VectorXd delta = s - base;
  VectorXd sum = 0.5 * (F(base).grad + F(s).grad);
  for (int k = 1; k < steps; ++k) sum += F(base + (static_cast<double>(k) / steps) * delta).grad;
  return delta.cwiseProduct(sum / steps);
}

}  // namespace

TEST(IgScores, LinearFunctionExactForAnyQ) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const VectorXd w = gaussian_vec(seed, 12);
    const VectorXd s = random_code(seed + 1, 12, 5);
    const VectorXd base = seed % 2 == 0 ? VectorXd::Zero(12) : gaussian_vec(seed + 2, 12);
    for (int q : {1, 2, 3, 7, 10, 50, 333, 10000}) {
      const VectorXd scores = ig_scores(s, base, linear(w), q);
      for (int i = 0; i < 12; ++i) EXPECT_EQ(scores[i], w[i] * (s[i] - base[i])) << "q=" << q << " i=" << i;
    }
  }
}

TEST(IgScores, ConstantFunctionGivesZeros) {
  const CodeFunction F = [](const VectorXd& s) { return probe::ValueGrad{4.2, VectorXd::Zero(s.size())}; };
  const VectorXd scores = ig_scores(random_code(3, 20, 6), VectorXd::Zero(20), F, 17);
  EXPECT_TRUE((scores.array() == 0.0).all());
}

TEST(IgScores, RightEndpointNodes) {
  // F(s) = s_0^2 / 2 has gradient s_0; the right-endpoint sum over k/q gives
  // s_0^2 (q + 1) / (2q) from base 0.
  const CodeFunction F = [](const VectorXd& s) {
    VectorXd g = VectorXd::Zero(s.size());
    g[0] = s[0];
    return probe::ValueGrad{0.5 * s[0] * s[0], g};
  };
  VectorXd s(2);
  s << 2.0, 1.0;
  for (int q : {1, 2, 4, 8}) {
    const VectorXd scores = ig_scores(s, VectorXd::Zero(2), F, q);
    EXPECT_DOUBLE_EQ(scores[0], 4.0 * (q + 1) / (2.0 * q));
    EXPECT_EQ(scores[1], 0.0);
  }
}

TEST(IgScores, SoftmaxCompositionConvergesToFineGrid) {
  const int m = 24, n = 8;
  const auto sae = random_sae(5, m, n, 6);
  // Probe weights and code values at the scale of a trained pipeline, where
  // logits move by a few units along the path.
  auto pr = random_probe(6, 3, 2, n);
  for (auto& W : pr.W) W *= 0.3;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const VectorXd s = random_code(50 + seed, m, 6) / 3.0;
    const VectorXd base = VectorXd::Zero(m);
    const auto F = probe::CodeProbe::compose(pr, sae, static_cast<int>(seed % 3), 1);
    const CodeFunction f = std::cref(F);
    const VectorXd coarse = ig_scores(s, base, f, 200);
    const VectorXd fine = ig_scores(s, base, f, 20000);
    EXPECT_LT((coarse - fine).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_LT((fine - fine_integral(s, base, f, 200000)).cwiseAbs().maxCoeff(), 1e-4);

    const double gap_exact = F(s).value - F(base).value;
    double prev_gap = std::numeric_limits<double>::infinity();
    for (int q : {10, 100, 1000, 10000}) {
      const double gap = std::abs(ig_scores(s, base, f, q).sum() - gap_exact);
      EXPECT_LE(gap, prev_gap) << "q=" << q;
      prev_gap = gap;
    }
  }
}

TEST(IgScores, CompletenessAtTenThousandSteps) {
  const int m = 32, n = 10;
  const auto sae = random_sae(7, m, n, 8);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pr = random_probe(100 + seed, 2, seed % 2 == 0 ? 2 : 3, n);
    const auto F = probe::CodeProbe::compose(pr, sae, 0, static_cast<int>(seed % 2));
    const VectorXd s = random_code(200 + seed, m, 8);
    const VectorXd base = VectorXd::Zero(m);
    const double gap = ig_scores(s, base, std::cref(F), 10000).sum() - (F(s).value - F(base).value);
    EXPECT_LT(std::abs(gap), 1e-3) << "seed " << seed;
  }
}

TEST(IgScores, CauchyConvergence) {
  const int m = 16, n = 6;
  const auto sae = random_sae(11, m, n, 4);
  const auto F = probe::CodeProbe::compose(random_probe(12, 1, 2, n), sae, 0, 0);
  const VectorXd s = random_code(13, m, 4);
  const VectorXd base = VectorXd::Zero(m);
  VectorXd prev = ig_scores(s, base, std::cref(F), 8);
  double prev_change = std::numeric_limits<double>::infinity();
  for (int q = 16; q <= 1024; q *= 2) {
    const VectorXd cur = ig_scores(s, base, std::cref(F), q);
    const double change = (cur - prev).cwiseAbs().maxCoeff();
    EXPECT_LT(change, prev_change) << "q=" << q;
    prev_change = change;
    prev = cur;
  }
}

TEST(IgScores, ScaleCovariance) {
  const int m = 16, n = 6;
  const auto sae = random_sae(21, m, n, 4);
  const auto F = probe::CodeProbe::compose(random_probe(22, 1, 2, n), sae, 0, 1);
  const VectorXd s = random_code(23, m, 4);
  const VectorXd base = VectorXd::Zero(m);
  const VectorXd ref = ig_scores(s, base, std::cref(F), 30);
  for (double c : {2.0, 0.25, 1024.0}) {
    const CodeFunction scaled = [&F, c](const VectorXd& x) {
      auto vg = F(x);
      return probe::ValueGrad{c * vg.value, c * vg.grad};
    };
    const VectorXd got = ig_scores(s, base, scaled, 30);
    for (int i = 0; i < m; ++i) EXPECT_EQ(got[i], c * ref[i]);
  }
  for (double c : {3.0, 0.7}) {
    const CodeFunction scaled = [&F, c](const VectorXd& x) {
      auto vg = F(x);
      return probe::ValueGrad{c * vg.value, c * vg.grad};
    };
    const VectorXd got = ig_scores(s, base, scaled, 30);
    for (int i = 0; i < m; ++i) EXPECT_NEAR(got[i], c * ref[i], 1e-15 * std::abs(c * ref[i]) + 1e-300);
    std::vector<double> a(ref.data(), ref.data() + m), b(got.data(), got.data() + m);
    EXPECT_EQ(top_tau(a, 5), top_tau(b, 5));
  }
}

TEST(IgScores, Errors) {
  const VectorXd s = VectorXd::Ones(3);
  const CodeFunction nan_grad = [](const VectorXd& x) {
    return probe::ValueGrad{0.0, VectorXd::Constant(x.size(), std::nan(""))};
  };
  EXPECT_THROW(ig_scores(s, VectorXd::Zero(3), nan_grad, 5), NumericError);
  EXPECT_THROW(ig_scores(s, VectorXd::Zero(3), linear(VectorXd::Ones(3)), 0), ConfigError);
  EXPECT_THROW(ig_scores(s, VectorXd::Zero(4), linear(VectorXd::Ones(3)), 5), ConfigError);
}

TEST(Aggregate, SingleSampleSingleTimestepEqualsIgScores) {
  const int m = 20, n = 6;
  const auto sae = random_sae(31, m, n, 5);
  const auto pr = random_probe(32, 2, 2, n);
  const auto support = random_support(33, 1, n, 2);  // t = 1 is excluded
  AttributionConfig cfg;
  cfg.q = 40;
  cfg.tau = 3;
  cfg.y = 1;
  const auto table = aggregate(support, pr, sae, cfg);
  const auto F = probe::CodeProbe::compose(pr, sae, 0, 1);
  const VectorXd expect = ig_scores(sae::encode(support[0].H.col(0), sae).s, VectorXd::Zero(m), std::cref(F), 40);
  ASSERT_EQ(table.scores.size(), static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) EXPECT_EQ(table.scores[static_cast<std::size_t>(i)], expect[i]);
  EXPECT_EQ(table.y, 1);
  EXPECT_EQ(table.attribute, "attr_a");
  EXPECT_EQ(table.provenance.at("q"), "40");
}

TEST(Aggregate, DuplicatedSupportDoublesExactly) {
  const int m = 24, n = 6, T = 4;
  const auto sae = random_sae(41, m, n, 6);
  const auto pr = random_probe(42, T, 2, n);
  auto support = random_support(43, 5, n, T);
  AttributionConfig cfg;
  cfg.q = 10;
  const auto once = aggregate(support, pr, sae, cfg);
  const auto copy = support;
  support.insert(support.end(), copy.begin(), copy.end());
  const auto twice = aggregate(support, pr, sae, cfg);
  for (int i = 0; i < m; ++i) EXPECT_EQ(twice.scores[static_cast<std::size_t>(i)], 2.0 * once.scores[static_cast<std::size_t>(i)]);
}

TEST(Aggregate, HalvesSumToWhole) {
  const int m = 24, n = 6, T = 3;
  const auto sae = random_sae(51, m, n, 6);
  const auto pr = random_probe(52, T, 3, n);
  const auto support = random_support(53, 8, n, T);
  AttributionConfig cfg;
  cfg.q = 10;
  cfg.y = 2;
  const auto whole = aggregate(support, pr, sae, cfg);
  const auto a = aggregate({support.begin(), support.begin() + 3}, pr, sae, cfg);
  const auto b = aggregate({support.begin() + 3, support.end()}, pr, sae, cfg);
  for (std::size_t i = 0; i < static_cast<std::size_t>(m); ++i) {
    // Each table is the correctly rounded exact sum, so the halves add up to
    // within the rounding of the three results.
    const double sum = a.scores[i] + b.scores[i];
    EXPECT_NEAR(whole.scores[i], sum, 4 * std::numeric_limits<double>::epsilon() * (std::abs(a.scores[i]) + std::abs(b.scores[i])));
  }
}

TEST(Aggregate, HalfSumsMergeExactly) {
  const int m = 24, n = 6, T = 3;
  const auto sae = random_sae(55, m, n, 6);
  const auto pr = random_probe(56, T, 2, n);
  const auto support = random_support(57, 8, n, T);
  AttributionConfig cfg;
  cfg.q = 10;
  const auto whole = aggregate(support, pr, sae, cfg);
  auto a = aggregate_sums({support.begin(), support.begin() + 5}, pr, sae, cfg);
  const auto b = aggregate_sums({support.begin() + 5, support.end()}, pr, sae, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i].add(b[i]);
    EXPECT_EQ(a[i].value(), whole.scores[i]);
  }
}

TEST(Aggregate, PermutationInvariant) {
  const int m = 24, n = 6, T = 3;
  const auto sae = random_sae(61, m, n, 6);
  const auto pr = random_probe(62, T, 2, n);
  auto support = random_support(63, 9, n, T);
  AttributionConfig cfg;
  cfg.q = 7;
  for (auto mode : {BaselineMode::zero, BaselineMode::per_input}) {
    cfg.baseline = mode;
    const auto ref = aggregate(support, pr, sae, cfg);
    auto shuffled = support;
    core::RngStream rng(64, 0);
    const auto perm = core::permutation(rng, shuffled.size());
    for (std::size_t j = 0; j < perm.size(); ++j) shuffled[j] = support[perm[j]];
    std::reverse(shuffled.begin(), shuffled.end());
    // per_input baselines are means over the support, which differ in the last
    // bit under reordering; zero baselines are order-free.
    const auto got = aggregate(shuffled, pr, sae, cfg);
    if (mode == BaselineMode::zero) {
      EXPECT_EQ(got.scores, ref.scores);
    } else {
      for (std::size_t i = 0; i < ref.scores.size(); ++i) EXPECT_NEAR(got.scores[i], ref.scores[i], 1e-12);
    }
  }
}

TEST(Aggregate, Errors) {
  const auto sae = random_sae(71, 12, 4, 3);
  const auto pr = random_probe(72, 3, 2, 4);
  AttributionConfig cfg;
  cfg.tau = 3;
  EXPECT_THROW(aggregate({}, pr, sae, cfg), ConfigError);
  EXPECT_THROW(aggregate(random_support(73, 2, 4, 5), pr, sae, cfg), ConfigError);
  cfg.q = 0;
  EXPECT_THROW(aggregate(random_support(73, 2, 4, 3), pr, sae, cfg), ConfigError);
  cfg.q = 5;
  cfg.tau = 13;
  EXPECT_THROW(aggregate(random_support(73, 2, 4, 3), pr, sae, cfg), ConfigError);
}

TEST(TopTau, Examples) {
  EXPECT_EQ(top_tau({5, 1, 9, 9}, 2), (std::vector<int>{2, 3}));
  EXPECT_EQ(top_tau({5, 1, 9, 9}, 4), (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(top_tau({7, 7, 7, 7, 7}, 3), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(top_tau({-1, -3, -2}, 1), (std::vector<int>{0}));
  EXPECT_THROW(top_tau({1, 2}, 0), ConfigError);
  EXPECT_THROW(top_tau({1, 2}, 3), ConfigError);
}

TEST(TopTau, MatchesSortOracle) {
  core::RngStream rng(81, 0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> scores(30);
    for (auto& v : scores) v = std::floor(rng.uniform(-5, 5));  // many ties
    const int tau = 1 + static_cast<int>(rng.below(30));
    std::vector<int> idx(30);
    for (int i = 0; i < 30; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
    idx.resize(tau);
    std::sort(idx.begin(), idx.end());
    EXPECT_EQ(top_tau(scores, tau), idx);
  }
}

TEST(SelectTopTau, CarriesIdentifiers) {
  AttributionTable table;
  table.attribute = "attr_b";
  table.y = 2;
  table.scores = {0.1, 0.5, -0.2, 0.4};
  const auto set = select_top_tau(table, 2);
  EXPECT_EQ(set.A, (std::vector<int>{1, 3}));
  EXPECT_EQ(set.attribute, "attr_b");
  EXPECT_EQ(set.y, 2);
}

TEST(SelectCompatible, Examples) {
  AttributionTable target, other;
  target.attribute = "attr_b";
  target.y = 2;
  target.scores = {9, 8, 7, 6, 5, -1, 0};
  other.scores = {1, -3, 0, 2, 4, 5, 5};
  // 0 is taken, 1 opposes the other class, 5 and 6 carry no positive score.
  EXPECT_EQ(select_compatible(target, other, {0}, 2).A, (std::vector<int>{2, 3}));
  EXPECT_EQ(select_compatible(target, other, {0}, 7).A, (std::vector<int>{2, 3, 4}));
  EXPECT_EQ(select_compatible(target, other, {}, 1).A, (std::vector<int>{0}));
  const auto set = select_compatible(target, other, {}, 3);
  EXPECT_EQ(set.attribute, "attr_b");
  EXPECT_EQ(set.y, 2);
  EXPECT_THROW(select_compatible(target, other, {}, 0), ConfigError);
  other.scores.pop_back();
  EXPECT_THROW(select_compatible(target, other, {}, 2), ConfigError);
}

TEST(SelectCompatible, DisjointAndNonOpposingSubsetOfRanking) {
  core::RngStream rng(82, 0);
  for (int trial = 0; trial < 50; ++trial) {
    AttributionTable target, other;
    for (int i = 0; i < 40; ++i) {
      target.scores.push_back(std::floor(rng.uniform(-5, 5)));
      other.scores.push_back(std::floor(rng.uniform(-5, 5)));
    }
    std::vector<int> taken;
    for (int i = 0; i < 40; ++i)
      if (rng.uniform() < 0.3) taken.push_back(i);
    const int tau = 1 + static_cast<int>(rng.below(40));
    const auto A = select_compatible(target, other, taken, tau).A;
    EXPECT_LE(static_cast<int>(A.size()), tau);
    EXPECT_TRUE(std::is_sorted(A.begin(), A.end()));
    double weakest = 1e300;
    for (int i : A) {
      EXPECT_EQ(std::count(taken.begin(), taken.end(), i), 0);
      EXPECT_GE(other.scores[i], 0.0);
      EXPECT_GT(target.scores[i], 0.0);
      weakest = std::min(weakest, target.scores[i]);
    }
    // Anything eligible left out scores no higher than the weakest pick, and
    // only when the set is full.
    for (int i = 0; i < 40; ++i) {
      const bool eligible = target.scores[i] > 0.0 && other.scores[i] >= 0.0 && !std::count(taken.begin(), taken.end(), i);
      if (eligible && !std::count(A.begin(), A.end(), i)) {
        EXPECT_EQ(static_cast<int>(A.size()), tau);
        EXPECT_LE(target.scores[i], weakest);
      }
    }
  }
}

TEST(ActivationSelect, Examples) {
  // Identity SAE with k = n: codes equal the (nonnegative) hidden values.
  sae::SaeParams id;
  id.W_enc = MatrixXd::Identity(4, 4);
  id.W_dec = MatrixXd::Identity(4, 4);
  id.b_pre = VectorXd::Zero(4);
  id.k = 4;
  MatrixXd H(4, 2);
  H << 0.5, 0.0, 2.0, 0.0, 1.0, 0.0, 0.25, 0.0;
  const auto one = activation_select({{0, H}}, id, 1, "attr_a", 0);
  EXPECT_EQ(one.A, (std::vector<int>{1}));
  EXPECT_EQ(one.attribute, "attr_a");
  EXPECT_EQ(one.y, 0);

  const auto zero = activation_select({{0, MatrixXd::Zero(4, 3)}, {1, MatrixXd::Zero(4, 3)}}, id, 3);
  EXPECT_EQ(zero.A, (std::vector<int>{0, 1, 2}));
  EXPECT_THROW(activation_select({}, id, 1), ConfigError);
}

TEST(Persistence, TableAndFeatureSetRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "difflens_test_attribution";
  std::filesystem::create_directories(dir);
  AttributionTable table;
  table.attribute = "attr_a";
  table.y = 1;
  table.scores = {0.1, -1e-300, 3.0e12, 1.0 / 3.0};
  table.provenance = {{"q", "50"}, {"support", "256"}};
  save_table(dir / "t.txt", table);
  const auto t2 = load_table(dir / "t.txt");
  EXPECT_EQ(t2.scores, table.scores);
  EXPECT_EQ(t2.attribute, "attr_a");
  EXPECT_EQ(t2.y, 1);
  EXPECT_EQ(t2.provenance, table.provenance);

  const BiasFeatureSet set{"attr_b", 2, {3, 8, 11}};
  save_feature_set(dir / "f.txt", set);
  const auto s2 = load_feature_set(dir / "f.txt");
  EXPECT_EQ(s2.A, set.A);
  EXPECT_EQ(s2.attribute, set.attribute);
  EXPECT_EQ(s2.y, set.y);
  std::filesystem::remove_all(dir);
}

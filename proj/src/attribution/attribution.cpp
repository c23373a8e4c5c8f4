#include "difflens/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "difflens/core/error.hpp"
#include "difflens/core/exact_sum.hpp"
#include "difflens/core/tensor_io.hpp"

namespace difflens::attribution {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Eigen::VectorXd ig_scores(const VectorXd& s, const VectorXd& s_base, const CodeFunction& F, int q) {
  if (q < 1) throw ConfigError("ig_scores: q must be at least 1");
  if (s.size() != s_base.size()) throw ConfigError("ig_scores: baseline length mismatch");
  const VectorXd delta = s - s_base;
  std::vector<core::ExactSum> sum(static_cast<std::size_t>(s.size()));
  for (int k = 1; k <= q; ++k) {
    const auto vg = F(s_base + (static_cast<double>(k) / q) * delta);
    if (vg.grad.size() != s.size()) throw ConfigError("ig_scores: gradient length mismatch");
    if (!vg.grad.allFinite()) throw NumericError("ig_scores: non-finite gradient");
    for (Eigen::Index i = 0; i < s.size(); ++i) sum[static_cast<std::size_t>(i)].add(vg.grad[i]);
  }
  VectorXd out(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    out[i] = delta[i] * sum[static_cast<std::size_t>(i)].quotient(static_cast<std::uint64_t>(q));
  return out;
}

void AttributionConfig::validate(int m) const {
  if (q < 1) throw ConfigError("attribution: q must be at least 1");
  if (tau < 1 || tau > m) throw ConfigError("attribution: tau must lie in [1, m]");
  if (support_size < 1) throw ConfigError("attribution: support size must be at least 1");
}

namespace {

int check_support(const std::vector<SupportSample>& support, const sae::SaeParams& sae) {
  if (support.empty()) throw ConfigError("attribution: empty support");
  const auto T = support.front().H.cols();
  for (const auto& smp : support)
    if (smp.H.rows() != sae.n() || smp.H.cols() != T)
      throw ConfigError("attribution: support hidden states have inconsistent shapes");
  if (T < 2) throw ConfigError("attribution: need at least two timesteps");
  return static_cast<int>(T);
}

}  // namespace

std::vector<core::ExactSum> aggregate_sums(const std::vector<SupportSample>& support, const probe::ProbeParams& probe,
                                           const sae::SaeParams& sae, const AttributionConfig& cfg) {
  cfg.validate(sae.m());
  const int T = check_support(support, sae);
  if (probe.T() != T) throw ConfigError("attribution: probe and support disagree on T");
  const auto m = static_cast<std::size_t>(sae.m());
  std::vector<core::ExactSum> acc(m);

  for (int t = 0; t < T - 1; ++t) {
    MatrixXd H(sae.n(), static_cast<Eigen::Index>(support.size()));
    for (std::size_t j = 0; j < support.size(); ++j) H.col(static_cast<Eigen::Index>(j)) = support[j].H.col(t);
    const MatrixXd S = sae::encode_batch(H, sae);
    VectorXd base = VectorXd::Zero(sae.m());
    if (cfg.baseline == BaselineMode::per_input) base = S.rowwise().mean();
    const auto F = probe::CodeProbe::compose(probe, sae, t, cfg.y);
    for (Eigen::Index j = 0; j < S.cols(); ++j) {
      const VectorXd sc = ig_scores(S.col(j), base, std::cref(F), cfg.q);
      for (std::size_t i = 0; i < m; ++i) acc[i].add(sc[static_cast<Eigen::Index>(i)]);
    }
  }
  return acc;
}

AttributionTable aggregate(const std::vector<SupportSample>& support, const probe::ProbeParams& probe,
                           const sae::SaeParams& sae, const AttributionConfig& cfg) {
  const auto acc = aggregate_sums(support, probe, sae, cfg);
  const auto m = acc.size();
  const int T = probe.T();
  AttributionTable table;
  table.attribute = probe.attribute;
  table.y = cfg.y;
  table.scores.reserve(m);
  for (const auto& a : acc) table.scores.push_back(a.value());
  table.provenance["q"] = std::to_string(cfg.q);
  table.provenance["support"] = std::to_string(support.size());
  table.provenance["baseline"] = cfg.baseline == BaselineMode::zero ? "zero" : "per_input";
  table.provenance["excluded_t"] = std::to_string(T - 1);
  return table;
}

std::vector<int> top_tau(const std::vector<double>& scores, int tau) {
  const auto m = static_cast<int>(scores.size());
  if (tau < 1 || tau > m) throw ConfigError("select_top_tau: tau must lie in [1, m]");
  for (double v : scores)
    if (!std::isfinite(v)) throw NumericError("select_top_tau: non-finite score");
  std::vector<int> idx(static_cast<std::size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  idx.resize(static_cast<std::size_t>(tau));
  std::sort(idx.begin(), idx.end());
  return idx;
}

BiasFeatureSet select_top_tau(const AttributionTable& table, int tau) {
  return {table.attribute, table.y, top_tau(table.scores, tau)};
}

BiasFeatureSet select_compatible(const AttributionTable& target, const AttributionTable& other,
                                 const std::vector<int>& taken, int tau) {
  const auto m = target.scores.size();
  if (other.scores.size() != m) throw ConfigError("select_compatible: tables differ in m");
  if (tau < 1 || tau > static_cast<int>(m)) throw ConfigError("select_compatible: tau must lie in [1, m]");
  for (std::size_t i = 0; i < m; ++i)
    if (!std::isfinite(target.scores[i]) || !std::isfinite(other.scores[i]))
      throw NumericError("select_compatible: non-finite score");
  std::vector<int> ranked(m);
  std::iota(ranked.begin(), ranked.end(), 0);
  std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
    return target.scores[static_cast<std::size_t>(a)] > target.scores[static_cast<std::size_t>(b)];
  });
  std::vector<int> picked;
  for (int i : ranked) {
    const auto u = static_cast<std::size_t>(i);
    if (static_cast<int>(picked.size()) == tau || target.scores[u] <= 0.0) break;
    if (other.scores[u] < 0.0 || std::find(taken.begin(), taken.end(), i) != taken.end()) continue;
    picked.push_back(i);
  }
  std::sort(picked.begin(), picked.end());
  return {target.attribute, target.y, picked};
}

BiasFeatureSet activation_select(const std::vector<SupportSample>& support, const sae::SaeParams& sae,
                                 int tau, const std::string& attribute, int y) {
  const int T = check_support(support, sae);
  const auto m = static_cast<std::size_t>(sae.m());
  std::vector<core::ExactSum> acc(m);
  for (int t = 0; t < T - 1; ++t) {
    MatrixXd H(sae.n(), static_cast<Eigen::Index>(support.size()));
    for (std::size_t j = 0; j < support.size(); ++j) H.col(static_cast<Eigen::Index>(j)) = support[j].H.col(t);
    const MatrixXd S = sae::encode_batch(H, sae);
    for (Eigen::Index j = 0; j < S.cols(); ++j)
      for (std::size_t i = 0; i < m; ++i) acc[i].add(S(static_cast<Eigen::Index>(i), j));
  }
  const double count = static_cast<double>(support.size()) * (T - 1);
  std::vector<double> mean;
  for (const auto& a : acc) mean.push_back(a.value() / count);
  return {attribute, y, top_tau(mean, tau)};
}

namespace {

std::map<std::string, std::string> read_header(std::istringstream& in, std::vector<std::string>& body) {
  std::map<std::string, std::string> header;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("malformed header line: " + line);
      header[line.substr(2, eq - 2)] = line.substr(eq + 1);
    } else if (!line.empty()) {
      body.push_back(line);
    }
  }
  return header;
}

}  // namespace

void save_table(const std::filesystem::path& path, const AttributionTable& table) {
  std::ostringstream out;
  out << "# attribute=" << table.attribute << "\n# class=" << table.y << '\n';
  for (const auto& [k, v] : table.provenance) out << "# " << k << '=' << v << '\n';
  out << "feature score\n";
  for (std::size_t i = 0; i < table.scores.size(); ++i) out << i << ' ' << core::format_double(table.scores[i]) << '\n';
  core::atomic_write_text(path, out.str());
}

AttributionTable load_table(const std::filesystem::path& path) {
  std::istringstream in(core::read_text(path));
  std::vector<std::string> body;
  auto header = read_header(in, body);
  AttributionTable table;
  table.attribute = header.at("attribute");
  table.y = std::stoi(header.at("class"));
  header.erase("attribute");
  header.erase("class");
  table.provenance = header;
  if (body.empty() || body.front() != "feature score") throw FormatError("attribution table: missing column header");
  for (std::size_t i = 1; i < body.size(); ++i) {
    std::istringstream rec(body[i]);
    std::size_t idx;
    std::string v;
    if (!(rec >> idx >> v) || idx != i - 1) throw FormatError("attribution table: malformed row " + body[i]);
    table.scores.push_back(std::stod(v));
  }
  return table;
}

void save_feature_set(const std::filesystem::path& path, const BiasFeatureSet& set) {
  std::ostringstream out;
  out << "# attribute=" << set.attribute << "\n# class=" << set.y << '\n';
  for (int i : set.A) out << i << '\n';
  core::atomic_write_text(path, out.str());
}

BiasFeatureSet load_feature_set(const std::filesystem::path& path) {
  std::istringstream in(core::read_text(path));
  std::vector<std::string> body;
  const auto header = read_header(in, body);
  BiasFeatureSet set{header.at("attribute"), std::stoi(header.at("class")), {}};
  for (const auto& line : body) set.A.push_back(std::stoi(line));
  if (!std::is_sorted(set.A.begin(), set.A.end()) ||
      std::adjacent_find(set.A.begin(), set.A.end()) != set.A.end())
    throw FormatError("feature set must be strictly ascending");
  return set;
}

}  // namespace difflens::attribution

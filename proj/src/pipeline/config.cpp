#include "difflens/pipeline/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "difflens/core/error.hpp"
#include "difflens/core/tensor_io.hpp"

namespace difflens::pipeline {

namespace {

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;
using Getter = std::function<std::string(const ExperimentConfig&)>;

struct Field {
  std::string key;
  Getter get;
  Setter set;
};

std::string fmt(int v) { return std::to_string(v); }
std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(double v) { return core::format_double(v); }
std::string fmt(const std::string& v) { return v; }
std::string fmt(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + core::format_double(v[i]);
  return out;
}

void parse(const std::string& s, int& out) {
  std::size_t pos = 0;
  out = std::stoi(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
}
void parse(const std::string& s, std::uint64_t& out) {
  std::size_t pos = 0;
  if (!s.empty() && s.front() == '-') throw std::invalid_argument(s);
  out = std::stoull(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
}
void parse(const std::string& s, double& out) {
  std::size_t pos = 0;
  out = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
}
void parse(const std::string& s, std::string& out) { out = s; }
void parse(std::string s, std::vector<double>& out) {
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    double d;
    parse(tok, d);
    v.push_back(d);
  }
  out = std::move(v);
}

template <typename Section, typename T>
Field field(const std::string& key, Section ExperimentConfig::*section, T Section::*member) {
  return {key, [=](const ExperimentConfig& c) { return fmt(c.*section.*member); },
          [=](ExperimentConfig& c, const std::string& v) { parse(v, c.*section.*member); }};
}

const std::vector<std::pair<std::string, std::vector<Field>>>& schema() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, std::vector<Field>>> s = {
      {"data",
       {field("side", &C::data, &DataConfig::side), field("n_train", &C::data, &DataConfig::n_train),
        field("n_heldout", &C::data, &DataConfig::n_heldout),
        field("attr_a_probs", &C::data, &DataConfig::attr_a_probs),
        field("attr_b_probs", &C::data, &DataConfig::attr_b_probs), field("seed", &C::data, &DataConfig::seed)}},
      {"schedule",
       {field("T", &C::schedule, &ScheduleConfig::T), field("beta_min", &C::schedule, &ScheduleConfig::beta_min),
        field("beta_max", &C::schedule, &ScheduleConfig::beta_max)}},
      {"denoiser",
       {field("hidden1", &C::denoiser, &DenoiserConfig::hidden1),
        field("bottleneck", &C::denoiser, &DenoiserConfig::bottleneck),
        field("hidden2", &C::denoiser, &DenoiserConfig::hidden2), field("embed", &C::denoiser, &DenoiserConfig::embed),
        field("epochs", &C::denoiser, &DenoiserConfig::epochs), field("lr", &C::denoiser, &DenoiserConfig::lr),
        field("batch", &C::denoiser, &DenoiserConfig::batch), field("seed", &C::denoiser, &DenoiserConfig::seed)}},
      {"dump", {field("chains", &C::dump, &DumpConfig::chains), field("seed", &C::dump, &DumpConfig::seed)}},
      {"sae",
       {field("m", &C::sae, &SaeConfig::m), field("k", &C::sae, &SaeConfig::k), field("lr", &C::sae, &SaeConfig::lr),
        field("epochs", &C::sae, &SaeConfig::epochs), field("batch", &C::sae, &SaeConfig::batch),
        field("seed", &C::sae, &SaeConfig::seed)}},
      {"probe",
       {field("lr", &C::probe, &ProbeConfig::lr), field("iterations", &C::probe, &ProbeConfig::iterations),
        field("holdout", &C::probe, &ProbeConfig::holdout),
        field("oracle_hidden", &C::probe, &ProbeConfig::oracle_hidden),
        field("oracle_epochs", &C::probe, &ProbeConfig::oracle_epochs),
        field("oracle_lr", &C::probe, &ProbeConfig::oracle_lr),
        field("oracle_batch", &C::probe, &ProbeConfig::oracle_batch),
        field("oracle_min_accuracy", &C::probe, &ProbeConfig::oracle_min_accuracy),
        field("oracle_seed", &C::probe, &ProbeConfig::oracle_seed), field("pca_dim", &C::probe, &ProbeConfig::pca_dim)}},
      {"attribution",
       {field("q", &C::attribution, &AttributionSection::q), field("tau", &C::attribution, &AttributionSection::tau),
        field("support", &C::attribution, &AttributionSection::support),
        field("baseline", &C::attribution, &AttributionSection::baseline)}},
      {"intervention",
       {field("attribute", &C::intervention, &InterventionConfig::attribute),
        field("mode", &C::intervention, &InterventionConfig::mode),
        field("target_ratio", &C::intervention, &InterventionConfig::target_ratio),
        field("beta_lo", &C::intervention, &InterventionConfig::beta_lo),
        field("beta_hi", &C::intervention, &InterventionConfig::beta_hi),
        field("tolerance", &C::intervention, &InterventionConfig::tolerance),
        field("max_iter", &C::intervention, &InterventionConfig::max_iter),
        field("samples", &C::intervention, &InterventionConfig::samples),
        field("seed", &C::intervention, &InterventionConfig::seed)}},
      {"evaluation",
       {field("samples", &C::evaluation, &EvaluationConfig::samples),
        field("seed", &C::evaluation, &EvaluationConfig::seed),
        field("curve_lo", &C::evaluation, &EvaluationConfig::curve_lo),
        field("curve_hi", &C::evaluation, &EvaluationConfig::curve_hi),
        field("curve_points", &C::evaluation, &EvaluationConfig::curve_points),
        field("curve_samples", &C::evaluation, &EvaluationConfig::curve_samples)}},
      {"gallery",
       {field("rows", &C::gallery, &GalleryConfig::rows), field("features", &C::gallery, &GalleryConfig::features),
        field("betas", &C::gallery, &GalleryConfig::betas), field("seed", &C::gallery, &GalleryConfig::seed)}},
  };
  return s;
}

void check(bool cond, const std::string& what) {
  if (!cond) throw ConfigError("config: " + what);
}

void check_probs(const std::vector<double>& p, std::size_t n, const std::string& name) {
  check(p.size() == n, name + " must have " + std::to_string(n) + " entries");
  double sum = 0.0;
  for (double v : p) {
    check(v >= 0.0, name + " must be nonnegative");
    sum += v;
  }
  check(std::abs(sum - 1.0) <= 1e-12, name + " must sum to 1");
}

}  // namespace

const std::vector<std::string>& ExperimentConfig::section_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, fields] : schema()) out.push_back(name);
    return out;
  }();
  return names;
}

void ExperimentConfig::validate() const {
  check(data.side >= 8, "data.side must be at least 8");
  check(data.n_train >= 1 && data.n_heldout >= 1, "data sizes must be positive");
  check_probs(data.attr_a_probs, 2, "data.attr_a_probs");
  check_probs(data.attr_b_probs, 3, "data.attr_b_probs");
  check(schedule.T >= 2, "schedule.T must be at least 2");
  check(schedule.beta_min > 0.0 && schedule.beta_min <= schedule.beta_max && schedule.beta_max < 1.0,
        "schedule needs 0 < beta_min <= beta_max < 1");
  check(denoiser.hidden1 >= 1 && denoiser.bottleneck >= 1 && denoiser.hidden2 >= 1, "denoiser widths must be positive");
  check(denoiser.embed >= 2 && denoiser.embed % 2 == 0, "denoiser.embed must be even and positive");
  check(denoiser.epochs >= 1 && denoiser.batch >= 1 && denoiser.lr >= 0.0, "denoiser training settings invalid");
  check(dump.chains >= 2, "dump.chains must be at least 2");
  check(sae.m > denoiser.bottleneck, "sae.m must exceed the bottleneck width");
  check(sae.k >= 1 && sae.k <= sae.m, "sae.k must lie in [1, m]");
  check(sae.epochs >= 1 && sae.batch >= 1 && sae.lr >= 0.0, "sae training settings invalid");
  check(probe.lr >= 0.0 && probe.iterations >= 0, "probe training settings invalid");
  check(probe.holdout >= 0.0 && probe.holdout < 1.0, "probe.holdout must lie in [0, 1)");
  check(probe.oracle_hidden >= 1 && probe.oracle_epochs >= 1 && probe.oracle_batch >= 1 && probe.oracle_lr >= 0.0,
        "oracle training settings invalid");
  check(probe.pca_dim >= 1 && probe.pca_dim <= data.side * data.side, "probe.pca_dim out of range");
  check(attribution.q >= 1, "attribution.q must be at least 1");
  check(attribution.tau >= 1 && attribution.tau <= sae.m, "attribution.tau must lie in [1, m]");
  check(attribution.support >= 1 && attribution.support <= dump.chains, "attribution.support must lie in [1, dump.chains]");
  check(attribution.baseline == "zero" || attribution.baseline == "per_input", "attribution.baseline must be zero or per_input");
  check(intervention.attribute == "attr_a", "intervention.attribute: calibration supports the binary attribute attr_a");
  check(intervention.mode == "scaling" || intervention.mode == "adding", "intervention.mode must be scaling or adding");
  check(intervention.target_ratio > 0.0 && intervention.target_ratio < 1.0, "intervention.target_ratio must lie in (0, 1)");
  check(intervention.beta_lo <= intervention.beta_hi, "intervention beta bounds reversed");
  check(intervention.beta_lo > 0.0, "intervention.beta_lo must be positive (the search runs on log beta)");
  check(intervention.tolerance >= 0.0 && intervention.max_iter >= 0 && intervention.samples >= 1,
        "intervention calibration settings invalid");
  check(evaluation.samples >= 2 * probe.pca_dim, "evaluation.samples must be at least 2 * pca_dim");
  check(evaluation.curve_samples >= 2 * probe.pca_dim, "evaluation.curve_samples must be at least 2 * pca_dim");
  check(evaluation.curve_points >= 2 && evaluation.curve_lo > 0.0 && evaluation.curve_lo < evaluation.curve_hi,
        "evaluation curve grid invalid");
  check(gallery.rows >= 1 && gallery.features >= 1 && gallery.features <= attribution.tau && !gallery.betas.empty(),
        "gallery settings invalid");
}

std::string ExperimentConfig::section_text(const std::string& section) const {
  for (const auto& [name, fields] : schema()) {
    if (name != section) continue;
    std::string out = "[" + name + "]\n";
    for (const auto& f : fields) out += f.key + " = " + f.get(*this) + "\n";
    return out;
  }
  throw ConfigError("config: unknown section " + section);
}

std::string ExperimentConfig::to_ini() const {
  std::string out;
  for (const auto& name : section_names()) out += (out.empty() ? "" : "\n") + section_text(name);
  return out;
}

void set_field(ExperimentConfig& cfg, const std::string& section, const std::string& key, const std::string& value) {
  const auto it = std::find_if(schema().begin(), schema().end(), [&](const auto& s) { return s.first == section; });
  if (it == schema().end()) throw ConfigError("config: unknown section [" + section + "]");
  const auto f = std::find_if(it->second.begin(), it->second.end(), [&](const Field& fd) { return fd.key == key; });
  if (f == it->second.end()) throw ConfigError("config: unknown key " + section + "." + key);
  try {
    f->set(cfg, value);
  } catch (const std::logic_error&) {
    throw ConfigError("config: cannot parse " + section + "." + key + " = '" + value + "'");
  }
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' outside any section");
    const auto& names = ExperimentConfig::section_names();
    if (std::find(names.begin(), names.end(), section) == names.end())
      throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) set_field(cfg, section, key, value.data());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(core::read_text(path));
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace difflens::pipeline

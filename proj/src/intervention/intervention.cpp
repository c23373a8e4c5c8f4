#include "difflens/intervention.hpp"

#include <cmath>
#include <sstream>

#include "difflens/core/error.hpp"
#include "difflens/core/rng.hpp"
#include "difflens/core/tensor_io.hpp"

namespace difflens::intervention {

using Eigen::VectorXd;

namespace {

constexpr std::uint64_t kDrawStreamBase = std::uint64_t{1} << 63;

void check_features(const std::vector<int>& A, Eigen::Index m) {
  for (int i : A)
    if (i < 0 || i >= m) throw ConfigError("intervention: feature index out of range");
}

}  // namespace

Mode parse_mode(const std::string& name) {
  if (name == "scaling") return Mode::scaling;
  if (name == "adding") return Mode::adding;
  throw ConfigError("unknown intervention mode '" + name + "' (expected scaling or adding)");
}

std::string mode_name(Mode mode) { return mode == Mode::scaling ? "scaling" : "adding"; }

double identity_beta(Mode mode) { return mode == Mode::scaling ? 1.0 : 0.0; }

VectorXd intervene_code(const VectorXd& s, const std::vector<int>& A, double beta, Mode mode) {
  check_features(A, s.size());
  if (!std::isfinite(beta)) throw ConfigError("intervene_code: beta must be finite");
  VectorXd out = s;
  for (int i : A) out[i] = mode == Mode::scaling ? beta * s[i] : s[i] + beta;
  return out;
}

VectorXd intervene_code(const VectorXd& s, const std::vector<FeatureEdit>& edits) {
  VectorXd out = s;
  for (const auto& e : edits) out = intervene_code(out, e.A, e.beta, e.mode);
  return out;
}

VectorXd apply_delta(const VectorXd& h, const VectorXd& s, const VectorXd& s_new, const sae::SaeParams& sae) {
  if (h.size() != sae.n() || s.size() != sae.m() || s_new.size() != sae.m())
    throw ConfigError("apply_delta: dimension mismatch");
  VectorXd out = h;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s_new[i] != s[i]) out += (s_new[i] - s[i]) * sae.W_dec.col(i);
  return out;
}

void InterventionSpec::validate(int m) const {
  if (entries.empty() || entries.size() != probs.size())
    throw ConfigError("intervention spec: need one probability per class entry");
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ConfigError("intervention spec: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("intervention spec: probabilities do not sum to 1");
  for (const auto& e : entries) {
    if (!std::isfinite(e.beta)) throw ConfigError("intervention spec: beta must be finite");
    check_features(e.A, m);
  }
}

bool InterventionSpec::is_identity() const {
  for (const auto& e : entries)
    if (e.beta != identity_beta(e.mode) && !e.A.empty()) return false;
  return true;
}

int drawn_class(const InterventionSpec& spec, std::size_t chain) {
  core::RngStream rng(spec.seed, kDrawStreamBase | chain);
  return static_cast<int>(rng.categorical(spec.probs));
}

diffusion::Hook make_hook(const std::vector<InterventionSpec>& specs, const sae::SaeParams& sae) {
  for (const auto& spec : specs) spec.validate(sae.m());
  return [specs, sae](const diffusion::HiddenState& state, std::size_t chain) {
    std::vector<FeatureEdit> edits;
    for (const auto& spec : specs) edits.push_back(spec.entries[static_cast<std::size_t>(drawn_class(spec, chain))]);
    const VectorXd s = sae::encode(state.h, sae).s;
    return diffusion::HiddenState{apply_delta(state.h, s, intervene_code(s, edits), sae), state.t};
  };
}

diffusion::Hook make_hook(const InterventionSpec& spec, const sae::SaeParams& sae) {
  return make_hook(std::vector<InterventionSpec>{spec}, sae);
}

InterventionSpec single_edit_spec(const std::string& attribute, const FeatureEdit& edit, std::uint64_t seed) {
  return {attribute, {edit}, {1.0}, seed};
}

void save_spec(const std::filesystem::path& path, const InterventionSpec& spec) {
  std::ostringstream out;
  out << "attribute = " << spec.attribute << "\nseed = " << spec.seed << "\nclasses = " << spec.entries.size()
      << '\n';
  for (std::size_t c = 0; c < spec.entries.size(); ++c) {
    const auto& e = spec.entries[c];
    out << "\n[class." << c << "]\nprobability = " << core::format_double(spec.probs[c])
        << "\nmode = " << mode_name(e.mode) << "\nbeta = " << core::format_double(e.beta) << "\nfeatures =";
    for (int i : e.A) out << ' ' << i;
    out << '\n';
  }
  core::atomic_write_text(path, out.str());
}

InterventionSpec load_spec(const std::filesystem::path& path) {
  std::istringstream in(core::read_text(path));
  InterventionSpec spec;
  std::string line;
  int cls = -1;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(' ');
    const auto e = s.find_last_not_of(' ');
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      cls = std::stoi(line.substr(7, line.size() - 8));
      if (cls != static_cast<int>(spec.entries.size())) throw FormatError("intervention spec: classes out of order");
      spec.entries.emplace_back();
      spec.probs.push_back(0.0);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("intervention spec: malformed line " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (cls < 0) {
      if (key == "attribute") spec.attribute = value;
      else if (key == "seed") spec.seed = std::stoull(value);
      else if (key != "classes") throw FormatError("intervention spec: unknown key " + key);
      continue;
    }
    auto& e = spec.entries.back();
    if (key == "probability") spec.probs.back() = std::stod(value);
    else if (key == "mode") e.mode = parse_mode(value);
    else if (key == "beta") e.beta = std::stod(value);
    else if (key == "features") {
      std::istringstream f(value);
      int i;
      while (f >> i) e.A.push_back(i);
    } else throw FormatError("intervention spec: unknown key " + key);
  }
  return spec;
}

CalibrationResult calibrate_beta(const std::function<double(double)>& ratio_at, double target, double lo,
                                 double hi, double tol, int max_iter) {
  if (!(lo > 0.0) || !(hi >= lo) || !std::isfinite(hi)) throw ConfigError("calibrate_beta: need 0 < lo <= hi");
  if (!(tol >= 0.0) || max_iter < 0) throw ConfigError("calibrate_beta: invalid tolerance or iteration budget");
  CalibrationResult res;
  auto eval = [&](double beta) {
    const double r = ratio_at(beta);
    if (!std::isfinite(r)) throw NumericError("calibrate_beta: non-finite ratio");
    if (res.trace.empty() || std::abs(r - target) < std::abs(res.ratio - target)) {
      res.beta = beta;
      res.ratio = r;
    }
    res.range_lo = res.trace.empty() ? r : std::min(res.range_lo, r);
    res.range_hi = res.trace.empty() ? r : std::max(res.range_hi, r);
    res.trace.push_back({beta, r});
    return r;
  };
  auto done = [&] { return std::abs(res.ratio - target) <= tol; };

  double a = lo, b = hi;
  const double fa = eval(a);
  if (!done() && hi != lo) eval(b);
  if (done() || hi == lo || target < res.range_lo - tol || target > res.range_hi + tol) {
    res.reached = done();
    return res;
  }
  const bool a_below = fa < target;
  for (int it = 0; it < max_iter && !done(); ++it) {
    const double mid = std::exp(0.5 * (std::log(a) + std::log(b)));
    const double f = eval(mid);
    if ((f < target) == a_below) a = mid;
    else b = mid;
  }
  res.reached = done();
  return res;
}

ImageGrid feature_gallery(const diffusion::DenoiserParams& params, const diffusion::DiffusionSchedule& schedule,
                          const sae::SaeParams& sae, int feature, const std::vector<double>& betas,
                          std::size_t rows, std::uint64_t seed) {
  if (feature < 0 || feature >= sae.m()) throw ConfigError("feature_gallery: feature index out of range");
  ImageGrid grid{rows, betas.size(), std::vector<core::Tensor>(rows * betas.size())};
  for (std::size_t c = 0; c < betas.size(); ++c) {
    const auto spec = single_edit_spec("gallery", {{feature}, betas[c], Mode::scaling});
    const auto imgs = diffusion::sample(params, schedule, rows, seed, make_hook(spec, sae));
    for (std::size_t r = 0; r < rows; ++r) grid.images[r * grid.cols + c] = imgs[r];
  }
  return grid;
}

void write_pgm(const std::filesystem::path& path, const ImageGrid& grid, int scale) {
  if (grid.images.empty()) throw ConfigError("write_pgm: empty grid");
  const auto side = grid.images.front().shape().at(0);
  const std::size_t cell = side * static_cast<std::size_t>(scale);
  const std::size_t W = grid.cols * (cell + 1) + 1;
  const std::size_t H = grid.rows * (cell + 1) + 1;
  std::string pixels(W * H, static_cast<char>(128));
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const auto& img = grid.at(r, c);
      for (std::size_t y = 0; y < cell; ++y)
        for (std::size_t x = 0; x < cell; ++x) {
          const double v = img[(y / static_cast<std::size_t>(scale)) * side + x / static_cast<std::size_t>(scale)];
          const auto byte = static_cast<unsigned char>(std::lround(std::clamp((v + 1.0) * 127.5, 0.0, 255.0)));
          pixels[(r * (cell + 1) + 1 + y) * W + c * (cell + 1) + 1 + x] = static_cast<char>(byte);
        }
    }
  core::atomic_write(path, [&](std::ostream& out) {
    out << "P5\n" << W << ' ' << H << "\n255\n";
    out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
  });
}

}  // namespace difflens::intervention

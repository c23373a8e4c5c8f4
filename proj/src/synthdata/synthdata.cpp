#include "difflens/synthdata.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "difflens/core/error.hpp"
#include "difflens/core/tensor_io.hpp"

namespace difflens::synth {

namespace {

constexpr int kSupersample = 4;
constexpr std::array<double, kClassesB> kRadiusFraction{2.5 / 16.0, 3.5 / 16.0, 4.5 / 16.0};
constexpr double kShadeRange = 0.6;
// Cross arms reach 1.3 r; their half-width w (in units of r) makes the cross
// cover the same area as the disc: 8 a w - 4 w^2 = pi with a = 1.3.
constexpr double kCrossReach = 1.3;
const double kCrossHalfWidth = kCrossReach - std::sqrt(kCrossReach * kCrossReach - std::numbers::pi / 4.0);

void validate_probs(std::span<const double> p, const char* name) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " has a negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw ConfigError(std::string(name) + " does not sum to 1");
}

bool inside_glyph(int family, double radius, double dx, double dy) {
  if (family == 0) return dx * dx + dy * dy <= radius * radius;
  const double half_width = radius * kCrossHalfWidth;
  const double reach = radius * kCrossReach;
  const double ax = std::abs(dx), ay = std::abs(dy);
  return (ax <= reach && ay <= half_width) || (ay <= reach && ax <= half_width);
}

}  // namespace

void FactorVector::validate() const {
  if (attr_a < 0 || attr_a >= kClassesA) throw ConfigError("attr_a out of range");
  if (attr_b < 0 || attr_b >= kClassesB) throw ConfigError("attr_b out of range");
  if (!(nuisance >= 0.0 && nuisance <= 1.0)) throw ConfigError("nuisance outside [0, 1]");
  for (double j : jitter)
    if (!(j >= -1.0 && j <= 1.0)) throw ConfigError("jitter outside [-1, 1]");
}

void BiasSpec::validate() const {
  validate_probs(attr_a_probs, "attr_a_probs");
  validate_probs(attr_b_probs, "attr_b_probs");
}

double background_level(double nuisance) { return -1.0 + kShadeRange * nuisance; }

core::Tensor render(const FactorVector& f, int side) {
  if (side < 8) throw ConfigError("render: side must be at least 8");
  f.validate();
  const double radius = kRadiusFraction[f.attr_b] * side;
  const double max_shift = side / 8.0;
  const double cx = side / 2.0 + f.jitter[0] * max_shift;
  const double cy = side / 2.0 + f.jitter[1] * max_shift;
  const double bg = background_level(f.nuisance);

  core::Tensor img({static_cast<std::size_t>(side), static_cast<std::size_t>(side)});
  constexpr double inv_total = 1.0 / (kSupersample * kSupersample);
  for (int row = 0; row < side; ++row) {
    for (int col = 0; col < side; ++col) {
      int hits = 0;
      for (int sy = 0; sy < kSupersample; ++sy) {
        const double y = row + (sy + 0.5) / kSupersample;
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double x = col + (sx + 0.5) / kSupersample;
          hits += inside_glyph(f.attr_a, radius, x - cx, y - cy) ? 1 : 0;
        }
      }
      const double coverage = hits * inv_total;
      img[static_cast<std::size_t>(row * side + col)] = coverage + (1.0 - coverage) * bg;
    }
  }
  return img;
}

std::vector<LabeledImage> sample_dataset(std::size_t n, const BiasSpec& spec, int side,
                                         core::RngStream& rng) {
  if (n < 1) throw ConfigError("sample_dataset: n must be at least 1");
  spec.validate();
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    FactorVector f;
    f.attr_a = static_cast<int>(rng.categorical(spec.attr_a_probs));
    f.attr_b = static_cast<int>(rng.categorical(spec.attr_b_probs));
    f.nuisance = rng.uniform();
    f.jitter = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    out.push_back({render(f, side), f});
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& data) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "file attr_a attr_b nuisance jitter_x jitter_y\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << "img_" << std::setw(6) << std::setfill('0') << i << ".dlt";
    core::save_tensor(dir / name.str(), data[i].image);
    const auto& f = data[i].factors;
    manifest << name.str() << ' ' << f.attr_a << ' ' << f.attr_b << ' '
             << core::format_double(f.nuisance) << ' ' << core::format_double(f.jitter[0]) << ' '
             << core::format_double(f.jitter[1]) << '\n';
  }
  core::atomic_write_text(dir / "manifest.txt", manifest.str());
}

std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir) {
  std::istringstream manifest(core::read_text(dir / "manifest.txt"));
  std::string line;
  std::getline(manifest, line);  // header
  std::vector<LabeledImage> out;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream rec(line);
    std::string file;
    FactorVector f;
    if (!(rec >> file >> f.attr_a >> f.attr_b >> f.nuisance >> f.jitter[0] >> f.jitter[1]))
      throw FormatError("malformed dataset manifest line: " + line);
    out.push_back({core::load_tensor(dir / file), f});
  }
  if (out.empty()) throw DependencyError("dataset at " + dir.string() + " is empty");
  return out;
}

Eigen::MatrixXd image_matrix(const std::vector<LabeledImage>& data) {
  if (data.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(data.front().image.size()),
                    static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = data[i].image.flat();
  return m;
}

std::vector<int> labels(const std::vector<LabeledImage>& data, bool attr_b) {
  std::vector<int> out;
  out.reserve(data.size());
  for (const auto& d : data) out.push_back(attr_b ? d.factors.attr_b : d.factors.attr_a);
  return out;
}

}  // namespace difflens::synth

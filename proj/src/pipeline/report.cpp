#include "difflens/pipeline/report.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "difflens/core/error.hpp"
#include "difflens/core/tensor_io.hpp"

namespace difflens::pipeline {

using core::format_double;

std::string curve_csv(const metrics::ControlCurve& curve) {
  std::string out = "beta,n,count_pos,ratio,log_ratio,frechet,similarity\n";
  for (const auto& p : curve.points)
    out += format_double(p.beta) + "," + std::to_string(p.n) + "," + std::to_string(p.count_pos) + "," +
           format_double(p.ratio) + "," + format_double(p.log_ratio) + "," + format_double(p.frechet) + "," +
           format_double(p.similarity) + "\n";
  return out;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

namespace {

std::string info_or(const Manifest& m, const std::string& key, const std::string& fallback = "") {
  const auto it = m.info.find(key);
  return it == m.info.end() ? fallback : it->second;
}

double to_double(const std::string& s) {
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw FormatError("report: expected a number, got '" + s + "'");
  }
}

struct Panel {
  double x0, y0, w, h;
};

std::string polyline(const Panel& p, const std::vector<double>& xs, const std::vector<double>& ys,
                     const std::string& color, const std::string& label) {
  const auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
  const auto [ymin, ymax] = std::minmax_element(ys.begin(), ys.end());
  const double xr = *xmax > *xmin ? *xmax - *xmin : 1.0;
  const double yr = *ymax > *ymin ? *ymax - *ymin : 1.0;
  std::ostringstream s;
  s << "<g>\n<rect x=\"" << p.x0 << "\" y=\"" << p.y0 << "\" width=\"" << p.w << "\" height=\"" << p.h
    << "\" fill=\"none\" stroke=\"#888\"/>\n";
  s << "<text x=\"" << p.x0 + 4 << "\" y=\"" << p.y0 + 14 << "\" font-size=\"12\">" << label << " ["
    << format_double(*ymin) << ", " << format_double(*ymax) << "]</text>\n";
  s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double x = p.x0 + 10 + (p.w - 20) * (xs[i] - *xmin) / xr;
    const double y = p.y0 + p.h - 10 - (p.h - 30) * (ys[i] - *ymin) / yr;
    s << (i ? " " : "") << format_double(x) << "," << format_double(y);
  }
  s << "\"/>\n</g>\n";
  return s.str();
}

std::string curve_svg(const std::vector<std::vector<std::string>>& rows) {
  std::vector<double> logb, logr, fr, sim;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    logb.push_back(std::log(to_double(rows[i].at(0))));
    logr.push_back(to_double(rows[i].at(4)));
    fr.push_back(to_double(rows[i].at(5)));
    sim.push_back(to_double(rows[i].at(6)));
  }
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"900\" height=\"260\">\n";
  if (!logb.empty()) {
    svg += polyline({10, 10, 280, 240}, logb, logr, "#c03", "log ratio vs log beta");
    svg += polyline({310, 10, 280, 240}, logb, fr, "#036", "Frechet vs log beta");
    svg += polyline({610, 10, 280, 240}, logb, sim, "#063", "similarity vs log beta");
  }
  return svg + "</svg>\n";
}

}  // namespace

void write_report(const std::filesystem::path& dir, const std::string& metrics_csv, const std::string& curve_text,
                  const Manifest& calibration, const Manifest& gallery, const ExperimentConfig& cfg) {
  const auto metrics = parse_csv(metrics_csv);
  if (metrics.empty()) throw FormatError("report: empty metrics table");
  std::string report = "run,beta," + [&] {
    std::string h;
    for (std::size_t i = 1; i < metrics[0].size(); ++i) h += (i > 1 ? "," : "") + metrics[0][i];
    return h;
  }() + "\n";
  for (std::size_t r = 1; r < metrics.size(); ++r) {
    const auto& run = metrics[r][0];
    std::string beta = run == "original" ? "1" : info_or(calibration, run + "_beta");
    report += run + "," + beta;
    for (std::size_t i = 1; i < metrics[r].size(); ++i) report += "," + metrics[r][i];
    report += "\n";
  }
  core::atomic_write_text(dir / "report.csv", report);
  core::atomic_write_text(dir / "curve.csv", curve_text);
  const auto curve = parse_csv(curve_text);
  core::atomic_write_text(dir / "curve.svg", curve_svg(curve));
  core::atomic_write_text(dir / "config.ini", cfg.to_ini());

  std::ostringstream s;
  s << "minority class of " << cfg.intervention.attribute << ": " << info_or(calibration, "minority_class") << "\n";
  s << "attribution beta " << info_or(calibration, "attribution_beta") << " reaching ratio "
    << info_or(calibration, "attribution_ratio") << "\n";
  s << "activation beta " << info_or(calibration, "activation_beta") << " reaching ratio "
    << info_or(calibration, "activation_ratio") << " (target reached: " << info_or(calibration, "activation_reached")
    << ")\n";
  for (std::size_t r = 1; r < metrics.size(); ++r) {
    s << metrics[r][0] << ":";
    for (std::size_t i = 1; i < metrics[r].size() && i < metrics[0].size(); ++i)
      if (!metrics[r][i].empty()) s << " " << metrics[0][i] << "=" << metrics[r][i];
    s << "\n";
  }
  std::vector<double> logb, logr;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    logb.push_back(std::log(to_double(curve[i].at(0))));
    logr.push_back(to_double(curve[i].at(4)));
  }
  if (logb.size() >= 2) s << "control curve spearman " << format_double(metrics::spearman(logb, logr)) << "\n";
  for (const auto& [k, v] : gallery.info)
    if (k.rfind("spearman_feature", 0) == 0) s << "gallery " << k << " " << v << "\n";
  core::atomic_write_text(dir / "summary.txt", s.str());
}

}  // namespace difflens::pipeline

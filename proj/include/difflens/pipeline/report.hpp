#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "difflens/metrics.hpp"
#include "difflens/pipeline/config.hpp"
#include "difflens/pipeline/workspace.hpp"

namespace difflens::pipeline {

std::string curve_csv(const metrics::ControlCurve& curve);

/// Rows of a comma-separated file, header included.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

/// Writes report.csv, curve.csv, curve.svg, summary.txt and config.ini into
/// `dir`. Contents depend only on the inputs.
void write_report(const std::filesystem::path& dir, const std::string& metrics_csv, const std::string& curve_text,
                  const Manifest& calibration, const Manifest& gallery, const ExperimentConfig& cfg);

}  // namespace difflens::pipeline

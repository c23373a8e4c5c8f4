#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "difflens/core/error.hpp"
#include "difflens/pipeline/config.hpp"
#include "difflens/pipeline/stages.hpp"
#include "difflens/pipeline/workspace.hpp"

namespace {

using namespace difflens;
using namespace difflens::pipeline;

struct Options {
  std::string config;
  std::string workspace;
  std::vector<std::string> overrides;
  bool force = false;
  bool quiet = false;
};

ExperimentConfig load(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  for (const auto& ov : o.overrides) {
    const auto eq = ov.find('=');
    const auto dot = ov.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("--set expects section.key=value, got '" + ov + "'");
    set_field(cfg, ov.substr(0, dot), ov.substr(dot + 1, eq - dot - 1), ov.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

Workspace workspace(const Options& o) { return o.workspace.empty() ? Workspace::from_env() : Workspace(o.workspace); }

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"difflens: bias attribution and steering in a small diffusion model"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "INI config file (defaults when omitted)");
    sub->add_option("-w,--workspace", o.workspace, "workspace root (default: $DIFFLENS_WORKSPACE)");
    sub->add_option("--set", o.overrides, "override a config field, section.key=value");
    sub->add_flag("-f,--force", o.force, "overwrite results produced by a different config");
    sub->add_flag("-q,--quiet", o.quiet, "no progress output");
  };

  std::string action;
  for (const auto& s : stage_table()) {
    auto* sub = app.add_subcommand(s.name, "run the " + s.name + " stage");
    add_common(sub);
    sub->callback([&, name = s.name] { action = name; });
  }
  auto* all = app.add_subcommand("run-all", "run every stage in order");
  add_common(all);
  all->callback([&] { action = "run-all"; });
  auto* show = app.add_subcommand("print-config", "print the effective config");
  show->add_option("-c,--config", o.config, "INI config file");
  show->add_option("--set", o.overrides, "override a config field, section.key=value");
  show->callback([&] { action = "print-config"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const auto cfg = load(o);
    if (action == "print-config") {
      std::cout << cfg.to_ini();
      return 0;
    }
    const auto ws = workspace(o);
    RunOptions ro{o.force, o.quiet ? nullptr : &std::cerr};
    if (action == "run-all") {
      run_all(cfg, ws, ro);
    } else if (run_stage(action, cfg, ws, ro) == StageStatus::up_to_date) {
      std::cout << action << ": up to date\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

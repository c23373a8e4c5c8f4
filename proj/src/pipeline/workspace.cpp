#include "difflens/pipeline/workspace.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "difflens/core/error.hpp"
#include "difflens/core/tensor_io.hpp"
#include "difflens/pipeline/config.hpp"

#ifndef DIFFLENS_GIT_DESCRIBE
#define DIFFLENS_GIT_DESCRIBE "unknown"
#endif

namespace difflens::pipeline {

namespace fs = std::filesystem;

const char* git_describe() { return DIFFLENS_GIT_DESCRIBE; }

std::string Manifest::to_text() const {
  std::ostringstream out;
  out << "stage " << stage << "\nconfig_hash " << config_hash << "\ngit " << git_describe << '\n';
  for (const auto& [k, v] : info) out << "info " << k << ' ' << v << '\n';
  for (const auto& [f, h] : files) out << "file " << h << ' ' << f << '\n';
  return out.str();
}

Manifest Manifest::parse(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw FormatError("manifest: malformed line " + line);
    const std::string tag = line.substr(0, sp);
    const std::string rest = line.substr(sp + 1);
    if (tag == "stage") m.stage = rest;
    else if (tag == "config_hash") m.config_hash = rest;
    else if (tag == "git") m.git_describe = rest;
    else if (tag == "info" || tag == "file") {
      const auto sp2 = rest.find(' ');
      if (sp2 == std::string::npos) throw FormatError("manifest: malformed line " + line);
      if (tag == "info") m.info[rest.substr(0, sp2)] = rest.substr(sp2 + 1);
      else m.files.emplace_back(rest.substr(sp2 + 1), rest.substr(0, sp2));
    } else {
      throw FormatError("manifest: unknown tag " + tag);
    }
  }
  return m;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return fnv1a_hex(buf.str());
}

Workspace::Workspace(fs::path root) : root_(std::move(root)) {
  if (root_.empty()) throw ConfigError("workspace path is empty");
}

Workspace Workspace::from_env() {
  const char* env = std::getenv("DIFFLENS_WORKSPACE");
  if (!env || !*env) throw ConfigError("no workspace: pass --workspace or set DIFFLENS_WORKSPACE");
  return Workspace(env);
}

std::optional<Manifest> Workspace::read_manifest(const std::string& stage) const {
  const auto path = manifest_path(stage);
  if (!fs::exists(path)) return std::nullopt;
  return Manifest::parse(core::read_text(path));
}

void Workspace::write_manifest(const std::string& stage, const std::string& config_hash,
                               const std::vector<std::string>& files,
                               const std::map<std::string, std::string>& info) const {
  Manifest m{stage, config_hash, git_describe(), info, {}};
  for (const auto& f : files) m.files.emplace_back(f, file_hash(stage_dir(stage) / f));
  core::atomic_write_text(manifest_path(stage), m.to_text());
}

void Workspace::remove_manifest(const std::string& stage) const { fs::remove(manifest_path(stage)); }

std::string Workspace::integrity_problem(const Manifest& manifest) const {
  for (const auto& [f, h] : manifest.files) {
    const auto path = stage_dir(manifest.stage) / f;
    if (!fs::exists(path)) return "missing artifact " + path.string();
    if (file_hash(path) != h) return "artifact " + path.string() + " does not match its manifest (modified?)";
  }
  return {};
}

WorkspaceLock::WorkspaceLock(const Workspace& ws) : path_(ws.root() / ".lock") {
  fs::create_directories(ws.root());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0)
    throw DependencyError("workspace " + ws.root().string() + " is locked by another run (remove " +
                          path_.string() + " if stale)");
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

WorkspaceLock::~WorkspaceLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

}  // namespace difflens::pipeline

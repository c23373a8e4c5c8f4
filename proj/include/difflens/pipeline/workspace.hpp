#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace difflens::pipeline {

/// Stage completion record: written last, so a stage without one is absent.
struct Manifest {
  std::string stage;
  std::string config_hash;
  std::string git_describe;
  std::map<std::string, std::string> info;
  std::vector<std::pair<std::string, std::string>> files;  // path relative to the stage dir, content hash

  std::string to_text() const;
  static Manifest parse(const std::string& text);
};

/// 64-bit FNV-1a of a file's bytes as hex.
std::string file_hash(const std::filesystem::path& path);

class Workspace {
 public:
  explicit Workspace(std::filesystem::path root);

  /// Root from DIFFLENS_WORKSPACE; ConfigError if unset or empty.
  static Workspace from_env();

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path stage_dir(const std::string& stage) const { return root_ / stage; }
  std::filesystem::path manifest_path(const std::string& stage) const { return stage_dir(stage) / "manifest.txt"; }

  std::optional<Manifest> read_manifest(const std::string& stage) const;
  /// Hashes every listed file and records the manifest atomically.
  void write_manifest(const std::string& stage, const std::string& config_hash,
                      const std::vector<std::string>& files, const std::map<std::string, std::string>& info) const;
  void remove_manifest(const std::string& stage) const;

  /// Empty string if every listed file exists with its recorded hash,
  /// otherwise a description of the first problem.
  std::string integrity_problem(const Manifest& manifest) const;

 private:
  std::filesystem::path root_;
};

/// Exclusive workspace lock held for the lifetime of the object.
class WorkspaceLock {
 public:
  explicit WorkspaceLock(const Workspace& ws);
  ~WorkspaceLock();
  WorkspaceLock(const WorkspaceLock&) = delete;
  WorkspaceLock& operator=(const WorkspaceLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Build-time `git describe` of the source tree.
const char* git_describe();

}  // namespace difflens::pipeline

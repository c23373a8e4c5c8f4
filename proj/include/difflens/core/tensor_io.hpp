#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "difflens/core/tensor.hpp"

namespace difflens::core {

// Tensor container (all integers little-endian):
//   "DLTENSR1" | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Checkpoint file: a text header of key=value pairs followed by named tensors.
//   "DLARCHV1" | u32 header_len | header bytes ("key=value\n"...)
//   | u32 count | { u32 name_len | name | tensor container }*
class Archive {
 public:
  std::map<std::string, std::string> header;

  void put(const std::string& name, Tensor t);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  const std::string& meta(const std::string& key) const;
  long long meta_int(const std::string& key) const;
  double meta_double(const std::string& key) const;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, Tensor>> tensors_;
};

/// Writes through `writer` into a sibling temporary file, then renames it
/// over `path`, so readers never observe a partially written file.
void atomic_write(const std::filesystem::path& path,
                  const std::function<void(std::ostream&)>& writer);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);

std::string read_text(const std::filesystem::path& path);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace difflens::core

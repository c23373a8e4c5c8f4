#include "difflens/core/tensor_io.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "difflens/core/error.hpp"

namespace difflens::core {

namespace {

constexpr char kTensorMagic[8] = {'D', 'L', 'T', 'E', 'N', 'S', 'R', '1'};
constexpr char kArchiveMagic[8] = {'D', 'L', 'A', 'R', 'C', 'H', 'V', '1'};

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> buf;
  if (!in.read(reinterpret_cast<char*>(buf.data()), buf.size()))
    throw FormatError("unexpected end of tensor stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

void expect_magic(std::istream& in, const char (&magic)[8]) {
  char buf[8];
  if (!in.read(buf, 8) || std::memcmp(buf, magic, 8) != 0)
    throw FormatError(std::string("bad magic, expected ") + std::string(magic, 8));
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic, 8);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor(std::istream& in) {
  expect_magic(in, kTensorMagic);
  const auto rank = get_le<std::uint32_t>(in);
  if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_le<std::uint64_t>(in);
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  atomic_write(path, [&](std::ostream& out) { write_tensor(out, t); });
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open " + path.string());
  return read_tensor(in);
}

void Archive::put(const std::string& name, Tensor t) {
  for (auto& [n, existing] : tensors_) {
    if (n == name) {
      existing = std::move(t);
      return;
    }
  }
  tensors_.emplace_back(name, std::move(t));
}

bool Archive::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return true;
  return false;
}

const Tensor& Archive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors_)
    if (n == name) return t;
  throw FormatError("archive has no tensor named '" + name + "'");
}

const std::string& Archive::meta(const std::string& key) const {
  auto it = header.find(key);
  if (it == header.end()) throw FormatError("archive header lacks key '" + key + "'");
  return it->second;
}

long long Archive::meta_int(const std::string& key) const { return std::stoll(meta(key)); }
double Archive::meta_double(const std::string& key) const { return std::stod(meta(key)); }

void Archive::save(const std::filesystem::path& path) const {
  std::string head;
  for (const auto& [k, v] : header) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ConfigError("archive header entries may not contain '=' in keys or newlines");
    head += k + "=" + v + "\n";
  }
  atomic_write(path, [&](std::ostream& out) {
    out.write(kArchiveMagic, 8);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(head.size()));
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_tensor(out, t);
    }
  });
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open " + path.string());
  expect_magic(in, kArchiveMagic);
  Archive a;
  const auto head_len = get_le<std::uint32_t>(in);
  std::string head(head_len, '\0');
  if (!in.read(head.data(), head_len)) throw FormatError("truncated archive header");
  std::istringstream lines(head);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed archive header line: " + line);
    a.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = get_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated tensor name");
    a.tensors_.emplace_back(std::move(name), read_tensor(in));
  }
  return a;
}

void atomic_write(const std::filesystem::path& path,
                  const std::function<void(std::ostream&)>& writer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DependencyError("cannot write " + tmp.string());
    writer(out);
    out.flush();
    if (!out) throw DependencyError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, [&](std::ostream& out) { out << text; });
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_double(double v) {
  std::array<char, 64> buf;
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

}  // namespace difflens::core

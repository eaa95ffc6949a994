#include "logvm/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace logvm::io {

namespace {

constexpr std::array<char, 4> kMagic = {'N', 'D', 'T', '1'};

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) throw std::runtime_error("NDT1: truncated stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (double v : t.values()) put_le<double>(os, v);
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw std::runtime_error("NDT1: bad magic");
  const auto rank = get_le<std::uint32_t>(is);
  if (rank > 16) throw std::runtime_error("NDT1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_le<std::uint32_t>(is);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = get_le<double>(is);
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_tensor(is);
}

void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (const auto& [name, t] : tensors) {
    const std::string file = name + ".ndt";
    save_tensor(dir / file, *t);
    manifest << name << '\t' << file << '\n';
  }
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::filesystem::path& manifest_or_dir) {
  const auto manifest = std::filesystem::is_directory(manifest_or_dir) ? manifest_or_dir / "manifest.tsv"
                                                                       : manifest_or_dir;
  std::ifstream is(manifest);
  if (!is) throw std::runtime_error("cannot read manifest " + manifest.string());
  std::vector<std::pair<std::string, Tensor>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("manifest: missing tab in '" + line + "'");
    std::filesystem::path p = line.substr(tab + 1);
    if (p.is_relative()) p = manifest.parent_path() / p;
    out.emplace_back(line.substr(0, tab), load_tensor(p));
  }
  return out;
}

}  // namespace logvm::io

// Voxel volumes and the MVOL file format.
//
// MVOL layout (all integers and floats little-endian):
//   bytes 0-3    magic "MVOL"
//   u16          version (1)
//   3 x u32      dims (X, Y, Z)
//   3 x f64      spacing in mm (x, y, z)
//   u8           dtype code: 1 = f64, 2 = u8
//   X*Y*Z values row-major, index (x * Y + y) * Z + z
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "moon/error.hpp"

namespace moon {

using Dims3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

template <class T>
struct Volume {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<T> data;

  Volume() = default;
  Volume(Dims3 d, Spacing3 s, T fill = T{}) : dims(d), spacing(s), data(d[0] * d[1] * d[2], fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return (x * dims[1] + y) * dims[2] + z; }
  T& at(std::size_t x, std::size_t y, std::size_t z) { return data[index(x, y, z)]; }
  const T& at(std::size_t x, std::size_t y, std::size_t z) const { return data[index(x, y, z)]; }
  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }
};

using Image = Volume<double>;
using Mask = Volume<std::uint8_t>;

inline constexpr std::uint16_t kMvolVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), sizeof(T));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > in.size()) throw IoError("MVOL: truncated file " + path);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

template <class T>
constexpr std::uint8_t mvol_dtype() {
  if constexpr (std::is_same_v<T, double>) return 1;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return 2;
  else static_assert(sizeof(T) == 0, "MVOL supports f64 and u8 voxels");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace detail

template <class T>
std::string encode_mvol(const Volume<T>& vol) {
  std::string out = "MVOL";
  out.reserve(4 + 2 + 12 + 24 + 1 + vol.size() * sizeof(T));
  detail::put_le<std::uint16_t>(out, kMvolVersion);
  for (auto d : vol.dims) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (auto s : vol.spacing) detail::put_le<double>(out, s);
  detail::put_le<std::uint8_t>(out, detail::mvol_dtype<T>());
  for (const T& v : vol.data) detail::put_le<T>(out, v);
  return out;
}

template <class T>
Volume<T> decode_mvol(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < 4 || bytes.compare(0, 4, "MVOL") != 0) throw IoError("MVOL: bad magic in " + path);
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(bytes, pos, path);
  if (version != kMvolVersion) throw IoError("MVOL: unsupported version " + std::to_string(version) + " in " + path);
  Volume<T> vol;
  for (auto& d : vol.dims) d = detail::get_le<std::uint32_t>(bytes, pos, path);
  for (auto& s : vol.spacing) s = detail::get_le<double>(bytes, pos, path);
  const auto dtype = detail::get_le<std::uint8_t>(bytes, pos, path);
  if (dtype != detail::mvol_dtype<T>())
    throw IoError("MVOL: dtype code " + std::to_string(dtype) + " does not match the requested voxel type in " + path);
  const std::size_t n = vol.dims[0] * vol.dims[1] * vol.dims[2];
  if (bytes.size() - pos != n * sizeof(T)) throw IoError("MVOL: payload size mismatch in " + path);
  vol.data.resize(n);
  for (auto& v : vol.data) v = detail::get_le<T>(bytes, pos, path);
  return vol;
}

template <class T>
void write_mvol(const std::string& path, const Volume<T>& vol) {
  detail::write_file(path, encode_mvol(vol));
}

template <class T>
Volume<T> read_mvol(const std::string& path) {
  return decode_mvol<T>(detail::read_file(path), path);
}

}  // namespace moon

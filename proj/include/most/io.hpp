#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "most/common.hpp"

namespace most {

// ---------------------------------------------------------------------------
// Versioned little-endian container of named arrays:
//   magic "MOSTCKPT" | u32 version | u32 n_arrays |
//   per array: u32 name_len | name | u8 dtype | u8 rank | u32 dims[] | raw data
// dtype codes: 0 = f64, 1 = f32, 2 = i64.
// ---------------------------------------------------------------------------
struct NamedArray {
  uint8_t dtype = 0;
  Shape dims;
  std::vector<double> f64;
  std::vector<float> f32;
  std::vector<int64_t> i64;

  int64_t count() const { return numel(dims); }
};

using ArrayBundle = std::map<std::string, NamedArray>;

inline NamedArray array_f64(Shape dims, std::vector<double> v) {
  NamedArray a;
  a.dtype = 0;
  a.dims = std::move(dims);
  a.f64 = std::move(v);
  return a;
}

inline NamedArray array_f32(Shape dims, std::vector<float> v) {
  NamedArray a;
  a.dtype = 1;
  a.dims = std::move(dims);
  a.f32 = std::move(v);
  return a;
}

inline NamedArray array_i64(Shape dims, std::vector<int64_t> v) {
  NamedArray a;
  a.dtype = 2;
  a.dims = std::move(dims);
  a.i64 = std::move(v);
  return a;
}

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'O', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

template <typename U>
void write_pod(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::istream& is, const char* what) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) fail("checkpoint: truncated while reading ", what);
  return v;
}

}  // namespace detail

inline void save_arrays(const ArrayBundle& bundle, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("checkpoint: cannot open '", path, "' for writing");
  os.write(detail::kCkptMagic, 8);
  detail::write_pod<uint32_t>(os, detail::kCkptVersion);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(bundle.size()));
  for (const auto& [name, a] : bundle) {
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint8_t>(os, a.dtype);
    detail::write_pod<uint8_t>(os, static_cast<uint8_t>(a.dims.size()));
    for (int d : a.dims) detail::write_pod<uint32_t>(os, static_cast<uint32_t>(d));
    const size_t n = static_cast<size_t>(a.count());
    switch (a.dtype) {
      case 0:
        if (a.f64.size() != n) fail("checkpoint: array '", name, "' size mismatch");
        os.write(reinterpret_cast<const char*>(a.f64.data()),
                 static_cast<std::streamsize>(n * sizeof(double)));
        break;
      case 1:
        if (a.f32.size() != n) fail("checkpoint: array '", name, "' size mismatch");
        os.write(reinterpret_cast<const char*>(a.f32.data()),
                 static_cast<std::streamsize>(n * sizeof(float)));
        break;
      case 2:
        if (a.i64.size() != n) fail("checkpoint: array '", name, "' size mismatch");
        os.write(reinterpret_cast<const char*>(a.i64.data()),
                 static_cast<std::streamsize>(n * sizeof(int64_t)));
        break;
      default:
        fail("checkpoint: array '", name, "' has unknown dtype ", int(a.dtype));
    }
  }
  if (!os) fail("checkpoint: write failed for '", path, "'");
}

inline ArrayBundle load_arrays(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("checkpoint: cannot open '", path, "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    fail("checkpoint: bad magic in '", path, "'");
  const auto version = detail::read_pod<uint32_t>(is, "version");
  if (version != detail::kCkptVersion)
    fail("checkpoint: version mismatch: file has ", version, ", expected ",
         detail::kCkptVersion);
  const auto n_arrays = detail::read_pod<uint32_t>(is, "array count");
  ArrayBundle bundle;
  for (uint32_t k = 0; k < n_arrays; ++k) {
    const auto name_len = detail::read_pod<uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) fail("checkpoint: truncated while reading array name");
    NamedArray a;
    a.dtype = detail::read_pod<uint8_t>(is, "dtype");
    const auto rank = detail::read_pod<uint8_t>(is, "rank");
    a.dims.resize(rank);
    for (uint8_t d = 0; d < rank; ++d)
      a.dims[d] = static_cast<int>(detail::read_pod<uint32_t>(is, "dimension"));
    const size_t n = static_cast<size_t>(a.count());
    switch (a.dtype) {
      case 0:
        a.f64.resize(n);
        is.read(reinterpret_cast<char*>(a.f64.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        break;
      case 1:
        a.f32.resize(n);
        is.read(reinterpret_cast<char*>(a.f32.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        break;
      case 2:
        a.i64.resize(n);
        is.read(reinterpret_cast<char*>(a.i64.data()),
                static_cast<std::streamsize>(n * sizeof(int64_t)));
        break;
      default:
        fail("checkpoint: array '", name, "' has unknown dtype ", int(a.dtype));
    }
    if (!is) fail("checkpoint: truncated while reading array '", name, "'");
    bundle.emplace(std::move(name), std::move(a));
  }
  return bundle;
}

// dtype-checked scalar element accessors used when rebuilding typed state
template <typename T>
NamedArray array_of(Shape dims, const std::vector<T>& v);

template <>
inline NamedArray array_of<double>(Shape dims, const std::vector<double>& v) {
  return array_f64(std::move(dims), v);
}
template <>
inline NamedArray array_of<float>(Shape dims, const std::vector<float>& v) {
  return array_f32(std::move(dims), v);
}

template <typename T>
const std::vector<T>& values_of(const NamedArray& a, const std::string& name);

template <>
inline const std::vector<double>& values_of<double>(const NamedArray& a,
                                                    const std::string& name) {
  if (a.dtype != 0) fail("checkpoint: array '", name, "' is not f64");
  return a.f64;
}
template <>
inline const std::vector<float>& values_of<float>(const NamedArray& a, const std::string& name) {
  if (a.dtype != 1) fail("checkpoint: array '", name, "' is not f32");
  return a.f32;
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) export, min-max normalized to 0..255. Constant images map
// to 0.
// ---------------------------------------------------------------------------
template <typename T>
void write_pgm(const std::vector<T>& img, int height, int width, const std::string& path) {
  if (static_cast<int64_t>(img.size()) != static_cast<int64_t>(height) * width)
    fail("write_pgm: ", img.size(), " values for ", height, "x", width);
  T lo = img[0], hi = img[0];
  for (T v : img) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("write_pgm: cannot open '", path, "' for writing");
  os << "P5\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> bytes(img.size());
  for (size_t i = 0; i < img.size(); ++i) {
    const double t = range > 0 ? (static_cast<double>(img[i]) - static_cast<double>(lo)) / range
                               : 0.0;
    bytes[i] = static_cast<unsigned char>(t * 255.0 + 0.5);
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) fail("write_pgm: write failed for '", path, "'");
}

}  // namespace most

#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace most {

// Error type thrown by every validation failure in the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw Error(format_msg(std::forward<Args>(args)...));
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

// FNV-1a over raw bytes; used for parameter freeze checks and determinism asserts.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
uint64_t hash_values(const std::vector<T>& v, uint64_t h = 1469598103934665603ull) {
  return v.empty() ? h : fnv1a(v.data(), v.size() * sizeof(T), h);
}

}  // namespace most

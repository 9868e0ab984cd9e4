#pragma once

#include <cmath>
#include <vector>

#include "most/common.hpp"

namespace most::detail {

// Iterative radix-2 complex FFT, unitary normalization (1/sqrt(N) per
// transform in each direction). Length must be a power of two.
template <typename T>
void fft_1d(T* re, T* im, int n, int stride, bool inverse) {
  // bit-reversal permutation
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i * stride], re[j * stride]);
      std::swap(im[i * stride], im[j * stride]);
    }
  }
  const double sign = inverse ? 1.0 : -1.0;
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * M_PI / len;
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (int i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (int k = 0; k < len / 2; ++k) {
        T* ur = &re[(i + k) * stride];
        T* ui = &im[(i + k) * stride];
        T* vr = &re[(i + k + len / 2) * stride];
        T* vi = &im[(i + k + len / 2) * stride];
        const double tr = cr * *vr - ci * *vi;
        const double ti = cr * *vi + ci * *vr;
        *vr = static_cast<T>(*ur - tr);
        *vi = static_cast<T>(*ui - ti);
        *ur = static_cast<T>(*ur + tr);
        *ui = static_cast<T>(*ui + ti);
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(n)));
  for (int i = 0; i < n; ++i) {
    re[i * stride] *= scale;
    im[i * stride] *= scale;
  }
}

// 2-D unitary FFT over an H x W row-major image (rows, then columns).
template <typename T>
void fft_2d(std::vector<T>& re, std::vector<T>& im, int H, int W, bool inverse) {
  if (!is_power_of_two(H) || !is_power_of_two(W))
    fail("fft_2d: dimensions must be powers of two, got ", H, "x", W);
  if (re.size() != static_cast<size_t>(H) * W || im.size() != re.size())
    fail("fft_2d: buffer size mismatch");
  for (int r = 0; r < H; ++r) fft_1d(re.data() + r * W, im.data() + r * W, W, 1, inverse);
  for (int c = 0; c < W; ++c) fft_1d(re.data() + c, im.data() + c, H, W, inverse);
}

}  // namespace most::detail

#pragma once

#include <vector>

#include "most/common.hpp"
#include "most/tensor.hpp"

namespace most {

// ---------------------------------------------------------------------------
// Complex image as a pair of same-shape real tensors. Arithmetic on it rides
// the autodiff tape, so gradients flow through both components.
// ---------------------------------------------------------------------------
template <typename T>
struct ComplexImage {
  Tensor<T> re;
  Tensor<T> im;

  const Shape& shape() const { return re.shape(); }
};

template <typename T>
ComplexImage<T> make_complex(Tensor<T> re, Tensor<T> im) {
  detail::require_same_shape("make_complex", re, im);
  return ComplexImage<T>{std::move(re), std::move(im)};
}

template <typename T>
ComplexImage<T> real_as_complex(const Tensor<T>& re) {
  return ComplexImage<T>{re, Tensor<T>::zeros(re.shape())};
}

// Unitary 2-D DFT (1/sqrt(HW) in each direction).
template <typename T>
ComplexImage<T> dft2(const ComplexImage<T>& img, bool inverse = false) {
  Tensor<T> re = dft2_component(img.re, img.im, /*imag_component=*/false, inverse);
  Tensor<T> im = dft2_component(img.re, img.im, /*imag_component=*/true, inverse);
  return ComplexImage<T>{std::move(re), std::move(im)};
}

// ---------------------------------------------------------------------------
// Cartesian column mask: a fully sampled block of `center` columns around
// W/2 plus equispaced columns among the remainder, floor(W/R) ones in total.
// Deterministic in (W, R, center).
// ---------------------------------------------------------------------------
struct SamplingMask {
  int width = 0;
  std::vector<uint8_t> cols;  // size() == width, values in {0,1}

  int n_sampled() const {
    int n = 0;
    for (uint8_t c : cols) n += c;
    return n;
  }
};

inline SamplingMask make_cartesian_mask(int width, int acceleration, int center_columns) {
  if (width <= 0) fail("make_cartesian_mask: width must be positive, got ", width);
  if (acceleration <= 0)
    fail("make_cartesian_mask: acceleration must be positive, got ", acceleration);
  const int budget = width / acceleration;
  if (center_columns < 0 || center_columns > budget)
    fail("make_cartesian_mask: center_columns ", center_columns, " exceeds budget ", budget);

  SamplingMask m;
  m.width = width;
  m.cols.assign(static_cast<size_t>(width), 0);
  const int c0 = width / 2 - center_columns / 2;
  for (int j = 0; j < center_columns; ++j) m.cols[static_cast<size_t>(c0 + j)] = 1;

  const int remaining = budget - center_columns;
  if (remaining > 0) {
    // indices of columns outside the center block, in order
    std::vector<int> outside;
    outside.reserve(static_cast<size_t>(width - center_columns));
    for (int j = 0; j < width; ++j)
      if (!m.cols[static_cast<size_t>(j)]) outside.push_back(j);
    const int navail = static_cast<int>(outside.size());
    for (int t = 0; t < remaining; ++t) {
      const int pick = static_cast<int>(static_cast<int64_t>(t) * navail / remaining);
      m.cols[static_cast<size_t>(outside[static_cast<size_t>(pick)])] = 1;
    }
  }
  if (m.n_sampled() != budget)
    fail("make_cartesian_mask: internal error, sampled ", m.n_sampled(), " != budget ", budget);
  return m;
}

// Mask expanded to an (H, W) constant tensor for elementwise application.
template <typename T>
Tensor<T> mask_tensor(const SamplingMask& mask, int height) {
  std::vector<T> v(static_cast<size_t>(height) * mask.width);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < mask.width; ++j)
      v[static_cast<size_t>(i) * mask.width + j] = mask.cols[static_cast<size_t>(j)] ? T(1) : T(0);
  return Tensor<T>::constant({height, mask.width}, std::move(v));
}

template <typename T>
void check_mask_width(const char* op, const Tensor<T>& t, const SamplingMask& mask) {
  detail::require_rank(op, t, 2, "image");
  if (t.shape()[1] != mask.width)
    fail(op, ": image width ", t.shape()[1], " != mask width ", mask.width);
}

template <typename T>
ComplexImage<T> apply_mask(const ComplexImage<T>& k, const SamplingMask& mask) {
  check_mask_width("apply_mask", k.re, mask);
  Tensor<T> m = mask_tensor<T>(mask, k.shape()[0]);
  return ComplexImage<T>{mul(k.re, m), mul(k.im, m)};
}

// A: real image -> masked k-space (unsampled columns zeroed).
template <typename T>
ComplexImage<T> apply_forward_model(const Tensor<T>& x, const SamplingMask& mask) {
  check_mask_width("apply_forward_model", x, mask);
  return apply_mask(dft2(real_as_complex(x)), mask);
}

// A^H: masked k-space -> real part of the unitary inverse DFT.
template <typename T>
Tensor<T> apply_adjoint_model(const ComplexImage<T>& k, const SamplingMask& mask) {
  check_mask_width("apply_adjoint_model", k.re, mask);
  return dft2(apply_mask(k, mask), /*inverse=*/true).re;
}

// Zero-filled reconstruction of measured k-space: A^H(k0).
template <typename T>
Tensor<T> zero_filled(const ComplexImage<T>& k0, const SamplingMask& mask) {
  return apply_adjoint_model(k0, mask);
}

// Data-consistency gradient A^H(A x - k0); differentiable w.r.t. x.
template <typename T>
Tensor<T> dc_gradient(const Tensor<T>& x, const ComplexImage<T>& k0, const SamplingMask& mask) {
  check_mask_width("dc_gradient", x, mask);
  detail::require_same_shape("dc_gradient", x, k0.re);
  ComplexImage<T> kx = apply_forward_model(x, mask);
  ComplexImage<T> resid{sub(kx.re, k0.re), sub(kx.im, k0.im)};
  return apply_adjoint_model(resid, mask);
}

}  // namespace most

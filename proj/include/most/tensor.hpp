#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "most/common.hpp"
#include "most/detail/fft.hpp"

namespace most {

// ---------------------------------------------------------------------------
// Primitive kinds. The first block is the public set accepted by
// apply_primitive; the second block are internal kinds used by composite ops
// (SSIM, cross-entropy, DFT) that ride the same tape and get the same
// finite-difference coverage.
// ---------------------------------------------------------------------------
enum class Op : uint8_t {
  add,
  sub,
  mul,
  scalar_mul,
  matmul,
  conv2d,
  relu,
  sigmoid,
  avg_pool2d,
  upsample_nearest2x,
  concat_channels,
  reduce_sum,
  reduce_mean,
  square,
  abs,
  // internal kinds
  divide,
  reshape,
  bce_logits,
  dft2_re,
  dft2_im,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scalar_mul: return "scalar_mul";
    case Op::matmul: return "matmul";
    case Op::conv2d: return "conv2d";
    case Op::relu: return "relu";
    case Op::sigmoid: return "sigmoid";
    case Op::avg_pool2d: return "avg_pool2d";
    case Op::upsample_nearest2x: return "upsample_nearest2x";
    case Op::concat_channels: return "concat_channels";
    case Op::reduce_sum: return "reduce_sum";
    case Op::reduce_mean: return "reduce_mean";
    case Op::square: return "square";
    case Op::abs: return "abs";
    case Op::divide: return "divide";
    case Op::reshape: return "reshape";
    case Op::bce_logits: return "bce_logits";
    case Op::dft2_re: return "dft2_re";
    case Op::dft2_im: return "dft2_im";
  }
  return "?";
}

inline bool is_public_primitive(Op op) { return op < Op::divide; }

template <typename T>
class Graph;

// ---------------------------------------------------------------------------
// Tensor: dense row-major real array. Immutable after creation. A tensor is
// either a free constant or tracked on a Graph; tracked tensors participate
// in reverse-mode differentiation and their gradient lives in the graph.
// ---------------------------------------------------------------------------
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values) {
    check_shape(shape, values.size());
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor full(Shape shape, T v) {
    auto n = numel(shape);
    return constant(std::move(shape), std::vector<T>(static_cast<size_t>(n), v));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor scalar(T v) { return constant({1}, {v}); }

  // Leaf with requires_grad=true, registered on the given graph.
  static Tensor variable(const std::shared_ptr<Graph<T>>& g, Shape shape, std::vector<T> values) {
    check_shape(shape, values.size());
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<T>>(std::move(values));
    t.graph_ = g;
    t.id_ = g->new_slot();
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t size() const { return numel(shape_); }
  bool defined() const { return static_cast<bool>(data_); }

  const std::vector<T>& values() const {
    if (!data_) fail("Tensor: access to undefined tensor");
    return *data_;
  }

  T item() const {
    if (size() != 1) fail("Tensor::item: tensor has ", size(), " elements, expected 1");
    return values()[0];
  }

  bool tracked() const { return graph_ != nullptr; }
  bool requires_grad() const { return tracked(); }
  const std::shared_ptr<Graph<T>>& graph() const { return graph_; }
  int id() const { return id_; }

  // Gradient w.r.t. this tensor; valid once backward() has consumed the graph.
  const std::vector<T>& grad() const;

 private:
  static void check_shape(const Shape& shape, size_t n) {
    for (int d : shape)
      if (d <= 0) fail("Tensor: non-positive dimension in shape ", shape_str(shape));
    if (numel(shape) != static_cast<int64_t>(n))
      fail("Tensor: shape ", shape_str(shape), " does not match ", n, " values");
  }

  // tracked constructor used by the op emitter
  static Tensor tracked_result(const std::shared_ptr<Graph<T>>& g, Shape shape, std::vector<T> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<T>>(std::move(values));
    t.graph_ = g;
    t.id_ = g->new_slot();
    return t;
  }

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  std::shared_ptr<Graph<T>> graph_;
  int id_ = -1;

  template <typename>
  friend class Graph;
  template <typename U>
  friend Tensor<U> emit(Op, std::vector<Tensor<U>>, Shape, std::vector<U>, int);
};

// ---------------------------------------------------------------------------
// Graph: append-only tape of primitive records in topological order.
// backward_from walks it once in reverse; afterwards the graph is consumed.
// ---------------------------------------------------------------------------
template <typename T>
struct TapeRecord {
  Op op;
  std::vector<Tensor<T>> in;
  Tensor<T> out;
  int iattr = 0;  // dft2: bit0 component (0 re, 1 im), bit1 inverse direction
};

template <typename T>
class Graph {
 public:
  static std::shared_ptr<Graph> make() { return std::make_shared<Graph>(); }

  int new_slot() {
    slots_.push_back(GradSlot{});
    return static_cast<int>(slots_.size() - 1);
  }

  void append(TapeRecord<T> rec) { tape_.push_back(std::move(rec)); }

  size_t node_count() const { return tape_.size(); }
  bool consumed() const { return consumed_; }

  void backward_from(const Tensor<T>& loss) {
    if (!loss.tracked() || loss.graph().get() != this)
      fail("backward: loss tensor is not tracked on this graph");
    if (loss.size() != 1)
      fail("backward: loss must be a scalar, got shape ", shape_str(loss.shape()));
    if (consumed_)
      fail("backward: graph already consumed; build a fresh graph per step");
    if (tape_.empty()) fail("backward: graph is empty");

    grad_slot(loss.id(), loss.shape())[0] = T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      const TapeRecord<T>& rec = *it;
      if (!slots_[static_cast<size_t>(rec.out.id())].present) continue;
      backward_record(rec);
    }
    consumed_ = true;
  }

  const std::vector<T>& grad_of(const Tensor<T>& t) {
    if (!consumed_) fail("Tensor::grad: backward has not been run on this graph");
    return grad_slot(t.id(), t.shape());
  }

 private:
  struct GradSlot {
    std::vector<T> grad;
    bool present = false;
  };

  std::vector<T>& grad_slot(int id, const Shape& shape) {
    GradSlot& s = slots_[static_cast<size_t>(id)];
    if (!s.present) {
      s.grad.assign(static_cast<size_t>(numel(shape)), T(0));
      s.present = true;
    }
    return s.grad;
  }

  void backward_record(const TapeRecord<T>& rec);

  std::vector<GradSlot> slots_;
  std::vector<TapeRecord<T>> tape_;
  bool consumed_ = false;
};

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
  if (!tracked()) fail("Tensor::grad: tensor does not require grad");
  return graph_->grad_of(*this);
}

// ---------------------------------------------------------------------------
// Op emitter: validates graph consistency, scans the output for non-finite
// values and appends a tape record when any input is tracked.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> emit(Op op, std::vector<Tensor<T>> inputs, Shape out_shape, std::vector<T> out_values,
               int iattr = 0) {
  if (!all_finite(out_values))
    fail(op_name(op), ": non-finite value in output");
  std::shared_ptr<Graph<T>> g;
  for (const auto& in : inputs) {
    if (in.tracked()) {
      if (!g)
        g = in.graph();
      else if (g != in.graph())
        fail(op_name(op), ": inputs belong to different graphs");
    }
  }
  if (!g) return Tensor<T>::constant(std::move(out_shape), std::move(out_values));
  Tensor<T> out = Tensor<T>::tracked_result(g, std::move(out_shape), std::move(out_values));
  g->append(TapeRecord<T>{op, std::move(inputs), out, iattr});
  return out;
}

namespace detail {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return;
  if (a.shape().size() != b.shape().size())
    fail(op, ": rank mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  for (size_t d = 0; d < a.shape().size(); ++d)
    if (a.shape()[d] != b.shape()[d])
      fail(op, ": shape mismatch at dim ", d, ": ", a.shape()[d], " vs ", b.shape()[d], " (",
           shape_str(a.shape()), " vs ", shape_str(b.shape()), ")");
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, size_t rank, const char* role) {
  if (t.shape().size() != rank)
    fail(op, ": ", role, " must have rank ", rank, ", got shape ", shape_str(t.shape()));
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

struct Conv2dDims {
  int N, C, H, W, O, KH, KW, PH, PW;
};

template <typename T>
Conv2dDims conv2d_dims(const Tensor<T>& x, const Tensor<T>& w) {
  require_rank("conv2d", x, 4, "input");
  require_rank("conv2d", w, 4, "kernel");
  Conv2dDims d{};
  d.N = x.shape()[0];
  d.C = x.shape()[1];
  d.H = x.shape()[2];
  d.W = x.shape()[3];
  d.O = w.shape()[0];
  d.KH = w.shape()[2];
  d.KW = w.shape()[3];
  if (w.shape()[1] != d.C)
    fail("conv2d: input channels (dim 1) ", d.C, " != kernel channels ", w.shape()[1]);
  if (d.KH % 2 == 0 || d.KW % 2 == 0)
    fail("conv2d: kernel dims must be odd for same padding, got ", d.KH, "x", d.KW);
  d.PH = d.KH / 2;
  d.PW = d.KW / 2;
  return d;
}

}  // namespace detail

// --------------------------------- public ops ------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return emit(Op::add, {a, b}, a.shape(), std::move(out));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return emit(Op::sub, {a, b}, a.shape(), std::move(out));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return emit(Op::mul, {a, b}, a.shape(), std::move(out));
}

// x * s where s is a one-element tensor (the only broadcast in the library)
template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1)
    fail("scalar_mul: scalar operand must have exactly 1 element, got shape ",
         shape_str(s.shape()));
  const T sv = s.values()[0];
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv;
  return emit(Op::scalar_mul, {x, s}, x.shape(), std::move(out));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return scalar_mul(x, Tensor<T>::scalar(c));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a, 2, "lhs");
  detail::require_rank("matmul", b, 2, "rhs");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    fail("matmul: inner dims differ: lhs dim 1 is ", k, ", rhs dim 0 is ", b.shape()[0]);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(static_cast<size_t>(m) * n, T(0));
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      const T ail = av[static_cast<size_t>(i) * k + l];
      for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += ail * bv[static_cast<size_t>(l) * n + j];
    }
  return emit(Op::matmul, {a, b}, {m, n}, std::move(out));
}

namespace detail {
// Accumulates one shifted input row per kernel tap so the innermost loop is
// contiguous in both operands and vectorizes.
template <typename T>
std::vector<T> conv2d_forward(const Conv2dDims& d, const std::vector<T>& xv,
                              const std::vector<T>& wv, const std::vector<T>* bv) {
  std::vector<T> out(static_cast<size_t>(d.N) * d.O * d.H * d.W, T(0));
  const size_t plane = static_cast<size_t>(d.H) * d.W;
  for (int n = 0; n < d.N; ++n)
    for (int o = 0; o < d.O; ++o) {
      T* op = out.data() + (static_cast<size_t>(n) * d.O + o) * plane;
      if (bv) {
        const T bias = (*bv)[static_cast<size_t>(o)];
        for (size_t p = 0; p < plane; ++p) op[p] = bias;
      }
      for (int c = 0; c < d.C; ++c) {
        const T* xp = xv.data() + (static_cast<size_t>(n) * d.C + c) * plane;
        const T* wp = wv.data() + ((static_cast<size_t>(o) * d.C + c) * d.KH) * d.KW;
        for (int ki = 0; ki < d.KH; ++ki)
          for (int kj = 0; kj < d.KW; ++kj) {
            const T wval = wp[static_cast<size_t>(ki) * d.KW + kj];
            const int di = ki - d.PH, dj = kj - d.PW;
            const int i0 = std::max(0, -di), i1 = std::min(d.H, d.H - di);
            const int j0 = std::max(0, -dj), j1 = std::min(d.W, d.W - dj);
            for (int i = i0; i < i1; ++i) {
              T* orow = op + static_cast<size_t>(i) * d.W;
              const T* xrow = xp + static_cast<size_t>(i + di) * d.W + dj;
              for (int j = j0; j < j1; ++j) orow[j] += wval * xrow[j];
            }
          }
      }
    }
  return out;
}
}  // namespace detail

// stride 1, zero "same" padding; optional per-channel bias of shape [O]
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  auto d = detail::conv2d_dims(x, w);
  auto out = detail::conv2d_forward<T>(d, x.values(), w.values(), nullptr);
  return emit(Op::conv2d, {x, w}, {d.N, d.O, d.H, d.W}, std::move(out));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  auto d = detail::conv2d_dims(x, w);
  detail::require_rank("conv2d", b, 1, "bias");
  if (b.shape()[0] != d.O)
    fail("conv2d: bias dim 0 is ", b.shape()[0], ", expected output channels ", d.O);
  auto out = detail::conv2d_forward(d, x.values(), w.values(), &b.values());
  return emit(Op::conv2d, {x, w, b}, {d.N, d.O, d.H, d.W}, std::move(out));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return emit(Op::relu, {x}, x.shape(), std::move(out));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = detail::stable_sigmoid(xv[i]);
  return emit(Op::sigmoid, {x}, x.shape(), std::move(out));
}

// 2x2 window, stride 2
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x) {
  detail::require_rank("avg_pool2d", x, 4, "input");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % 2 != 0 || W % 2 != 0)
    fail("avg_pool2d: spatial dims must be even, got ", H, "x", W);
  const int HO = H / 2, WO = W / 2;
  const auto& xv = x.values();
  std::vector<T> out(static_cast<size_t>(N) * C * HO * WO);
  for (int nc = 0; nc < N * C; ++nc)
    for (int i = 0; i < HO; ++i)
      for (int j = 0; j < WO; ++j) {
        const size_t base = (static_cast<size_t>(nc) * H + 2 * i) * W + 2 * j;
        out[(static_cast<size_t>(nc) * HO + i) * WO + j] =
            (xv[base] + xv[base + 1] + xv[base + W] + xv[base + W + 1]) / T(4);
      }
  return emit(Op::avg_pool2d, {x}, {N, C, HO, WO}, std::move(out));
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  detail::require_rank("upsample_nearest2x", x, 4, "input");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int HO = H * 2, WO = W * 2;
  const auto& xv = x.values();
  std::vector<T> out(static_cast<size_t>(N) * C * HO * WO);
  for (int nc = 0; nc < N * C; ++nc)
    for (int i = 0; i < HO; ++i)
      for (int j = 0; j < WO; ++j)
        out[(static_cast<size_t>(nc) * HO + i) * WO + j] =
            xv[(static_cast<size_t>(nc) * H + i / 2) * W + j / 2];
  return emit(Op::upsample_nearest2x, {x}, {N, C, HO, WO}, std::move(out));
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("concat_channels", a, 4, "lhs");
  detail::require_rank("concat_channels", b, 4, "rhs");
  for (int d : {0, 2, 3})
    if (a.shape()[static_cast<size_t>(d)] != b.shape()[static_cast<size_t>(d)])
      fail("concat_channels: shape mismatch at dim ", d, ": ", a.shape()[static_cast<size_t>(d)],
           " vs ", b.shape()[static_cast<size_t>(d)]);
  const int N = a.shape()[0], C1 = a.shape()[1], C2 = b.shape()[1], H = a.shape()[2],
            W = a.shape()[3];
  const auto& av = a.values();
  const auto& bv = b.values();
  const size_t plane = static_cast<size_t>(H) * W;
  std::vector<T> out(static_cast<size_t>(N) * (C1 + C2) * plane);
  for (int n = 0; n < N; ++n) {
    std::memcpy(out.data() + static_cast<size_t>(n) * (C1 + C2) * plane,
                av.data() + static_cast<size_t>(n) * C1 * plane, C1 * plane * sizeof(T));
    std::memcpy(out.data() + (static_cast<size_t>(n) * (C1 + C2) + C1) * plane,
                bv.data() + static_cast<size_t>(n) * C2 * plane, C2 * plane * sizeof(T));
  }
  return emit(Op::concat_channels, {a, b}, {N, C1 + C2, H, W}, std::move(out));
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  return emit(Op::reduce_sum, {x}, {1}, std::vector<T>{acc});
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  acc /= static_cast<T>(x.size());
  return emit(Op::reduce_mean, {x}, {1}, std::vector<T>{acc});
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * xv[i];
  return emit(Op::square, {x}, x.shape(), std::move(out));
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] < T(0) ? -xv[i] : xv[i];
  return emit(Op::abs, {x}, x.shape(), std::move(out));
}

// -------------------------------- internal ops -----------------------------

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("divide", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  return emit(Op::divide, {a, b}, a.shape(), std::move(out));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    fail("reshape: cannot view ", shape_str(x.shape()), " as ", shape_str(new_shape));
  return emit(Op::reshape, {x}, std::move(new_shape), x.values());
}

// Elementwise binary cross-entropy on logits, numerically stabilized:
//   bce(l, z) = max(l, 0) - l*z + log1p(exp(-|l|)),   d/dl = sigmoid(l) - z
// Targets may be soft (in [0,1]) and never receive gradient.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::require_same_shape("bce_logits", logits, targets);
  if (targets.tracked()) fail("bce_logits: targets must not require grad");
  const auto& lv = logits.values();
  const auto& zv = targets.values();
  std::vector<T> out(lv.size());
  for (size_t i = 0; i < lv.size(); ++i) {
    if (zv[i] < T(0) || zv[i] > T(1))
      fail("bce_logits: target out of [0,1]: ", static_cast<double>(zv[i]));
    const T l = lv[i];
    out[i] = std::max(l, T(0)) - l * zv[i] + std::log1p(std::exp(-std::fabs(l)));
  }
  return emit(Op::bce_logits, {logits, targets}, logits.shape(), std::move(out));
}

// One component (re or im) of the unitary 2-D DFT of a complex image given as
// two (H, W) tensors. Gradients flow into both components.
template <typename T>
Tensor<T> dft2_component(const Tensor<T>& re, const Tensor<T>& im, bool imag_component,
                         bool inverse) {
  detail::require_rank("dft2", re, 2, "real part");
  detail::require_same_shape("dft2", re, im);
  const int H = re.shape()[0], W = re.shape()[1];
  if (!is_power_of_two(H) || !is_power_of_two(W))
    fail("dft2: dims must be powers of two, got ", H, "x", W);
  std::vector<T> br = re.values();
  std::vector<T> bi = im.values();
  detail::fft_2d(br, bi, H, W, inverse);
  std::vector<T> out = imag_component ? std::move(bi) : std::move(br);
  const int iattr = (imag_component ? 1 : 0) | (inverse ? 2 : 0);
  return emit(imag_component ? Op::dft2_im : Op::dft2_re, {re, im}, re.shape(), std::move(out),
              iattr);
}

// ------------------------------- backward pass -----------------------------

template <typename T>
void Graph<T>::backward_record(const TapeRecord<T>& rec) {
  const std::vector<T>& g = slots_[static_cast<size_t>(rec.out.id())].grad;
  auto acc = [&](const Tensor<T>& input) -> std::vector<T>* {
    if (!input.tracked()) return nullptr;
    return &grad_slot(input.id(), input.shape());
  };

  switch (rec.op) {
    case Op::add: {
      for (int k = 0; k < 2; ++k)
        if (auto* gi = acc(rec.in[static_cast<size_t>(k)]))
          for (size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
      break;
    }
    case Op::sub: {
      if (auto* ga = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = acc(rec.in[1]))
        for (size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
      break;
    }
    case Op::mul: {
      const auto& av = rec.in[0].values();
      const auto& bv = rec.in[1].values();
      if (auto* ga = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
      if (auto* gb = acc(rec.in[1]))
        for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
      break;
    }
    case Op::scalar_mul: {
      const auto& xv = rec.in[0].values();
      const T sv = rec.in[1].values()[0];
      if (auto* gx = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * sv;
      if (auto* gs = acc(rec.in[1])) {
        T a = T(0);
        for (size_t i = 0; i < g.size(); ++i) a += g[i] * xv[i];
        (*gs)[0] += a;
      }
      break;
    }
    case Op::matmul: {
      const int m = rec.in[0].shape()[0], k = rec.in[0].shape()[1], n = rec.in[1].shape()[1];
      const auto& av = rec.in[0].values();
      const auto& bv = rec.in[1].values();
      if (auto* ga = acc(rec.in[0]))
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gij = g[static_cast<size_t>(i) * n + j];
            for (int l = 0; l < k; ++l)
              (*ga)[static_cast<size_t>(i) * k + l] += gij * bv[static_cast<size_t>(l) * n + j];
          }
      if (auto* gb = acc(rec.in[1]))
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gij = g[static_cast<size_t>(i) * n + j];
            for (int l = 0; l < k; ++l)
              (*gb)[static_cast<size_t>(l) * n + j] += av[static_cast<size_t>(i) * k + l] * gij;
          }
      break;
    }
    case Op::conv2d: {
      const auto d = detail::conv2d_dims(rec.in[0], rec.in[1]);
      const auto& xv = rec.in[0].values();
      const auto& wv = rec.in[1].values();
      auto* gx = acc(rec.in[0]);
      auto* gw = acc(rec.in[1]);
      std::vector<T>* gb = rec.in.size() == 3 ? acc(rec.in[2]) : nullptr;
      const size_t plane = static_cast<size_t>(d.H) * d.W;
      for (int n = 0; n < d.N; ++n)
        for (int o = 0; o < d.O; ++o) {
          const T* gop = g.data() + (static_cast<size_t>(n) * d.O + o) * plane;
          if (gb) {
            T s(0);
            for (size_t p = 0; p < plane; ++p) s += gop[p];
            (*gb)[static_cast<size_t>(o)] += s;
          }
          if (!gx && !gw) continue;
          for (int c = 0; c < d.C; ++c) {
            const size_t xoff = (static_cast<size_t>(n) * d.C + c) * plane;
            const size_t woff = ((static_cast<size_t>(o) * d.C + c) * d.KH) * d.KW;
            for (int ki = 0; ki < d.KH; ++ki)
              for (int kj = 0; kj < d.KW; ++kj) {
                const int di = ki - d.PH, dj = kj - d.PW;
                const int i0 = std::max(0, -di), i1 = std::min(d.H, d.H - di);
                const int j0 = std::max(0, -dj), j1 = std::min(d.W, d.W - dj);
                if (gx) {
                  const T wval = wv[woff + static_cast<size_t>(ki) * d.KW + kj];
                  for (int i = i0; i < i1; ++i) {
                    T* xrow = gx->data() + xoff + static_cast<size_t>(i + di) * d.W + dj;
                    const T* grow = gop + static_cast<size_t>(i) * d.W;
                    for (int j = j0; j < j1; ++j) xrow[j] += wval * grow[j];
                  }
                }
                if (gw) {
                  T s(0);
                  for (int i = i0; i < i1; ++i) {
                    const T* xrow = xv.data() + xoff + static_cast<size_t>(i + di) * d.W + dj;
                    const T* grow = gop + static_cast<size_t>(i) * d.W;
                    for (int j = j0; j < j1; ++j) s += grow[j] * xrow[j];
                  }
                  (*gw)[woff + static_cast<size_t>(ki) * d.KW + kj] += s;
                }
              }
          }
        }
      break;
    }
    case Op::relu: {
      const auto& xv = rec.in[0].values();
      if (auto* gx = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i)
          if (xv[i] > T(0)) (*gx)[i] += g[i];
      break;
    }
    case Op::sigmoid: {
      const auto& ov = rec.out.values();
      if (auto* gx = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * ov[i] * (T(1) - ov[i]);
      break;
    }
    case Op::avg_pool2d: {
      const int H = rec.in[0].shape()[2], W = rec.in[0].shape()[3];
      const int NC = rec.in[0].shape()[0] * rec.in[0].shape()[1];
      const int HO = H / 2, WO = W / 2;
      if (auto* gx = acc(rec.in[0]))
        for (int nc = 0; nc < NC; ++nc)
          for (int i = 0; i < HO; ++i)
            for (int j = 0; j < WO; ++j) {
              const T go = g[(static_cast<size_t>(nc) * HO + i) * WO + j] / T(4);
              const size_t base = (static_cast<size_t>(nc) * H + 2 * i) * W + 2 * j;
              (*gx)[base] += go;
              (*gx)[base + 1] += go;
              (*gx)[base + W] += go;
              (*gx)[base + W + 1] += go;
            }
      break;
    }
    case Op::upsample_nearest2x: {
      const int H = rec.in[0].shape()[2], W = rec.in[0].shape()[3];
      const int NC = rec.in[0].shape()[0] * rec.in[0].shape()[1];
      const int HO = H * 2, WO = W * 2;
      if (auto* gx = acc(rec.in[0]))
        for (int nc = 0; nc < NC; ++nc)
          for (int i = 0; i < HO; ++i)
            for (int j = 0; j < WO; ++j)
              (*gx)[(static_cast<size_t>(nc) * H + i / 2) * W + j / 2] +=
                  g[(static_cast<size_t>(nc) * HO + i) * WO + j];
      break;
    }
    case Op::concat_channels: {
      const int N = rec.in[0].shape()[0];
      const int C1 = rec.in[0].shape()[1], C2 = rec.in[1].shape()[1];
      const size_t plane = static_cast<size_t>(rec.in[0].shape()[2]) * rec.in[0].shape()[3];
      if (auto* ga = acc(rec.in[0]))
        for (int n = 0; n < N; ++n)
          for (size_t i = 0; i < C1 * plane; ++i)
            (*ga)[static_cast<size_t>(n) * C1 * plane + i] +=
                g[static_cast<size_t>(n) * (C1 + C2) * plane + i];
      if (auto* gb = acc(rec.in[1]))
        for (int n = 0; n < N; ++n)
          for (size_t i = 0; i < C2 * plane; ++i)
            (*gb)[static_cast<size_t>(n) * C2 * plane + i] +=
                g[(static_cast<size_t>(n) * (C1 + C2) + C1) * plane + i];
      break;
    }
    case Op::reduce_sum: {
      if (auto* gx = acc(rec.in[0]))
        for (auto& v : *gx) v += g[0];
      break;
    }
    case Op::reduce_mean: {
      const T inv = T(1) / static_cast<T>(rec.in[0].size());
      if (auto* gx = acc(rec.in[0]))
        for (auto& v : *gx) v += g[0] * inv;
      break;
    }
    case Op::square: {
      const auto& xv = rec.in[0].values();
      if (auto* gx = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += T(2) * xv[i] * g[i];
      break;
    }
    case Op::abs: {
      const auto& xv = rec.in[0].values();
      if (auto* gx = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i) {
          if (xv[i] > T(0))
            (*gx)[i] += g[i];
          else if (xv[i] < T(0))
            (*gx)[i] -= g[i];
        }
      break;
    }
    case Op::divide: {
      const auto& av = rec.in[0].values();
      const auto& bv = rec.in[1].values();
      if (auto* ga = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
      if (auto* gb = acc(rec.in[1]))
        for (size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
      break;
    }
    case Op::reshape: {
      if (auto* gx = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
      break;
    }
    case Op::bce_logits: {
      const auto& lv = rec.in[0].values();
      const auto& zv = rec.in[1].values();
      if (auto* gl = acc(rec.in[0]))
        for (size_t i = 0; i < g.size(); ++i)
          (*gl)[i] += g[i] * (detail::stable_sigmoid(lv[i]) - zv[i]);
      break;
    }
    case Op::dft2_re:
    case Op::dft2_im: {
      const bool imag_component = (rec.iattr & 1) != 0;
      const bool inverse = (rec.iattr & 2) != 0;
      const int H = rec.in[0].shape()[0], W = rec.in[0].shape()[1];
      // adjoint of the unitary transform: run the opposite direction on the
      // output gradient embedded in the matching component
      std::vector<T> br(static_cast<size_t>(H) * W, T(0));
      std::vector<T> bi(static_cast<size_t>(H) * W, T(0));
      if (imag_component)
        bi = g;
      else
        br = g;
      detail::fft_2d(br, bi, H, W, !inverse);
      if (auto* gre = acc(rec.in[0]))
        for (size_t i = 0; i < br.size(); ++i) (*gre)[i] += br[i];
      if (auto* gim = acc(rec.in[1]))
        for (size_t i = 0; i < bi.size(); ++i) (*gim)[i] += bi[i];
      break;
    }
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.tracked()) fail("backward: loss is a constant (no graph attached)");
  loss.graph()->backward_from(loss);
}

// ---------------------------------------------------------------------------
// apply_primitive: generic entry point restricted to the public primitive set.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> apply_primitive(Op kind, const std::vector<Tensor<T>>& inputs) {
  if (!is_public_primitive(kind))
    fail("apply_primitive: kind '", op_name(kind), "' is not in the public primitive set");
  auto arity = [&](size_t n) {
    if (inputs.size() != n)
      fail("apply_primitive: ", op_name(kind), " expects ", n, " inputs, got ", inputs.size());
  };
  switch (kind) {
    case Op::add: arity(2); return add(inputs[0], inputs[1]);
    case Op::sub: arity(2); return sub(inputs[0], inputs[1]);
    case Op::mul: arity(2); return mul(inputs[0], inputs[1]);
    case Op::scalar_mul: arity(2); return scalar_mul(inputs[0], inputs[1]);
    case Op::matmul: arity(2); return matmul(inputs[0], inputs[1]);
    case Op::conv2d:
      if (inputs.size() == 2) return conv2d(inputs[0], inputs[1]);
      if (inputs.size() == 3) return conv2d(inputs[0], inputs[1], inputs[2]);
      fail("apply_primitive: conv2d expects 2 or 3 inputs, got ", inputs.size());
    case Op::relu: arity(1); return relu(inputs[0]);
    case Op::sigmoid: arity(1); return sigmoid(inputs[0]);
    case Op::avg_pool2d: arity(1); return avg_pool2d(inputs[0]);
    case Op::upsample_nearest2x: arity(1); return upsample_nearest2x(inputs[0]);
    case Op::concat_channels: arity(2); return concat_channels(inputs[0], inputs[1]);
    case Op::reduce_sum: arity(1); return reduce_sum(inputs[0]);
    case Op::reduce_mean: arity(1); return reduce_mean(inputs[0]);
    case Op::square: arity(1); return square(inputs[0]);
    case Op::abs: arity(1); return abs(inputs[0]);
    default: break;
  }
  fail("apply_primitive: unhandled kind");
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient check. The difference quotient side is
// independent of the tape; it only calls the forward path on constants.
// ---------------------------------------------------------------------------
struct FdReport {
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
  int n_checked = 0;
};

template <typename T>
FdReport finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                           double eps, double tol) {
  if (eps <= 0) fail("finite_diff_check: eps must be positive");
  const Shape shape = x.shape();
  const std::vector<T> base = x.values();

  auto eval = [&](const std::vector<T>& v) -> T {
    Tensor<T> out = f(Tensor<T>::constant(shape, v));
    if (out.size() != 1)
      fail("finite_diff_check: f must be scalar-valued, got shape ", shape_str(out.shape()));
    return out.item();
  };

  const T y1 = eval(base);
  const T y2 = eval(base);
  if (std::memcmp(&y1, &y2, sizeof(T)) != 0)
    fail("finite_diff_check: f is non-deterministic at the given input");

  // autodiff gradient
  std::vector<T> ga(base.size(), T(0));
  {
    auto g = Graph<T>::make();
    Tensor<T> xv = Tensor<T>::variable(g, shape, base);
    Tensor<T> loss = f(xv);
    if (loss.size() != 1)
      fail("finite_diff_check: f must be scalar-valued, got shape ", shape_str(loss.shape()));
    if (loss.tracked()) {
      backward(loss);
      ga = xv.grad();
    }
  }

  FdReport rep;
  rep.tol = tol;
  rep.n_checked = static_cast<int>(base.size());
  std::vector<T> probe = base;
  for (size_t i = 0; i < base.size(); ++i) {
    probe[i] = base[i] + static_cast<T>(eps);
    const double fp = static_cast<double>(eval(probe));
    probe[i] = base[i] - static_cast<T>(eps);
    const double fm = static_cast<double>(eval(probe));
    probe[i] = base[i];
    const double gfd = (fp - fm) / (2.0 * eps);
    const double gad = static_cast<double>(ga[i]);
    const double denom = std::max({std::fabs(gfd), std::fabs(gad), 1e-6});
    rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(gfd - gad) / denom);
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace most

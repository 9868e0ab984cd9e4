#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "most/common.hpp"
#include "most/tensor.hpp"

namespace most {

// ---------------------------------------------------------------------------
// Differentiable SSIM with a 7x7 uniform window (zero "same" padding), built
// entirely from tape primitives so it can serve as a training loss.
// Data range L is taken from the reference image b; C1=(0.01L)^2, C2=(0.03L)^2.
// ---------------------------------------------------------------------------
namespace detail {

template <typename T>
Tensor<T> uniform_filter7(const Tensor<T>& img) {
  const int H = img.shape()[0], W = img.shape()[1];
  static const Tensor<T> kernel =
      Tensor<T>::full({1, 1, 7, 7}, T(1) / T(49));
  Tensor<T> x = reshape(img, {1, 1, H, W});
  return reshape(conv2d(x, kernel), {H, W});
}

}  // namespace detail

template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("ssim", a, 2, "image");
  detail::require_same_shape("ssim", a, b);
  T L = T(0);
  for (T v : b.values()) L = std::max(L, v);
  if (!(L > T(0))) fail("ssim: reference image maximum must be positive");
  const T c1 = (T(0.01) * L) * (T(0.01) * L);
  const T c2 = (T(0.03) * L) * (T(0.03) * L);
  Tensor<T> C1 = Tensor<T>::full(a.shape(), c1);
  Tensor<T> C2 = Tensor<T>::full(a.shape(), c2);

  Tensor<T> mu_a = detail::uniform_filter7(a);
  Tensor<T> mu_b = detail::uniform_filter7(b);
  Tensor<T> e_aa = detail::uniform_filter7(mul(a, a));
  Tensor<T> e_bb = detail::uniform_filter7(mul(b, b));
  Tensor<T> e_ab = detail::uniform_filter7(mul(a, b));

  Tensor<T> var_a = sub(e_aa, mul(mu_a, mu_a));
  Tensor<T> var_b = sub(e_bb, mul(mu_b, mu_b));
  Tensor<T> cov = sub(e_ab, mul(mu_a, mu_b));

  Tensor<T> num = mul(add(scale(mul(mu_a, mu_b), T(2)), C1), add(scale(cov, T(2)), C2));
  Tensor<T> den =
      mul(add(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), C1), add(add(var_a, var_b), C2));
  return reduce_mean(divide(num, den));
}

template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(Tensor<T>::scalar(T(1)), ssim(a, b));
}

// ---------------------------------------------------------------------------
// Cross-entropy on logits with hard {0,1} labels; per-element mean, which for
// a single scalar logit is just the value itself.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& labels) {
  detail::require_same_shape("cross_entropy", logits, labels);
  for (T z : labels.values())
    if (z != T(0) && z != T(1))
      fail("cross_entropy: label must be 0 or 1, got ", static_cast<double>(z));
  return reduce_mean(bce_with_logits(logits, labels));
}

// ---------------------------------------------------------------------------
// DICE overlap of two binary maps; both-empty pairs score 1.0.
// ---------------------------------------------------------------------------
template <typename T>
double dice(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("dice", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  int64_t na = 0, nb = 0, overlap = 0;
  for (size_t i = 0; i < av.size(); ++i) {
    if (av[i] != T(0) && av[i] != T(1))
      fail("dice: mask value must be 0 or 1, got ", static_cast<double>(av[i]));
    if (bv[i] != T(0) && bv[i] != T(1))
      fail("dice: mask value must be 0 or 1, got ", static_cast<double>(bv[i]));
    const bool ia = av[i] == T(1), ib = bv[i] == T(1);
    na += ia;
    nb += ib;
    overlap += (ia && ib);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(na + nb);
}

// Threshold logits at 0 (sigmoid 0.5) and score against a binary label map.
template <typename T>
double dice_from_logits(const Tensor<T>& logits, const Tensor<T>& label) {
  detail::require_same_shape("dice_from_logits", logits, label);
  const auto& lv = logits.values();
  std::vector<T> pred(lv.size());
  for (size_t i = 0; i < lv.size(); ++i) pred[i] = lv[i] > T(0) ? T(1) : T(0);
  return dice(Tensor<T>::constant(logits.shape(), std::move(pred)), label);
}

// ---------------------------------------------------------------------------
// Rank-based AUC (Mann-Whitney) with midrank tie handling: the fraction of
// (positive, negative) pairs ordered correctly, ties counting one half.
// ---------------------------------------------------------------------------
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    fail("auc: ", scores.size(), " scores vs ", labels.size(), " labels");
  if (scores.empty()) fail("auc: empty input");
  int64_t npos = 0, nneg = 0;
  for (int z : labels) {
    if (z != 0 && z != 1) fail("auc: label must be 0 or 1, got ", z);
    (z == 1 ? npos : nneg)++;
  }
  if (npos == 0 || nneg == 0) fail("auc: both classes must be present");

  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t i, size_t j) { return scores[i] < scores[j]; });

  // midranks over tie groups, 1-based
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1);
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

// ---------------------------------------------------------------------------
// Per-task metric trace across finetuning stages, plus the two summary
// statistics reported for continual-learning runs: the value after the final
// stage (last metric) and the best-minus-worst spread (forgetting measure,
// undefined for traces shorter than two entries).
// ---------------------------------------------------------------------------
struct TracePoint {
  int stage = 0;
  double value = 0.0;
};

struct MetricTrace {
  std::string task;
  std::vector<TracePoint> points;

  void append(int stage, double value) {
    if (!std::isfinite(value))
      fail("MetricTrace: non-finite value for task '", task, "' at stage ", stage);
    if (!points.empty() && stage <= points.back().stage)
      fail("MetricTrace: stage ", stage, " not after previous stage ", points.back().stage);
    points.push_back(TracePoint{stage, value});
  }
};

inline double last_metric(const MetricTrace& trace) {
  if (trace.points.empty()) fail("last_metric: empty trace for task '", trace.task, "'");
  return trace.points.back().value;
}

inline std::optional<double> forgetting_measure(const MetricTrace& trace) {
  if (trace.points.size() < 2) return std::nullopt;
  double lo = trace.points[0].value, hi = trace.points[0].value;
  for (const auto& p : trace.points) {
    lo = std::min(lo, p.value);
    hi = std::max(hi, p.value);
  }
  return hi - lo;
}

}  // namespace most

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "most/common.hpp"
#include "most/kspace.hpp"
#include "most/rng.hpp"
#include "most/tensor.hpp"

namespace most {

// ---------------------------------------------------------------------------
// Five synthetic task families sharing an elliptical "head" phantom but with
// deliberately different global intensity statistics (a controllable domain
// gap), plus per-kind structures that define the task label.
// ---------------------------------------------------------------------------
enum class TaskKind : uint8_t {
  reconstruction,
  segmentation_A,
  segmentation_B,
  classification_A,
  classification_B,
};

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::reconstruction: return "recon";
    case TaskKind::segmentation_A: return "seg_a";
    case TaskKind::segmentation_B: return "seg_b";
    case TaskKind::classification_A: return "cls_a";
    case TaskKind::classification_B: return "cls_b";
  }
  return "?";
}

inline TaskKind task_from_name(const std::string& name) {
  for (TaskKind k : {TaskKind::reconstruction, TaskKind::segmentation_A, TaskKind::segmentation_B,
                     TaskKind::classification_A, TaskKind::classification_B})
    if (name == task_name(k)) return k;
  fail("unknown task name '", name, "'");
}

inline bool is_segmentation(TaskKind k) {
  return k == TaskKind::segmentation_A || k == TaskKind::segmentation_B;
}

inline bool is_classification(TaskKind k) {
  return k == TaskKind::classification_A || k == TaskKind::classification_B;
}

// ---------------------------------------------------------------------------
// One subject = one 2-D sample. x is the aliased (zero-filled) image derived
// from y by undersample_dataset; y is the clean image in [0,1]; z is a binary
// mask for segmentation, a 1-element scalar in {0,1} for classification, and
// left undefined for reconstruction.
// ---------------------------------------------------------------------------
template <typename T>
struct Sample {
  Tensor<T> x;
  Tensor<T> y;
  Tensor<T> z;
  int subject_id = -1;

  bool has_label() const { return z.defined(); }
};

template <typename T>
struct TaskDataset {
  TaskKind kind = TaskKind::reconstruction;
  int image_size = 0;
  std::vector<Sample<T>> train, val, test;

  int64_t total() const {
    return static_cast<int64_t>(train.size() + val.size() + test.size());
  }
};

// ------------------------------ generation ---------------------------------

namespace detail {

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// per-kind background intensity of the head ellipse; spacing chosen so the
// dataset-level mean gap between any two kinds stays above 0.05
inline double head_base(TaskKind k) {
  switch (k) {
    case TaskKind::reconstruction: return 0.28;
    case TaskKind::segmentation_A: return 0.46;
    case TaskKind::segmentation_B: return 0.64;
    case TaskKind::classification_A: return 0.82;
    case TaskKind::classification_B: return 0.97;
  }
  return 0.0;
}

// bright structures on dark backgrounds, dark structures on bright ones
inline double feature_bump(TaskKind k) { return head_base(k) < 0.6 ? 0.35 : -0.35; }

}  // namespace detail

template <typename T>
Sample<T> gen_sample(TaskKind kind, int subject_id, int size, uint64_t seed) {
  Rng rng = derive_rng(seed, "phantom", static_cast<uint64_t>(kind),
                       static_cast<uint64_t>(subject_id));
  const int S = size;
  const double cy = S / 2.0, cx = S / 2.0;
  const double a = (0.62 + 0.10 * rng.u01()) * S / 2.0;  // horizontal semi-axis
  const double b = (0.72 + 0.10 * rng.u01()) * S / 2.0;  // vertical semi-axis
  const double g1 = rng.uniform(-1.0, 1.0);
  const double g2 = rng.uniform(-1.0, 1.0);
  const double base = detail::head_base(kind);
  const double bump = detail::feature_bump(kind);

  std::vector<double> img(static_cast<size_t>(S) * S, 0.0);
  std::vector<double> inside(static_cast<size_t>(S) * S, 0.0);
  auto at = [&](int i, int j) -> double& { return img[static_cast<size_t>(i) * S + j]; };
  auto nrm = [&](int i, int j) {  // squared elliptic radius, 1 on the head boundary
    const double u = (j - cx) / a, v = (i - cy) / b;
    return u * u + v * v;
  };
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j)
      if (nrm(i, j) <= 1.0) {
        inside[static_cast<size_t>(i) * S + j] = 1.0;
        at(i, j) = base + 0.12 * (g1 * (i / double(S) - 0.5) + g2 * (j / double(S) - 0.5));
      }

  std::vector<double> label;
  double z_scalar = -1.0;

  switch (kind) {
    case TaskKind::reconstruction: {
      // a couple of internal blobs so reconstruction has structure to recover
      for (int d = 0; d < 2; ++d) {
        const double phi = rng.uniform(0.0, 2.0 * M_PI);
        const double dist = rng.uniform(0.0, 0.55);
        const double r = (0.08 + 0.08 * rng.u01()) * S / 2.0;
        const double ci = cy + dist * (b - r - 2.0) * std::sin(phi);
        const double cj = cx + dist * (a - r - 2.0) * std::cos(phi);
        const double off = (rng.u01() < 0.5 ? -0.14 : 0.14);
        for (int i = 0; i < S; ++i)
          for (int j = 0; j < S; ++j)
            if ((i - ci) * (i - ci) + (j - cj) * (j - cj) <= r * r && nrm(i, j) <= 1.0)
              at(i, j) += off;
      }
      break;
    }
    case TaskKind::segmentation_A: {
      // union of 2-3 thin sinusoidal ribbons
      label.assign(img.size(), 0.0);
      const int nribbons = 2 + static_cast<int>(rng.randint(2));
      for (int rb = 0; rb < nribbons; ++rb) {
        const double y0 = cy + rng.uniform(-0.4, 0.4) * b;
        const double amp = (0.05 + 0.10 * rng.u01()) * S / 2.0;
        const double freq = rng.uniform(1.0, 2.0);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (int j = 0; j < S; ++j) {
          const double yr = y0 + amp * std::sin(2.0 * M_PI * freq * j / S + phase);
          for (int i = 0; i < S; ++i)
            if (std::fabs(i - yr) < 1.5 && nrm(i, j) <= 1.0) {
              at(i, j) += bump * (label[static_cast<size_t>(i) * S + j] == 1.0 ? 0.0 : 1.0);
              label[static_cast<size_t>(i) * S + j] = 1.0;
            }
        }
      }
      break;
    }
    case TaskKind::segmentation_B: {
      // one round blob fully inside the head
      label.assign(img.size(), 0.0);
      const double r = std::max(1.2, (0.125 + 0.075 * rng.u01()) * S / 2.0);
      const double phi = rng.uniform(0.0, 2.0 * M_PI);
      const double dist = rng.u01();
      const double ci = cy + dist * std::max(0.0, b - r - 2.0) * std::sin(phi);
      const double cj = cx + dist * std::max(0.0, a - r - 2.0) * std::cos(phi);
      for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j)
          if ((i - ci) * (i - ci) + (j - cj) * (j - cj) <= r * r) {
            at(i, j) += bump;
            label[static_cast<size_t>(i) * S + j] = 1.0;
          }
      break;
    }
    case TaskKind::classification_A: {
      // off-center eccentric ellipse present iff z = 1
      z_scalar = subject_id % 2;
      const double phi = rng.uniform(0.0, 2.0 * M_PI);
      if (z_scalar == 1.0) {
        const double ci = cy + 0.45 * b * std::sin(phi);
        const double cj = cx + 0.45 * a * std::cos(phi);
        const double ea = 0.16 * S / 2.0, eb = 0.08 * S / 2.0;
        for (int i = 0; i < S; ++i)
          for (int j = 0; j < S; ++j) {
            const double u = (j - cj) / ea, v = (i - ci) / eb;
            if (u * u + v * v <= 1.0 && nrm(i, j) <= 1.0) at(i, j) += bump;
          }
      }
      break;
    }
    case TaskKind::classification_B: {
      // concentric ring present iff z = 1
      z_scalar = subject_id % 2;
      if (z_scalar == 1.0) {
        for (int i = 0; i < S; ++i)
          for (int j = 0; j < S; ++j) {
            const double rho = std::sqrt(nrm(i, j));
            if (std::fabs(rho - 0.55) < 0.045) at(i, j) += bump;
          }
      }
      break;
    }
  }

  std::vector<T> y(img.size());
  for (size_t i = 0; i < img.size(); ++i) y[i] = static_cast<T>(detail::clamp01(img[i]));
  Sample<T> s;
  s.subject_id = subject_id;
  s.y = Tensor<T>::constant({S, S}, std::move(y));
  s.x = s.y;  // placeholder until undersample_dataset derives the aliased image
  if (is_segmentation(kind)) {
    std::vector<T> zl(label.size());
    for (size_t i = 0; i < label.size(); ++i) zl[i] = static_cast<T>(label[i]);
    s.z = Tensor<T>::constant({S, S}, std::move(zl));
  } else if (is_classification(kind)) {
    s.z = Tensor<T>::scalar(static_cast<T>(z_scalar));
  }
  return s;
}

template <typename T>
TaskDataset<T> gen_task_dataset(TaskKind kind, int n, int size, uint64_t seed) {
  if (n < 12) fail("gen_task_dataset: need at least 12 samples, got ", n);
  if (!is_power_of_two(size)) fail("gen_task_dataset: size must be a power of two, got ", size);
  TaskDataset<T> ds;
  ds.kind = kind;
  ds.image_size = size;
  ds.train.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) ds.train.push_back(gen_sample<T>(kind, i, size, seed));
  return ds;
}

// ----------------------------- undersampling -------------------------------

// Replace every x by the zero-filled reconstruction of the masked k-space of y.
template <typename T>
TaskDataset<T> undersample_dataset(const TaskDataset<T>& ds, const SamplingMask& mask) {
  if (ds.image_size != mask.width)
    fail("undersample_dataset: image width ", ds.image_size, " != mask width ", mask.width);
  TaskDataset<T> out = ds;
  auto process = [&](std::vector<Sample<T>>& part) {
    for (auto& s : part) {
      ComplexImage<T> k0 = apply_forward_model(s.y, mask);
      s.x = zero_filled(k0, mask);
    }
  };
  process(out.train);
  process(out.val);
  process(out.test);
  return out;
}

// --------------------------------- split -----------------------------------

// Subject-disjoint train/val/test partition. Labeled-kind samples are
// interleaved by class before cutting so each partition keeps both classes.
template <typename T>
TaskDataset<T> split(const TaskDataset<T>& ds, double f_train, double f_val, double f_test,
                     uint64_t seed) {
  if (f_train <= 0 || f_val <= 0 || f_test <= 0)
    fail("split: fractions must be positive");
  if (std::fabs(f_train + f_val + f_test - 1.0) > 1e-9)
    fail("split: fractions must sum to 1, got ", f_train + f_val + f_test);
  std::vector<Sample<T>> all;
  all.reserve(static_cast<size_t>(ds.total()));
  for (const auto* part : {&ds.train, &ds.val, &ds.test})
    for (const auto& s : *part) all.push_back(s);
  const int n = static_cast<int>(all.size());
  const int n_train = static_cast<int>(f_train * n);
  const int n_val = static_cast<int>(f_val * n);
  const int n_test = n - n_train - n_val;
  if (n_train < 1 || n_val < 1 || n_test < 1)
    fail("split: empty partition for n=", n, " (", n_train, "/", n_val, "/", n_test, ")");

  Rng rng = derive_rng(seed, "split", static_cast<uint64_t>(ds.kind), 0);
  std::vector<int> order;
  order.reserve(all.size());
  if (is_classification(ds.kind)) {
    std::vector<int> pos, neg;
    for (int i = 0; i < n; ++i)
      (all[static_cast<size_t>(i)].z.values()[0] == 1 ? pos : neg).push_back(i);
    rng.shuffle(pos);
    rng.shuffle(neg);
    for (size_t i = 0; i < pos.size() || i < neg.size(); ++i) {
      if (i < pos.size()) order.push_back(pos[i]);
      if (i < neg.size()) order.push_back(neg[i]);
    }
  } else {
    order.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    rng.shuffle(order);
  }

  TaskDataset<T> out;
  out.kind = ds.kind;
  out.image_size = ds.image_size;
  for (int i = 0; i < n; ++i) {
    const Sample<T>& s = all[static_cast<size_t>(order[static_cast<size_t>(i)])];
    if (i < n_train)
      out.train.push_back(s);
    else if (i < n_train + n_val)
      out.val.push_back(s);
    else
      out.test.push_back(s);
  }
  return out;
}

}  // namespace most

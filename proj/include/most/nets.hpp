#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "most/common.hpp"
#include "most/kspace.hpp"
#include "most/metrics.hpp"
#include "most/optim.hpp"
#include "most/phantom.hpp"
#include "most/rng.hpp"
#include "most/tensor.hpp"

namespace most {

// ---------------------------------------------------------------------------
// Parameter initialization: scaled uniform fan-in for weights, zeros for
// biases. Each parameter gets its own stream keyed by name, so adding or
// reordering parameters never perturbs the others.
// ---------------------------------------------------------------------------
namespace detail {

template <typename T>
Param<T> init_weight(Shape shape, int fan_in, uint64_t seed, const std::string& name) {
  Rng rng = derive_rng(seed, name);
  const double s = std::sqrt(1.0 / fan_in);
  Param<T> p;
  p.shape = std::move(shape);
  p.data.resize(static_cast<size_t>(numel(p.shape)));
  for (auto& v : p.data) v = static_cast<T>(rng.uniform(-s, s));
  return p;
}

template <typename T>
Param<T> init_const(Shape shape, T value) {
  Param<T> p;
  p.shape = std::move(shape);
  p.data.assign(static_cast<size_t>(numel(p.shape)), value);
  return p;
}

}  // namespace detail

// Bind every parameter as a tracked variable on g, or as a plain constant
// when g is null (evaluation path).
template <typename T>
std::map<std::string, Tensor<T>> bind_params(const ParamStore<T>& store,
                                             const std::shared_ptr<Graph<T>>& g) {
  std::map<std::string, Tensor<T>> vars;
  for (const auto& [name, p] : store)
    vars.emplace(name, g ? Tensor<T>::variable(g, p.shape, p.data)
                         : Tensor<T>::constant(p.shape, p.data));
  return vars;
}

// Gradients of all bound parameters after backward(); parameters the loss
// never touched get zeros.
template <typename T>
std::map<std::string, std::vector<T>> collect_grads(const std::map<std::string, Tensor<T>>& vars) {
  std::map<std::string, std::vector<T>> grads;
  for (const auto& [name, t] : vars) grads.emplace(name, t.grad());
  return grads;
}

// ---------------------------------------------------------------------------
// Unrolled reconstruction network: C cascades of
//   x <- x - eta_c * dc_gradient(x, k0, mask) - CNN_c(x)
// where CNN_c is a 2-layer 3x3 convolutional regularizer.
// ---------------------------------------------------------------------------
template <typename T>
struct ReconNet {
  int cascades = 3;
  int channels = 8;
  ParamStore<T> params;
};

template <typename T>
ReconNet<T> init_recon_net(int cascades, int channels, uint64_t seed) {
  if (cascades < 1) fail("init_recon_net: cascades must be >= 1, got ", cascades);
  if (channels < 1) fail("init_recon_net: channels must be >= 1, got ", channels);
  ReconNet<T> net;
  net.cascades = cascades;
  net.channels = channels;
  for (int c = 0; c < cascades; ++c) {
    const std::string p = "casc" + std::to_string(c) + ".";
    net.params[p + "conv1.w"] =
        detail::init_weight<T>({channels, 1, 3, 3}, 9, seed, p + "conv1.w");
    net.params[p + "conv1.b"] = detail::init_const<T>({channels}, T(0));
    net.params[p + "conv2.w"] =
        detail::init_weight<T>({1, channels, 3, 3}, channels * 9, seed, p + "conv2.w");
    net.params[p + "conv2.b"] = detail::init_const<T>({1}, T(0));
    net.params[p + "eta"] = detail::init_const<T>({1}, T(1));
  }
  return net;
}

// Forward through the cascades; `vars` comes from bind_params (tracked for
// training, constants for evaluation).
template <typename T>
Tensor<T> recon_forward(const std::map<std::string, Tensor<T>>& vars, int cascades,
                        const Tensor<T>& x0, const ComplexImage<T>& k0,
                        const SamplingMask& mask) {
  detail::require_rank("recon_forward", x0, 2, "input");
  const int H = x0.shape()[0], W = x0.shape()[1];
  Tensor<T> x = x0;
  for (int c = 0; c < cascades; ++c) {
    const std::string p = "casc" + std::to_string(c) + ".";
    Tensor<T> h = reshape(x, {1, 1, H, W});
    h = relu(conv2d(h, vars.at(p + "conv1.w"), vars.at(p + "conv1.b")));
    h = conv2d(h, vars.at(p + "conv2.w"), vars.at(p + "conv2.b"));
    Tensor<T> cnn = reshape(h, {H, W});
    Tensor<T> dc = dc_gradient(x, k0, mask);
    x = sub(x, add(scalar_mul(dc, vars.at(p + "eta")), cnn));
  }
  return x;
}

template <typename T>
Tensor<T> recon_forward(const ReconNet<T>& net, const Tensor<T>& x0, const ComplexImage<T>& k0,
                        const SamplingMask& mask) {
  auto vars = bind_params(net.params, std::shared_ptr<Graph<T>>{});
  return recon_forward(vars, net.cascades, x0, k0, mask);
}

// ---------------------------------------------------------------------------
// Downstream networks. Segmentation: 2-level encoder-decoder with a skip
// connection, 1-logit map out. Classification: 3 conv+pool blocks, global
// average pooling, dense layer, 1 logit out. Both stay differentiable w.r.t.
// the input image even when frozen.
// ---------------------------------------------------------------------------
template <typename T>
struct DownstreamNet {
  TaskKind kind = TaskKind::segmentation_A;
  int channels = 8;
  ParamStore<T> params;
  bool frozen = false;
  uint64_t frozen_hash = 0;
};

template <typename T>
DownstreamNet<T> init_downstream_net(TaskKind kind, int channels, uint64_t seed) {
  if (kind == TaskKind::reconstruction)
    fail("init_downstream_net: reconstruction has no downstream net");
  DownstreamNet<T> net;
  net.kind = kind;
  net.channels = channels;
  const int c1 = channels, c2 = channels * 2, c3 = channels * 4;
  if (is_segmentation(kind)) {
    net.params["enc1.w"] = detail::init_weight<T>({c1, 1, 3, 3}, 9, seed, "enc1.w");
    net.params["enc1.b"] = detail::init_const<T>({c1}, T(0));
    net.params["enc2.w"] = detail::init_weight<T>({c2, c1, 3, 3}, c1 * 9, seed, "enc2.w");
    net.params["enc2.b"] = detail::init_const<T>({c2}, T(0));
    net.params["dec.w"] =
        detail::init_weight<T>({c1, c1 + c2, 3, 3}, (c1 + c2) * 9, seed, "dec.w");
    net.params["dec.b"] = detail::init_const<T>({c1}, T(0));
    net.params["out.w"] = detail::init_weight<T>({1, c1, 1, 1}, c1, seed, "out.w");
    net.params["out.b"] = detail::init_const<T>({1}, T(0));
  } else {
    net.params["b1.w"] = detail::init_weight<T>({c1, 1, 3, 3}, 9, seed, "b1.w");
    net.params["b1.b"] = detail::init_const<T>({c1}, T(0));
    net.params["b2.w"] = detail::init_weight<T>({c2, c1, 3, 3}, c1 * 9, seed, "b2.w");
    net.params["b2.b"] = detail::init_const<T>({c2}, T(0));
    net.params["b3.w"] = detail::init_weight<T>({c3, c2, 3, 3}, c2 * 9, seed, "b3.w");
    net.params["b3.b"] = detail::init_const<T>({c3}, T(0));
    net.params["fc.w"] = detail::init_weight<T>({c3, 1}, c3, seed, "fc.w");
    net.params["fc.b"] = detail::init_const<T>({1}, T(0));
  }
  return net;
}

// Segmentation: (H, W) logits. Classification: 1-element logit.
template <typename T>
Tensor<T> downstream_forward(const std::map<std::string, Tensor<T>>& vars, TaskKind kind,
                             int channels, const Tensor<T>& img) {
  detail::require_rank("downstream_forward", img, 2, "input");
  const int H = img.shape()[0], W = img.shape()[1];
  Tensor<T> x = reshape(img, {1, 1, H, W});
  if (is_segmentation(kind)) {
    Tensor<T> e1 = relu(conv2d(x, vars.at("enc1.w"), vars.at("enc1.b")));
    Tensor<T> e2 = relu(conv2d(avg_pool2d(e1), vars.at("enc2.w"), vars.at("enc2.b")));
    Tensor<T> u = upsample_nearest2x(e2);
    Tensor<T> d = relu(conv2d(concat_channels(e1, u), vars.at("dec.w"), vars.at("dec.b")));
    Tensor<T> logit = conv2d(d, vars.at("out.w"), vars.at("out.b"));
    return reshape(logit, {H, W});
  }
  Tensor<T> h = avg_pool2d(relu(conv2d(x, vars.at("b1.w"), vars.at("b1.b"))));
  h = avg_pool2d(relu(conv2d(h, vars.at("b2.w"), vars.at("b2.b"))));
  h = avg_pool2d(relu(conv2d(h, vars.at("b3.w"), vars.at("b3.b"))));
  while (h.shape()[2] > 1 || h.shape()[3] > 1) h = avg_pool2d(h);  // global average pool
  Tensor<T> flat = reshape(h, {1, channels * 4});
  Tensor<T> logit = add(matmul(flat, vars.at("fc.w")), reshape(vars.at("fc.b"), {1, 1}));
  return reshape(logit, {1});
}

template <typename T>
Tensor<T> downstream_forward(const DownstreamNet<T>& net, const Tensor<T>& img) {
  auto vars = bind_params(net.params, std::shared_ptr<Graph<T>>{});
  return downstream_forward(vars, net.kind, net.channels, img);
}

template <typename T>
void freeze(DownstreamNet<T>& net) {
  net.frozen = true;
  net.frozen_hash = params_hash(net.params);
}

template <typename T>
void check_frozen(const DownstreamNet<T>& net) {
  if (!net.frozen) fail("downstream net for '", task_name(net.kind), "' is not frozen");
  if (params_hash(net.params) != net.frozen_hash)
    fail("freeze contract violated: parameters of '", task_name(net.kind), "' changed");
}

// ---------------------------------------------------------------------------
// Downstream pretraining on clean images y with cross-entropy, batched, with
// min-validation-loss checkpoint selection; freezes the net and returns the
// validation metric (DICE for segmentation, AUC for classification).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> downstream_loss(const std::map<std::string, Tensor<T>>& vars, TaskKind kind,
                          int channels, const Tensor<T>& img, const Tensor<T>& z) {
  return cross_entropy(downstream_forward(vars, kind, channels, img), z);
}

template <typename T>
double downstream_eval_metric(const DownstreamNet<T>& net, const std::vector<Sample<T>>& part,
                              bool use_clean) {
  if (part.empty()) fail("downstream_eval_metric: empty partition");
  if (is_segmentation(net.kind)) {
    double acc = 0.0;
    for (const auto& s : part)
      acc += dice_from_logits(downstream_forward(net, use_clean ? s.y : s.x), s.z);
    return acc / static_cast<double>(part.size());
  }
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : part) {
    scores.push_back(static_cast<double>(downstream_forward(net, use_clean ? s.y : s.x).item()));
    labels.push_back(static_cast<int>(s.z.values()[0]));
  }
  return auc(scores, labels);
}

template <typename T>
struct PretrainResult {
  double val_metric = 0.0;
  double val_loss = 0.0;
};

template <typename T>
PretrainResult<T> pretrain_downstream(DownstreamNet<T>& net, const TaskDataset<T>& ds, int epochs,
                                      T lr, int batch_size, uint64_t seed) {
  if (ds.train.empty() || ds.val.empty())
    fail("pretrain_downstream: dataset must have train and val partitions");
  if (batch_size < 1) fail("pretrain_downstream: batch_size must be >= 1");

  auto val_loss = [&]() {
    auto vars = bind_params(net.params, std::shared_ptr<Graph<T>>{});
    double acc = 0.0;
    for (const auto& s : ds.val)
      acc += static_cast<double>(
          downstream_loss(vars, net.kind, net.channels, s.y, s.z).item());
    return acc / static_cast<double>(ds.val.size());
  };

  Adam<T> opt(lr);
  ParamStore<T> best = net.params;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<int> order(ds.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng = derive_rng(seed, "downstream_shuffle", static_cast<uint64_t>(net.kind),
                         static_cast<uint64_t>(epoch));
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
      auto g = Graph<T>::make();
      auto vars = bind_params(net.params, g);
      Tensor<T> loss;
      for (size_t i = start; i < end; ++i) {
        const Sample<T>& s = ds.train[static_cast<size_t>(order[i])];
        Tensor<T> li = downstream_loss(vars, net.kind, net.channels, s.y, s.z);
        loss = loss.defined() ? add(loss, li) : li;
      }
      loss = scale(loss, T(1) / static_cast<T>(end - start));
      backward(loss);
      opt.step(net.params, collect_grads(vars));
    }
    const double vl = val_loss();
    if (vl < best_val) {
      best_val = vl;
      best = net.params;
    }
  }
  if (epochs > 0) net.params = best;

  PretrainResult<T> res;
  res.val_loss = epochs > 0 ? best_val : val_loss();
  res.val_metric = downstream_eval_metric(net, ds.val, /*use_clean=*/true);
  freeze(net);
  if (!std::isfinite(res.val_loss))
    fail("pretrain_downstream: training diverged for '", task_name(net.kind), "'");
  return res;
}

}  // namespace most

#pragma once

#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "most/config.hpp"
#include "most/kspace.hpp"
#include "most/metrics.hpp"
#include "most/nets.hpp"
#include "most/optim.hpp"
#include "most/phantom.hpp"
#include "most/rng.hpp"
#include "most/tensor.hpp"

namespace most {

// Fidelity loss between an intermediate reconstruction and an image target
// (ground truth for current-task samples, stored reconstruction for replayed
// ones).
template <typename T>
Tensor<T> image_guided_loss(const Tensor<T>& recon, const Tensor<T>& target) {
  return ssim_loss(recon, target);
}

// ---------------------------------------------------------------------------
// Replay buffer: fixed capacity, per-task quotas within +/-1 (earlier-stored
// tasks take the remainder), uniform random eviction and insertion.
// ---------------------------------------------------------------------------
template <typename T>
struct BufferEntry {
  int task_idx = -1;  // stage at which the task was learned (0 = reconstruction)
  TaskKind kind = TaskKind::reconstruction;
  int subject_id = -1;
  Tensor<T> x, y, z;  // z undefined for reconstruction entries
  Tensor<T> stored_recon;
};

template <typename T>
struct ReplayBuffer {
  int capacity = 0;
  std::vector<BufferEntry<T>> entries;
  std::vector<int> insertion_order;  // task_idx values, oldest first

  int count_for(int task_idx) const {
    int n = 0;
    for (const auto& e : entries) n += (e.task_idx == task_idx);
    return n;
  }
};

// Per-task capacity targets for n_tasks stored tasks: as equal as possible,
// earlier-stored tasks absorb the remainder.
inline std::vector<int> buffer_quotas(int capacity, int n_tasks) {
  if (n_tasks < 1) fail("buffer_quotas: need at least one task");
  std::vector<int> q(static_cast<size_t>(n_tasks), capacity / n_tasks);
  for (int i = 0; i < capacity % n_tasks; ++i) q[static_cast<size_t>(i)] += 1;
  return q;
}

// Stores a random selection of the finished task's training pairs, each with
// its reconstruction under the current parameters, evicting uniformly at
// random from over-quota older tasks first.
template <typename T>
void buffer_update(ReplayBuffer<T>& buf, int task_idx, TaskKind kind,
                   const std::vector<Sample<T>>& pool,
                   const std::function<Tensor<T>(const Sample<T>&)>& recon_fn, Rng& rng) {
  if (buf.capacity <= 0) fail("buffer_update: buffer capacity must be positive");
  for (int t : buf.insertion_order)
    if (t == task_idx) fail("buffer_update: task ", task_idx, " already stored");
  if (pool.empty()) fail("buffer_update: empty sample pool for task ", task_idx);

  buf.insertion_order.push_back(task_idx);
  const std::vector<int> quotas =
      buffer_quotas(buf.capacity, static_cast<int>(buf.insertion_order.size()));

  // trim older tasks down to their new quotas
  for (size_t i = 0; i + 1 < buf.insertion_order.size(); ++i) {
    const int t = buf.insertion_order[i];
    while (buf.count_for(t) > quotas[i]) {
      std::vector<size_t> cand;
      for (size_t e = 0; e < buf.entries.size(); ++e)
        if (buf.entries[e].task_idx == t) cand.push_back(e);
      const size_t victim = cand[static_cast<size_t>(rng.randint(static_cast<int64_t>(cand.size())))];
      buf.entries.erase(buf.entries.begin() + static_cast<int64_t>(victim));
    }
  }

  // insert the new task's random selection with reconstructions at theta_now
  const int want = quotas.back();
  const std::vector<int> picks =
      rng.sample_indices(static_cast<int>(pool.size()), want);
  for (int p : picks) {
    const Sample<T>& s = pool[static_cast<size_t>(p)];
    BufferEntry<T> e;
    e.task_idx = task_idx;
    e.kind = kind;
    e.subject_id = s.subject_id;
    e.x = s.x;
    e.y = s.y;
    e.z = s.z;
    e.stored_recon = recon_fn(s);
    buf.entries.push_back(std::move(e));
  }
  if (static_cast<int>(buf.entries.size()) > buf.capacity)
    fail("buffer_update: internal error, ", buf.entries.size(), " entries exceed capacity ",
         buf.capacity);
}

// ---------------------------------------------------------------------------
// Every-K firing schedule; the counter restarts at each stage.
// ---------------------------------------------------------------------------
struct ReplaySchedule {
  int period = 3;
  int64_t counter = 0;

  explicit ReplaySchedule(int k = 3) : period(k) {
    if (k < 1) fail("ReplaySchedule: period must be >= 1, got ", k);
  }
  bool fire() {
    ++counter;
    return counter % period == 0;
  }
  void reset() { counter = 0; }
};

// Round-robin choice of the next replayed task; skips tasks whose quota
// shrank to zero entries.
template <typename T>
int next_replay_task(const ReplayBuffer<T>& buf, size_t& cursor) {
  if (buf.entries.empty()) fail("replay_step: empty buffer");
  const size_t n = buf.insertion_order.size();
  for (size_t hop = 0; hop < n; ++hop) {
    const int t = buf.insertion_order[cursor % n];
    ++cursor;
    if (buf.count_for(t) > 0) return t;
  }
  fail("replay_step: no task with stored entries");
}

// ---------------------------------------------------------------------------
// Per-seed experiment fixture: the sampling mask, all datasets (split and
// undersampled), and the frozen downstream networks, shared by every strategy
// run on that seed.
// ---------------------------------------------------------------------------
template <typename T>
struct SeedFixture {
  uint64_t seed = 0;
  SamplingMask mask;
  TaskDataset<T> recon;
  std::vector<TaskKind> order;             // downstream kinds, stage 1..N
  std::vector<TaskDataset<T>> task_data;   // finetuning datasets, aligned with order
  std::vector<DownstreamNet<T>> nets;      // frozen, aligned with order
  std::vector<double> net_val;             // val metric at freeze time

  const DownstreamNet<T>& net_for_stage(int stage) const {
    if (stage < 1 || stage > static_cast<int>(nets.size()))
      fail("fixture: no downstream net for stage ", stage);
    return nets[static_cast<size_t>(stage - 1)];
  }
  const TaskDataset<T>& data_for_stage(int stage) const {
    if (stage < 1 || stage > static_cast<int>(task_data.size()))
      fail("fixture: no dataset for stage ", stage);
    return task_data[static_cast<size_t>(stage - 1)];
  }
};

template <typename T>
SeedFixture<T> build_fixture(const ExperimentConfig& cfg, uint64_t seed) {
  validate_config(cfg);
  SeedFixture<T> fx;
  fx.seed = seed;
  fx.mask = make_cartesian_mask(cfg.image_size, cfg.acceleration, cfg.center_columns);

  auto prepare = [&](TaskKind kind, int n, uint64_t data_seed, uint64_t split_seed) {
    TaskDataset<T> ds = gen_task_dataset<T>(kind, n, cfg.image_size, data_seed);
    ds = split(ds, cfg.split_train, cfg.split_val, cfg.split_test, split_seed);
    return undersample_dataset(ds, fx.mask);
  };

  fx.recon = prepare(TaskKind::reconstruction, cfg.n_recon, derive_seed(seed, "data_recon"),
                     derive_seed(seed, "split_recon"));
  fx.order = cfg.downstream_order();
  for (size_t i = 0; i < fx.order.size(); ++i) {
    const TaskKind kind = fx.order[i];
    const auto kid = static_cast<uint64_t>(kind);
    TaskDataset<T> net_ds = prepare(kind, cfg.n_task / 2, derive_seed(seed, "data_net", kid),
                                    derive_seed(seed, "split_net", kid));
    fx.task_data.push_back(prepare(kind, cfg.n_task / 2, derive_seed(seed, "data_ft", kid),
                                   derive_seed(seed, "split_ft", kid)));
    DownstreamNet<T> net = init_downstream_net<T>(kind, cfg.recon_channels,
                                                  derive_seed(seed, "net_init", kid));
    PretrainResult<T> pr =
        pretrain_downstream(net, net_ds, cfg.epochs_downstream, static_cast<T>(cfg.lr_downstream),
                            cfg.batch_size, derive_seed(seed, "net_train", kid));
    fx.nets.push_back(std::move(net));
    fx.net_val.push_back(pr.val_metric);
  }
  return fx;
}

// ---------------------------------------------------------------------------
// Strategy state: EWC Fisher/anchor, LWF parameter snapshot and the list of
// previously learned downstream stages.
// ---------------------------------------------------------------------------
template <typename T>
struct StrategyState {
  Strategy tag = Strategy::naive;
  std::map<std::string, std::vector<T>> fisher;
  ParamStore<T> anchor;
  bool has_anchor = false;
  ParamStore<T> snapshot;
  bool has_snapshot = false;
  std::vector<int> prev_downstream;  // stages with a frozen net learned before now
};

// ---------------------------------------------------------------------------
// Forward helpers.
// ---------------------------------------------------------------------------
template <typename T>
ComplexImage<T> sample_k0(const Tensor<T>& y, const SamplingMask& mask) {
  return apply_forward_model(y, mask);
}

template <typename T>
Tensor<T> recon_sample(const std::map<std::string, Tensor<T>>& vars, int cascades,
                       const Sample<T>& s, const SamplingMask& mask) {
  return recon_forward(vars, cascades, s.x, sample_k0(s.y, mask), mask);
}

template <typename T>
Tensor<T> recon_sample(const ParamStore<T>& theta, int cascades, const Sample<T>& s,
                       const SamplingMask& mask) {
  auto vars = bind_params(theta, std::shared_ptr<Graph<T>>{});
  return recon_sample(vars, cascades, s, mask);
}

// Task loss of one sample given its (already computed) reconstruction.
template <typename T>
Tensor<T> task_loss_on_recon(const SeedFixture<T>& fx, int task_stage, TaskKind kind,
                             const Tensor<T>& recon, const Sample<T>& s) {
  if (kind == TaskKind::reconstruction) return ssim_loss(recon, s.y);
  const DownstreamNet<T>& net = fx.net_for_stage(task_stage);
  auto net_vars = bind_params(net.params, std::shared_ptr<Graph<T>>{});
  return cross_entropy(downstream_forward(net_vars, net.kind, net.channels, recon), s.z);
}

// ---------------------------------------------------------------------------
// Replay step: pick the next task round-robin, draw one stored group at
// random, and assemble [task_loss]*L_task + [ig_loss]*w*L_R(recon, stored).
// Returns an untracked zero when both flags are off.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> replay_step_loss(const ReplayBuffer<T>& buf, size_t& cursor, Rng& rng,
                           const std::map<std::string, Tensor<T>>& vars,
                           const SeedFixture<T>& fx, int cascades, bool task_loss, bool ig_loss,
                           T ig_weight) {
  const int t = next_replay_task(buf, cursor);
  std::vector<size_t> cand;
  for (size_t e = 0; e < buf.entries.size(); ++e)
    if (buf.entries[e].task_idx == t) cand.push_back(e);
  const BufferEntry<T>& entry =
      buf.entries[cand[static_cast<size_t>(rng.randint(static_cast<int64_t>(cand.size())))]];

  Sample<T> s;
  s.x = entry.x;
  s.y = entry.y;
  s.z = entry.z;
  s.subject_id = entry.subject_id;
  Tensor<T> recon = recon_sample(vars, cascades, s, fx.mask);

  Tensor<T> loss;
  if (task_loss) loss = task_loss_on_recon(fx, entry.task_idx, entry.kind, recon, s);
  if (ig_loss) {
    Tensor<T> ig = scale(image_guided_loss(recon, entry.stored_recon), ig_weight);
    loss = loss.defined() ? add(loss, ig) : ig;
  }
  if (!loss.defined()) loss = Tensor<T>::scalar(T(0));
  return loss;
}

// ---------------------------------------------------------------------------
// EWC and LWF regularizers. Both are exactly zero at a stage boundary, where
// theta equals the anchor/snapshot bitwise.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> ewc_regularizer(const std::map<std::string, Tensor<T>>& vars,
                          const StrategyState<T>& strat, T lambda_ewc) {
  if (!strat.has_anchor) fail("ewc_regularizer: no anchor stored");
  Tensor<T> total;
  for (const auto& [name, var] : vars) {
    auto ait = strat.anchor.find(name);
    if (ait == strat.anchor.end()) fail("ewc_regularizer: anchor missing '", name, "'");
    auto fit = strat.fisher.find(name);
    if (fit == strat.fisher.end()) continue;  // zero Fisher: no contribution
    Tensor<T> f = Tensor<T>::constant(ait->second.shape, fit->second);
    Tensor<T> anchor = Tensor<T>::constant(ait->second.shape, ait->second.data);
    Tensor<T> term = reduce_sum(mul(f, square(sub(var, anchor))));
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) return Tensor<T>::scalar(T(0));
  return scale(total, lambda_ewc / T(2));
}

// KL(sigmoid(old/tau) || sigmoid(new/tau)) as cross-entropy minus the (old)
// self cross-entropy; the subtraction makes the value exactly zero when the
// logits are bitwise identical.
template <typename T>
Tensor<T> kl_distill(const Tensor<T>& logits_new, const Tensor<T>& logits_old, T tau) {
  Tensor<T> q = sigmoid(scale(logits_old, T(1) / tau));
  Tensor<T> ce_new = reduce_mean(bce_with_logits(scale(logits_new, T(1) / tau), q));
  Tensor<T> ce_old = reduce_mean(bce_with_logits(scale(logits_old, T(1) / tau), q));
  return sub(ce_new, ce_old);
}

template <typename T>
Tensor<T> lwf_regularizer(const std::map<std::string, Tensor<T>>& vars,
                          const StrategyState<T>& strat, const SeedFixture<T>& fx, int cascades,
                          const std::vector<const Sample<T>*>& batch, T tau) {
  if (!strat.has_snapshot) fail("lwf_regularizer: no snapshot stored");
  auto old_vars = bind_params(strat.snapshot, std::shared_ptr<Graph<T>>{});
  Tensor<T> total;
  for (const Sample<T>* s : batch) {
    Tensor<T> recon_new = recon_sample(vars, cascades, *s, fx.mask);
    Tensor<T> recon_old = recon_sample(old_vars, cascades, *s, fx.mask);
    Tensor<T> term = reduce_mean(abs(sub(recon_new, recon_old)));
    for (int stage : strat.prev_downstream) {
      const DownstreamNet<T>& net = fx.net_for_stage(stage);
      auto net_vars = bind_params(net.params, std::shared_ptr<Graph<T>>{});
      Tensor<T> lnew = downstream_forward(net_vars, net.kind, net.channels, recon_new);
      Tensor<T> lold = downstream_forward(net_vars, net.kind, net.channels, recon_old);
      term = add(term, kl_distill(lnew, lold, tau));
    }
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, T(1) / static_cast<T>(batch.size()));
}

// Dispatch per strategy; er/der run a replay step with their flag pattern,
// ewc/lwf return their penalty on the current batch.
template <typename T>
Tensor<T> strategy_regularizer(Strategy tag, const StrategyState<T>& strat,
                               const std::map<std::string, Tensor<T>>& vars,
                               const SeedFixture<T>& fx, int cascades,
                               const ReplayBuffer<T>& buf, size_t& cursor, Rng& rng,
                               const std::vector<const Sample<T>*>& batch,
                               const ExperimentConfig& cfg) {
  switch (tag) {
    case Strategy::ewc:
      return ewc_regularizer(vars, strat, static_cast<T>(cfg.lambda_ewc));
    case Strategy::lwf:
      return lwf_regularizer(vars, strat, fx, cascades, batch, static_cast<T>(cfg.tau_lwf));
    case Strategy::er:
      return replay_step_loss(buf, cursor, rng, vars, fx, cascades, /*task_loss=*/true,
                              /*ig_loss=*/false, T(0));
    case Strategy::der:
      return replay_step_loss(buf, cursor, rng, vars, fx, cascades, /*task_loss=*/false,
                              /*ig_loss=*/true, static_cast<T>(cfg.alpha_der));
    default:
      fail("strategy_regularizer: no regularizer for '", strategy_name(tag), "'");
  }
}

// ---------------------------------------------------------------------------
// Training state and stage loops.
// ---------------------------------------------------------------------------
template <typename T>
struct TrainState {
  ParamStore<T> theta;
  int stage = -1;           // last completed stage
  uint64_t seed = 0;
  std::map<std::string, std::vector<T>> adam_m, adam_v;  // last stage's moments
  int64_t adam_t = 0;
};

namespace detail {

template <typename T>
double mean_val_loss_recon(const ParamStore<T>& theta, int cascades, const SeedFixture<T>& fx) {
  auto vars = bind_params(theta, std::shared_ptr<Graph<T>>{});
  double acc = 0.0;
  for (const auto& s : fx.recon.val)
    acc += static_cast<double>(ssim_loss(recon_sample(vars, cascades, s, fx.mask), s.y).item());
  return acc / static_cast<double>(fx.recon.val.size());
}

template <typename T>
double mean_val_loss_task(const ParamStore<T>& theta, int cascades, const SeedFixture<T>& fx,
                          int stage) {
  auto vars = bind_params(theta, std::shared_ptr<Graph<T>>{});
  const TaskDataset<T>& ds = fx.data_for_stage(stage);
  double acc = 0.0;
  for (const auto& s : ds.val) {
    Tensor<T> recon = recon_sample(vars, cascades, s, fx.mask);
    acc += static_cast<double>(
        task_loss_on_recon(fx, stage, ds.kind, recon, s).item());
  }
  return acc / static_cast<double>(ds.val.size());
}

}  // namespace detail

// Stage 0: fidelity pretraining of the reconstruction network with
// min-validation-loss checkpoint selection. Returns the validation SSIM of
// the selected parameters.
template <typename T>
double pretrain_recon(TrainState<T>& st, const SeedFixture<T>& fx, const ExperimentConfig& cfg) {
  Adam<T> opt(static_cast<T>(cfg.lr_pretrain));
  ParamStore<T> best = st.theta;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<int> order(fx.recon.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.epochs_pretrain; ++epoch) {
    Rng rng = derive_rng(st.seed, "shuffle", 0, static_cast<uint64_t>(epoch));
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      auto g = Graph<T>::make();
      auto vars = bind_params(st.theta, g);
      Tensor<T> loss;
      for (size_t i = start; i < end; ++i) {
        const Sample<T>& s = fx.recon.train[static_cast<size_t>(order[i])];
        Tensor<T> li = ssim_loss(recon_sample(vars, cfg.cascades, s, fx.mask), s.y);
        loss = loss.defined() ? add(loss, li) : li;
      }
      loss = scale(loss, T(1) / static_cast<T>(end - start));
      backward(loss);
      opt.step(st.theta, collect_grads(vars));
    }
    const double vl = detail::mean_val_loss_recon(st.theta, cfg.cascades, fx);
    if (vl < best_val) {
      best_val = vl;
      best = st.theta;
    }
  }
  if (cfg.epochs_pretrain > 0) st.theta = best;
  st.adam_m = opt.first_moments();
  st.adam_v = opt.second_moments();
  st.adam_t = opt.steps();

  auto vars = bind_params(st.theta, std::shared_ptr<Graph<T>>{});
  double acc = 0.0;
  for (const auto& s : fx.recon.val)
    acc += static_cast<double>(ssim(recon_sample(vars, cfg.cascades, s, fx.mask), s.y).item());
  return acc / static_cast<double>(fx.recon.val.size());
}

// Whether this strategy revisits the buffer on the every-K schedule.
inline bool uses_replay_schedule(Strategy tag, const ExperimentConfig& cfg) {
  return (tag == Strategy::most && cfg.replay) || tag == Strategy::er || tag == Strategy::der;
}

// One downstream finetuning stage (Eq.-4-style step on the reconstruction
// parameters through the frozen downstream net).
template <typename T>
void finetune_task(TrainState<T>& st, const SeedFixture<T>& fx, int stage, ReplayBuffer<T>& buf,
                   StrategyState<T>& strat, ReplaySchedule& sched, const ExperimentConfig& cfg) {
  const TaskDataset<T>& task = fx.data_for_stage(stage);
  const DownstreamNet<T>& net = fx.net_for_stage(stage);
  check_frozen(net);
  const Strategy tag = strat.tag;
  const bool scheduled = uses_replay_schedule(tag, cfg);
  const bool ig_current = tag == Strategy::most && cfg.ig && is_segmentation(task.kind);

  sched.reset();
  size_t cursor = 0;
  Rng replay_rng = derive_rng(st.seed, "replay", static_cast<uint64_t>(stage));
  Adam<T> opt(static_cast<T>(cfg.lr_finetune));
  ParamStore<T> best = st.theta;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<int> order(task.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.epochs_finetune; ++epoch) {
    Rng rng = derive_rng(st.seed, "shuffle", static_cast<uint64_t>(stage),
                         static_cast<uint64_t>(epoch));
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      const bool fires = scheduled && sched.fire() && !buf.entries.empty();

      auto g = Graph<T>::make();
      auto vars = bind_params(st.theta, g);
      std::vector<const Sample<T>*> batch;
      for (size_t i = start; i < end; ++i)
        batch.push_back(&task.train[static_cast<size_t>(order[i])]);

      Tensor<T> loss;
      if (fires && cfg.replay_substitute) {
        // replay substitutes the current-task step at firing iterations
        const bool rt = tag == Strategy::most ? cfg.ig : tag == Strategy::er;
        const bool ri = tag != Strategy::er;
        const T w = tag == Strategy::der ? static_cast<T>(cfg.alpha_der)
                                         : static_cast<T>(cfg.lambda_ig);
        loss = replay_step_loss(buf, cursor, replay_rng, vars, fx, cfg.cascades, rt, ri, w);
      } else {
        for (const Sample<T>* s : batch) {
          Tensor<T> recon = recon_sample(vars, cfg.cascades, *s, fx.mask);
          Tensor<T> li = task_loss_on_recon(fx, stage, task.kind, recon, *s);
          if (ig_current)
            li = add(li, scale(image_guided_loss(recon, s->y), static_cast<T>(cfg.lambda_ig)));
          loss = loss.defined() ? add(loss, li) : li;
        }
        loss = scale(loss, T(1) / static_cast<T>(end - start));
        if (tag == Strategy::ewc || tag == Strategy::lwf)
          loss = add(loss, strategy_regularizer(tag, strat, vars, fx, cfg.cascades, buf, cursor,
                                                replay_rng, batch, cfg));
        if (fires && !cfg.replay_substitute) {
          const bool rt = tag == Strategy::most ? cfg.ig : tag == Strategy::er;
          const bool ri = tag != Strategy::er;
          const T w = tag == Strategy::der ? static_cast<T>(cfg.alpha_der)
                                           : static_cast<T>(cfg.lambda_ig);
          loss = add(loss,
                     replay_step_loss(buf, cursor, replay_rng, vars, fx, cfg.cascades, rt, ri, w));
        }
      }

      if (loss.requires_grad()) {
        backward(loss);
        opt.step(st.theta, collect_grads(vars));
      }
    }
    const double vl = detail::mean_val_loss_task(st.theta, cfg.cascades, fx, stage);
    if (vl < best_val) {
      best_val = vl;
      best = st.theta;
    }
  }
  if (cfg.epochs_finetune > 0) st.theta = best;
  st.adam_m = opt.first_moments();
  st.adam_v = opt.second_moments();
  st.adam_t = opt.steps();
  check_frozen(net);
  st.stage = stage;
}

// ---------------------------------------------------------------------------
// Stage-boundary bookkeeping: buffer insertion, EWC Fisher accumulation and
// anchoring, LWF snapshot.
// ---------------------------------------------------------------------------
template <typename T>
void accumulate_fisher(StrategyState<T>& strat, const ParamStore<T>& theta,
                       const SeedFixture<T>& fx, int stage, const ExperimentConfig& cfg) {
  std::map<std::string, std::vector<T>> acc;
  for (const auto& [name, p] : theta) acc[name].assign(p.data.size(), T(0));
  const std::vector<Sample<T>>& pool =
      stage == 0 ? fx.recon.train : fx.data_for_stage(stage).train;
  const TaskKind kind = stage == 0 ? TaskKind::reconstruction : fx.data_for_stage(stage).kind;
  for (const auto& s : pool) {
    auto g = Graph<T>::make();
    auto vars = bind_params(theta, g);
    Tensor<T> recon = recon_sample(vars, cfg.cascades, s, fx.mask);
    Tensor<T> loss = task_loss_on_recon(fx, stage, kind, recon, s);
    backward(loss);
    for (auto& [name, a] : acc) {
      const std::vector<T>& gr = vars.at(name).grad();
      for (size_t i = 0; i < a.size(); ++i) a[i] += gr[i] * gr[i];
    }
  }
  const T inv = T(1) / static_cast<T>(pool.size());
  for (auto& [name, a] : acc) {
    std::vector<T>& f = strat.fisher[name];
    if (f.empty()) f.assign(a.size(), T(0));
    for (size_t i = 0; i < a.size(); ++i) f[i] += a[i] * inv;
  }
}

template <typename T>
void stage_boundary_update(TrainState<T>& st, const SeedFixture<T>& fx, int stage,
                           ReplayBuffer<T>& buf, StrategyState<T>& strat,
                           const ExperimentConfig& cfg) {
  const Strategy tag = strat.tag;
  if (uses_replay_schedule(tag, cfg) && (stage > 0 || cfg.buffer_include_recon)) {
    const std::vector<Sample<T>>& pool =
        stage == 0 ? fx.recon.train : fx.data_for_stage(stage).train;
    const TaskKind kind = stage == 0 ? TaskKind::reconstruction : fx.data_for_stage(stage).kind;
    Rng rng = derive_rng(st.seed, "buffer", static_cast<uint64_t>(stage));
    buffer_update<T>(buf, stage, kind, pool,
                     [&](const Sample<T>& s) {
                       return recon_sample(st.theta, cfg.cascades, s, fx.mask);
                     },
                     rng);
  }
  if (tag == Strategy::ewc) {
    accumulate_fisher(strat, st.theta, fx, stage, cfg);
    strat.anchor = st.theta;
    strat.has_anchor = true;
  }
  if (tag == Strategy::lwf) {
    strat.snapshot = st.theta;
    strat.has_snapshot = true;
  }
  if (stage > 0) strat.prev_downstream.push_back(stage);
}

// ---------------------------------------------------------------------------
// Evaluation: SSIM on the reconstruction test set, DICE / AUC on downstream
// test sets, all through the current reconstruction parameters.
// ---------------------------------------------------------------------------
template <typename T>
double evaluate_task(const SeedFixture<T>& fx, const ParamStore<T>& theta, int task_stage,
                     const ExperimentConfig& cfg) {
  auto vars = bind_params(theta, std::shared_ptr<Graph<T>>{});
  if (task_stage == 0) {
    double acc = 0.0;
    for (const auto& s : fx.recon.test)
      acc += static_cast<double>(ssim(recon_sample(vars, cfg.cascades, s, fx.mask), s.y).item());
    return acc / static_cast<double>(fx.recon.test.size());
  }
  const TaskDataset<T>& ds = fx.data_for_stage(task_stage);
  const DownstreamNet<T>& net = fx.net_for_stage(task_stage);
  auto net_vars = bind_params(net.params, std::shared_ptr<Graph<T>>{});
  if (is_segmentation(ds.kind)) {
    double acc = 0.0;
    for (const auto& s : ds.test) {
      Tensor<T> recon = recon_sample(vars, cfg.cascades, s, fx.mask);
      acc += dice_from_logits(downstream_forward(net_vars, net.kind, net.channels, recon), s.z);
    }
    return acc / static_cast<double>(ds.test.size());
  }
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : ds.test) {
    Tensor<T> recon = recon_sample(vars, cfg.cascades, s, fx.mask);
    scores.push_back(static_cast<double>(
        downstream_forward(net_vars, net.kind, net.channels, recon).item()));
    labels.push_back(static_cast<int>(s.z.values()[0]));
  }
  return auc(scores, labels);
}

// ---------------------------------------------------------------------------
// Full sequential run: pretrain (stage 0), then one finetuning stage per
// downstream task, evaluating every learned task after every stage.
// ---------------------------------------------------------------------------
template <typename T>
struct EngineState {
  int stage = -1;  // last completed stage
  ParamStore<T> theta;
  ReplayBuffer<T> buf;
  StrategyState<T> strat;
  std::vector<MetricTrace> traces;  // index 0 = recon, i = downstream stage i
  TrainState<T> train;
};

template <typename T>
struct SequenceResult {
  std::vector<MetricTrace> traces;
  ParamStore<T> theta;
  uint64_t theta_hash = 0;
  double pretrain_val_ssim = 0.0;
};

template <typename T>
struct PretrainCache {
  ParamStore<T> theta;
  double val_ssim = 0.0;
};

// Runs stage-0 pretraining exactly as run_sequence would, so the result can
// be shared across strategy runs on the same seed without changing any
// trajectory.
template <typename T>
PretrainCache<T> make_pretrain_cache(const ExperimentConfig& cfg, uint64_t seed,
                                     const SeedFixture<T>& fx) {
  TrainState<T> tmp;
  tmp.seed = seed;
  tmp.theta =
      init_recon_net<T>(cfg.cascades, cfg.recon_channels, derive_seed(seed, "recon_init")).params;
  PretrainCache<T> c;
  c.val_ssim = pretrain_recon(tmp, fx, cfg);
  c.theta = tmp.theta;
  return c;
}

template <typename T>
SequenceResult<T> run_sequence(
    const ExperimentConfig& cfg, uint64_t seed, const SeedFixture<T>& fx,
    const PretrainCache<T>* cache = nullptr, const EngineState<T>* resume = nullptr,
    const std::function<void(const EngineState<T>&)>& on_stage = {}) {
  validate_config(cfg);
  const int n_stages = static_cast<int>(fx.order.size());

  EngineState<T> st;
  if (resume) {
    if (resume->stage < 0) fail("run_sequence: resume state has no completed stage");
    st = *resume;
    st.train.seed = seed;
  } else {
    st.strat.tag = cfg.strategy_tag();
    st.buf.capacity = cfg.buffer_size;
    st.train.seed = seed;
    st.traces.assign(static_cast<size_t>(n_stages) + 1, MetricTrace{});
    st.traces[0].task = task_name(TaskKind::reconstruction);
    for (int i = 0; i < n_stages; ++i)
      st.traces[static_cast<size_t>(i) + 1].task = task_name(fx.order[static_cast<size_t>(i)]);
  }

  SequenceResult<T> out;

  auto run_stage_tail = [&](int stage) {
    stage_boundary_update(st.train, fx, stage, st.buf, st.strat, cfg);
    for (int t = 0; t <= stage; ++t)
      st.traces[static_cast<size_t>(t)].append(stage,
                                               evaluate_task(fx, st.train.theta, t, cfg));
    st.stage = stage;
    st.theta = st.train.theta;
    if (on_stage) on_stage(st);
  };

  try {
    if (!resume) {
      st.train.theta =
          init_recon_net<T>(cfg.cascades, cfg.recon_channels, derive_seed(seed, "recon_init"))
              .params;
      if (cache) {
        st.train.theta = cache->theta;
        out.pretrain_val_ssim = cache->val_ssim;
      } else {
        out.pretrain_val_ssim = pretrain_recon(st.train, fx, cfg);
      }
      run_stage_tail(0);
    } else {
      st.train.theta = st.theta;
    }

    ReplaySchedule sched(cfg.replay_period);
    for (int stage = st.stage + 1; stage <= n_stages; ++stage) {
      finetune_task(st.train, fx, stage, st.buf, st.strat, sched, cfg);
      run_stage_tail(stage);
    }
  } catch (const Error& e) {
    fail("stage ", st.stage + 1, " (", strategy_name(st.strat.tag), ", seed ", seed,
         "): ", e.what());
  }

  out.traces = st.traces;
  out.theta = st.train.theta;
  out.theta_hash = params_hash(out.theta);
  return out;
}

}  // namespace most

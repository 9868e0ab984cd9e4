#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "most/config.hpp"
#include "most/engine.hpp"
#include "most/io.hpp"

namespace most {

// ---------------------------------------------------------------------------
// Report rows: one row per (task, metric, stage, seed), with the LM flag on
// the final stage of each trace and the FM value attached there when defined.
// ---------------------------------------------------------------------------
struct ReportRow {
  std::string experiment;
  std::string strategy;
  std::string order;
  uint64_t seed = 0;
  int stage = 0;
  std::string task;
  std::string metric;
  double value = 0.0;
  bool is_last = false;
  std::optional<double> fm;
};

inline const char* metric_for_task(TaskKind kind) {
  if (kind == TaskKind::reconstruction) return "SSIM";
  return is_segmentation(kind) ? "DICE" : "AUC";
}

// The FM window: the full trace, except that the reconstruction task's
// pre-finetuning entry (stage 0) is dropped unless fm_include_pretrain is set.
inline MetricTrace fm_window(const MetricTrace& trace, bool is_recon, bool include_pretrain) {
  if (!is_recon || include_pretrain) return trace;
  MetricTrace out;
  out.task = trace.task;
  for (const auto& p : trace.points)
    if (p.stage >= 1) out.points.push_back(p);
  return out;
}

template <typename T>
std::vector<ReportRow> rows_from_result(const ExperimentConfig& cfg, uint64_t seed,
                                        const SeedFixture<T>& fx, const SequenceResult<T>& res) {
  std::vector<ReportRow> rows;
  for (size_t t = 0; t < res.traces.size(); ++t) {
    const MetricTrace& trace = res.traces[t];
    if (trace.points.empty()) continue;
    const TaskKind kind = t == 0 ? TaskKind::reconstruction : fx.order[t - 1];
    const std::optional<double> fm =
        forgetting_measure(fm_window(trace, t == 0, cfg.fm_include_pretrain));
    for (size_t p = 0; p < trace.points.size(); ++p) {
      ReportRow r;
      r.experiment = cfg.effective_experiment_id();
      r.strategy = cfg.strategy;
      r.order = cfg.order;
      r.seed = seed;
      r.stage = trace.points[p].stage;
      r.task = trace.task;
      r.metric = metric_for_task(kind);
      r.value = trace.points[p].value;
      r.is_last = (p + 1 == trace.points.size());
      if (r.is_last) r.fm = fm;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV writing/reading. Fixed header, 6 significant digits, rows sorted by
// (experiment, seed, stage, task); output is a pure function of its input.
// ---------------------------------------------------------------------------
inline constexpr const char* kReportHeader =
    "experiment,strategy,order,seed,stage,task,metric,value,is_last,fm";

inline std::string format_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline void sort_rows(std::vector<ReportRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.experiment, a.seed, a.stage, a.task, a.metric) <
           std::tie(b.experiment, b.seed, b.stage, b.task, b.metric);
  });
}

inline void write_report(std::vector<ReportRow> rows, const std::string& path) {
  if (rows.empty()) fail("write_report: no rows");
  sort_rows(rows);
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("write_report: cannot open '", path, "' for writing");
  os << kReportHeader << "\n";
  for (const ReportRow& r : rows) {
    os << r.experiment << ',' << r.strategy << ',' << r.order << ',' << r.seed << ',' << r.stage
       << ',' << r.task << ',' << r.metric << ',' << format_g6(r.value) << ','
       << (r.is_last ? 1 : 0) << ',' << (r.fm ? format_g6(*r.fm) : "") << "\n";
  }
  if (!os) fail("write_report: write failed for '", path, "'");
}

inline std::vector<ReportRow> read_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("read_report: cannot open '", path, "'");
  std::string line;
  if (!std::getline(is, line) || line != kReportHeader)
    fail("read_report: '", path, "' missing expected header");
  std::vector<ReportRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.push_back("");
    if (f.size() != 10) fail("read_report: line ", lineno, ": expected 10 fields, got ", f.size());
    ReportRow r;
    r.experiment = f[0];
    r.strategy = f[1];
    r.order = f[2];
    r.seed = std::stoull(f[3]);
    r.stage = std::stoi(f[4]);
    r.task = f[5];
    r.metric = f[6];
    r.value = std::stod(f[7]);
    r.is_last = f[8] == "1";
    if (!f[9].empty()) r.fm = std::stod(f[9]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// Mean LM / FM per (experiment, task, metric) across seeds, as a small text table.
inline void print_report_summary(const std::vector<ReportRow>& rows, std::ostream& os) {
  struct Agg {
    double lm_sum = 0;
    int lm_n = 0;
    double fm_sum = 0;
    int fm_n = 0;
  };
  std::map<std::tuple<std::string, std::string, std::string>, Agg> agg;
  for (const ReportRow& r : rows) {
    if (!r.is_last) continue;
    Agg& a = agg[{r.experiment, r.task, r.metric}];
    a.lm_sum += r.value;
    a.lm_n += 1;
    if (r.fm) {
      a.fm_sum += *r.fm;
      a.fm_n += 1;
    }
  }
  os << std::left << std::setw(28) << "experiment" << std::setw(8) << "task" << std::setw(7)
     << "metric" << std::right << std::setw(10) << "LM" << std::setw(10) << "FM" << "\n";
  for (const auto& [key, a] : agg) {
    os << std::left << std::setw(28) << std::get<0>(key) << std::setw(8) << std::get<1>(key)
       << std::setw(7) << std::get<2>(key) << std::right << std::setw(10)
       << format_g6(a.lm_sum / std::max(1, a.lm_n)) << std::setw(10)
       << (a.fm_n ? format_g6(a.fm_sum / a.fm_n) : "-") << "\n";
  }
}

// ---------------------------------------------------------------------------
// EngineState <-> named-array bundle, for stage-boundary checkpoints. Resume
// only needs theta, buffer, strategy state and traces; optimizer moments are
// included for inspection.
// ---------------------------------------------------------------------------
namespace detail {

template <typename T>
void put_store(ArrayBundle& b, const std::string& prefix, const ParamStore<T>& store) {
  for (const auto& [name, p] : store) b[prefix + name] = array_of<T>(p.shape, p.data);
}

template <typename T>
ParamStore<T> get_store(const ArrayBundle& b, const std::string& prefix) {
  ParamStore<T> store;
  for (const auto& [name, a] : b)
    if (name.rfind(prefix, 0) == 0) {
      Param<T> p;
      p.shape = a.dims;
      p.data = values_of<T>(a, name);
      store.emplace(name.substr(prefix.size()), std::move(p));
    }
  return store;
}

inline int64_t get_scalar_i64(const ArrayBundle& b, const std::string& name) {
  auto it = b.find(name);
  if (it == b.end()) fail("checkpoint: missing '", name, "'");
  if (it->second.dtype != 2 || it->second.i64.size() != 1)
    fail("checkpoint: '", name, "' is not a scalar i64");
  return it->second.i64[0];
}

}  // namespace detail

template <typename T>
ArrayBundle engine_state_to_arrays(const EngineState<T>& st) {
  ArrayBundle b;
  b["meta/stage"] = array_i64({1}, {st.stage});
  b["meta/strategy"] = array_i64({1}, {static_cast<int64_t>(st.strat.tag)});
  b["meta/buffer_capacity"] = array_i64({1}, {st.buf.capacity});
  b["meta/has_anchor"] = array_i64({1}, {st.strat.has_anchor ? 1 : 0});
  b["meta/has_snapshot"] = array_i64({1}, {st.strat.has_snapshot ? 1 : 0});
  b["meta/adam_t"] = array_i64({1}, {st.train.adam_t});
  {
    std::vector<int64_t> prev(st.strat.prev_downstream.begin(), st.strat.prev_downstream.end());
    b["meta/prev_downstream"] = array_i64({static_cast<int>(prev.size())}, std::move(prev));
  }
  detail::put_store(b, "theta/", st.theta);
  if (st.strat.has_anchor) detail::put_store(b, "anchor/", st.strat.anchor);
  if (st.strat.has_snapshot) detail::put_store(b, "snapshot/", st.strat.snapshot);
  for (const auto& [name, f] : st.strat.fisher)
    b["fisher/" + name] = array_of<T>({static_cast<int>(f.size())}, f);
  for (const auto& [name, m] : st.train.adam_m)
    b["adam_m/" + name] = array_of<T>({static_cast<int>(m.size())}, m);
  for (const auto& [name, v] : st.train.adam_v)
    b["adam_v/" + name] = array_of<T>({static_cast<int>(v.size())}, v);

  {
    std::vector<int64_t> ins(st.buf.insertion_order.begin(), st.buf.insertion_order.end());
    b["buffer/order"] = array_i64({static_cast<int>(ins.size())}, std::move(ins));
  }
  b["buffer/count"] = array_i64({1}, {static_cast<int64_t>(st.buf.entries.size())});
  for (size_t i = 0; i < st.buf.entries.size(); ++i) {
    const BufferEntry<T>& e = st.buf.entries[i];
    const std::string p = "buffer/" + std::to_string(i) + "/";
    b[p + "meta"] = array_i64({3}, {e.task_idx, static_cast<int64_t>(e.kind), e.subject_id});
    b[p + "x"] = array_of<T>(e.x.shape(), e.x.values());
    b[p + "y"] = array_of<T>(e.y.shape(), e.y.values());
    b[p + "stored"] = array_of<T>(e.stored_recon.shape(), e.stored_recon.values());
    if (e.z.defined()) b[p + "z"] = array_of<T>(e.z.shape(), e.z.values());
  }

  b["meta/n_traces"] = array_i64({1}, {static_cast<int64_t>(st.traces.size())});
  for (size_t t = 0; t < st.traces.size(); ++t) {
    const std::string p = "trace/" + std::to_string(t) + "/";
    std::vector<int64_t> stages;
    std::vector<double> values;
    for (const auto& pt : st.traces[t].points) {
      stages.push_back(pt.stage);
      values.push_back(pt.value);
    }
    b[p + "stages"] = array_i64({static_cast<int>(stages.size())}, std::move(stages));
    b[p + "values"] = array_f64({static_cast<int>(values.size())}, std::move(values));
  }
  return b;
}

template <typename T>
EngineState<T> engine_state_from_arrays(const ArrayBundle& b, const SeedFixture<T>& fx) {
  EngineState<T> st;
  st.stage = static_cast<int>(detail::get_scalar_i64(b, "meta/stage"));
  st.strat.tag = static_cast<Strategy>(detail::get_scalar_i64(b, "meta/strategy"));
  st.buf.capacity = static_cast<int>(detail::get_scalar_i64(b, "meta/buffer_capacity"));
  st.strat.has_anchor = detail::get_scalar_i64(b, "meta/has_anchor") != 0;
  st.strat.has_snapshot = detail::get_scalar_i64(b, "meta/has_snapshot") != 0;
  st.train.adam_t = detail::get_scalar_i64(b, "meta/adam_t");
  {
    auto it = b.find("meta/prev_downstream");
    if (it == b.end()) fail("checkpoint: missing 'meta/prev_downstream'");
    for (int64_t v : it->second.i64) st.strat.prev_downstream.push_back(static_cast<int>(v));
  }
  st.theta = detail::get_store<T>(b, "theta/");
  if (st.theta.empty()) fail("checkpoint: no parameters stored");
  st.train.theta = st.theta;
  if (st.strat.has_anchor) st.strat.anchor = detail::get_store<T>(b, "anchor/");
  if (st.strat.has_snapshot) st.strat.snapshot = detail::get_store<T>(b, "snapshot/");
  for (const auto& [name, a] : b) {
    if (name.rfind("fisher/", 0) == 0)
      st.strat.fisher[name.substr(7)] = values_of<T>(a, name);
    else if (name.rfind("adam_m/", 0) == 0)
      st.train.adam_m[name.substr(7)] = values_of<T>(a, name);
    else if (name.rfind("adam_v/", 0) == 0)
      st.train.adam_v[name.substr(7)] = values_of<T>(a, name);
  }

  {
    auto it = b.find("buffer/order");
    if (it == b.end()) fail("checkpoint: missing 'buffer/order'");
    for (int64_t v : it->second.i64) st.buf.insertion_order.push_back(static_cast<int>(v));
  }
  const auto n_entries = static_cast<size_t>(detail::get_scalar_i64(b, "buffer/count"));
  for (size_t i = 0; i < n_entries; ++i) {
    const std::string p = "buffer/" + std::to_string(i) + "/";
    auto mit = b.find(p + "meta");
    if (mit == b.end()) fail("checkpoint: missing '", p, "meta'");
    const auto& meta = mit->second.i64;
    BufferEntry<T> e;
    e.task_idx = static_cast<int>(meta[0]);
    e.kind = static_cast<TaskKind>(meta[1]);
    e.subject_id = static_cast<int>(meta[2]);
    auto tensor_at = [&](const std::string& key) {
      auto it = b.find(key);
      if (it == b.end()) fail("checkpoint: missing '", key, "'");
      return Tensor<T>::constant(it->second.dims, values_of<T>(it->second, key));
    };
    e.x = tensor_at(p + "x");
    e.y = tensor_at(p + "y");
    e.stored_recon = tensor_at(p + "stored");
    if (b.count(p + "z")) e.z = tensor_at(p + "z");
    st.buf.entries.push_back(std::move(e));
  }

  const auto n_traces = static_cast<size_t>(detail::get_scalar_i64(b, "meta/n_traces"));
  if (n_traces != fx.order.size() + 1)
    fail("checkpoint: ", n_traces, " traces do not match ", fx.order.size() + 1, " tasks");
  for (size_t t = 0; t < n_traces; ++t) {
    const std::string p = "trace/" + std::to_string(t) + "/";
    auto sit = b.find(p + "stages");
    auto vit = b.find(p + "values");
    if (sit == b.end() || vit == b.end()) fail("checkpoint: missing '", p, "'");
    MetricTrace trace;
    trace.task = t == 0 ? task_name(TaskKind::reconstruction) : task_name(fx.order[t - 1]);
    for (size_t k = 0; k < sit->second.i64.size(); ++k)
      trace.append(static_cast<int>(sit->second.i64[k]), vit->second.f64[k]);
    st.traces.push_back(std::move(trace));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Image export: each (image, name) pair becomes dir/name.pgm.
// ---------------------------------------------------------------------------
template <typename T>
void export_images(const std::vector<std::pair<Tensor<T>, std::string>>& images,
                   const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail("export_images: cannot create '", dir, "': ", ec.message());
  for (const auto& [img, name] : images) {
    if (name.empty()) fail("export_images: empty image name");
    detail::require_rank("export_images", img, 2, "image");
    write_pgm(img.values(), img.shape()[0], img.shape()[1],
              dir + "/" + name + ".pgm");
  }
}

// ---------------------------------------------------------------------------
// Experiment driver: per seed, build the fixture, pretrain once, run the
// sequence, collect rows; optionally write stage checkpoints and report.csv
// under out_dir. On a stage error, partial rows plus an error marker row are
// flushed before the error propagates.
// ---------------------------------------------------------------------------
template <typename T>
std::vector<ReportRow> run_experiment_typed(const ExperimentConfig& cfg,
                                            const std::string& out_dir = "",
                                            std::ostream* log = nullptr) {
  validate_config(cfg);
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) fail("run_experiment: cannot create '", out_dir, "': ", ec.message());
  }
  const std::string exp_id = cfg.effective_experiment_id();
  std::vector<ReportRow> rows;
  auto flush = [&]() {
    if (!out_dir.empty() && !rows.empty()) write_report(rows, out_dir + "/report.csv");
  };

  for (uint64_t seed : cfg.seeds) {
    try {
      if (log) *log << "[" << exp_id << "] seed " << seed << ": building fixture\n";
      SeedFixture<T> fx = build_fixture<T>(cfg, seed);
      PretrainCache<T> cache = make_pretrain_cache(cfg, seed, fx);
      std::function<void(const EngineState<T>&)> on_stage;
      if (!out_dir.empty()) {
        on_stage = [&, seed](const EngineState<T>& st) {
          const std::string path = out_dir + "/" + exp_id + "_seed" + std::to_string(seed) +
                                   "_stage" + std::to_string(st.stage) + ".ckpt";
          save_arrays(engine_state_to_arrays(st), path);
        };
      }
      SequenceResult<T> res = run_sequence(cfg, seed, fx, &cache, nullptr, on_stage);
      auto seed_rows = rows_from_result(cfg, seed, fx, res);
      rows.insert(rows.end(), seed_rows.begin(), seed_rows.end());
      if (log) *log << "[" << exp_id << "] seed " << seed << ": done\n";
    } catch (const Error& e) {
      ReportRow marker;
      marker.experiment = exp_id;
      marker.strategy = cfg.strategy;
      marker.order = cfg.order;
      marker.seed = seed;
      marker.stage = -1;
      marker.task = "error";
      marker.metric = "ERROR";
      marker.value = 0.0;
      rows.push_back(marker);
      flush();
      fail("run_experiment: seed ", seed, ": ", e.what());
    }
  }
  flush();
  return rows;
}

}  // namespace most

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "most/common.hpp"
#include "most/phantom.hpp"

namespace most {

enum class Strategy : uint8_t { naive, most, ewc, lwf, er, der };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::naive: return "naive";
    case Strategy::most: return "most";
    case Strategy::ewc: return "ewc";
    case Strategy::lwf: return "lwf";
    case Strategy::er: return "er";
    case Strategy::der: return "der";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& name) {
  for (Strategy s : {Strategy::naive, Strategy::most, Strategy::ewc, Strategy::lwf, Strategy::er,
                     Strategy::der})
    if (name == strategy_name(s)) return s;
  fail("strategy: unknown value '", name, "' (expected naive|most|ewc|lwf|er|der)");
}

// Downstream task permutations behind the order1/order2/order3 presets; every
// sequence starts with reconstruction pretraining as stage 0.
inline std::vector<TaskKind> order_preset(const std::string& name) {
  if (name == "order1")
    return {TaskKind::segmentation_A, TaskKind::segmentation_B, TaskKind::classification_A,
            TaskKind::classification_B};
  if (name == "order2")
    return {TaskKind::segmentation_B, TaskKind::classification_B, TaskKind::segmentation_A,
            TaskKind::classification_A};
  if (name == "order3")
    return {TaskKind::classification_A, TaskKind::classification_B, TaskKind::segmentation_B,
            TaskKind::segmentation_A};
  fail("order: unknown value '", name, "' (expected order1|order2|order3)");
}

// ---------------------------------------------------------------------------
// Experiment configuration. Flat key=value text format; unknown keys are
// rejected; every key has a default so an empty file is a valid config.
// ---------------------------------------------------------------------------
struct ExperimentConfig {
  // data
  int image_size = 64;
  int n_recon = 200;
  int n_task = 120;  // per downstream task; halved into net-training and finetuning datasets
  int acceleration = 4;
  int center_columns = 8;
  double split_train = 0.5;
  double split_val = 0.25;
  double split_test = 0.25;
  // model
  int cascades = 3;
  int recon_channels = 8;
  // continual learning
  std::string strategy = "most";
  std::string order = "order1";
  int buffer_size = 10;
  int replay_period = 3;
  bool replay = true;  // ablation axis: every-K replay of buffered groups
  bool ig = true;      // ablation axis: image-guided loss terms
  // training
  std::vector<uint64_t> seeds = {0, 1, 2};
  int epochs_pretrain = 12;
  int epochs_downstream = 25;
  int epochs_finetune = 5;
  double lr_pretrain = 1e-3;
  double lr_downstream = 1e-3;
  double lr_finetune = 1e-4;
  int batch_size = 4;
  // loss weights
  double lambda_ig = 1.0;
  double lambda_ewc = 100.0;
  double tau_lwf = 1.0;
  double alpha_der = 1.0;
  // behavior flags
  bool buffer_include_recon = true;
  bool replay_substitute = true;
  bool fm_include_pretrain = false;
  std::string precision = "f64";
  std::string experiment_id;  // derived from strategy/order/buffer when empty

  Strategy strategy_tag() const { return strategy_from_name(strategy); }
  std::vector<TaskKind> downstream_order() const { return order_preset(order); }

  std::string effective_experiment_id() const {
    if (!experiment_id.empty()) return experiment_id;
    std::ostringstream os;
    os << strategy << "_" << order << "_b" << buffer_size << "_k" << replay_period;
    if (strategy == "most") {
      if (!replay) os << "_noreplay";
      if (!ig) os << "_noig";
    }
    return os.str();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(r);
  } catch (const std::exception&) {
    fail("config: key '", key, "': expected integer, got '", v, "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail("config: key '", key, "': expected number, got '", v, "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  fail("config: key '", key, "': expected boolean (true|false|on|off), got '", v, "'");
}

inline std::vector<uint64_t> parse_seeds(const std::string& key, const std::string& v) {
  std::vector<uint64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) fail("config: key '", key, "': empty element in list '", v, "'");
    try {
      size_t pos = 0;
      out.push_back(std::stoull(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail("config: key '", key, "': expected integer list, got '", v, "'");
    }
  }
  if (out.empty()) fail("config: key '", key, "': list must be non-empty");
  return out;
}

}  // namespace detail

inline void validate_config(const ExperimentConfig& c) {
  if (!is_power_of_two(c.image_size) || c.image_size < 16)
    fail("config: image_size must be a power of two >= 16, got ", c.image_size);
  if (c.n_recon < 12) fail("config: n_recon must be >= 12, got ", c.n_recon);
  if (c.n_task < 24 || c.n_task % 2 != 0)
    fail("config: n_task must be an even number >= 24, got ", c.n_task);
  if (c.acceleration < 1) fail("config: acceleration must be >= 1, got ", c.acceleration);
  if (c.center_columns < 0 || c.center_columns > c.image_size / c.acceleration)
    fail("config: center_columns ", c.center_columns, " exceeds column budget ",
         c.image_size / c.acceleration);
  if (c.split_train <= 0 || c.split_val <= 0 || c.split_test <= 0)
    fail("config: split fractions must be positive");
  if (std::fabs(c.split_train + c.split_val + c.split_test - 1.0) > 1e-9)
    fail("config: split fractions must sum to 1");
  if (c.cascades < 1) fail("config: cascades must be >= 1, got ", c.cascades);
  if (c.recon_channels < 1) fail("config: recon_channels must be >= 1, got ", c.recon_channels);
  const Strategy tag = strategy_from_name(c.strategy);
  order_preset(c.order);
  if (c.buffer_size < 0) fail("config: buffer_size must be >= 0, got ", c.buffer_size);
  if (c.replay_period < 1) fail("config: replay_period must be >= 1, got ", c.replay_period);
  const bool wants_buffer =
      tag == Strategy::er || tag == Strategy::der || (tag == Strategy::most && c.replay);
  if (wants_buffer && c.buffer_size == 0)
    fail("config: buffer_size must be positive for strategy '", c.strategy, "' with replay");
  if (c.epochs_pretrain < 0 || c.epochs_downstream < 0 || c.epochs_finetune < 0)
    fail("config: epoch counts must be >= 0");
  if (c.epochs_finetune > 5)
    fail("config: epochs_finetune must be <= 5, got ", c.epochs_finetune);
  if (c.lr_pretrain <= 0 || c.lr_downstream <= 0 || c.lr_finetune <= 0)
    fail("config: learning rates must be positive");
  if (c.batch_size < 1) fail("config: batch_size must be >= 1, got ", c.batch_size);
  if (c.lambda_ig < 0 || c.lambda_ewc < 0 || c.tau_lwf <= 0 || c.alpha_der < 0)
    fail("config: loss weights must be non-negative (tau_lwf positive)");
  if (c.precision != "f64" && c.precision != "f32")
    fail("config: precision must be f64 or f32, got '", c.precision, "'");
  if (c.seeds.empty()) fail("config: seeds must be non-empty");
}

inline void set_config_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  if (key == "image_size") c.image_size = parse_int(key, v);
  else if (key == "n_recon") c.n_recon = parse_int(key, v);
  else if (key == "n_task") c.n_task = parse_int(key, v);
  else if (key == "acceleration") c.acceleration = parse_int(key, v);
  else if (key == "center_columns") c.center_columns = parse_int(key, v);
  else if (key == "split_train") c.split_train = parse_double(key, v);
  else if (key == "split_val") c.split_val = parse_double(key, v);
  else if (key == "split_test") c.split_test = parse_double(key, v);
  else if (key == "cascades") c.cascades = parse_int(key, v);
  else if (key == "recon_channels") c.recon_channels = parse_int(key, v);
  else if (key == "strategy") c.strategy = v;
  else if (key == "order") c.order = v;
  else if (key == "buffer_size") c.buffer_size = parse_int(key, v);
  else if (key == "replay_period") c.replay_period = parse_int(key, v);
  else if (key == "replay") c.replay = parse_bool(key, v);
  else if (key == "ig") c.ig = parse_bool(key, v);
  else if (key == "seeds") c.seeds = detail::parse_seeds(key, v);
  else if (key == "epochs_pretrain") c.epochs_pretrain = parse_int(key, v);
  else if (key == "epochs_downstream") c.epochs_downstream = parse_int(key, v);
  else if (key == "epochs_finetune") c.epochs_finetune = parse_int(key, v);
  else if (key == "lr_pretrain") c.lr_pretrain = parse_double(key, v);
  else if (key == "lr_downstream") c.lr_downstream = parse_double(key, v);
  else if (key == "lr_finetune") c.lr_finetune = parse_double(key, v);
  else if (key == "batch_size") c.batch_size = parse_int(key, v);
  else if (key == "lambda_ig") c.lambda_ig = parse_double(key, v);
  else if (key == "lambda_ewc") c.lambda_ewc = parse_double(key, v);
  else if (key == "tau_lwf") c.tau_lwf = parse_double(key, v);
  else if (key == "alpha_der") c.alpha_der = parse_double(key, v);
  else if (key == "buffer_include_recon") c.buffer_include_recon = parse_bool(key, v);
  else if (key == "replay_substitute") c.replay_substitute = parse_bool(key, v);
  else if (key == "fm_include_pretrain") c.fm_include_pretrain = parse_bool(key, v);
  else if (key == "precision") c.precision = v;
  else if (key == "experiment_id") c.experiment_id = v;
  else fail("config: unknown key '", key, "'");
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      fail("config: line ", lineno, ": expected key=value, got '", t, "'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    if (key.empty()) fail("config: line ", lineno, ": empty key");
    set_config_key(c, key, val);
  }
  validate_config(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("config: cannot open '", path, "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

inline std::string serialize_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os.precision(17);
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "image_size=" << c.image_size << "\n";
  os << "n_recon=" << c.n_recon << "\n";
  os << "n_task=" << c.n_task << "\n";
  os << "acceleration=" << c.acceleration << "\n";
  os << "center_columns=" << c.center_columns << "\n";
  os << "split_train=" << c.split_train << "\n";
  os << "split_val=" << c.split_val << "\n";
  os << "split_test=" << c.split_test << "\n";
  os << "cascades=" << c.cascades << "\n";
  os << "recon_channels=" << c.recon_channels << "\n";
  os << "strategy=" << c.strategy << "\n";
  os << "order=" << c.order << "\n";
  os << "buffer_size=" << c.buffer_size << "\n";
  os << "replay_period=" << c.replay_period << "\n";
  os << "replay=" << b(c.replay) << "\n";
  os << "ig=" << b(c.ig) << "\n";
  os << "seeds=";
  for (size_t i = 0; i < c.seeds.size(); ++i) os << (i ? "," : "") << c.seeds[i];
  os << "\n";
  os << "epochs_pretrain=" << c.epochs_pretrain << "\n";
  os << "epochs_downstream=" << c.epochs_downstream << "\n";
  os << "epochs_finetune=" << c.epochs_finetune << "\n";
  os << "lr_pretrain=" << c.lr_pretrain << "\n";
  os << "lr_downstream=" << c.lr_downstream << "\n";
  os << "lr_finetune=" << c.lr_finetune << "\n";
  os << "batch_size=" << c.batch_size << "\n";
  os << "lambda_ig=" << c.lambda_ig << "\n";
  os << "lambda_ewc=" << c.lambda_ewc << "\n";
  os << "tau_lwf=" << c.tau_lwf << "\n";
  os << "alpha_der=" << c.alpha_der << "\n";
  os << "buffer_include_recon=" << b(c.buffer_include_recon) << "\n";
  os << "replay_substitute=" << b(c.replay_substitute) << "\n";
  os << "fm_include_pretrain=" << b(c.fm_include_pretrain) << "\n";
  os << "precision=" << c.precision << "\n";
  if (!c.experiment_id.empty()) os << "experiment_id=" << c.experiment_id << "\n";
  return os.str();
}

}  // namespace most

// Command-line driver: synthesizes data, trains, and reports on the
// multi-task MR reconstruction pipeline defined in include/most/.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "most/experiment.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  std::optional<int64_t> seed;
  std::string strategy;
  std::string order;
  std::optional<int> buffer_size;
  std::string replay;  // on|off
  std::string ig;      // on|off
  std::string out_dir;
  std::vector<std::string> inputs;  // report: CSV paths
  int count = 4;                    // gen-data / export-images: samples per task
};

void add_common_flags(CLI::App* cmd, CliOptions& opt, bool with_overrides) {
  cmd->add_option("--config", opt.config_path, "key=value config file");
  cmd->add_option("--seed", opt.seed, "run a single seed instead of the config's seed list");
  cmd->add_option("--out", opt.out_dir, "output directory");
  if (with_overrides) {
    cmd->add_option("--strategy", opt.strategy,
                    "strategy tag: naive|most|ewc|lwf|er|der")
        ->check(CLI::IsMember({"naive", "most", "ewc", "lwf", "er", "der"}));
    cmd->add_option("--order", opt.order, "task order preset")
        ->check(CLI::IsMember({"order1", "order2", "order3"}));
    cmd->add_option("--buffer-size", opt.buffer_size, "replay buffer capacity (subjects)");
    cmd->add_option("--replay", opt.replay, "replay ablation switch")
        ->check(CLI::IsMember({"on", "off"}));
    cmd->add_option("--ig", opt.ig, "image-guided loss ablation switch")
        ->check(CLI::IsMember({"on", "off"}));
  }
}

most::ExperimentConfig load_config(const CliOptions& opt) {
  most::ExperimentConfig cfg;
  if (!opt.config_path.empty()) cfg = most::parse_config(opt.config_path);
  if (opt.seed) cfg.seeds = {static_cast<uint64_t>(*opt.seed)};
  if (!opt.strategy.empty()) cfg.strategy = opt.strategy;
  if (!opt.order.empty()) cfg.order = opt.order;
  if (opt.buffer_size) cfg.buffer_size = *opt.buffer_size;
  if (!opt.replay.empty()) cfg.replay = opt.replay == "on";
  if (!opt.ig.empty()) cfg.ig = opt.ig == "on";
  most::validate_config(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// gen-data: synthesize every task's dataset and export preview images.
// ---------------------------------------------------------------------------
template <typename T>
int cmd_gen_data(const most::ExperimentConfig& cfg, const CliOptions& opt) {
  const std::string out = opt.out_dir.empty() ? "data" : opt.out_dir;
  for (uint64_t seed : cfg.seeds) {
    most::SamplingMask mask = most::make_cartesian_mask(cfg.image_size, cfg.acceleration,
                                                        cfg.center_columns);
    std::vector<std::pair<most::Tensor<T>, std::string>> images;
    auto preview = [&](most::TaskKind kind, int n_total, uint64_t data_seed) {
      auto ds = most::undersample_dataset(
          most::gen_task_dataset<T>(kind, n_total, cfg.image_size, data_seed), mask);
      const int n = std::min<int>(opt.count, static_cast<int>(ds.train.size()));
      for (int i = 0; i < n; ++i) {
        const most::Sample<T>& s = ds.train[i];
        const std::string base = std::string(most::task_name(kind)) + "_s" +
                                 std::to_string(seed) + "_" + std::to_string(i);
        images.emplace_back(s.y, base + "_clean");
        images.emplace_back(s.x, base + "_zerofilled");
        if (most::is_segmentation(kind)) images.emplace_back(s.z, base + "_label");
      }
      std::cout << most::task_name(kind) << ": " << ds.total << " subjects ("
                << ds.train.size() << " generated)\n";
    };
    preview(most::TaskKind::reconstruction, cfg.n_recon,
            most::derive_seed(seed, "data_recon"));
    for (most::TaskKind kind : cfg.downstream_order())
      preview(kind, cfg.n_task / 2,
              most::derive_seed(seed, "data_net", static_cast<uint64_t>(kind)));
    most::export_images(images, out);
  }
  std::cout << "previews written to " << out << "/\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain: build the per-seed fixture, save frozen downstream nets and the
// pretrained reconstruction parameters as checkpoints.
// ---------------------------------------------------------------------------
template <typename T>
int cmd_pretrain(const most::ExperimentConfig& cfg, const CliOptions& opt) {
  const std::string out = opt.out_dir.empty() ? "pretrained" : opt.out_dir;
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) most::fail("pretrain: cannot create '", out, "': ", ec.message());
  for (uint64_t seed : cfg.seeds) {
    std::cout << "seed " << seed << ": building fixture\n";
    most::SeedFixture<T> fx = most::build_fixture<T>(cfg, seed);
    for (size_t i = 0; i < fx.nets.size(); ++i) {
      std::cout << "  " << most::task_name(fx.order[i]) << " val metric "
                << most::format_g6(fx.net_val[i]) << "\n";
      most::ArrayBundle b;
      most::detail::put_store(b, "theta/", fx.nets[i].params);
      most::save_arrays(b, out + "/" + std::string(most::task_name(fx.order[i])) + "_seed" +
                               std::to_string(seed) + ".ckpt");
    }
    most::PretrainCache<T> cache = most::make_pretrain_cache(cfg, seed, fx);
    std::cout << "  recon val SSIM " << most::format_g6(cache.val_ssim) << "\n";
    most::ArrayBundle b;
    most::detail::put_store(b, "theta/", cache.theta);
    most::save_arrays(b, out + "/recon_seed" + std::to_string(seed) + ".ckpt");
  }
  std::cout << "checkpoints written to " << out << "/\n";
  return 0;
}

// ---------------------------------------------------------------------------
// run: the full continual-learning experiment; writes report.csv and
// per-stage checkpoints when --out is given.
// ---------------------------------------------------------------------------
template <typename T>
int cmd_run(const most::ExperimentConfig& cfg, const CliOptions& opt) {
  auto rows = most::run_experiment_typed<T>(cfg, opt.out_dir, &std::cout);
  most::print_report_summary(rows, std::cout);
  if (!opt.out_dir.empty())
    std::cout << "report written to " << opt.out_dir << "/report.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report: merge one or more CSVs and print the LM/FM summary.
// ---------------------------------------------------------------------------
int cmd_report(const CliOptions& opt) {
  if (opt.inputs.empty()) most::fail("report: no input CSV files given");
  std::vector<most::ReportRow> rows;
  for (const std::string& path : opt.inputs) {
    auto r = most::read_report(path);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  most::print_report_summary(rows, std::cout);
  if (!opt.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(opt.out_dir, ec);
    if (ec) most::fail("report: cannot create '", opt.out_dir, "': ", ec.message());
    most::write_report(rows, opt.out_dir + "/report.csv");
    std::cout << "merged report written to " << opt.out_dir << "/report.csv\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// export-images: pretrain the reconstruction net, run it on held-out test
// subjects, and export clean / zero-filled / reconstructed panels.
// ---------------------------------------------------------------------------
template <typename T>
int cmd_export_images(const most::ExperimentConfig& cfg, const CliOptions& opt) {
  const std::string out = opt.out_dir.empty() ? "images" : opt.out_dir;
  for (uint64_t seed : cfg.seeds) {
    std::cout << "seed " << seed << ": building fixture\n";
    most::SeedFixture<T> fx = most::build_fixture<T>(cfg, seed);
    most::PretrainCache<T> cache = most::make_pretrain_cache(cfg, seed, fx);
    std::vector<std::pair<most::Tensor<T>, std::string>> images;
    const int n = std::min<int>(opt.count, static_cast<int>(fx.recon.test.size()));
    for (int i = 0; i < n; ++i) {
      const most::Sample<T>& s = fx.recon.test[i];
      most::Tensor<T> recon = most::recon_sample(cache.theta, cfg.cascades, s, fx.mask);
      const std::string base = "recon_s" + std::to_string(seed) + "_" + std::to_string(i);
      images.emplace_back(s.y, base + "_clean");
      images.emplace_back(s.x, base + "_zerofilled");
      images.emplace_back(recon, base + "_recon");
    }
    most::export_images(images, out);
  }
  std::cout << "images written to " << out << "/\n";
  return 0;
}

template <typename T>
int dispatch(const std::string& sub, const most::ExperimentConfig& cfg, const CliOptions& opt) {
  if (sub == "gen-data") return cmd_gen_data<T>(cfg, opt);
  if (sub == "pretrain") return cmd_pretrain<T>(cfg, opt);
  if (sub == "run") return cmd_run<T>(cfg, opt);
  if (sub == "export-images") return cmd_export_images<T>(cfg, opt);
  most::fail("unknown subcommand '", sub, "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual learning for multi-task MR reconstruction (toy scale)"};
  app.require_subcommand(1);
  CliOptions opt;

  CLI::App* gen = app.add_subcommand("gen-data", "synthesize datasets and export previews");
  add_common_flags(gen, opt, false);
  gen->add_option("--count", opt.count, "preview samples per task");

  CLI::App* pre = app.add_subcommand("pretrain", "pretrain and freeze task nets + recon net");
  add_common_flags(pre, opt, false);

  CLI::App* run = app.add_subcommand("run", "run the continual-learning experiment");
  add_common_flags(run, opt, true);

  CLI::App* rep = app.add_subcommand("report", "summarize one or more report CSVs");
  rep->add_option("csv", opt.inputs, "input report.csv files")->required();
  rep->add_option("--out", opt.out_dir, "directory for the merged CSV");

  CLI::App* exp = app.add_subcommand("export-images", "export reconstruction panels as PGM");
  add_common_flags(exp, opt, false);
  exp->add_option("--count", opt.count, "test subjects per seed");

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "report") return cmd_report(opt);
    most::ExperimentConfig cfg = load_config(opt);
    if (cfg.precision == "f32") return dispatch<float>(sub, cfg, opt);
    return dispatch<double>(sub, cfg, opt);
  } catch (const most::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

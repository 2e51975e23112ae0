#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

#include "mtcp/benchkit.hpp"
#include "mtcp/config.hpp"
#include "mtcp/errors.hpp"
#include "mtcp/grad_suite.hpp"
#include "mtcp/harness.hpp"

using namespace mtcp;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::int64_t seed = -1;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "key = value configuration file");
    app->add_option("-s,--set", overrides, "override one key, e.g. --set lps.kappa=7.5");
    app->add_option("-o,--out", out_dir, "output directory");
    app->add_option("--seed", seed, "run seed");
  }

  RunConfig build() const {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.validate();
    return cfg;
  }
};

void print_metrics(const char* label, const EvalMetrics& m) {
  std::printf("%s miou %.4f  rmse %.4f  merr %.2f  coherence %.4f  aggregate %.4f\n", label, m.miou, m.rmse, m.merr,
              m.coherence, m.aggregate);
}

int run_train(const ConfigFlags& flags, bool quiet) {
  RunConfig cfg = flags.build();
  TrainOptions opts;
  const auto start = std::chrono::steady_clock::now();
  if (!quiet) {
    opts.on_epoch = [&](const EpochRow& r) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("epoch %3zu  total %.4f  miou %.4f  rmse %.4f  merr %.2f  coh %.4f  (%.0fs)\n", r.epoch, r.total,
                  r.metrics.miou, r.metrics.rmse, r.metrics.merr, r.metrics.coherence, secs);
      std::fflush(stdout);
    };
  }
  TrainResult res = train(cfg, opts);
  print_metrics("final", res.record.rows.back().metrics);
  std::printf("outputs in %s\n", cfg.out_dir.c_str());
  return kOk;
}

int run_eval(const std::string& checkpoint) {
  print_metrics("val", evaluate_checkpoint(checkpoint));
  return kOk;
}

int run_ablate(const ConfigFlags& flags, const std::string& grid, std::size_t jobs) {
  RunConfig base = flags.build();
  auto rows = ablate(ablation_grid(base, grid), base.out_dir, jobs);
  std::printf("%-22s %8s %8s %8s %8s\n", "variant", "miou", "rmse", "merr", "aggregate");
  for (const auto& r : rows) {
    const auto& m = r.final_metrics;
    std::printf("%-22s %8.4f %8.4f %8.2f %8.4f\n", r.name.c_str(), m.miou, m.rmse, m.merr, m.aggregate);
  }
  return kOk;
}

int run_gradcheck(std::size_t seeds, double tol, const std::string& only) {
  bool ok = true;
  for (const auto& c : gradient_suite()) {
    if (!only.empty() && c.name != only) continue;
    double worst = 0.0;
    for (std::uint64_t s = 1; s <= seeds; ++s) worst = std::max(worst, c.run(s).max_rel_error);
    const bool pass = worst <= tol;
    ok = ok && pass;
    std::printf("%-18s max rel error %.3e  %s\n", c.name.c_str(), worst, pass ? "ok" : "FAIL");
  }
  return ok ? kOk : kNumeric;
}

int run_gen_data(const ConfigFlags& flags, const std::string& split) {
  RunConfig cfg = flags.build();
  const bench::DatasetConfig dc = cfg.dataset_config();
  bench::Dataset ds;
  if (split != "val") ds.train = bench::make_split(dc, bench::Split::Train);
  if (split != "train") ds.val = bench::make_split(dc, bench::Split::Val);
  const std::filesystem::path dir = cfg.out_dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  auto dump = [&](const std::vector<bench::SceneSample>& samples, const char* prefix) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%04zu.mtds", prefix, i);
      bench::write_sample(dir / name, samples[i]);
    }
  };
  dump(ds.train, "train");
  dump(ds.val, "val");
  std::printf("wrote %zu train and %zu val samples to %s\n", ds.train.size(), ds.val.size(), dir.string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task dense prediction: training, evaluation and ablations"};
  app.require_subcommand(1);

  ConfigFlags train_flags, ablate_flags, data_flags;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "train one model and write metrics and a checkpoint");
  train_flags.attach(train_cmd);
  train_cmd->add_flag("-q,--quiet", quiet, "no per-epoch output");

  std::string checkpoint;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on its validation split");
  eval_cmd->add_option("checkpoint", checkpoint, "checkpoint.mtcp path")->required();

  std::string grid = "arch";
  std::size_t jobs = 1;
  auto* ablate_cmd = app.add_subcommand("ablate", "train a grid of variants with shared seeds");
  ablate_flags.attach(ablate_cmd);
  ablate_cmd->add_option("-g,--grid", grid, "arch, loss or kappa")->check(CLI::IsMember({"arch", "loss", "kappa"}));
  ablate_cmd->add_option("-j,--jobs", jobs, "concurrent runs");

  std::size_t seeds = 5;
  double tol = 1e-4;
  std::string only;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every differentiable block");
  grad_cmd->add_option("--seeds", seeds, "seeds per block");
  grad_cmd->add_option("--tol", tol, "max relative error");
  grad_cmd->add_option("--only", only, "single block name");

  std::string split = "both";
  auto* data_cmd = app.add_subcommand("gen-data", "render the synthetic dataset to .mtds files");
  data_flags.attach(data_cmd);
  data_cmd->add_option("--split", split, "train, val or both")->check(CLI::IsMember({"train", "val", "both"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return run_train(train_flags, quiet);
    if (*eval_cmd) return run_eval(checkpoint);
    if (*ablate_cmd) return run_ablate(ablate_flags, grid, jobs);
    if (*grad_cmd) return run_gradcheck(seeds, tol, only);
    if (*data_cmd) return run_gen_data(data_flags, split);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mtcp/benchkit.hpp"
#include "mtcp/config.hpp"
#include "mtcp/lps.hpp"
#include "mtcp/model.hpp"

namespace mtcp {

/// Validation metrics pooled over a split.
struct EvalMetrics {
  double miou = 0.0;
  double rmse = 0.0;
  double merr = 0.0;       // degrees
  double coherence = 0.0;  // mean coherence loss over tasks and samples; 0 without the fusion module
  double aggregate = 0.0;
};

struct EpochRow {
  std::size_t epoch = 0;            // 1-based
  std::vector<double> task_losses;  // epoch means of the main task losses
  std::vector<double> weights;      // weights in force during the epoch
  double total = 0.0;               // epoch mean of the total objective
  EvalMetrics metrics;
};

struct RunRecord {
  RunConfig config;
  std::vector<std::string> task_names;
  EvalMetrics initial;  // before the first update
  std::vector<EpochRow> rows;
  std::vector<lps::WeightRecord> trajectory;
};

struct TrainResult {
  RunRecord record;
  std::unique_ptr<MtcpModel> model;
};

struct TrainOptions {
  bool write_outputs = true;  // metrics, summary, trajectory and checkpoint under config.out_dir
  std::function<void(const EpochRow&)> on_epoch;
};

/// Per-task loss on one sample: cross entropy, L1 or normalised L1.
Tensor task_loss(const TaskSpec& task, const Tensor& prediction, const bench::SceneSample& sample);

/// Deterministic for a given configuration. A non-finite value aborts with a
/// NumericError naming the epoch, the sample and the offending tensor.
/// `data` overrides the generated dataset.
TrainResult train(const RunConfig& config, const TrainOptions& options = {}, const bench::Dataset* data = nullptr);

using Predictor = std::function<ModelOutput(const bench::SceneSample&)>;

/// Metrics for arbitrary predictions; each task is scored by its kind.
EvalMetrics evaluate_with(const std::vector<TaskSpec>& tasks, const Predictor& predict,
                          const std::vector<bench::SceneSample>& samples);
/// Eval-mode forward passes without gradient recording.
EvalMetrics evaluate(MtcpModel& model, const std::vector<bench::SceneSample>& samples);

/// Rebuilds the model stored in a checkpoint.
std::unique_ptr<MtcpModel> load_model(const std::filesystem::path& checkpoint, RunConfig* config_out = nullptr);
/// Loads the checkpoint and scores the validation split of the dataset its
/// configuration describes (or `samples` when given).
EvalMetrics evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                const std::vector<bench::SceneSample>* samples = nullptr);

void save_model(const std::filesystem::path& path, const MtcpModel& model, const RunConfig& config);

/// metrics.csv, weights_trajectory.csv and summary.json in `dir`.
void export_metrics(const RunRecord& record, const std::filesystem::path& dir);

// ---- ablation ------------------------------------------------------------------

struct AblationVariant {
  std::string name;
  RunConfig config;
};

/// "arch" (full, w/o CFM, w/o SRM, w/o both), "loss" (lps, ew, log_smoothing,
/// prioritization_only) or "kappa" (2.5, 7.5). Variants share the base seed.
std::vector<AblationVariant> ablation_grid(const RunConfig& base, const std::string& grid);

struct AblationRow {
  std::string name;
  EvalMetrics final_metrics;
  std::filesystem::path run_dir;
};

/// Runs each variant in `out_dir/<name>` (up to `jobs` at a time) and writes
/// ablation.csv and ablation.json side by side.
std::vector<AblationRow> ablate(const std::vector<AblationVariant>& variants, const std::filesystem::path& out_dir,
                                std::size_t jobs = 1);

}  // namespace mtcp

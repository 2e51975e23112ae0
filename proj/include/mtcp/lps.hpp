#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtcp/tensor.hpp"

namespace mtcp::lps {

enum class SchemeKind { EW, MA, LogSmoothing, PrioritizationOnly, LPS };

std::string_view scheme_name(SchemeKind kind);
/// Accepts the names produced by scheme_name (case-insensitive).
SchemeKind parse_scheme(std::string_view name);

struct LpsParams {
  std::size_t history = 3;  // H
  double kappa = 2.5;
  double clamp_lo = 0.0;
  double clamp_hi = 10.0;
  double loss_floor = 1e-8;
};

/// Per-epoch mean task losses. Totals are the sum over tasks.
class LossHistory {
 public:
  explicit LossHistory(std::size_t num_tasks = 0) : num_tasks_(num_tasks) {}

  /// Appends one epoch. Values are floored at `floor` so later ratios stay finite.
  void record(std::span<const double> losses, double floor = 1e-8);
  std::size_t epochs() const { return rows_.size(); }
  std::size_t num_tasks() const { return num_tasks_; }
  /// Epoch n is 1-based.
  double task(std::size_t i, std::size_t n) const { return rows_.at(n - 1).at(i); }
  double total(std::size_t n) const;

 private:
  std::size_t num_tasks_;
  std::vector<std::vector<double>> rows_;
};

/// sum_i w_i L_i over scalar loss tensors.
Tensor weighted_loss(std::span<const double> weights, std::span<const Tensor> losses);
/// sum_i log(1 + w_i) L_i.
Tensor log_mtl_loss(std::span<const double> weights, std::span<const Tensor> losses);

/// Raw weights from the last H epoch-to-epoch loss ratios, evaluated as the
/// product of per-epoch factors. nullopt while fewer than H + 1 epochs exist.
std::optional<std::vector<double>> update_weights(const LossHistory& history, std::size_t h);
/// Same quantity through the endpoint ratio (L_i^n / L_i^{n-H}) / (L^n / L^{n-H}).
std::optional<std::vector<double>> update_weights_telescoped(const LossHistory& history, std::size_t h);

struct SpreadResult {
  double mean = 0.0;
  std::vector<double> deviations;
  std::vector<double> pre_clamp;
  std::vector<double> adjusted;
};

/// w'_i = mean + kappa (w_i - mean), clamped to [lo, hi].
SpreadResult spread_adjust(std::span<const double> raw, double kappa, double lo = 0.0, double hi = 10.0);

/// Main term (linear for EW, MA and PrioritizationOnly; log(1 + w) for
/// LogSmoothing and LPS), plus every intermediate loss unweighted, plus
/// lambda_cos times the sum of the coherence terms. `intermediate` holds one
/// row per task; rows may be empty.
Tensor total_loss(SchemeKind scheme, std::span<const double> weights, std::span<const Tensor> task_losses,
                  const std::vector<std::vector<Tensor>>& intermediate, std::span<const Tensor> coherence,
                  double lambda_cos);

struct WeightRecord {
  std::size_t epoch = 0;
  bool warmup = true;
  std::vector<double> raw;        // w~ (ones during warmup)
  std::vector<double> pre_clamp;  // mean + kappa deviations
  std::vector<double> weights;    // weights in force for the next epoch
};

/// Owns the loss history and the weights in force for the current epoch.
class LossScheduler {
 public:
  LossScheduler(SchemeKind scheme, std::size_t num_tasks, LpsParams params = {},
                std::vector<double> fixed_weights = {});

  SchemeKind scheme() const { return scheme_; }
  const LpsParams& params() const { return params_; }
  const std::vector<double>& weights() const { return weights_; }
  const LossHistory& history() const { return history_; }
  const std::vector<WeightRecord>& trajectory() const { return trajectory_; }

  /// Records the epoch's mean task losses and sets the weights for the next epoch.
  const std::vector<double>& epoch_end(std::span<const double> epoch_mean_losses);

  Tensor total(std::span<const Tensor> task_losses, const std::vector<std::vector<Tensor>>& intermediate,
               std::span<const Tensor> coherence, double lambda_cos) const;

 private:
  bool adaptive() const { return scheme_ == SchemeKind::PrioritizationOnly || scheme_ == SchemeKind::LPS; }

  SchemeKind scheme_;
  LpsParams params_;
  LossHistory history_;
  std::vector<double> weights_;
  std::vector<WeightRecord> trajectory_;
};

}  // namespace mtcp::lps

#include "mtcp/lps.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "mtcp/errors.hpp"
#include "mtcp/ops.hpp"

namespace mtcp::lps {

namespace o = ops;

namespace {

constexpr SchemeKind kAllSchemes[] = {SchemeKind::EW, SchemeKind::MA, SchemeKind::LogSmoothing,
                                      SchemeKind::PrioritizationOnly, SchemeKind::LPS};

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

void check_lengths(std::size_t weights, std::size_t losses, const char* op) {
  if (weights != losses) {
    throw DimensionError(std::string(op) + ": " + std::to_string(weights) + " weights for " +
                         std::to_string(losses) + " losses");
  }
}

Tensor accumulate(const Tensor& acc, const Tensor& term) { return acc.defined() ? o::add(acc, term) : term; }

}  // namespace

std::string_view scheme_name(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::EW: return "ew";
    case SchemeKind::MA: return "ma";
    case SchemeKind::LogSmoothing: return "log_smoothing";
    case SchemeKind::PrioritizationOnly: return "prioritization_only";
    case SchemeKind::LPS: return "lps";
  }
  return "?";
}

SchemeKind parse_scheme(std::string_view name) {
  const std::string key = lower(name);
  for (SchemeKind k : kAllSchemes) {
    if (scheme_name(k) == key) return k;
  }
  throw ConfigError("unknown loss scheme '" + std::string(name) +
                    "' (expected ew, ma, log_smoothing, prioritization_only or lps)");
}

void LossHistory::record(std::span<const double> losses, double floor) {
  if (losses.size() != num_tasks_) {
    throw DimensionError("loss history: expected " + std::to_string(num_tasks_) + " task losses, got " +
                         std::to_string(losses.size()));
  }
  std::vector<double> row;
  row.reserve(losses.size());
  for (double l : losses) {
    if (!std::isfinite(l)) throw NumericError("loss history: non-finite epoch loss");
    row.push_back(std::max(l, floor));
  }
  rows_.push_back(std::move(row));
}

double LossHistory::total(std::size_t n) const {
  const auto& row = rows_.at(n - 1);
  return std::accumulate(row.begin(), row.end(), 0.0);
}

Tensor weighted_loss(std::span<const double> weights, std::span<const Tensor> losses) {
  check_lengths(weights.size(), losses.size(), "weighted_loss");
  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (weights[i] < 0.0) throw ConfigError("weighted_loss: negative weight");
    acc = o::add(acc, o::scale(losses[i], weights[i]));
  }
  return acc;
}

Tensor log_mtl_loss(std::span<const double> weights, std::span<const Tensor> losses) {
  check_lengths(weights.size(), losses.size(), "log_mtl_loss");
  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (weights[i] < 0.0) throw ConfigError("log_mtl_loss: negative weight " + std::to_string(weights[i]));
    acc = o::add(acc, o::scale(losses[i], std::log1p(weights[i])));
  }
  return acc;
}

std::optional<std::vector<double>> update_weights(const LossHistory& history, std::size_t h) {
  const std::size_t n = history.epochs();
  if (h == 0) throw ConfigError("update_weights: history length must be at least 1");
  if (n < h + 1) return std::nullopt;
  std::vector<double> w(history.num_tasks());
  for (std::size_t i = 0; i < w.size(); ++i) {
    double task = 1.0, total = 1.0;
    for (std::size_t k = 1; k <= h; ++k) {
      task *= history.task(i, n - k + 1) / history.task(i, n - k);
      total *= history.total(n - k + 1) / history.total(n - k);
    }
    w[i] = task / total;
  }
  return w;
}

std::optional<std::vector<double>> update_weights_telescoped(const LossHistory& history, std::size_t h) {
  const std::size_t n = history.epochs();
  if (h == 0) throw ConfigError("update_weights: history length must be at least 1");
  if (n < h + 1) return std::nullopt;
  std::vector<double> w(history.num_tasks());
  const double total_ratio = history.total(n) / history.total(n - h);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (history.task(i, n) / history.task(i, n - h)) / total_ratio;
  return w;
}

SpreadResult spread_adjust(std::span<const double> raw, double kappa, double lo, double hi) {
  if (kappa < 0.0) throw ConfigError("spread_adjust: kappa must be non-negative");
  if (lo > hi) throw ConfigError("spread_adjust: empty clamp range");
  SpreadResult r;
  if (raw.empty()) return r;
  r.mean = std::accumulate(raw.begin(), raw.end(), 0.0) / static_cast<double>(raw.size());
  for (double w : raw) {
    const double dev = w - r.mean;
    // kappa == 1 must reproduce w exactly, which mean + (w - mean) need not.
    const double pre = kappa == 1.0 ? w : r.mean + kappa * dev;
    r.deviations.push_back(dev);
    r.pre_clamp.push_back(pre);
    r.adjusted.push_back(std::clamp(pre, lo, hi));
  }
  return r;
}

Tensor total_loss(SchemeKind scheme, std::span<const double> weights, std::span<const Tensor> task_losses,
                  const std::vector<std::vector<Tensor>>& intermediate, std::span<const Tensor> coherence,
                  double lambda_cos) {
  if (!intermediate.empty() && intermediate.size() != task_losses.size()) {
    throw DimensionError("total_loss: " + std::to_string(intermediate.size()) + " intermediate rows for " +
                         std::to_string(task_losses.size()) + " tasks");
  }
  for (std::size_t i = 1; i < intermediate.size(); ++i) {
    if (intermediate[i].size() != intermediate[0].size()) {
      throw DimensionError("total_loss: intermediate losses must form a tasks x stages grid");
    }
  }
  const bool log_scaled = scheme == SchemeKind::LogSmoothing || scheme == SchemeKind::LPS;
  Tensor total = log_scaled ? log_mtl_loss(weights, task_losses) : weighted_loss(weights, task_losses);
  for (const auto& row : intermediate) {
    for (const auto& l : row) total = o::add(total, l);
  }
  if (lambda_cos != 0.0) {
    Tensor coh;
    for (const auto& c : coherence) coh = accumulate(coh, c);
    if (coh.defined()) total = o::add(total, o::scale(coh, lambda_cos));
  }
  return total;
}

LossScheduler::LossScheduler(SchemeKind scheme, std::size_t num_tasks, LpsParams params,
                             std::vector<double> fixed_weights)
    : scheme_(scheme), params_(params), history_(num_tasks) {
  if (num_tasks == 0) throw ConfigError("loss scheduler: no tasks");
  if (params_.history == 0) throw ConfigError("lps: history length must be at least 1");
  if (params_.kappa < 0.0) throw ConfigError("lps: kappa must be non-negative");
  if (params_.clamp_lo < 0.0 || params_.clamp_lo > params_.clamp_hi) {
    throw ConfigError("lps: clamp bounds must satisfy 0 <= lo <= hi");
  }
  switch (scheme_) {
    case SchemeKind::EW: weights_.assign(num_tasks, 1.0 / static_cast<double>(num_tasks)); break;
    case SchemeKind::MA:
      if (fixed_weights.size() != num_tasks) {
        throw ConfigError("lps: MA scheme needs " + std::to_string(num_tasks) + " fixed weights");
      }
      for (double w : fixed_weights) {
        if (w < 0.0) throw ConfigError("lps: MA weights must be non-negative");
      }
      weights_ = std::move(fixed_weights);
      break;
    default: weights_.assign(num_tasks, 1.0); break;
  }
}

const std::vector<double>& LossScheduler::epoch_end(std::span<const double> epoch_mean_losses) {
  history_.record(epoch_mean_losses, params_.loss_floor);
  WeightRecord rec;
  rec.epoch = history_.epochs();
  if (adaptive()) {
    auto raw = update_weights(history_, params_.history);
    if (raw) {
      SpreadResult s = spread_adjust(*raw, params_.kappa, params_.clamp_lo, params_.clamp_hi);
      rec.warmup = false;
      rec.raw = std::move(*raw);
      rec.pre_clamp = std::move(s.pre_clamp);
      weights_ = std::move(s.adjusted);
    } else {
      weights_.assign(history_.num_tasks(), 1.0);
      rec.raw = weights_;
      rec.pre_clamp = weights_;
    }
  } else {
    rec.raw = weights_;
    rec.pre_clamp = weights_;
  }
  rec.weights = weights_;
  trajectory_.push_back(std::move(rec));
  return weights_;
}

Tensor LossScheduler::total(std::span<const Tensor> task_losses, const std::vector<std::vector<Tensor>>& intermediate,
                            std::span<const Tensor> coherence, double lambda_cos) const {
  return total_loss(scheme_, weights_, task_losses, intermediate, coherence, lambda_cos);
}

}  // namespace mtcp::lps

#include "mtcp/harness.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "mtcp/checkpoint.hpp"
#include "mtcp/errors.hpp"
#include "mtcp/optim.hpp"
#include "mtcp/tape.hpp"

namespace mtcp {

namespace o = ops;
using bench::SceneSample;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// First parameter holding a NaN or Inf, or nullptr.
const nn::NamedTensor* first_non_finite(const nn::ParamSet& ps) {
  for (const auto* group : {&ps.params, &ps.buffers}) {
    for (const auto& e : *group) {
      for (double v : e.tensor.values()) {
        if (!std::isfinite(v)) return &e;
      }
    }
  }
  return nullptr;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

nlohmann::json metrics_json(const EvalMetrics& m) {
  return {{"miou", m.miou},
          {"rmse", m.rmse},
          {"merr", m.merr},
          {"coherence", m.coherence},
          {"aggregate", m.aggregate}};
}

}  // namespace

Tensor task_loss(const TaskSpec& task, const Tensor& prediction, const SceneSample& sample) {
  switch (task.kind) {
    case TaskKind::Segmentation: return o::cross_entropy(prediction, sample.seg_labels);
    case TaskKind::Depth: return o::l1_loss(prediction, sample.depth);
    case TaskKind::Normals: return o::l1_normalized(prediction, sample.normals);
  }
  throw ConfigError("task_loss: unknown task kind");
}

EvalMetrics evaluate_with(const std::vector<TaskSpec>& tasks, const Predictor& predict,
                          const std::vector<SceneSample>& samples) {
  NoGradScope no_grad;
  bench::MetricAccumulator acc;
  double coherence = 0.0;
  std::size_t coherence_n = 0;
  for (const auto& s : samples) {
    ModelOutput out = predict(s);
    if (out.tasks.size() != tasks.size()) {
      throw DimensionError("evaluate: predictor returned " + std::to_string(out.tasks.size()) + " tasks, expected " +
                           std::to_string(tasks.size()));
    }
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      const Tensor& p = out.tasks[t].prediction;
      switch (tasks[t].kind) {
        case TaskKind::Segmentation: acc.add_segmentation(bench::argmax_labels(p), s.seg_labels); break;
        case TaskKind::Depth: acc.add_depth(p.values(), s.depth.values()); break;
        case TaskKind::Normals: acc.add_normals(p, s.normals); break;
      }
      if (out.tasks[t].coherence.defined()) {
        coherence += out.tasks[t].coherence.item();
        ++coherence_n;
      }
    }
  }
  EvalMetrics m;
  m.miou = acc.miou();
  m.rmse = acc.rmse();
  m.merr = acc.mean_angular_error();
  m.coherence = coherence_n ? coherence / static_cast<double>(coherence_n) : 0.0;
  m.aggregate = bench::aggregate_score(m.miou, m.rmse, m.merr);
  return m;
}

EvalMetrics evaluate(MtcpModel& model, const std::vector<SceneSample>& samples) {
  return evaluate_with(
      model.config().tasks, [&](const SceneSample& s) { return model.forward(s.rgb, o::Mode::Eval); }, samples);
}

TrainResult train(const RunConfig& config, const TrainOptions& options, const bench::Dataset* data) {
  config.validate();
  bench::Dataset owned;
  if (data == nullptr) {
    owned = bench::make_dataset(config.dataset_config());
    data = &owned;
  }
  if (data->train.empty()) throw ConfigError("train: empty training split");

  TrainResult result;
  result.model = std::make_unique<MtcpModel>(config.model_config(), derive_seed(config.seed, 2));
  MtcpModel& model = *result.model;
  const auto& tasks = model.config().tasks;
  const std::size_t t_count = tasks.size();

  const nn::ParamSet ps = model.parameters();
  std::vector<Tensor> params = ps.trainable();
  AdamW optimizer(config.optim);
  std::vector<double> ma = config.ma_weights;
  if (config.scheme == lps::SchemeKind::MA && ma.empty()) ma.assign(t_count, 1.0 / static_cast<double>(t_count));
  lps::LossScheduler scheduler(config.scheme, t_count, config.lps, ma);
  nn::Rng shuffle_rng(derive_seed(config.seed, 3));

  RunRecord& record = result.record;
  record.config = config;
  for (const auto& t : tasks) record.task_names.push_back(t.name);
  record.initial = evaluate(model, data->val);

  std::vector<std::size_t> order(data->train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    EpochRow row;
    row.epoch = epoch;
    row.weights = scheduler.weights();
    row.task_losses.assign(t_count, 0.0);
    double total_sum = 0.0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(stop - start);
      for (auto& p : params) p.zero_grad();
      for (std::size_t b = start; b < stop; ++b) {
        const SceneSample& sample = data->train[order[b]];
        try {
          Tape tape;
          TapeScope scope(tape);
          ModelOutput out = model.forward(sample.rgb, o::Mode::Train);
          std::vector<Tensor> main(t_count), coherence;
          std::vector<std::vector<Tensor>> inter(t_count);
          for (std::size_t t = 0; t < t_count; ++t) {
            main[t] = task_loss(tasks[t], out.tasks[t].prediction, sample);
            for (const auto& p : out.tasks[t].intermediates) inter[t].push_back(task_loss(tasks[t], p, sample));
            if (out.tasks[t].coherence.defined()) coherence.push_back(out.tasks[t].coherence);
            row.task_losses[t] += main[t].item();
          }
          if (!model.config().srm_enabled) inter.clear();
          Tensor total = scheduler.total(main, inter, coherence, config.lambda_cos);
          total_sum += total.item();
          tape.backward(o::scale(total, inv_batch));
        } catch (const NumericError& e) {
          throw NumericError("epoch " + std::to_string(epoch) + ", training sample " + std::to_string(order[b]) + ": " +
                             e.what());
        }
      }
      optimizer.step(params);
      if (const auto* bad = first_non_finite(ps)) {
        throw NumericError("epoch " + std::to_string(epoch) + ": parameter '" + bad->name +
                           "' became non-finite after the optimizer step");
      }
    }

    const double n = static_cast<double>(order.size());
    for (auto& l : row.task_losses) l /= n;
    row.total = total_sum / n;
    row.metrics = evaluate(model, data->val);
    scheduler.epoch_end(row.task_losses);
    record.rows.push_back(row);
    if (options.on_epoch) options.on_epoch(row);
  }
  record.trajectory = scheduler.trajectory();

  if (options.write_outputs) {
    export_metrics(record, config.out_dir);
    save_model(std::filesystem::path(config.out_dir) / "checkpoint.mtcp", model, config);
  }
  return result;
}

void save_model(const std::filesystem::path& path, const MtcpModel& model, const RunConfig& config) {
  if (path.has_parent_path()) make_dir(path.parent_path());
  save_checkpoint(path, model.parameters(), config_to_text(config));
}

std::unique_ptr<MtcpModel> load_model(const std::filesystem::path& checkpoint, RunConfig* config_out) {
  Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig config;
  apply_config_text(config, ck.config_text);
  auto model = std::make_unique<MtcpModel>(config.model_config(), derive_seed(config.seed, 2));
  restore(ck, model->parameters());
  if (config_out) *config_out = config;
  return model;
}

EvalMetrics evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::vector<SceneSample>* samples) {
  RunConfig config;
  auto model = load_model(checkpoint, &config);
  if (samples) return evaluate(*model, *samples);
  return evaluate(*model, bench::make_split(config.dataset_config(), bench::Split::Val));
}

void export_metrics(const RunRecord& record, const std::filesystem::path& dir) {
  make_dir(dir);
  const auto& names = record.task_names;

  std::string csv = "epoch";
  for (const auto& n : names) csv += ",loss_" + n;
  for (const auto& n : names) csv += ",weight_" + n;
  csv += ",miou,rmse,merr,coherence,aggregate,total\n";
  for (const auto& r : record.rows) {
    csv += std::to_string(r.epoch);
    for (double v : r.task_losses) csv += "," + fmt(v);
    for (double v : r.weights) csv += "," + fmt(v);
    const auto& m = r.metrics;
    for (double v : {m.miou, m.rmse, m.merr, m.coherence, m.aggregate, r.total}) csv += "," + fmt(v);
    csv += "\n";
  }
  write_text(dir / "metrics.csv", csv);

  std::string traj = "epoch,warmup";
  for (const char* col : {"raw_", "pre_clamp_", "weight_"}) {
    for (const auto& n : names) traj += std::string(",") + col + n;
  }
  traj += "\n";
  for (const auto& w : record.trajectory) {
    traj += std::to_string(w.epoch) + "," + (w.warmup ? "1" : "0");
    for (const auto* v : {&w.raw, &w.pre_clamp, &w.weights}) {
      for (double x : *v) traj += "," + fmt(x);
    }
    traj += "\n";
  }
  write_text(dir / "weights_trajectory.csv", traj);

  nlohmann::json summary;
  summary["tasks"] = names;
  summary["scheme"] = std::string(lps::scheme_name(record.config.scheme));
  summary["seed"] = record.config.seed;
  summary["epochs"] = record.rows.size();
  summary["initial"] = metrics_json(record.initial);
  if (!record.rows.empty()) {
    const auto& last = record.rows.back();
    summary["final"] = metrics_json(last.metrics);
    summary["final_weights"] = last.weights;
    summary["final_total"] = last.total;
  }
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [k, v] : config_entries(record.config)) cfg[k] = v;
  summary["config"] = cfg;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

std::vector<AblationVariant> ablation_grid(const RunConfig& base, const std::string& grid) {
  std::vector<AblationVariant> out;
  auto variant = [&](std::string name, auto edit) {
    RunConfig c = base;
    edit(c);
    c.out_dir = (std::filesystem::path(base.out_dir) / name).string();
    out.push_back({std::move(name), std::move(c)});
  };
  if (grid == "arch") {
    variant("full", [](RunConfig& c) { c.model.cfm_enabled = c.model.srm_enabled = true; });
    variant("wo_cfm", [](RunConfig& c) { c.model.cfm_enabled = false; c.model.srm_enabled = true; });
    variant("wo_srm", [](RunConfig& c) { c.model.cfm_enabled = true; c.model.srm_enabled = false; });
    variant("wo_both", [](RunConfig& c) { c.model.cfm_enabled = c.model.srm_enabled = false; });
  } else if (grid == "loss") {
    for (auto s : {lps::SchemeKind::LPS, lps::SchemeKind::EW, lps::SchemeKind::LogSmoothing,
                   lps::SchemeKind::PrioritizationOnly}) {
      variant(std::string(lps::scheme_name(s)), [s](RunConfig& c) { c.scheme = s; });
    }
  } else if (grid == "kappa") {
    variant("kappa_2.5", [](RunConfig& c) { c.scheme = lps::SchemeKind::LPS; c.lps.kappa = 2.5; });
    variant("kappa_7.5", [](RunConfig& c) { c.scheme = lps::SchemeKind::LPS; c.lps.kappa = 7.5; });
  } else {
    throw ConfigError("unknown ablation grid '" + grid + "' (expected arch, loss or kappa)");
  }
  return out;
}

std::vector<AblationRow> ablate(const std::vector<AblationVariant>& variants, const std::filesystem::path& out_dir,
                                std::size_t jobs) {
  for (const auto& v : variants) v.config.validate();
  make_dir(out_dir);
  std::vector<AblationRow> rows(variants.size());
  std::vector<std::exception_ptr> errors(variants.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < variants.size(); i = next++) {
      try {
        RunConfig c = variants[i].config;
        c.out_dir = (out_dir / variants[i].name).string();
        TrainResult r = train(c);
        rows[i] = {variants[i].name, r.record.rows.back().metrics, c.out_dir};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, variants.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::string csv = "variant,miou,rmse,merr,coherence,aggregate\n";
  nlohmann::json js = nlohmann::json::array();
  for (const auto& r : rows) {
    const auto& m = r.final_metrics;
    csv += r.name;
    for (double v : {m.miou, m.rmse, m.merr, m.coherence, m.aggregate}) csv += "," + fmt(v);
    csv += "\n";
    nlohmann::json j = metrics_json(m);
    j["variant"] = r.name;
    j["run_dir"] = r.run_dir.string();
    js.push_back(j);
  }
  write_text(out_dir / "ablation.csv", csv);
  write_text(out_dir / "ablation.json", js.dump(2) + "\n");
  return rows;
}

}  // namespace mtcp

#include "mtcp/model.hpp"

#include <algorithm>

#include "mtcp/errors.hpp"

namespace mtcp {

namespace o = ops;

std::vector<TaskSpec> default_tasks() {
  return {
      {"seg", TaskKind::Segmentation, 6, 0.0},
      {"depth", TaskKind::Depth, 1, 5.5},
      {"normals", TaskKind::Normals, 3, 0.0},
  };
}

void ModelConfig::validate() const {
  backbone.validate();
  decoder.validate(backbone.height / 4, backbone.width / 4);
  if (tasks.empty()) throw ConfigError("model: no tasks configured");
  if (cfm_enabled && tasks.size() < 2) throw ConfigError("model: the fusion module needs at least two tasks");
  for (const auto& t : tasks) {
    if (t.channels == 0) throw ConfigError("model: task '" + t.name + "' has no output channels");
  }
  if (cbam_reduction == 0 || decoder.out_width % cbam_reduction != 0 ||
      std::any_of(decoder.widths.begin(), decoder.widths.end(),
                  [&](std::size_t w) { return w % cbam_reduction != 0; })) {
    throw ConfigError("model: decoder widths must be divisible by the attention reduction " +
                      std::to_string(cbam_reduction));
  }
}

namespace {

void set_bias(nn::Conv2d& head, double value) {
  for (auto& b : head.bias.values()) b = value;
}

}  // namespace

MtcpModel::MtcpModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  nn::Rng rng(seed);
  backbone_ = std::make_unique<Backbone>(config_.backbone, rng);
  const std::size_t t_count = config_.tasks.size();
  for (std::size_t t = 0; t < t_count; ++t) decoders_.emplace_back(config_.decoder, config_.backbone.channels, rng);
  if (config_.cfm_enabled) {
    CfmConfig cfm{config_.decoder.out_width, t_count - 1, config_.cbam_reduction, config_.cfm_residual};
    for (std::size_t t = 0; t < t_count; ++t) fusions_.emplace_back(cfm, rng);
  }
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto& spec = config_.tasks[t];
    if (config_.srm_enabled) {
      tracebacks_.emplace_back(config_.decoder, spec.channels, config_.cbam_reduction, rng);
      for (std::size_t k = 1; k <= tracebacks_.back().num_stages(); ++k) {
        set_bias(tracebacks_.back().step_for_stage(k).prediction_head(), spec.output_bias);
      }
    } else {
      heads_.emplace_back(config_.decoder.out_width, spec.channels, 1, rng);
      set_bias(heads_.back(), spec.output_bias);
    }
  }
}

ModelOutput MtcpModel::forward(const Tensor& image, ops::Mode mode) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h != config_.backbone.height || w != config_.backbone.width) {
    throw DimensionError("model: configured for " + std::to_string(config_.backbone.height) + "x" +
                         std::to_string(config_.backbone.width) + " input, got " + shape_str(image.shape()));
  }
  std::optional<ops::SampleStatsScope> sample_stats;
  if (mode == ops::Mode::Eval && config_.bn_sample_stats) sample_stats.emplace();
  BackboneOutput shared = backbone_->forward(image, mode);
  const std::size_t t_count = config_.tasks.size();
  std::vector<DecoderOutput> dec;
  dec.reserve(t_count);
  for (auto& d : decoders_) dec.push_back(d.forward(shared.fused, mode));

  ModelOutput out;
  out.tasks.resize(t_count);
  for (std::size_t t = 0; t < t_count; ++t) {
    Tensor fused = dec[t].features;
    if (config_.cfm_enabled) {
      std::vector<Tensor> aux;
      for (std::size_t j = 0; j < t_count; ++j) {
        if (j != t) aux.push_back(dec[j].features);
      }
      CfmOutput cfm = fusions_[t].forward(dec[t].features, aux, mode);
      fused = cfm.fused;
      out.tasks[t].coherence = cfm.coherence;
    }
    if (config_.srm_enabled) {
      TracebackOutput tb = tracebacks_[t].run(fused, dec[t].stages, h, w, mode);
      out.tasks[t].prediction = tb.final_prediction;
      out.tasks[t].intermediates = std::move(tb.intermediates);
    } else {
      out.tasks[t].prediction = o::bilinear_resize(heads_[t](fused), h, w);
    }
  }
  return out;
}

nn::ParamSet MtcpModel::parameters() const {
  nn::ParamSet ps;
  backbone_->collect(ps, "backbone");
  for (std::size_t t = 0; t < config_.tasks.size(); ++t) {
    const std::string name = config_.tasks[t].name;
    decoders_[t].collect(ps, "decoder." + name);
    if (config_.cfm_enabled) fusions_[t].collect(ps, "cfm." + name);
    if (config_.srm_enabled) {
      tracebacks_[t].collect(ps, "srm." + name);
    } else {
      heads_[t].collect(ps, "head." + name);
    }
  }
  return ps;
}

}  // namespace mtcp

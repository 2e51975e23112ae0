#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mtcp/backbone.hpp"
#include "mtcp/coherence.hpp"
#include "mtcp/decoder.hpp"
#include "mtcp/traceback.hpp"

namespace mtcp {

enum class TaskKind { Segmentation, Depth, Normals };

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::Segmentation;
  std::size_t channels = 0;
  double output_bias = 0.0;  // initial bias of every prediction head
};

/// segmentation (6 classes, cross entropy), depth (1, L1), normals (3, normalised L1).
std::vector<TaskSpec> default_tasks();

struct ModelConfig {
  BackboneConfig backbone;
  DecoderConfig decoder;
  std::vector<TaskSpec> tasks = default_tasks();
  std::size_t cbam_reduction = 4;
  bool cfm_enabled = true;
  bool srm_enabled = true;
  bool cfm_residual = true;
  /// Eval-mode batch norm uses each sample's statistics (as in training,
  /// where every forward pass sees one sample) instead of running estimates.
  bool bn_sample_stats = true;

  void validate() const;
};

struct TaskOutput {
  Tensor prediction;                  // at input resolution
  std::vector<Tensor> intermediates;  // empty without the trace-back
  Tensor coherence;                   // undefined without the fusion module
};

struct ModelOutput {
  std::vector<TaskOutput> tasks;
};

/// Shared backbone, one decoder per task, per-task fusion and trace-back.
class MtcpModel {
 public:
  MtcpModel(const ModelConfig& config, std::uint64_t seed);

  ModelOutput forward(const Tensor& image, ops::Mode mode);
  const ModelConfig& config() const { return config_; }
  /// Parameters and running statistics, in a fixed order.
  nn::ParamSet parameters() const;

 private:
  ModelConfig config_;
  std::unique_ptr<Backbone> backbone_;
  std::vector<TaskDecoder> decoders_;
  std::vector<CoherenceFusion> fusions_;
  std::vector<Traceback> tracebacks_;
  std::vector<nn::Conv2d> heads_;  // single heads when the trace-back is off
};

}  // namespace mtcp

#pragma once

#include <span>
#include <vector>

#include "mtcp/nn.hpp"

namespace mtcp {

/// Attention maps captured during a Cbam forward pass.
struct CbamTrace {
  Tensor channel;  // [C x 1 x 1]
  Tensor spatial;  // [1 x H x W]
};

/// Channel attention (shared two-layer perceptron over average- and
/// max-pooled descriptors) followed by spatial attention (1x1 conv over the
/// channel-wise mean and max maps).
class Cbam {
 public:
  Cbam() = default;
  Cbam(std::size_t channels, std::size_t reduction, nn::Rng& rng);

  Tensor operator()(const Tensor& x, CbamTrace* trace = nullptr) const;
  std::size_t channels() const { return fc1_.weight.dim(0); }
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

 private:
  nn::Linear fc1_, fc2_;
  nn::Conv2d spatial_;
};

/// Cbam followed by batch norm and an optional ReLU.
class CbamBlock {
 public:
  CbamBlock() = default;
  CbamBlock(std::size_t channels, std::size_t reduction, bool relu, nn::Rng& rng);

  Tensor operator()(const Tensor& x, ops::Mode mode, CbamTrace* trace = nullptr);
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

 private:
  Cbam cbam_;
  nn::BatchNorm2d bn_;
  bool relu_ = true;
};

/// Mean over locations of 1 - cos(a, b); a and b are [C x H x W].
Tensor coherence_loss(const Tensor& a, const Tensor& b);

/// G = a . b^T / HW over the flattened maps, output G . b.
Tensor gram_fuse(const Tensor& a, const Tensor& b);

struct CfmConfig {
  std::size_t channels = 16;
  std::size_t num_aux = 2;
  std::size_t reduction = 4;
  bool residual = true;
};

struct CfmOutput {
  Tensor fused;      // H_i
  Tensor coherence;  // scalar [1]
};

/// Cross-task fusion for one main task given the other tasks' features.
class CoherenceFusion {
 public:
  CoherenceFusion(const CfmConfig& config, nn::Rng& rng);

  /// Each aux map is scaled by sigmoid(conv1x1(aux)); the gated maps are
  /// concatenated along channels. No projection.
  Tensor gated_concat(std::span<const Tensor> aux) const;
  /// gated_concat followed by the 1x1 projection back to `channels`.
  Tensor gate_aux(std::span<const Tensor> aux) const;
  CfmOutput forward(const Tensor& main, std::span<const Tensor> aux, ops::Mode mode);

  nn::Conv2d& gate(std::size_t i) { return gates_.at(i); }
  const CfmConfig& config() const { return config_; }
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

 private:
  CfmConfig config_;
  std::vector<nn::Conv2d> gates_;
  nn::Conv2d project_;
  CbamBlock main_branch_, aux_branch_, output_;
};

}  // namespace mtcp

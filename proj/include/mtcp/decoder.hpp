#pragma once

#include <vector>

#include "mtcp/nn.hpp"

namespace mtcp {

struct DecoderConfig {
  std::size_t num_stages = 3;                   // K
  std::vector<std::size_t> blocks_per_stage{1, 1, 1};
  std::vector<std::size_t> widths{16, 24, 32};  // channels of X_1..X_K
  std::size_t window = 4;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
  std::size_t out_width = 16;  // width of the fused pyramid output

  /// Throws ConfigError unless the stage list is consistent and every stage
  /// of an h x w input (the backbone feature size) tiles into windows.
  void validate(std::size_t h, std::size_t w) const;
};

/// X_1..X_K, finest first.
using StageFeatures = std::vector<Tensor>;

/// Pre-norm transformer block over non-overlapping windows:
///   t += proj(attn(qkv(ln1(t)))),  t += fc2(gelu(fc1(ln2(t)))).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t channels, std::size_t heads, std::size_t mlp_ratio, nn::Rng& rng);

  /// Tokens [T x C] in window-major order.
  Tensor forward_tokens(const Tensor& tokens, std::size_t window_tokens,
                        std::vector<double>* attention_out = nullptr) const;
  /// x [C x H x W].
  Tensor forward(const Tensor& x, std::size_t window) const;

  nn::Linear& out_projection() { return proj_; }
  /// t + fc2(gelu(fc1(ln2(t)))) on its own.
  Tensor mlp_path(const Tensor& tokens) const;
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

 private:
  std::size_t heads_ = 1;
  nn::LayerNorm ln1_, ln2_;
  nn::Linear qkv_, proj_, fc1_, fc2_;
};

struct DecoderOutput {
  Tensor features;       // DFPN output [out_width x H' x W']
  StageFeatures stages;  // retained for the trace-back
};

/// One task's hierarchical decoder followed by dynamic pyramid fusion.
class TaskDecoder {
 public:
  TaskDecoder(const DecoderConfig& config, std::size_t in_channels, nn::Rng& rng);

  /// Stage k (1-based). Stage 1 takes the shared representation through a
  /// 1x1 conv + BN + ReLU stem; later stages start with a stride-2 3x3 conv.
  Tensor stage_forward(const Tensor& x, std::size_t stage_index, ops::Mode mode);
  /// Upsample every X_k to the X_1 grid, map to out_width with a 1x1 conv and
  /// mix with softmax gates.
  Tensor dfpn_fuse(const StageFeatures& stages) const;
  DecoderOutput forward(const Tensor& shared, ops::Mode mode);

  /// Softmax of the gate logits.
  std::vector<double> gates() const;
  Tensor& gate_logits() { return gate_logits_; }
  const nn::Conv2d& lateral(std::size_t stage_index) const { return lateral_.at(stage_index - 1); }
  TransformerBlock& block(std::size_t stage_index, std::size_t i) { return blocks_.at(stage_index - 1).at(i); }
  const DecoderConfig& config() const { return config_; }
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

 private:
  DecoderConfig config_;
  nn::Conv2d stem_;
  nn::BatchNorm2d stem_bn_;
  std::vector<nn::Conv2d> merge_;  // merge_[k-2] opens stage k
  std::vector<std::vector<TransformerBlock>> blocks_;
  std::vector<nn::Conv2d> lateral_;
  Tensor gate_logits_;  // [K]
};

}  // namespace mtcp

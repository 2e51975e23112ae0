#include "mtcp/decoder.hpp"

#include <cmath>

#include "mtcp/errors.hpp"
#include "mtcp/tape.hpp"

namespace mtcp {

namespace o = ops;

void DecoderConfig::validate(std::size_t h, std::size_t w) const {
  if (num_stages < 1) throw ConfigError("decoder: need at least one stage");
  if (widths.size() != num_stages || blocks_per_stage.size() != num_stages) {
    throw ConfigError("decoder: widths and blocks_per_stage must list " + std::to_string(num_stages) + " stages");
  }
  if (window == 0 || heads == 0 || mlp_ratio == 0 || out_width == 0) {
    throw ConfigError("decoder: window, heads, mlp_ratio and out_width must be positive");
  }
  for (std::size_t k = 0; k < num_stages; ++k) {
    if (widths[k] == 0 || widths[k] % heads != 0) {
      throw ConfigError("decoder: stage " + std::to_string(k + 1) + " width " + std::to_string(widths[k]) +
                        " not divisible by " + std::to_string(heads) + " heads");
    }
    if (h % window != 0 || w % window != 0 || h == 0 || w == 0) {
      throw ConfigError("decoder: window " + std::to_string(window) + " does not divide stage " +
                        std::to_string(k + 1) + " size " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (k + 1 < num_stages) {
      if (h % 2 != 0 || w % 2 != 0) throw ConfigError("decoder: stage size not halvable");
      h /= 2;
      w /= 2;
    }
  }
}

TransformerBlock::TransformerBlock(std::size_t channels, std::size_t heads, std::size_t mlp_ratio, nn::Rng& rng)
    : heads_(heads),
      ln1_(channels),
      ln2_(channels),
      qkv_(channels, 3 * channels, rng, false),
      proj_(channels, channels, rng),
      fc1_(channels, channels * mlp_ratio, rng),
      fc2_(channels * mlp_ratio, channels, rng) {}

Tensor TransformerBlock::forward_tokens(const Tensor& tokens, std::size_t window_tokens,
                                        std::vector<double>* attention_out) const {
  Tensor a = o::window_attention(qkv_(ln1_(tokens)), window_tokens, heads_, attention_out);
  return mlp_path(o::add(tokens, proj_(a)));
}

Tensor TransformerBlock::mlp_path(const Tensor& tokens) const {
  return o::add(tokens, fc2_(o::gelu(fc1_(ln2_(tokens)))));
}

Tensor TransformerBlock::forward(const Tensor& x, std::size_t window) const {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor t = forward_tokens(o::to_window_tokens(x, window), window * window);
  return o::from_window_tokens(t, c, h, w, window);
}

void TransformerBlock::collect(nn::ParamSet& ps, const std::string& prefix) const {
  ln1_.collect(ps, prefix + ".ln1");
  qkv_.collect(ps, prefix + ".qkv");
  proj_.collect(ps, prefix + ".proj");
  ln2_.collect(ps, prefix + ".ln2");
  fc1_.collect(ps, prefix + ".fc1");
  fc2_.collect(ps, prefix + ".fc2");
}

TaskDecoder::TaskDecoder(const DecoderConfig& config, std::size_t in_channels, nn::Rng& rng) : config_(config) {
  const std::size_t k_total = config_.num_stages;
  if (config_.widths.size() != k_total || config_.blocks_per_stage.size() != k_total) {
    throw ConfigError("decoder: widths and blocks_per_stage must list " + std::to_string(k_total) + " stages");
  }
  stem_ = nn::Conv2d(in_channels, config_.widths[0], 1, rng, 1, false);
  stem_bn_ = nn::BatchNorm2d(config_.widths[0]);
  for (std::size_t k = 1; k < k_total; ++k) merge_.emplace_back(config_.widths[k - 1], config_.widths[k], 3, rng, 2);
  blocks_.resize(k_total);
  for (std::size_t k = 0; k < k_total; ++k) {
    for (std::size_t b = 0; b < config_.blocks_per_stage[k]; ++b) {
      blocks_[k].emplace_back(config_.widths[k], config_.heads, config_.mlp_ratio, rng);
    }
    lateral_.emplace_back(config_.widths[k], config_.out_width, 1, rng);
  }
  gate_logits_ = Tensor::zeros({k_total}, true);
}

Tensor TaskDecoder::stage_forward(const Tensor& x, std::size_t stage_index, ops::Mode mode) {
  if (stage_index < 1 || stage_index > config_.num_stages) {
    throw ConfigError("decoder: stage index " + std::to_string(stage_index) + " out of range");
  }
  Tensor y = stage_index == 1 ? o::relu(stem_bn_(stem_(x), mode)) : merge_[stage_index - 2](x);
  const std::size_t win = config_.window;
  if (y.dim(1) % win != 0 || y.dim(2) % win != 0) {
    throw ConfigError("decoder: window " + std::to_string(win) + " does not divide stage " +
                      std::to_string(stage_index) + " size " + shape_str(y.shape()));
  }
  const auto& blocks = blocks_[stage_index - 1];
  if (blocks.empty()) return y;
  const std::size_t c = y.dim(0), h = y.dim(1), w = y.dim(2);
  Tensor t = o::to_window_tokens(y, win);
  for (const auto& b : blocks) t = b.forward_tokens(t, win * win);
  return o::from_window_tokens(t, c, h, w, win);
}

Tensor TaskDecoder::dfpn_fuse(const StageFeatures& stages) const {
  if (stages.size() != config_.num_stages) {
    throw StateError("dfpn: expected " + std::to_string(config_.num_stages) + " stage features, got " +
                     std::to_string(stages.size()));
  }
  const std::size_t h = stages[0].dim(1), w = stages[0].dim(2);
  Tensor g = o::softmax(gate_logits_, 0);
  Tensor out;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    Tensor up = k == 0 ? stages[k] : o::bilinear_resize(stages[k], h, w);
    Tensor gk = o::reshape(o::slice(g, 0, k, 1), {1, 1, 1});
    Tensor term = o::mul(lateral_[k](up), gk);
    out = k == 0 ? term : o::add(out, term);
  }
  return out;
}

DecoderOutput TaskDecoder::forward(const Tensor& shared, ops::Mode mode) {
  DecoderOutput out;
  Tensor x = shared;
  for (std::size_t k = 1; k <= config_.num_stages; ++k) {
    x = stage_forward(x, k, mode);
    out.stages.push_back(x);
  }
  out.features = dfpn_fuse(out.stages);
  return out;
}

std::vector<double> TaskDecoder::gates() const {
  NoGradScope guard;
  Tensor g = o::softmax(gate_logits_, 0);
  return {g.values().begin(), g.values().end()};
}

void TaskDecoder::collect(nn::ParamSet& ps, const std::string& prefix) const {
  stem_.collect(ps, prefix + ".stem");
  stem_bn_.collect(ps, prefix + ".stem_bn");
  for (std::size_t k = 0; k < merge_.size(); ++k) merge_[k].collect(ps, prefix + ".merge" + std::to_string(k + 2));
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    for (std::size_t b = 0; b < blocks_[k].size(); ++b) {
      blocks_[k][b].collect(ps, prefix + ".stage" + std::to_string(k + 1) + ".block" + std::to_string(b));
    }
  }
  for (std::size_t k = 0; k < lateral_.size(); ++k) lateral_[k].collect(ps, prefix + ".lateral" + std::to_string(k + 1));
  ps.param(prefix + ".gates", gate_logits_);
}

}  // namespace mtcp

#pragma once

#include <array>

#include "mtcp/nn.hpp"

namespace mtcp {

struct BackboneConfig {
  std::size_t channels = 32;    // C
  std::size_t num_queries = 8;  // N
  std::size_t height = 64;
  std::size_t width = 64;

  void validate() const;
};

struct BackboneOutput {
  Tensor pixel_embeddings;  // P [C x H/4 x W/4]
  Tensor masks;             // M [N x H/4 x W/4], values in (0, 1)
  Tensor fused;             // R [C x H/4 x W/4]
};

/// Instance-aware pixel representation: A = P . M^T gives one C-vector per
/// mask, and R = A . M scatters the instance vectors back onto the pixels
/// weighted by mask membership (the sum over instances happens inside the
/// second product). P is [C x H x W], M is [N x H x W]; returns [C x H x W].
Tensor fuse_instances(const Tensor& pixel_embeddings, const Tensor& masks);

/// Shared encoder: a small strided conv stack plus learned mask queries.
class Backbone {
 public:
  Backbone(const BackboneConfig& config, nn::Rng& rng);

  /// [3 x H x W] -> [C x H/4 x W/4]
  Tensor encode(const Tensor& image, ops::Mode mode);
  /// sigmoid(Q . P) with Q the learned [N x C] query matrix.
  Tensor mask_queries(const Tensor& pixel_embeddings) const;
  BackboneOutput forward(const Tensor& image, ops::Mode mode);

  const BackboneConfig& config() const { return config_; }
  Tensor& queries() { return queries_; }
  nn::Conv2d& final_conv() { return residual_.back().conv_b; }
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

 private:
  struct ResidualBlock {
    nn::Conv2d conv_a, conv_b;
    nn::BatchNorm2d bn_a, bn_b;
  };

  BackboneConfig config_;
  nn::Conv2d down1_, down2_;
  nn::BatchNorm2d bn1_, bn2_;
  std::array<ResidualBlock, 2> residual_;
  Tensor queries_;
};

}  // namespace mtcp

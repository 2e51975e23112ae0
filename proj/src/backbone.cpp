#include "mtcp/backbone.hpp"

#include <cmath>

#include "mtcp/errors.hpp"

namespace mtcp {

namespace o = ops;

void BackboneConfig::validate() const {
  if (channels < 8) throw ConfigError("backbone: channels must be at least 8");
  if (num_queries < 1) throw ConfigError("backbone: need at least one query");
  if (height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0) {
    throw ConfigError("backbone: input size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be divisible by 4");
  }
}

Tensor fuse_instances(const Tensor& pixel_embeddings, const Tensor& masks) {
  if (pixel_embeddings.rank() != 3 || masks.rank() != 3 || pixel_embeddings.dim(1) != masks.dim(1) ||
      pixel_embeddings.dim(2) != masks.dim(2)) {
    throw DimensionError("fuse_instances: embeddings " + shape_str(pixel_embeddings.shape()) + " vs masks " +
                         shape_str(masks.shape()));
  }
  const std::size_t c = pixel_embeddings.dim(0), n = masks.dim(0);
  const std::size_t h = masks.dim(1), w = masks.dim(2);
  Tensor p = o::reshape(pixel_embeddings, {c, h * w});
  Tensor m = o::reshape(masks, {n, h * w});
  Tensor a = o::matmul(p, o::transpose(m));  // [C x N]
  return o::reshape(o::matmul(a, m), {c, h, w});
}

Backbone::Backbone(const BackboneConfig& config, nn::Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t c = config_.channels;
  down1_ = nn::Conv2d(3, 16, 3, rng, 2, false);
  bn1_ = nn::BatchNorm2d(16);
  down2_ = nn::Conv2d(16, c, 3, rng, 2, false);
  bn2_ = nn::BatchNorm2d(c);
  for (auto& rb : residual_) {
    rb.conv_a = nn::Conv2d(c, c, 3, rng, 1, false);
    rb.bn_a = nn::BatchNorm2d(c);
    rb.conv_b = nn::Conv2d(c, c, 3, rng, 1, false);
    rb.bn_b = nn::BatchNorm2d(c);
  }
  queries_ = nn::uniform_tensor({config_.num_queries, c}, std::sqrt(3.0 / static_cast<double>(c)), rng);
}

Tensor Backbone::encode(const Tensor& image, ops::Mode mode) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("backbone: expected a [3 x H x W] image, got " + shape_str(image.shape()));
  }
  if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0) {
    throw ConfigError("backbone: image " + shape_str(image.shape()) + " not divisible by 4");
  }
  Tensor x = o::relu(bn1_(down1_(image), mode));
  x = o::relu(bn2_(down2_(x), mode));
  for (auto& rb : residual_) {
    Tensor y = o::relu(rb.bn_a(rb.conv_a(x), mode));
    y = rb.bn_b(rb.conv_b(y), mode);
    x = o::relu(o::add(x, y));
  }
  return x;
}

Tensor Backbone::mask_queries(const Tensor& pixel_embeddings) const {
  const std::size_t c = pixel_embeddings.dim(0), h = pixel_embeddings.dim(1), w = pixel_embeddings.dim(2);
  Tensor logits = o::matmul(queries_, o::reshape(pixel_embeddings, {c, h * w}));
  return o::reshape(o::sigmoid(logits), {config_.num_queries, h, w});
}

BackboneOutput Backbone::forward(const Tensor& image, ops::Mode mode) {
  BackboneOutput out;
  out.pixel_embeddings = encode(image, mode);
  out.masks = mask_queries(out.pixel_embeddings);
  out.fused = fuse_instances(out.pixel_embeddings, out.masks);
  return out;
}

void Backbone::collect(nn::ParamSet& ps, const std::string& prefix) const {
  down1_.collect(ps, prefix + ".down1");
  bn1_.collect(ps, prefix + ".bn1");
  down2_.collect(ps, prefix + ".down2");
  bn2_.collect(ps, prefix + ".bn2");
  for (std::size_t i = 0; i < residual_.size(); ++i) {
    const std::string p = prefix + ".res" + std::to_string(i);
    residual_[i].conv_a.collect(ps, p + ".conv_a");
    residual_[i].bn_a.collect(ps, p + ".bn_a");
    residual_[i].conv_b.collect(ps, p + ".conv_b");
    residual_[i].bn_b.collect(ps, p + ".bn_b");
  }
  ps.param(prefix + ".queries", queries_);
}

}  // namespace mtcp

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mtcp/tensor.hpp"

// Differentiable primitives. Every function records onto the active tape
// when one is installed and at least one input requires a gradient; without
// a tape they are plain forward computations. All outputs are checked for
// NaN/Inf and a NumericError names the offending primitive.
namespace mtcp::ops {

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
/// 2-D transpose.
Tensor transpose(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::span<const std::size_t> sizes);

// ---- elementwise -------------------------------------------------------------
// Binary ops broadcast operands of equal rank: each dimension pair must be
// equal or contain a 1.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor sigmoid(const Tensor& x);
/// max(x, 0) with derivative 0 at 0.
Tensor relu(const Tensor& x);
/// tanh approximation of GELU.
Tensor gelu(const Tensor& x);

// ---- reductions ------------------------------------------------------------

/// Sum of all elements, shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = true);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = true);
/// First maximum along the axis receives the gradient.
Tensor max_axis(const Tensor& x, std::size_t axis, bool keepdim = true);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

// ---- linear algebra ----------------------------------------------------------

/// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// Row-wise affine map: x[T x in] . w[in x out] + bias[out] (bias optional).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// ---- spatial -------------------------------------------------------------------

/// Cross-correlation of x[C_in x H x W] with kernel[C_out x C_in x k x k].
/// Output extent is floor((H + 2p - k) / s) + 1; a ConfigError is raised for
/// k outside {1, 3, 7} or when the stride would skip real (non-padding)
/// input rows or columns.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias = {}, std::size_t stride = 1,
              std::size_t padding = 0);

/// Bilinear sampling with half-pixel centres (align_corners = false).
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

enum class Mode { Train, Eval };

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(Tensor::zeros({channels})), running_var(Tensor::full({channels}, 1.0)) {}
};

/// Per-channel normalisation over spatial positions of x[C x H x W]. Train
/// mode normalises with the sample statistics and updates the running
/// estimates (unbiased variance); eval mode uses the running estimates,
/// unless a SampleStatsScope is active.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, Mode mode);

/// While alive, eval-mode batchnorm2d on this thread normalises with the
/// sample's own statistics and leaves the running estimates untouched.
class SampleStatsScope {
 public:
  SampleStatsScope();
  ~SampleStatsScope();
  SampleStatsScope(const SampleStatsScope&) = delete;
  SampleStatsScope& operator=(const SampleStatsScope&) = delete;

 private:
  bool previous_;
};

/// Normalises each row of x[T x C] over C.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Rearranges x[C x H x W] into window-major tokens [H*W x C]: the tokens of
/// window w (row-major over non-overlapping win x win windows) occupy rows
/// [w*win*win, (w+1)*win*win).
Tensor to_window_tokens(const Tensor& x, std::size_t win);
Tensor from_window_tokens(const Tensor& tokens, std::size_t channels, std::size_t h, std::size_t w,
                          std::size_t win);

/// Multi-head self-attention inside consecutive groups of `window_tokens`
/// rows. qkv is [T x 3C] holding queries, keys and values side by side;
/// returns [T x C]. When `weights_out` is given it receives the attention
/// matrices, laid out [window][head][query][key].
Tensor window_attention(const Tensor& qkv, std::size_t window_tokens, std::size_t heads,
                        std::vector<double>* weights_out = nullptr);

/// Per-location cosine similarity of the channel vectors of a and b
/// ([C x H x W] each); each norm is clamped below at eps. Returns [H x W].
Tensor cosine_similarity_map(const Tensor& a, const Tensor& b, double eps = 1e-8);

// ---- losses ----------------------------------------------------------------------

/// Mean negative log-likelihood over pixels whose label != ignore_index.
/// labels holds H*W class ids for logits[K x H x W].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, int ignore_index = -1);
Tensor l1_loss(const Tensor& pred, const Tensor& target);
/// L1 between per-pixel L2-normalised prediction vectors (pred[3 x H x W])
/// and unit-length targets.
Tensor l1_normalized(const Tensor& pred, const Tensor& target, double eps = 1e-8);

}  // namespace mtcp::ops

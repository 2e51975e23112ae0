#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mtcp/ops.hpp"
#include "mtcp/tensor.hpp"

namespace mtcp::nn {

using ops::Mode;

/// Deterministic random source; distributions are computed from raw 64-bit
/// draws so sequences do not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n);  // [0, n)
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad = true);
Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Flat registry of trainable parameters and non-trainable buffers
/// (running statistics), keyed by dotted path.
struct ParamSet {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;

  void param(const std::string& name, const Tensor& t) { params.push_back({name, t}); }
  void buffer(const std::string& name, const Tensor& t) { buffers.push_back({name, t}); }
  std::vector<Tensor> trainable() const;
  std::size_t parameter_count() const;
};

struct Conv2d {
  Tensor weight;  // [out x in x k x k]
  Tensor bias;    // [out] or undefined
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, Rng& rng, std::size_t stride = 1, bool with_bias = true);
  std::size_t out_channels() const { return weight.dim(0); }
  Tensor operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, padding); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  ops::BatchNormStats stats;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);
  Tensor operator()(const Tensor& x, Mode mode) { return ops::batchnorm2d(x, gamma, beta, stats, mode); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t channels);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
  void collect(ParamSet& ps, const std::string& prefix) const;
};

}  // namespace mtcp::nn

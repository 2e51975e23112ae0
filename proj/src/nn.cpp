#include "mtcp/nn.hpp"

#include <cmath>

namespace mtcp::nn {

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // Box-Muller; one draw per call keeps the stream position simple.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
}

std::size_t Rng::below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

Tensor uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

std::vector<Tensor> ParamSet::trainable() const {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t k, Rng& rng, std::size_t stride_, bool with_bias)
    : stride(stride_), padding(k / 2) {
  const double fan_in = static_cast<double>(in * k * k);
  weight = uniform_tensor({out, in, k, k}, std::sqrt(6.0 / fan_in), rng);
  if (with_bias) bias = Tensor::zeros({out}, true);
}

void Conv2d::collect(ParamSet& ps, const std::string& prefix) const {
  ps.param(prefix + ".weight", weight);
  if (bias.defined()) ps.param(prefix + ".bias", bias);
}

BatchNorm2d::BatchNorm2d(std::size_t channels)
    : gamma(Tensor::full({channels}, 1.0, true)), beta(Tensor::zeros({channels}, true)), stats(channels) {}

void BatchNorm2d::collect(ParamSet& ps, const std::string& prefix) const {
  ps.param(prefix + ".gamma", gamma);
  ps.param(prefix + ".beta", beta);
  ps.buffer(prefix + ".running_mean", stats.running_mean);
  ps.buffer(prefix + ".running_var", stats.running_var);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  weight = uniform_tensor({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
  if (with_bias) bias = Tensor::zeros({out}, true);
}

void Linear::collect(ParamSet& ps, const std::string& prefix) const {
  ps.param(prefix + ".weight", weight);
  if (bias.defined()) ps.param(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t channels)
    : gamma(Tensor::full({channels}, 1.0, true)), beta(Tensor::zeros({channels}, true)) {}

void LayerNorm::collect(ParamSet& ps, const std::string& prefix) const {
  ps.param(prefix + ".gamma", gamma);
  ps.param(prefix + ".beta", beta);
}

}  // namespace mtcp::nn

#include "mtcp/optim.hpp"

#include <cmath>

#include "mtcp/errors.hpp"

namespace mtcp {

void AdamW::step(std::span<Tensor> params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) {
    throw DimensionError("AdamW: parameter count changed from " + std::to_string(m_.size()) + " to " +
                         std::to_string(params.size()));
  }
  ++steps_;
  const auto& c = config_;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    if (!p.requires_grad()) throw StateError("AdamW: parameter without gradient buffer");
    if (p.numel() != m_[k].size()) {
      throw DimensionError("AdamW: parameter " + std::to_string(k) + " has shape " + shape_str(p.shape()) +
                           ", moments hold " + std::to_string(m_[k].size()) + " elements");
    }
    auto w = p.values();
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    const double decay = 1.0 - c.lr * c.weight_decay;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] *= decay;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace mtcp

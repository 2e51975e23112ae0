#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtcp/tensor.hpp"

namespace mtcp {

struct AdamWConfig {
  double lr = 5e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. Moments are allocated on the first step
/// to match each parameter's shape; the parameter list must keep the same
/// order and shapes afterwards.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  /// One update from the gradients currently stored in `params`.
  void step(std::span<Tensor> params);

  std::int64_t step_count() const { return steps_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::int64_t steps_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace mtcp

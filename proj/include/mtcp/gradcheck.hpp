#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mtcp/tensor.hpp"

namespace mtcp {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at the worst coordinate
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares the tape gradient of scalar `f` with respect to `x` against
/// central differences (f(x + h e) - f(x - h e)) / 2h. The relative error at
/// a coordinate is |a - n| / max(|a|, |n|, 1e-8). `f` must be deterministic
/// and read `x` (which is perturbed in place and restored).
///
/// With `max_coords` > 0 only that many coordinates, evenly strided through
/// the tensor, are probed.
GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor x, double h = 1e-4, std::size_t max_coords = 0);

/// Runs grad_check for several tensors sharing one function and returns the
/// worst result.
GradCheckResult grad_check_all(const std::function<Tensor()>& f, std::vector<Tensor> xs, double h = 1e-4,
                               std::size_t max_coords_each = 0);

/// Checks one random unit direction per tensor: the tape's directional
/// derivative <grad, v> against central differences along v, refined by
/// Ridders' extrapolation from initial step h. Suited to large models where
/// single coordinates have gradients near round-off. worst_index reports the
/// tensor position in `xs`.
GradCheckResult directional_grad_check(const std::function<Tensor()>& f, std::vector<Tensor> xs, double h = 1e-3,
                                       std::uint64_t seed = 0);

}  // namespace mtcp

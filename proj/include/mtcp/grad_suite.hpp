#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mtcp/gradcheck.hpp"

namespace mtcp {

/// One differentiable block checked against finite differences for a seed.
struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

/// conv, batchnorm, attention, transformer_block, cbam, gate, dfpn_gate,
/// gram_fuse, coherence_loss, cfm, srm_step and full_model (16x16 input).
/// Every case projects its outputs onto fixed random weights; full_model uses
/// directional checks because single coordinates sit near round-off.
std::vector<GradCase> gradient_suite();

}  // namespace mtcp

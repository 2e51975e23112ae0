#pragma once

#include <vector>

#include "mtcp/coherence.hpp"
#include "mtcp/decoder.hpp"

namespace mtcp {

struct SrmStepOutput {
  Tensor refined;     // next-step input at X_k's resolution; undefined at k = 1
  Tensor prediction;  // task channels at X_k's resolution
};

/// One refinement step at stage k: attend to the incoming cross-task map and
/// the stored stage feature, resize the former onto the latter's grid,
/// concatenate, then branch into a refinement head and a prediction head.
class SrmStep {
 public:
  SrmStep() = default;
  /// refine_width == 0 builds a step without a refinement head (stage 1).
  SrmStep(std::size_t cross_width, std::size_t stage_width, std::size_t refine_width, std::size_t task_channels,
          std::size_t reduction, nn::Rng& rng);

  SrmStepOutput operator()(const Tensor& cross, const Tensor& stage_feat, ops::Mode mode);
  nn::Conv2d& prediction_head() { return predict_; }
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

 private:
  Cbam cross_attn_, stage_attn_;
  nn::Conv2d refine_;
  nn::BatchNorm2d refine_bn_;
  nn::Conv2d predict_;
  bool has_refine_ = false;
};

struct TracebackOutput {
  Tensor final_prediction;                // [task channels x out_h x out_w]
  std::vector<Tensor> intermediates;      // one per stage, k = K first, all at out_h x out_w
};

/// Chain of SRM steps over one task's decoder stages, coarse to fine.
class Traceback {
 public:
  Traceback(const DecoderConfig& decoder, std::size_t task_channels, std::size_t reduction, nn::Rng& rng);

  TracebackOutput run(const Tensor& fused, const StageFeatures& stages, std::size_t out_h, std::size_t out_w,
                      ops::Mode mode);
  SrmStep& step_for_stage(std::size_t k) { return steps_.at(k - 1); }
  std::size_t num_stages() const { return steps_.size(); }
  void collect(nn::ParamSet& ps, const std::string& prefix) const;

 private:
  std::vector<SrmStep> steps_;  // steps_[k-1] serves stage k
};

}  // namespace mtcp

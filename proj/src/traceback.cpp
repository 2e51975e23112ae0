#include "mtcp/traceback.hpp"

#include "mtcp/errors.hpp"

namespace mtcp {

namespace o = ops;

SrmStep::SrmStep(std::size_t cross_width, std::size_t stage_width, std::size_t refine_width,
                 std::size_t task_channels, std::size_t reduction, nn::Rng& rng)
    : cross_attn_(cross_width, reduction, rng),
      stage_attn_(stage_width, reduction, rng),
      predict_(cross_width + stage_width, task_channels, 1, rng),
      has_refine_(refine_width > 0) {
  if (has_refine_) {
    refine_ = nn::Conv2d(cross_width + stage_width, refine_width, 1, rng, 1, false);
    refine_bn_ = nn::BatchNorm2d(refine_width);
  }
}

SrmStepOutput SrmStep::operator()(const Tensor& cross, const Tensor& stage_feat, ops::Mode mode) {
  if (!stage_feat.defined()) throw StateError("srm: stage features were not recorded");
  Tensor c = cross_attn_(cross);
  Tensor s = stage_attn_(stage_feat);
  const std::size_t h = stage_feat.dim(1), w = stage_feat.dim(2);
  if (c.dim(1) != h || c.dim(2) != w) c = o::bilinear_resize(c, h, w);
  const Tensor parts[] = {c, s};
  Tensor cat = o::concat(parts, 0);
  SrmStepOutput out;
  if (has_refine_) out.refined = o::relu(refine_bn_(refine_(cat), mode));
  out.prediction = predict_(cat);
  return out;
}

void SrmStep::collect(nn::ParamSet& ps, const std::string& prefix) const {
  cross_attn_.collect(ps, prefix + ".cross");
  stage_attn_.collect(ps, prefix + ".stage");
  if (has_refine_) {
    refine_.collect(ps, prefix + ".refine");
    refine_bn_.collect(ps, prefix + ".refine_bn");
  }
  predict_.collect(ps, prefix + ".predict");
}

Traceback::Traceback(const DecoderConfig& decoder, std::size_t task_channels, std::size_t reduction,
                     nn::Rng& rng) {
  const std::size_t k_total = decoder.num_stages;
  steps_.resize(k_total);
  // Build coarse to fine so the incoming width of each step is known.
  for (std::size_t k = k_total; k >= 1; --k) {
    const std::size_t cross = k == k_total ? decoder.out_width : decoder.widths[k - 1];
    const std::size_t refine = k >= 2 ? decoder.widths[k - 2] : 0;
    steps_[k - 1] = SrmStep(cross, decoder.widths[k - 1], refine, task_channels, reduction, rng);
  }
}

TracebackOutput Traceback::run(const Tensor& fused, const StageFeatures& stages, std::size_t out_h,
                               std::size_t out_w, ops::Mode mode) {
  if (stages.size() != steps_.size()) {
    throw StateError("traceback: expected " + std::to_string(steps_.size()) + " stored stage features, got " +
                     std::to_string(stages.size()));
  }
  TracebackOutput out;
  Tensor cross = fused;
  for (std::size_t k = steps_.size(); k >= 1; --k) {
    SrmStepOutput step = steps_[k - 1](cross, stages[k - 1], mode);
    out.intermediates.push_back(o::bilinear_resize(step.prediction, out_h, out_w));
    cross = step.refined;
  }
  out.final_prediction = out.intermediates.back();
  return out;
}

void Traceback::collect(nn::ParamSet& ps, const std::string& prefix) const {
  for (std::size_t k = 0; k < steps_.size(); ++k) steps_[k].collect(ps, prefix + ".step" + std::to_string(k + 1));
}

}  // namespace mtcp

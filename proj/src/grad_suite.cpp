#include "mtcp/grad_suite.hpp"

#include "mtcp/coherence.hpp"
#include "mtcp/decoder.hpp"
#include "mtcp/model.hpp"
#include "mtcp/nn.hpp"
#include "mtcp/traceback.hpp"

namespace mtcp {

namespace o = ops;

namespace {

Tensor rand_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
  nn::Rng rng(seed);
  return nn::uniform_tensor(std::move(s), scale, rng, true);
}

Tensor probe(const Tensor& y, std::uint64_t seed) {
  nn::Rng rng(seed + 1000);
  return o::sum(o::mul(y, nn::uniform_tensor(y.shape(), 1.0, rng, false)));
}

// Probe scaled by 1/numel so large outputs do not dominate.
Tensor mean_probe(const Tensor& y, std::uint64_t seed) { return o::scale(probe(y, seed), 1.0 / y.numel()); }

std::vector<Tensor> with_params(const nn::ParamSet& ps, std::vector<Tensor> xs) {
  for (const auto& p : ps.params) xs.push_back(p.tensor);
  return xs;
}

constexpr double kStep = 1e-5;

GradCheckResult conv_case(std::uint64_t seed) {
  Tensor x = rand_tensor({2, 6, 6}, seed + 10);
  Tensor k = rand_tensor({3, 2, 3, 3}, seed + 20);
  Tensor b = rand_tensor({3}, seed + 30);
  auto f = [&] { return probe(o::conv2d(x, k, b, 1, 1), seed); };
  return grad_check_all(f, {x, k, b}, kStep);
}

GradCheckResult batchnorm_case(std::uint64_t seed) {
  Tensor x = rand_tensor({3, 4, 4}, seed + 10, 2.0);
  Tensor gamma = rand_tensor({3}, seed + 20);
  Tensor beta = rand_tensor({3}, seed + 30);
  o::BatchNormStats stats(3);
  auto f = [&] { return probe(o::batchnorm2d(x, gamma, beta, stats, o::Mode::Train), seed); };
  return grad_check_all(f, {x, gamma, beta}, kStep);
}

GradCheckResult attention_case(std::uint64_t seed) {
  Tensor qkv = rand_tensor({16, 24}, seed + 10);
  auto f = [&] { return probe(o::window_attention(qkv, 4, 2), seed); };
  return grad_check(f, qkv, kStep);
}

GradCheckResult transformer_case(std::uint64_t seed) {
  nn::Rng rng(seed);
  TransformerBlock block(8, 2, 2, rng);
  Tensor x = rand_tensor({8, 4, 4}, seed + 20);
  nn::ParamSet ps;
  block.collect(ps, "b");
  auto f = [&] { return probe(block.forward(x, 2), seed); };
  return grad_check_all(f, with_params(ps, {x}), kStep, 16);
}

GradCheckResult cbam_case(std::uint64_t seed) {
  nn::Rng rng(seed);
  CbamBlock block(8, 4, true, rng);
  Tensor x = rand_tensor({8, 4, 4}, seed + 7);
  nn::ParamSet ps;
  block.collect(ps, "c");
  auto f = [&] { return probe(block(x, o::Mode::Train), seed); };
  return grad_check_all(f, with_params(ps, {x}), kStep, 16);
}

GradCheckResult gate_case(std::uint64_t seed) {
  nn::Rng rng(seed);
  CoherenceFusion cfm(CfmConfig{8, 2, 4, true}, rng);
  std::vector<Tensor> aux{rand_tensor({8, 3, 3}, seed + 1), rand_tensor({8, 3, 3}, seed + 2)};
  nn::ParamSet ps;
  cfm.collect(ps, "cfm");
  auto f = [&] { return probe(cfm.gate_aux(aux), seed); };
  return grad_check_all(f, with_params(ps, aux), kStep);
}

GradCheckResult dfpn_gate_case(std::uint64_t seed) {
  nn::Rng rng(seed);
  TaskDecoder dec(DecoderConfig{}, 8, rng);
  for (auto& v : dec.gate_logits().values()) v = rng.uniform(-1.0, 1.0);
  StageFeatures stages{rand_tensor({16, 8, 8}, seed), rand_tensor({24, 4, 4}, seed + 1),
                       rand_tensor({32, 2, 2}, seed + 2)};
  auto f = [&] { return probe(dec.dfpn_fuse(stages), seed); };
  return grad_check(f, dec.gate_logits(), kStep);
}

GradCheckResult gram_case(std::uint64_t seed) {
  Tensor a = rand_tensor({4, 3, 3}, seed);
  Tensor b = rand_tensor({4, 3, 3}, seed + 60);
  auto f = [&] { return probe(gram_fuse(a, b), seed); };
  return grad_check_all(f, {a, b}, kStep);
}

GradCheckResult coherence_case(std::uint64_t seed) {
  Tensor a = rand_tensor({4, 3, 3}, seed);
  Tensor b = rand_tensor({4, 3, 3}, seed + 50);
  auto f = [&] { return coherence_loss(a, b); };
  return grad_check_all(f, {a, b}, kStep);
}

GradCheckResult cfm_case(std::uint64_t seed) {
  nn::Rng rng(seed);
  CoherenceFusion cfm(CfmConfig{8, 2, 4, true}, rng);
  Tensor main = rand_tensor({8, 3, 3}, seed + 30);
  std::vector<Tensor> aux{rand_tensor({8, 3, 3}, seed + 40), rand_tensor({8, 3, 3}, seed + 41)};
  nn::ParamSet ps;
  cfm.collect(ps, "cfm");
  auto f = [&] {
    CfmOutput out = cfm.forward(main, aux, o::Mode::Train);
    return o::add(probe(out.fused, seed), out.coherence);
  };
  return grad_check_all(f, with_params(ps, {main, aux[0], aux[1]}), kStep, 12);
}

GradCheckResult srm_case(std::uint64_t seed) {
  nn::Rng rng(seed);
  SrmStep step(8, 8, 4, 3, 4, rng);
  Tensor cross = rand_tensor({8, 2, 2}, seed + 10);
  Tensor feat = rand_tensor({8, 4, 4}, seed + 11);
  nn::ParamSet ps;
  step.collect(ps, "srm");
  auto f = [&] {
    SrmStepOutput out = step(cross, feat, o::Mode::Train);
    return o::add(probe(out.refined, seed), probe(out.prediction, seed + 1));
  };
  return grad_check_all(f, with_params(ps, {cross, feat}), kStep, 12);
}

GradCheckResult full_model_case(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.backbone.channels = 8;
  cfg.backbone.num_queries = 2;
  cfg.backbone.height = 16;
  cfg.backbone.width = 16;
  cfg.decoder.num_stages = 2;
  cfg.decoder.blocks_per_stage = {1, 1};
  cfg.decoder.widths = {8, 8};
  cfg.decoder.window = 2;
  cfg.decoder.out_width = 8;
  MtcpModel model(cfg, seed);
  Tensor image = rand_tensor({3, 16, 16}, seed + 100);
  auto f = [&] {
    ModelOutput out = model.forward(image, o::Mode::Train);
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t t = 0; t < out.tasks.size(); ++t) {
      const std::uint64_t s = seed * 10 + t;
      total = o::add(total, mean_probe(out.tasks[t].prediction, s));
      for (std::size_t j = 0; j < out.tasks[t].intermediates.size(); ++j) {
        total = o::add(total, mean_probe(out.tasks[t].intermediates[j], s + 100 * (j + 1)));
      }
      total = o::add(total, out.tasks[t].coherence);
    }
    return total;
  };
  return directional_grad_check(f, with_params(model.parameters(), {image}), kStep, seed);
}

}  // namespace

std::vector<GradCase> gradient_suite() {
  return {
      {"conv", conv_case},
      {"batchnorm", batchnorm_case},
      {"attention", attention_case},
      {"transformer_block", transformer_case},
      {"cbam", cbam_case},
      {"gate", gate_case},
      {"dfpn_gate", dfpn_gate_case},
      {"gram_fuse", gram_case},
      {"coherence_loss", coherence_case},
      {"cfm", cfm_case},
      {"srm_step", srm_case},
      {"full_model", full_model_case},
  };
}

}  // namespace mtcp

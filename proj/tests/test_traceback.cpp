#include <gtest/gtest.h>

#include <cmath>

#include "mtcp/errors.hpp"
#include "mtcp/gradcheck.hpp"
#include "mtcp/model.hpp"
#include "mtcp/tape.hpp"
#include "mtcp/traceback.hpp"
#include "test_util.hpp"

using namespace mtcp;
namespace o = mtcp::ops;
using test::probe_sum;
using test::random_tensor;

namespace {

// Stage features matching DecoderConfig{} on a 16x16 grid.
StageFeatures default_stages(std::uint64_t seed) {
  return {random_tensor({16, 16, 16}, seed), random_tensor({24, 8, 8}, seed + 1), random_tensor({32, 4, 4}, seed + 2)};
}

ModelConfig tiny_model(bool cfm, bool srm) {
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
  cfg.cfm_enabled = cfm;
  cfg.srm_enabled = srm;
  return cfg;
}

}  // namespace

TEST(SrmStep, RefinedWidthMatchesNextStage) {
  nn::Rng rng(1);
  DecoderConfig dec;
  Traceback tb(dec, 6, 4, rng);
  StageFeatures stages = default_stages(2);
  SrmStepOutput s3 = tb.step_for_stage(3)(random_tensor({16, 16, 16}, 3), stages[2], o::Mode::Train);
  EXPECT_EQ(s3.refined.shape(), (Shape{24, 4, 4}));
  EXPECT_EQ(s3.prediction.shape(), (Shape{6, 4, 4}));
  SrmStepOutput s2 = tb.step_for_stage(2)(s3.refined, stages[1], o::Mode::Train);
  EXPECT_EQ(s2.refined.shape(), (Shape{16, 8, 8}));
  EXPECT_EQ(s2.prediction.shape(), (Shape{6, 8, 8}));
  SrmStepOutput s1 = tb.step_for_stage(1)(s2.refined, stages[0], o::Mode::Train);
  EXPECT_FALSE(s1.refined.defined());
  EXPECT_EQ(s1.prediction.shape(), (Shape{6, 16, 16}));
  // Resolution doubles along the chain after the first step.
  EXPECT_EQ(s2.prediction.dim(1), 2 * s3.prediction.dim(1));
  EXPECT_EQ(s1.prediction.dim(1), 2 * s2.prediction.dim(1));
}

TEST(SrmStep, MissingStageFeatureIsStateError) {
  nn::Rng rng(2);
  Traceback tb(DecoderConfig{}, 3, 4, rng);
  EXPECT_THROW(tb.step_for_stage(3)(random_tensor({16, 16, 16}, 1), Tensor{}, o::Mode::Train), StateError);
  StageFeatures partial = default_stages(3);
  partial.pop_back();
  EXPECT_THROW(tb.run(random_tensor({16, 16, 16}, 1), partial, 64, 64, o::Mode::Train), StateError);
}

TEST(SrmStep, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::Rng rng(seed);
    SrmStep step(8, 8, 4, 3, 4, rng);
    Tensor cross = random_tensor({8, 2, 2}, seed + 10);
    Tensor feat = random_tensor({8, 4, 4}, seed + 11);
    cross.set_requires_grad(true);
    feat.set_requires_grad(true);
    nn::ParamSet ps;
    step.collect(ps, "srm");
    std::vector<Tensor> xs{cross, feat};
    for (auto& p : ps.params) xs.push_back(p.tensor);
    auto f = [&] {
      SrmStepOutput out = step(cross, feat, o::Mode::Train);
      return o::add(probe_sum(out.refined, seed), probe_sum(out.prediction, seed + 1));
    };
    GradCheckResult r = grad_check_all(f, xs, 1e-5, 12);
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(TracebackRun, OneIntermediatePerStageAtTargetSize) {
  nn::Rng rng(4);
  Traceback tb(DecoderConfig{}, 6, 4, rng);
  TracebackOutput out = tb.run(random_tensor({16, 16, 16}, 5), default_stages(6), 64, 64, o::Mode::Train);
  ASSERT_EQ(out.intermediates.size(), 3u);
  for (const auto& t : out.intermediates) EXPECT_EQ(t.shape(), (Shape{6, 64, 64}));
  EXPECT_EQ(out.final_prediction.shape(), (Shape{6, 64, 64}));
  EXPECT_TRUE(out.final_prediction.same_storage(out.intermediates.back()));
}

TEST(Model, AllToggleCombinationsKeepShapes) {
  for (bool cfm : {true, false}) {
    for (bool srm : {true, false}) {
      MtcpModel model(tiny_model(cfm, srm), 7);
      ModelOutput out = model.forward(random_tensor({3, 16, 16}, 8), o::Mode::Train);
      ASSERT_EQ(out.tasks.size(), 3u);
      const std::size_t channels[] = {6, 1, 3};
      for (std::size_t t = 0; t < 3; ++t) {
        EXPECT_EQ(out.tasks[t].prediction.shape(), (Shape{channels[t], 16, 16}));
        EXPECT_EQ(out.tasks[t].intermediates.size(), srm ? 2u : 0u);
        EXPECT_EQ(out.tasks[t].coherence.defined(), cfm);
      }
    }
  }
}

TEST(Model, EvalBatchNormModes) {
  Tensor image = random_tensor({3, 16, 16}, 21);
  ModelConfig cfg = tiny_model(true, true);
  MtcpModel sample(cfg, 7);
  Tensor y_eval = sample.forward(image, o::Mode::Eval).tasks[0].prediction;
  Tensor y_train = sample.forward(image, o::Mode::Train).tasks[0].prediction;
  for (std::size_t i = 0; i < y_eval.numel(); ++i) EXPECT_EQ(y_eval[i], y_train[i]);

  cfg.bn_sample_stats = false;
  MtcpModel running(cfg, 7);
  Tensor y_running = running.forward(image, o::Mode::Eval).tasks[0].prediction;
  bool differs = false;
  for (std::size_t i = 0; i < y_eval.numel(); ++i) differs = differs || y_running[i] != y_eval[i];
  EXPECT_TRUE(differs);
}

TEST(Model, DepthHeadStartsNearSceneMiddle) {
  MtcpModel model(tiny_model(true, true), 9);
  nn::ParamSet ps = model.parameters();
  bool found = false;
  for (const auto& p : ps.params) {
    if (p.name.rfind("srm.depth.", 0) == 0 && p.name.ends_with(".predict.bias")) {
      EXPECT_EQ(p.tensor[0], 5.5);
      found = true;
    }
  }
  EXPECT_TRUE(found);
}

TEST(Model, ParameterGradientFiniteAndNonZero) {
  for (bool srm : {true, false}) {
    MtcpModel model(tiny_model(true, srm), 10);
    Tensor img = random_tensor({3, 16, 16}, 11);
    backward([&] {
      ModelOutput out = model.forward(img, o::Mode::Train);
      Tensor total = out.tasks[0].coherence;
      for (std::size_t t = 0; t < out.tasks.size(); ++t) {
        total = o::add(total, probe_sum(out.tasks[t].prediction, t));
        for (const auto& i : out.tasks[t].intermediates) total = o::add(total, o::mean(i));
      }
      return total;
    });
    double norm = 0.0;
    for (const auto& p : model.parameters().params) {
      for (double g : p.tensor.grad()) {
        ASSERT_TRUE(std::isfinite(g)) << p.name;
        norm += g * g;
      }
    }
    EXPECT_GT(norm, 0.0);
  }
}

TEST(Model, RejectsWrongInputSize) {
  MtcpModel model(tiny_model(false, false), 12);
  EXPECT_THROW(model.forward(random_tensor({3, 8, 8}, 1), o::Mode::Eval), DimensionError);
}

TEST(Model, ConfigValidation) {
  ModelConfig cfg = tiny_model(true, true);
  cfg.tasks.resize(1);
  EXPECT_THROW(MtcpModel(cfg, 1), ConfigError);
  cfg = tiny_model(true, true);
  cfg.decoder.widths = {8, 6};
  EXPECT_THROW(MtcpModel(cfg, 1), ConfigError);
}

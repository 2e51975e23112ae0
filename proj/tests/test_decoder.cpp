#include <gtest/gtest.h>

#include <numeric>

#include "mtcp/decoder.hpp"
#include "mtcp/errors.hpp"
#include "mtcp/gradcheck.hpp"
#include "test_util.hpp"

using namespace mtcp;
namespace o = mtcp::ops;
using test::probe_sum;
using test::random_tensor;

namespace {

DecoderConfig small_decoder(std::size_t k = 2) {
  DecoderConfig cfg;
  cfg.num_stages = k;
  cfg.blocks_per_stage.assign(k, 1);
  cfg.widths.clear();
  for (std::size_t i = 0; i < k; ++i) cfg.widths.push_back(8 + 4 * i);
  cfg.window = 2;
  cfg.out_width = 8;
  return cfg;
}

}  // namespace

TEST(StageForward, ThreeStagesHalveResolution) {
  nn::Rng rng(1);
  DecoderConfig cfg;
  TaskDecoder dec(cfg, 8, rng);
  DecoderOutput out = dec.forward(random_tensor({8, 32, 32}, 2), o::Mode::Train);
  ASSERT_EQ(out.stages.size(), 3u);
  EXPECT_EQ(out.stages[0].shape(), (Shape{16, 32, 32}));
  EXPECT_EQ(out.stages[1].shape(), (Shape{24, 16, 16}));
  EXPECT_EQ(out.stages[2].shape(), (Shape{32, 8, 8}));
  EXPECT_EQ(out.features.shape(), (Shape{16, 32, 32}));
}

TEST(StageForward, WindowMustTileEveryStage) {
  DecoderConfig cfg;
  EXPECT_NO_THROW(cfg.validate(16, 16));
  EXPECT_THROW(cfg.validate(8, 8), ConfigError);  // stage 3 would be 2x2 under a 4x4 window
  cfg.window = 3;
  EXPECT_THROW(cfg.validate(32, 32), ConfigError);
  nn::Rng rng(3);
  TaskDecoder dec(cfg, 8, rng);
  EXPECT_THROW(dec.stage_forward(random_tensor({8, 32, 32}, 4), 1, o::Mode::Train), ConfigError);
}

TEST(StageForward, ValidateRejectsInconsistentLists) {
  DecoderConfig cfg;
  cfg.widths = {16, 24};
  EXPECT_THROW(cfg.validate(16, 16), ConfigError);
  cfg = DecoderConfig{};
  cfg.widths = {16, 24, 33};  // not divisible by 2 heads
  EXPECT_THROW(cfg.validate(16, 16), ConfigError);
}

TEST(TransformerBlock, ZeroOutputProjectionLeavesMlpPath) {
  nn::Rng rng(5);
  TransformerBlock block(8, 2, 2, rng);
  for (auto& v : block.out_projection().weight.values()) v = 0.0;
  for (auto& v : block.out_projection().bias.values()) v = 0.0;
  Tensor t = random_tensor({16, 8}, 6);
  Tensor y = block.forward_tokens(t, 4);
  Tensor expect = block.mlp_path(t);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
}

TEST(TransformerBlock, AttentionRowsSumToOne) {
  nn::Rng rng(7);
  TransformerBlock block(8, 2, 2, rng);
  std::vector<double> attn;
  block.forward_tokens(random_tensor({32, 8}, 8, 3.0), 16, &attn);
  // 2 windows x 2 heads x 16 queries x 16 keys
  ASSERT_EQ(attn.size(), 2u * 2u * 16u * 16u);
  for (std::size_t row = 0; row < attn.size() / 16; ++row) {
    double s = 0.0;
    for (std::size_t k = 0; k < 16; ++k) {
      EXPECT_GE(attn[row * 16 + k], 0.0);
      s += attn[row * 16 + k];
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(TransformerBlock, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::Rng rng(seed);
    TransformerBlock block(8, 2, 2, rng);
    Tensor x = random_tensor({8, 4, 4}, seed + 20);
    x.set_requires_grad(true);
    nn::ParamSet ps;
    block.collect(ps, "b");
    std::vector<Tensor> xs{x};
    for (auto& p : ps.params) xs.push_back(p.tensor);
    auto f = [&] { return probe_sum(block.forward(x, 2), seed); };
    GradCheckResult r = grad_check_all(f, xs, 1e-5, 16);
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Dfpn, EqualLogitsGiveUniformGates) {
  nn::Rng rng(9);
  TaskDecoder dec(DecoderConfig{}, 8, rng);
  for (double g : dec.gates()) EXPECT_NEAR(g, 1.0 / 3.0, 1e-15);
}

TEST(Dfpn, GatesSumToOne) {
  nn::Rng rng(10);
  TaskDecoder dec(DecoderConfig{}, 8, rng);
  for (int trial = 0; trial < 20; ++trial) {
    for (auto& v : dec.gate_logits().values()) v = rng.uniform(-5.0, 5.0);
    std::vector<double> g = dec.gates();
    EXPECT_NEAR(std::accumulate(g.begin(), g.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(Dfpn, SingleStageIsLateralConv) {
  nn::Rng rng(11);
  DecoderConfig cfg = small_decoder(1);
  TaskDecoder dec(cfg, 8, rng);
  Tensor x1 = random_tensor({8, 4, 4}, 12);
  Tensor y = dec.dfpn_fuse({x1});
  Tensor expect = dec.lateral(1)(x1);
  ASSERT_EQ(y.shape(), expect.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
}

TEST(Dfpn, MissingStagesIsStateError) {
  nn::Rng rng(13);
  TaskDecoder dec(small_decoder(2), 8, rng);
  EXPECT_THROW(dec.dfpn_fuse({random_tensor({8, 4, 4}, 1)}), StateError);
}

TEST(Dfpn, GateGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::Rng rng(seed);
    TaskDecoder dec(DecoderConfig{}, 8, rng);
    for (auto& v : dec.gate_logits().values()) v = rng.uniform(-1.0, 1.0);
    StageFeatures stages{random_tensor({16, 8, 8}, seed), random_tensor({24, 4, 4}, seed + 1),
                         random_tensor({32, 2, 2}, seed + 2)};
    auto f = [&] { return probe_sum(dec.dfpn_fuse(stages), seed); };
    GradCheckResult r = grad_check(f, dec.gate_logits(), 1e-5);
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(TaskDecoder, OutputMatchesStageOneSizeAcrossConfigs) {
  for (std::size_t k : {1u, 2u, 3u}) {
    for (std::size_t hw : {8u, 16u}) {
      nn::Rng rng(k * 10 + hw);
      DecoderConfig cfg = small_decoder(k);
      ASSERT_NO_THROW(cfg.validate(hw, hw));
      TaskDecoder dec(cfg, 8, rng);
      DecoderOutput out = dec.forward(random_tensor({8, hw, hw}, 1), o::Mode::Train);
      ASSERT_EQ(out.stages.size(), k);
      EXPECT_EQ(out.features.shape(), (Shape{8, hw, hw}));
      for (std::size_t i = 1; i < k; ++i) EXPECT_EQ(out.stages[i].dim(1) * 2, out.stages[i - 1].dim(1));
    }
  }
}

TEST(TaskDecoder, FullDecoderGradient) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::Rng rng(seed);
    TaskDecoder dec(small_decoder(2), 8, rng);
    Tensor x = random_tensor({8, 4, 4}, seed + 3);
    x.set_requires_grad(true);
    nn::ParamSet ps;
    dec.collect(ps, "d");
    std::vector<Tensor> xs{x};
    for (auto& p : ps.params) xs.push_back(p.tensor);
    auto f = [&] { return probe_sum(dec.forward(x, o::Mode::Train).features, seed); };
    GradCheckResult r = grad_check_all(f, xs, 1e-5, 8);
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

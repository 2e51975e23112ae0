#include <gtest/gtest.h>

#include <cmath>

#include "mtcp/coherence.hpp"
#include "mtcp/errors.hpp"
#include "mtcp/gradcheck.hpp"
#include "test_util.hpp"

using namespace mtcp;
namespace o = mtcp::ops;
using test::probe_sum;
using test::random_tensor;

namespace {

// out[c, p] = sum_d (sum_q a[c, q] b[d, q] / HW) b[d, p]
std::vector<double> gram_reference(const Tensor& a, const Tensor& b) {
  const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
  std::vector<double> out(c * hw, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t d = 0; d < c; ++d) {
      double g = 0.0;
      for (std::size_t q = 0; q < hw; ++q) g += a[ci * hw + q] * b[d * hw + q];
      g /= static_cast<double>(hw);
      for (std::size_t p = 0; p < hw; ++p) out[ci * hw + p] += g * b[d * hw + p];
    }
  }
  return out;
}

std::vector<Tensor> with_params(const nn::ParamSet& ps, std::vector<Tensor> xs) {
  for (const auto& p : ps.params) xs.push_back(p.tensor);
  return xs;
}

}  // namespace

TEST(Cbam, PreservesShapeAndBoundsAttention) {
  nn::Rng rng(1);
  Cbam cbam(8, 4, rng);
  CbamTrace trace;
  Tensor y = cbam(random_tensor({8, 5, 3}, 2, 4.0), &trace);
  EXPECT_EQ(y.shape(), (Shape{8, 5, 3}));
  EXPECT_EQ(trace.channel.shape(), (Shape{8, 1, 1}));
  EXPECT_EQ(trace.spatial.shape(), (Shape{1, 5, 3}));
  for (double v : trace.channel.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (double v : trace.spatial.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Cbam, ConstantInputSeesIdenticalDescriptors) {
  nn::Rng rng(3);
  Cbam cbam(4, 2, rng);
  // Each channel constant over space: mean-pool and max-pool coincide, so the
  // channel logits are twice the perceptron output of one descriptor.
  Tensor x = Tensor::zeros({4, 3, 3});
  const double levels[] = {0.5, -1.0, 2.0, 0.25};
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 9; ++p) x[c * 9 + p] = levels[c];
  CbamTrace trace;
  Tensor y = cbam(x, &trace);
  Tensor avg = o::reshape(o::mean_axis(o::reshape(x, {4, 9}), 1), {1, 4});
  Tensor mx = o::reshape(o::max_axis(o::reshape(x, {4, 9}), 1), {1, 4});
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(avg[c], mx[c]);
  for (std::size_t p = 1; p < 9; ++p) EXPECT_NEAR(trace.spatial[p], trace.spatial[0], 1e-15);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(y[c * 9], levels[c] * trace.channel[c] * trace.spatial[0], 1e-15);
  }
}

TEST(Cbam, RejectsIndivisibleReduction) {
  nn::Rng rng(4);
  EXPECT_THROW(Cbam(6, 4, rng), ConfigError);
  Cbam cbam(8, 4, rng);
  EXPECT_THROW(cbam(random_tensor({4, 2, 2}, 1)), DimensionError);
}

TEST(Cbam, BlockGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::Rng rng(seed);
    CbamBlock block(8, 4, true, rng);
    Tensor x = random_tensor({8, 4, 4}, seed + 7);
    x.set_requires_grad(true);
    nn::ParamSet ps;
    block.collect(ps, "c");
    auto f = [&] { return probe_sum(block(x, o::Mode::Train), seed); };
    GradCheckResult r = grad_check_all(f, with_params(ps, {x}), 1e-5, 16);
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(GateAux, ZeroGateGivesHalf) {
  nn::Rng rng(5);
  CoherenceFusion cfm(CfmConfig{8, 2, 4, true}, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    for (auto& v : cfm.gate(i).weight.values()) v = 0.0;
    for (auto& v : cfm.gate(i).bias.values()) v = 0.0;
  }
  std::vector<Tensor> aux{random_tensor({8, 3, 3}, 6), random_tensor({8, 3, 3}, 7)};
  Tensor g = cfm.gated_concat(aux);
  ASSERT_EQ(g.shape(), (Shape{16, 3, 3}));
  for (std::size_t i = 0; i < 72; ++i) {
    EXPECT_DOUBLE_EQ(g[i], 0.5 * aux[0][i]);
    EXPECT_DOUBLE_EQ(g[72 + i], 0.5 * aux[1][i]);
  }
  EXPECT_EQ(cfm.gate_aux(aux).shape(), (Shape{8, 3, 3}));
}

TEST(GateAux, SingleAuxiliaryNeedsNoConcat) {
  nn::Rng rng(8);
  CoherenceFusion cfm(CfmConfig{8, 1, 4, true}, rng);
  std::vector<Tensor> aux{random_tensor({8, 3, 3}, 9)};
  Tensor g = cfm.gated_concat(aux);
  Tensor expect = o::mul(aux[0], o::sigmoid(cfm.gate(0)(aux[0])));
  ASSERT_EQ(g.shape(), aux[0].shape());
  for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_EQ(g[i], expect[i]);
}

TEST(GateAux, EmptyListIsError) {
  nn::Rng rng(10);
  CoherenceFusion cfm(CfmConfig{8, 2, 4, true}, rng);
  EXPECT_THROW(cfm.gate_aux({}), ConfigError);
  EXPECT_THROW(CoherenceFusion(CfmConfig{8, 0, 4, true}, rng), ConfigError);
}

TEST(GateAux, TwoTaskGradient) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::Rng rng(seed);
    CoherenceFusion cfm(CfmConfig{8, 2, 4, true}, rng);
    std::vector<Tensor> aux{random_tensor({8, 3, 3}, seed + 1), random_tensor({8, 3, 3}, seed + 2)};
    for (auto& a : aux) a.set_requires_grad(true);
    nn::ParamSet ps;
    cfm.collect(ps, "cfm");
    auto f = [&] { return probe_sum(cfm.gate_aux(aux), seed); };
    GradCheckResult r = grad_check_all(f, with_params(ps, aux), 1e-5);
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(CoherenceLoss, IdenticalOppositeOrthogonal) {
  Tensor a = random_tensor({4, 3, 3}, 11);
  EXPECT_NEAR(coherence_loss(a, a).item(), 0.0, 1e-12);
  EXPECT_NEAR(coherence_loss(a, o::scale(a, -1.0)).item(), 2.0, 1e-12);
  Tensor e1 = Tensor::zeros({2, 2, 2});
  Tensor e2 = Tensor::zeros({2, 2, 2});
  for (std::size_t p = 0; p < 4; ++p) {
    e1[p] = 1.0;
    e2[4 + p] = 3.0;
  }
  EXPECT_NEAR(coherence_loss(e1, e2).item(), 1.0, 1e-12);
}

TEST(CoherenceLoss, SymmetricAndBounded) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor a = random_tensor({5, 4, 3}, seed);
    Tensor b = random_tensor({5, 4, 3}, seed + 500);
    const double ab = coherence_loss(a, b).item();
    EXPECT_NEAR(ab, coherence_loss(b, a).item(), 1e-15);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 2.0);
  }
}

TEST(CoherenceLoss, ShapeMismatchIsError) {
  EXPECT_THROW(coherence_loss(random_tensor({4, 3, 3}, 1), random_tensor({4, 3, 2}, 2)), DimensionError);
}

TEST(CoherenceLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor a = random_tensor({4, 3, 3}, seed);
    Tensor b = random_tensor({4, 3, 3}, seed + 50);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto f = [&] { return coherence_loss(a, b); };
    EXPECT_LE(grad_check_all(f, {a, b}, 1e-5).max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(GramFuse, ZeroAuxiliaryGivesZero) {
  Tensor y = gram_fuse(random_tensor({3, 4, 4}, 1), Tensor::zeros({3, 4, 4}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(GramFuse, SingleChannelIsScaledAuxiliary) {
  Tensor a = random_tensor({1, 3, 4}, 2);
  Tensor b = random_tensor({1, 3, 4}, 3);
  double m = 0.0;
  for (std::size_t p = 0; p < 12; ++p) m += a[p] * b[p];
  m /= 12.0;
  Tensor y = gram_fuse(a, b);
  for (std::size_t p = 0; p < 12; ++p) EXPECT_NEAR(y[p], m * b[p], 1e-15);
}

TEST(GramFuse, MatchesBruteForceLoops) {
  nn::Rng sizes(4);
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const std::size_t c = trial == 0 ? 4 : 1 + sizes.below(4);
    const std::size_t h = trial == 0 ? 6 : 1 + sizes.below(6);
    const std::size_t w = trial == 0 ? 6 : 1 + sizes.below(6);
    Tensor a = random_tensor({c, h, w}, 300 + trial, 2.0);
    Tensor b = random_tensor({c, h, w}, 400 + trial, 2.0);
    Tensor y = gram_fuse(a, b);
    std::vector<double> ref = gram_reference(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-9);
  }
}

TEST(GramFuse, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor a = random_tensor({4, 3, 3}, seed);
    Tensor b = random_tensor({4, 3, 3}, seed + 60);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto f = [&] { return probe_sum(gram_fuse(a, b), seed); };
    EXPECT_LE(grad_check_all(f, {a, b}, 1e-5).max_rel_error, 1e-4) << "seed " << seed;
  }
}

class CfmForward : public ::testing::TestWithParam<std::size_t> {};

TEST_P(CfmForward, ShapePreservingAndDeterministic) {
  const std::size_t tasks = GetParam();
  nn::Rng rng(12);
  CoherenceFusion cfm(CfmConfig{8, tasks - 1, 4, true}, rng);
  Tensor main = random_tensor({8, 4, 4}, 13);
  std::vector<Tensor> aux;
  for (std::size_t i = 0; i + 1 < tasks; ++i) aux.push_back(random_tensor({8, 4, 4}, 14 + i));
  CfmOutput a = cfm.forward(main, aux, o::Mode::Train);
  CfmOutput b = cfm.forward(main, aux, o::Mode::Train);
  EXPECT_EQ(a.fused.shape(), main.shape());
  EXPECT_EQ(a.coherence.numel(), 1u);
  EXPECT_GE(a.coherence.item(), 0.0);
  EXPECT_LE(a.coherence.item(), 2.0);
  for (std::size_t i = 0; i < a.fused.numel(); ++i) EXPECT_EQ(a.fused[i], b.fused[i]);
  EXPECT_EQ(a.coherence.item(), b.coherence.item());
}

TEST_P(CfmForward, EndToEndGradient) {
  const std::size_t tasks = GetParam();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::Rng rng(seed);
    CoherenceFusion cfm(CfmConfig{8, tasks - 1, 4, true}, rng);
    Tensor main = random_tensor({8, 3, 3}, seed + 30);
    std::vector<Tensor> inputs{main};
    std::vector<Tensor> aux;
    for (std::size_t i = 0; i + 1 < tasks; ++i) aux.push_back(random_tensor({8, 3, 3}, seed + 40 + i));
    for (auto& t : aux) inputs.push_back(t);
    for (auto& t : inputs) t.set_requires_grad(true);
    nn::ParamSet ps;
    cfm.collect(ps, "cfm");
    auto f = [&] {
      CfmOutput out = cfm.forward(main, aux, o::Mode::Train);
      return o::add(probe_sum(out.fused, seed), out.coherence);
    };
    GradCheckResult r = grad_check_all(f, with_params(ps, inputs), 1e-5, 12);
    EXPECT_LE(r.max_rel_error, 1e-4) << "tasks " << tasks << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Tasks, CfmForward, ::testing::Values(2u, 3u));

TEST(CfmForwardResidual, FlagAddsMainInput) {
  nn::Rng rng_a(20), rng_b(20);
  CoherenceFusion with(CfmConfig{8, 1, 4, true}, rng_a);
  CoherenceFusion without(CfmConfig{8, 1, 4, false}, rng_b);
  Tensor main = random_tensor({8, 3, 3}, 21);
  std::vector<Tensor> aux{random_tensor({8, 3, 3}, 22)};
  Tensor y1 = with.forward(main, aux, o::Mode::Train).fused;
  Tensor y0 = without.forward(main, aux, o::Mode::Train).fused;
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_NEAR(y1[i], y0[i] + main[i], 1e-12);
}

TEST(CfmForwardResidual, MismatchedAuxiliaryIsError) {
  nn::Rng rng(23);
  CoherenceFusion cfm(CfmConfig{8, 1, 4, true}, rng);
  std::vector<Tensor> aux{random_tensor({8, 2, 2}, 1)};
  EXPECT_THROW(cfm.forward(random_tensor({8, 3, 3}, 2), aux, o::Mode::Train), DimensionError);
}

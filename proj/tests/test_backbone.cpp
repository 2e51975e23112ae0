#include <gtest/gtest.h>

#include <cmath>

#include "mtcp/backbone.hpp"
#include "mtcp/errors.hpp"
#include "mtcp/gradcheck.hpp"
#include "test_util.hpp"

using namespace mtcp;
namespace o = mtcp::ops;
using test::probe_sum;
using test::random_tensor;

namespace {

BackboneConfig small_config(std::size_t c = 8, std::size_t n = 3, std::size_t hw = 16) {
  BackboneConfig cfg;
  cfg.channels = c;
  cfg.num_queries = n;
  cfg.height = hw;
  cfg.width = hw;
  return cfg;
}

// R[c, p] = sum_n (sum_q P[c, q] M[n, q]) M[n, p], evaluated with explicit loops.
std::vector<double> fuse_reference(const Tensor& p, const Tensor& m) {
  const std::size_t c = p.dim(0), n = m.dim(0), hw = p.dim(1) * p.dim(2);
  std::vector<double> a(c * n, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t q = 0; q < hw; ++q) a[ci * n + ni] += p[ci * hw + q] * m[ni * hw + q];
  std::vector<double> r(c * hw, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t q = 0; q < hw; ++q) r[ci * hw + q] += a[ci * n + ni] * m[ni * hw + q];
  return r;
}

}  // namespace

TEST(BackboneEncode, QuartersSpatialSize) {
  nn::Rng rng(1);
  Backbone bb(BackboneConfig{}, rng);
  Tensor p = bb.encode(random_tensor({3, 64, 64}, 2), o::Mode::Train);
  EXPECT_EQ(p.shape(), (Shape{32, 16, 16}));
}

TEST(BackboneEncode, RejectsIndivisibleInput) {
  nn::Rng rng(1);
  Backbone bb(small_config(), rng);
  EXPECT_THROW(bb.encode(random_tensor({3, 18, 16}, 2), o::Mode::Train), ConfigError);
  EXPECT_THROW(Backbone(small_config(8, 3, 14), rng), ConfigError);
  EXPECT_THROW(Backbone(small_config(4, 3, 16), rng), ConfigError);
  EXPECT_THROW(Backbone(small_config(8, 0, 16), rng), ConfigError);
}

TEST(BackboneEncode, ZeroImageGivesFiniteOutput) {
  nn::Rng rng(3);
  Backbone bb(small_config(), rng);
  EXPECT_FALSE(bb.final_conv().bias.defined());  // absorbed by the following batch norm
  Tensor p = bb.encode(Tensor::zeros({3, 16, 16}), o::Mode::Train);
  for (double v : p.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(BackboneEncode, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::Rng rng(seed);
    Backbone bb(small_config(8, 3, 8), rng);
    Tensor img = random_tensor({3, 8, 8}, seed + 10);
    img.set_requires_grad(true);
    nn::ParamSet ps;
    bb.collect(ps, "bb");
    auto f = [&] { return probe_sum(bb.encode(img, o::Mode::Train), seed); };
    std::vector<Tensor> xs{img};
    for (auto& p : ps.params) xs.push_back(p.tensor);
    GradCheckResult r = grad_check_all(f, xs, 1e-5, 12);
    EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed << " analytic " << r.analytic << " numeric " << r.numeric;
  }
}

TEST(MaskQueries, ZeroQueriesGiveHalf) {
  nn::Rng rng(4);
  Backbone bb(small_config(), rng);
  for (auto& q : bb.queries().values()) q = 0.0;
  Tensor m = bb.mask_queries(random_tensor({8, 4, 4}, 5));
  EXPECT_EQ(m.shape(), (Shape{3, 4, 4}));
  for (double v : m.values()) EXPECT_EQ(v, 0.5);
}

TEST(MaskQueries, SingleQueryShapeAndRange) {
  nn::Rng rng(5);
  Backbone bb(small_config(8, 1), rng);
  Tensor m = bb.mask_queries(random_tensor({8, 4, 4}, 6, 3.0));
  EXPECT_EQ(m.shape(), (Shape{1, 4, 4}));
  for (double v : m.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(FuseInstances, UnitMaskBroadcastsGlobalSum) {
  Tensor p = random_tensor({3, 4, 5}, 7);
  Tensor m = Tensor::full({1, 4, 5}, 1.0);
  Tensor r = fuse_instances(p, m);
  ASSERT_EQ(r.shape(), p.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    double total = 0.0;
    for (std::size_t q = 0; q < 20; ++q) total += p[c * 20 + q];
    for (std::size_t q = 0; q < 20; ++q) EXPECT_NEAR(r[c * 20 + q], total, 1e-12);
  }
}

TEST(FuseInstances, ZeroMaskGivesZero) {
  Tensor r = fuse_instances(random_tensor({4, 3, 3}, 8), Tensor::zeros({2, 3, 3}));
  for (double v : r.values()) EXPECT_EQ(v, 0.0);
}

TEST(FuseInstances, MatchesBruteForceLoops) {
  nn::Rng sizes(9);
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + sizes.below(4), n = 1 + sizes.below(4);
    const std::size_t h = 1 + sizes.below(6), w = 1 + sizes.below(6);
    Tensor p = random_tensor({c, h, w}, 100 + trial, 2.0);
    Tensor m = random_tensor({n, h, w}, 200 + trial);
    Tensor r = fuse_instances(p, m);
    std::vector<double> ref = fuse_reference(p, m);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r[i], ref[i], 1e-9);
  }
}

TEST(FuseInstances, BilinearInEmbeddingsAndMasks) {
  Tensor p = random_tensor({4, 5, 6}, 10);
  Tensor m = random_tensor({3, 5, 6}, 11);
  Tensor base = fuse_instances(p, m);
  Tensor scaled_p = fuse_instances(o::scale(p, 2.5), m);
  Tensor scaled_m = fuse_instances(p, o::scale(m, -1.5));
  for (std::size_t i = 0; i < base.numel(); ++i) {
    EXPECT_NEAR(scaled_p[i], 2.5 * base[i], 1e-9);
    // R is quadratic in M.
    EXPECT_NEAR(scaled_m[i], 2.25 * base[i], 1e-9);
  }
}

TEST(FuseInstances, RejectsMismatchedGrids) {
  EXPECT_THROW(fuse_instances(random_tensor({4, 5, 6}, 1), random_tensor({3, 5, 5}, 2)), DimensionError);
}

TEST(BackboneForward, ShapesHoldAcrossConfigs) {
  for (std::size_t c : {8u, 16u}) {
    for (std::size_t n : {1u, 4u}) {
      for (std::size_t hw : {8u, 16u, 24u}) {
        nn::Rng rng(c + n + hw);
        Backbone bb(small_config(c, n, hw), rng);
        BackboneOutput out = bb.forward(random_tensor({3, hw, hw}, 3), o::Mode::Train);
        EXPECT_EQ(out.pixel_embeddings.shape(), (Shape{c, hw / 4, hw / 4}));
        EXPECT_EQ(out.masks.shape(), (Shape{n, hw / 4, hw / 4}));
        EXPECT_EQ(out.fused.shape(), out.pixel_embeddings.shape());
        for (double v : out.masks.values()) {
          EXPECT_GT(v, 0.0);
          EXPECT_LT(v, 1.0);
        }
      }
    }
  }
}

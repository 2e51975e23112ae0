#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mtcp/errors.hpp"
#include "mtcp/lps.hpp"
#include "mtcp/nn.hpp"

using namespace mtcp;
using namespace mtcp::lps;

namespace {

std::vector<Tensor> scalars(std::initializer_list<double> values) {
  std::vector<Tensor> out;
  for (double v : values) out.push_back(Tensor::scalar(v));
  return out;
}

LossHistory history_of(const std::vector<std::vector<double>>& epochs) {
  LossHistory h(epochs.front().size());
  for (const auto& e : epochs) h.record(e);
  return h;
}

// prod_k (L_i^{n-k+1} L^{n-k}) / (L_i^{n-k} L^{n-k+1}) from raw epoch rows.
std::vector<double> product_oracle(const std::vector<std::vector<double>>& rows, std::size_t h) {
  const std::size_t n = rows.size(), t = rows.front().size();
  std::vector<double> totals;
  for (const auto& r : rows) totals.push_back(std::accumulate(r.begin(), r.end(), 0.0));
  std::vector<double> w(t, 1.0);
  for (std::size_t k = 1; k <= h; ++k) {
    const std::size_t now = n - k, before = n - k - 1;  // 0-based rows
    for (std::size_t i = 0; i < t; ++i) w[i] *= (rows[now][i] * totals[before]) / (rows[before][i] * totals[now]);
  }
  return w;
}

double population_variance(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

std::vector<std::size_t> argsort(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return idx;
}

}  // namespace

TEST(WeightedLoss, HandCases) {
  const double ew[] = {0.5, 0.5};
  EXPECT_DOUBLE_EQ(weighted_loss(ew, scalars({2, 4})).item(), 3.0);
  const double pick[] = {0.0, 1.0};
  EXPECT_DOUBLE_EQ(weighted_loss(pick, scalars({7, 4})).item(), 4.0);
  const double ma[] = {0.3, 0.7};
  EXPECT_DOUBLE_EQ(weighted_loss(ma, scalars({1, 1})).item(), 1.0);
  EXPECT_THROW(weighted_loss(ma, scalars({1})), DimensionError);
}

TEST(LogMtlLoss, HandCases) {
  const double zero[] = {0.0, 0.0};
  EXPECT_EQ(log_mtl_loss(zero, scalars({3, 9})).item(), 0.0);
  const double ones[] = {1.0, 1.0};
  EXPECT_NEAR(log_mtl_loss(ones, scalars({2, 3})).item(), std::numbers::ln2 * 5.0, 1e-12);
  EXPECT_NEAR(log_mtl_loss(ones, scalars({2, 3})).item(), 3.4657, 1e-4);
  const double e[] = {std::numbers::e - 1.0, 0.0};
  EXPECT_NEAR(log_mtl_loss(e, scalars({1, 5})).item(), 1.0, 1e-15);
  const double neg[] = {-0.1, 1.0};
  EXPECT_THROW(log_mtl_loss(neg, scalars({1, 1})), ConfigError);
}

TEST(UpdateWeights, EqualRatesGiveOnes) {
  LossHistory h = history_of({{8, 4, 2}, {4, 2, 1}, {2, 1, 0.5}, {1, 0.5, 0.25}});
  for (std::size_t hl : {1u, 2u, 3u}) {
    auto w = update_weights(h, hl);
    ASSERT_TRUE(w);
    for (double v : *w) EXPECT_NEAR(v, 1.0, 1e-15);
  }
}

TEST(UpdateWeights, WorkedCase) {
  LossHistory h = history_of({{4, 1}, {2, 1}, {1, 1}});
  auto w = update_weights(h, 2);
  ASSERT_TRUE(w);
  EXPECT_NEAR((*w)[0], 0.625, 1e-15);
  EXPECT_NEAR((*w)[1], 2.5, 1e-15);
  auto t = update_weights_telescoped(h, 2);
  EXPECT_NEAR((*t)[0], (1.0 / 4.0) / (2.0 / 5.0), 1e-15);
  EXPECT_NEAR((*t)[1], (1.0 / 1.0) / (2.0 / 5.0), 1e-15);
}

TEST(UpdateWeights, InsufficientHistoryIsWarmup) {
  LossHistory h = history_of({{4, 1}, {2, 1}});
  EXPECT_FALSE(update_weights(h, 2));
  EXPECT_FALSE(update_weights_telescoped(h, 2));
  EXPECT_TRUE(update_weights(h, 1));
}

TEST(UpdateWeights, ProductTelescopedAndOracleAgree) {
  nn::Rng rng(2024);
  const std::size_t tasks[] = {2, 3, 4};
  const std::size_t lengths[] = {1, 2, 3, 5};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = tasks[rng.below(3)], h = lengths[rng.below(4)];
    const std::size_t n = h + 1 + rng.below(3);
    std::vector<std::vector<double>> rows(n, std::vector<double>(t));
    for (auto& r : rows)
      for (auto& v : r) v = std::exp(rng.uniform(std::log(0.05), std::log(5.0)));
    LossHistory hist = history_of(rows);
    auto prod = update_weights(hist, h);
    auto tele = update_weights_telescoped(hist, h);
    ASSERT_TRUE(prod && tele);
    std::vector<double> oracle = product_oracle(rows, h);
    for (std::size_t i = 0; i < t; ++i) {
      EXPECT_NEAR((*prod)[i], oracle[i], 1e-12);
      EXPECT_NEAR((*prod)[i], (*tele)[i], 1e-12);
    }
  }
}

TEST(UpdateWeights, FloorKeepsSolvedTasksFinite) {
  LossHistory h(2);
  const double a[] = {1.0, 0.0};
  const double b[] = {0.5, 0.0};
  h.record(a);
  h.record(b);
  auto w = update_weights(h, 1);
  ASSERT_TRUE(w);
  for (double v : *w) EXPECT_TRUE(std::isfinite(v));
}

TEST(SpreadAdjust, IdentityCollapseAndWorkedCase) {
  const std::vector<double> raw{0.625, 2.5};
  SpreadResult one = spread_adjust(raw, 1.0);
  EXPECT_EQ(one.adjusted, raw);
  SpreadResult zero = spread_adjust(raw, 0.0);
  for (double v : zero.adjusted) EXPECT_EQ(v, zero.mean);
  SpreadResult s = spread_adjust(raw, 2.5);
  EXPECT_DOUBLE_EQ(s.mean, 1.5625);
  EXPECT_DOUBLE_EQ(s.pre_clamp[0], -0.78125);
  EXPECT_DOUBLE_EQ(s.pre_clamp[1], 3.90625);
  EXPECT_EQ(s.adjusted[0], 0.0);
  EXPECT_DOUBLE_EQ(s.adjusted[1], 3.90625);
  EXPECT_THROW(spread_adjust(raw, -1.0), ConfigError);
}

TEST(SpreadAdjust, AlgebraicProperties) {
  nn::Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = 2 + rng.below(5);
    std::vector<double> raw(t);
    for (auto& v : raw) v = rng.uniform(0.0, 4.0);
    const double raw_mean = std::accumulate(raw.begin(), raw.end(), 0.0) / static_cast<double>(t);
    const double ka = rng.uniform(0.0, 10.0), kb = rng.uniform(0.0, 10.0);
    SpreadResult a = spread_adjust(raw, std::max(ka, kb));
    SpreadResult b = spread_adjust(raw, std::min(ka, kb));
    const double pre_mean = std::accumulate(a.pre_clamp.begin(), a.pre_clamp.end(), 0.0) / static_cast<double>(t);
    EXPECT_NEAR(pre_mean, raw_mean, 1e-12);
    EXPECT_GE(population_variance(a.pre_clamp), population_variance(b.pre_clamp));
    EXPECT_NEAR(std::accumulate(a.deviations.begin(), a.deviations.end(), 0.0), 0.0, 1e-12);
    if (ka > 0.0 && kb > 0.0) {
      EXPECT_EQ(argsort(a.pre_clamp), argsort(raw));
    }
    for (double v : a.adjusted) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 10.0);
    }
  }
}

TEST(SpreadAdjust, EqualWeightsKeepVarianceZero) {
  const std::vector<double> raw(4, 1.7);
  EXPECT_EQ(population_variance(spread_adjust(raw, 9.0).pre_clamp), 0.0);
}

TEST(TotalLoss, HandCases) {
  const double zero[] = {0.0, 0.0};
  EXPECT_EQ(total_loss(SchemeKind::LPS, zero, scalars({3, 4}), {}, {}, 0.0).item(), 0.0);
  const double ew[] = {0.5, 0.5};
  std::vector<std::vector<Tensor>> inter{scalars({1}), scalars({1})};
  EXPECT_DOUBLE_EQ(total_loss(SchemeKind::EW, ew, scalars({2, 4}), inter, {}, 0.0).item(), 5.0);
  std::vector<std::vector<Tensor>> zeros{scalars({0, 0}), scalars({0, 0})};
  auto coh = scalars({0.25, 0.5});
  const double main = weighted_loss(ew, scalars({2, 4})).item();
  EXPECT_DOUBLE_EQ(total_loss(SchemeKind::EW, ew, scalars({2, 4}), zeros, coh, 2.0).item(), main + 1.5);
  std::vector<std::vector<Tensor>> ragged{scalars({1, 1}), scalars({1})};
  EXPECT_THROW(total_loss(SchemeKind::EW, ew, scalars({2, 4}), ragged, {}, 0.0), DimensionError);
  std::vector<std::vector<Tensor>> short_grid{scalars({1})};
  EXPECT_THROW(total_loss(SchemeKind::EW, ew, scalars({2, 4}), short_grid, {}, 0.0), DimensionError);
}

TEST(TotalLoss, EqualWeightingIsPlainMean) {
  LossScheduler ew(SchemeKind::EW, 3);
  auto losses = scalars({0.3, 1.2, 2.1});
  EXPECT_NEAR(ew.total(losses, {}, {}, 0.0).item(), (0.3 + 1.2 + 2.1) / 3.0, 1e-15);
}

TEST(LossScheduler, WarmupKeepsOnes) {
  LossScheduler s(SchemeKind::LPS, 2, LpsParams{3, 2.5});
  const double l[] = {4.0, 1.0};
  s.epoch_end(l);
  EXPECT_EQ(s.weights(), (std::vector<double>{1.0, 1.0}));
  EXPECT_TRUE(s.trajectory().back().warmup);
}

TEST(LossScheduler, ConstantLossesKeepOnes) {
  for (double kappa : {0.0, 1.0, 2.5, 7.5}) {
    LossScheduler s(SchemeKind::LPS, 3, LpsParams{3, kappa});
    const double l[] = {0.7, 1.4, 0.2};
    for (int e = 0; e < 8; ++e) s.epoch_end(l);
    for (double w : s.weights()) EXPECT_DOUBLE_EQ(w, 1.0);
  }
}

TEST(LossScheduler, WorkedCaseReachesLog) {
  LossScheduler s(SchemeKind::LPS, 2, LpsParams{2, 2.5});
  const double e1[] = {4, 1}, e2[] = {2, 1}, e3[] = {1, 1};
  s.epoch_end(e1);
  s.epoch_end(e2);
  s.epoch_end(e3);
  const WeightRecord& r = s.trajectory().back();
  EXPECT_FALSE(r.warmup);
  EXPECT_EQ(r.epoch, 3u);
  EXPECT_DOUBLE_EQ(r.raw[0], 0.625);
  EXPECT_DOUBLE_EQ(r.pre_clamp[0], -0.78125);
  EXPECT_EQ(r.weights[0], 0.0);
  EXPECT_DOUBLE_EQ(r.weights[1], 3.90625);
  EXPECT_EQ(s.weights(), r.weights);
}

TEST(LossScheduler, FixedSchemes) {
  LossScheduler ew(SchemeKind::EW, 4);
  LossScheduler ls(SchemeKind::LogSmoothing, 2);
  LossScheduler ma(SchemeKind::MA, 2, {}, {0.3, 0.7});
  const double l4[] = {1, 2, 3, 4}, l2a[] = {4, 1}, l2b[] = {1, 1};
  for (int e = 0; e < 6; ++e) {
    ew.epoch_end(l4);
    ls.epoch_end(e % 2 ? l2a : l2b);
    ma.epoch_end(e % 2 ? l2a : l2b);
  }
  for (double w : ew.weights()) EXPECT_EQ(w, 0.25);
  for (double w : ls.weights()) EXPECT_EQ(w, 1.0);
  EXPECT_EQ(ma.weights(), (std::vector<double>{0.3, 0.7}));
  EXPECT_THROW(LossScheduler(SchemeKind::MA, 2, {}, {0.3}), ConfigError);
  EXPECT_THROW(LossScheduler(SchemeKind::MA, 2, {}, {0.3, -1.0}), ConfigError);
}

TEST(LossScheduler, PrioritizationOnlyUsesLinearTerm) {
  LossScheduler p(SchemeKind::PrioritizationOnly, 2, LpsParams{1, 1.0});
  const double e1[] = {2, 1}, e2[] = {1, 1};
  p.epoch_end(e1);
  p.epoch_end(e2);
  // w~ = (0.5 / (2/3), 1 / (2/3)) = (0.75, 1.5)
  EXPECT_NEAR(p.weights()[0], 0.75, 1e-15);
  EXPECT_NEAR(p.weights()[1], 1.5, 1e-15);
  auto losses = scalars({2.0, 3.0});
  EXPECT_NEAR(p.total(losses, {}, {}, 0.0).item(), 0.75 * 2.0 + 1.5 * 3.0, 1e-12);
}

TEST(SchemeNames, RoundTrip) {
  for (SchemeKind k : {SchemeKind::EW, SchemeKind::MA, SchemeKind::LogSmoothing, SchemeKind::PrioritizationOnly,
                       SchemeKind::LPS}) {
    EXPECT_EQ(parse_scheme(scheme_name(k)), k);
  }
  EXPECT_EQ(parse_scheme("LPS"), SchemeKind::LPS);
  EXPECT_THROW(parse_scheme("uncertainty"), ConfigError);
}

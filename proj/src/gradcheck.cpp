#include "mtcp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mtcp/errors.hpp"
#include "mtcp/nn.hpp"
#include "mtcp/tape.hpp"

namespace mtcp {

namespace {

std::vector<std::vector<double>> analytic_grads(const std::function<Tensor()>& f, std::vector<Tensor>& xs) {
  for (auto& x : xs) {
    if (!x.requires_grad()) x.set_requires_grad(true);
    x.zero_grad();
  }
  backward(f);
  std::vector<std::vector<double>> grads;
  for (auto& x : xs) {
    grads.emplace_back(x.grad().begin(), x.grad().end());
    x.zero_grad();
  }
  return grads;
}

double eval(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  Tensor y = f();
  if (y.numel() != 1) throw DimensionError("grad_check: function must return a scalar");
  return y.item();
}

void record(GradCheckResult& best, double a, double numeric, std::size_t index) {
  const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
  ++best.checked;
  if (err >= best.max_rel_error) {
    best.max_rel_error = err;
    best.worst_index = index;
    best.analytic = a;
    best.numeric = numeric;
  }
}

void probe(const std::function<Tensor()>& f, Tensor& x, const std::vector<double>& grad, double h,
           std::size_t max_coords, GradCheckResult& best) {
  const std::size_t n = x.numel();
  const std::size_t count = max_coords == 0 ? n : std::min(n, max_coords);
  const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(count, 1));
  for (std::size_t c = 0, i = 0; c < count && i < n; ++c, i += stride) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = eval(f);
    x[i] = saved - h;
    const double fm = eval(f);
    x[i] = saved;
    record(best, grad[i], (fp - fm) / (2.0 * h), i);
  }
}

// Ridders' extrapolation of central differences along v, starting at step h
// and shrinking by 1.4 per level. Returns the estimate whose extrapolation
// error estimate is smallest.
double ridders(const std::function<double(double)>& central, double h) {
  constexpr int kLevels = 10;
  constexpr double kShrink = 1.4, kShrink2 = kShrink * kShrink, kSafe = 2.0;
  double table[kLevels][kLevels];
  table[0][0] = central(h);
  double best = table[0][0];
  double err = std::numeric_limits<double>::max();
  for (int i = 1; i < kLevels; ++i) {
    h /= kShrink;
    table[0][i] = central(h);
    double fac = kShrink2;
    for (int j = 1; j <= i; ++j) {
      table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink2;
      const double e = std::max(std::abs(table[j][i] - table[j - 1][i]), std::abs(table[j][i] - table[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = table[j][i];
      }
    }
    if (std::abs(table[i][i] - table[i - 1][i - 1]) >= kSafe * err) break;
  }
  return best;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor x, double h, std::size_t max_coords) {
  return grad_check_all(f, {std::move(x)}, h, max_coords);
}

GradCheckResult grad_check_all(const std::function<Tensor()>& f, std::vector<Tensor> xs, double h,
                               std::size_t max_coords_each) {
  auto grads = analytic_grads(f, xs);
  GradCheckResult result;
  for (std::size_t k = 0; k < xs.size(); ++k) probe(f, xs[k], grads[k], h, max_coords_each, result);
  return result;
}

GradCheckResult directional_grad_check(const std::function<Tensor()>& f, std::vector<Tensor> xs, double h,
                                       std::uint64_t seed) {
  auto grads = analytic_grads(f, xs);
  nn::Rng rng(seed);
  GradCheckResult result;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    Tensor& x = xs[k];
    std::vector<double> v(x.numel());
    double norm = 0.0;
    for (double& e : v) {
      e = rng.normal();
      norm += e * e;
    }
    norm = std::sqrt(norm);
    double a = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] /= norm;
      a += grads[k][i] * v[i];
    }
    const std::vector<double> saved(x.values().begin(), x.values().end());
    auto central = [&](double step) {
      for (std::size_t i = 0; i < v.size(); ++i) x[i] = saved[i] + step * v[i];
      const double fp = eval(f);
      for (std::size_t i = 0; i < v.size(); ++i) x[i] = saved[i] - step * v[i];
      const double fm = eval(f);
      return (fp - fm) / (2.0 * step);
    };
    const double numeric = ridders(central, h);
    std::copy(saved.begin(), saved.end(), x.values().begin());
    record(result, a, numeric, k);
  }
  return result;
}

}  // namespace mtcp

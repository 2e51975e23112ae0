#include "mtcp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "gemm.hpp"
#include "mtcp/errors.hpp"
#include "mtcp/tape.hpp"

namespace mtcp::ops {

namespace {

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by '") + op + "'");
  }
}

// Validates the output and, when recording, attaches the backward closure.
Tensor finish(const char* op, Tensor out, std::vector<Tensor> inputs, std::function<void()> backward) {
  check_finite(out, op);
  bool rec = active_tape() != nullptr;
  if (rec) {
    rec = false;
    for (const auto& t : inputs)
      if (t.defined() && t.requires_grad()) rec = true;
  }
  if (rec) {
    out.set_requires_grad(true);
    active_tape()->record(op, std::move(inputs), out, std::move(backward));
  }
  return out;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// outer x axis x inner factorisation of a shape around one axis
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const std::size_t r = a.size();
  Broadcast bc;
  bc.out.resize(r);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t d = r; d-- > 0;) {
    if (a[d] != b[d] && a[d] != 1 && b[d] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[d] = std::max(a[d], b[d]);
    bc.stride_a[d] = a[d] == 1 ? 0 : sa;
    bc.stride_b[d] = b[d] == 1 ? 0 : sb;
    sa *= a[d];
    sb *= b[d];
  }
  return bc;
}

template <class F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t r = bc.out.size();
  const std::size_t n = shape_numel(bc.out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    std::vector<double> v(n);
    auto av = a.values();
    auto bv = b.values();
    switch (kind) {
      case BinaryKind::Add:
        for (std::size_t i = 0; i < n; ++i) v[i] = av[i] + bv[i];
        break;
      case BinaryKind::Sub:
        for (std::size_t i = 0; i < n; ++i) v[i] = av[i] - bv[i];
        break;
      case BinaryKind::Mul:
        for (std::size_t i = 0; i < n; ++i) v[i] = av[i] * bv[i];
        break;
    }
    Tensor out = Tensor::from(a.shape(), std::move(v));
    return finish(op, out, {a, b}, [a, b, out, kind]() mutable {
      auto g = out.grad();
      const std::size_t n = g.size();
      if (a.requires_grad()) {
        auto ga = a.grad();
        if (kind == BinaryKind::Mul) {
          auto bv = b.values();
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        if (kind == BinaryKind::Mul) {
          auto av = a.values();
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
        } else if (kind == BinaryKind::Sub) {
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        }
      }
    });
  }

  Broadcast bc = make_broadcast(a.shape(), b.shape(), op);
  std::vector<double> v(shape_numel(bc.out));
  auto av = a.values();
  auto bv = b.values();
  for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case BinaryKind::Add: v[i] = av[ia] + bv[ib]; break;
      case BinaryKind::Sub: v[i] = av[ia] - bv[ib]; break;
      case BinaryKind::Mul: v[i] = av[ia] * bv[ib]; break;
    }
  });
  Tensor out = Tensor::from(bc.out, std::move(v));
  return finish(op, out, {a, b}, [a, b, out, kind, bc]() mutable {
    auto g = out.grad();
    auto av = a.values();
    auto bv = b.values();
    const bool ra = a.requires_grad(), rb = b.requires_grad();
    std::span<double> ga = ra ? a.grad() : std::span<double>{};
    std::span<double> gb = rb ? b.grad() : std::span<double>{};
    for_each_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinaryKind::Add:
          if (ra) ga[ia] += g[i];
          if (rb) gb[ib] += g[i];
          break;
        case BinaryKind::Sub:
          if (ra) ga[ia] += g[i];
          if (rb) gb[ib] -= g[i];
          break;
        case BinaryKind::Mul:
          if (ra) ga[ia] += g[i] * bv[ib];
          if (rb) gb[ib] += g[i] * av[ia];
          break;
      }
    });
  });
}

// Elementwise unary op given value and derivative-from-(input, output).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.numel();
  std::vector<double> v(n);
  auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) v[i] = fwd(xv[i]);
  Tensor out = Tensor::from(x.shape(), std::move(v));
  return finish(op, out, {x}, [x, out, deriv]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    auto xv = x.values();
    auto yv = out.values();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  return finish("reshape", out, {x}, [x, out]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> v(r * c);
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = xv[i * c + j];
  Tensor out = Tensor::from({c, r}, std::move(v));
  return finish("transpose", out, {x}, [x, out, r, c]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch " + shape_str(p.shape()));
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.dim(d) != ref[d]) {
        throw DimensionError("concat: off-axis shape mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
      }
    }
    total += p.dim(axis);
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> v(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis) * s.inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.begin() + o * len, len, v.begin() + o * s.len * s.inner + offset);
    }
    offset += len;
  }
  Tensor out = Tensor::from(out_shape, std::move(v));
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return finish("concat", out, inputs, [inputs, out, s, axis]() mutable {
    auto g = out.grad();
    std::size_t offset = 0;
    for (auto& p : inputs) {
      const std::size_t len = p.dim(axis) * s.inner;
      if (p.requires_grad()) {
        auto gp = p.grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
          const std::size_t base = o * s.len * s.inner + offset;
          for (std::size_t i = 0; i < len; ++i) gp[o * len + i] += g[base + i];
        }
      }
      offset += len;
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis) || length == 0) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") invalid for " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> v(shape_numel(out_shape));
  auto xv = x.values();
  const std::size_t len = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xv.begin() + o * s.len * s.inner + start * s.inner, len, v.begin() + o * len);
  }
  Tensor out = Tensor::from(out_shape, std::move(v));
  return finish("slice", out, {x}, [x, out, s, start, len]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t base = o * s.len * s.inner + start * s.inner;
      for (std::size_t i = 0; i < len; ++i) gx[base + i] += g[o * len + i];
    }
  });
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::span<const std::size_t> sizes) {
  if (axis >= x.rank()) throw DimensionError("split: axis out of range for " + shape_str(x.shape()));
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != x.dim(axis)) throw DimensionError("split: sizes do not cover axis of " + shape_str(x.shape()));
  std::vector<Tensor> out;
  std::size_t start = 0;
  for (std::size_t len : sizes) {
    out.push_back(slice(x, axis, start, len));
    start += len;
  }
  return out;
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v, double) {
        const double u = k * (v + c * v * v * v);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * c * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  return finish("sum", out, {x}, [x, out]() mutable {
    const double g = out.grad()[0];
    for (double& gx : x.grad()) gx += g;
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s / n);
  return finish("mean", out, {x}, [x, out, n]() mutable {
    const double g = out.grad()[0] / n;
    for (double& gx : x.grad()) gx += g;
  });
}

namespace {
Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
  Shape r = s;
  if (keepdim) {
    r[axis] = 1;
  } else {
    r.erase(r.begin() + static_cast<std::ptrdiff_t>(axis));
    if (r.empty()) r.push_back(1);
  }
  return r;
}

Tensor reduce_axis(const Tensor& x, std::size_t axis, bool keepdim, double factor, const char* op) {
  if (axis >= x.rank()) throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<double> v(s.outer * s.inner, 0.0);
  auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) v[o * s.inner + i] += xv[(o * s.len + l) * s.inner + i];
  for (double& e : v) e *= factor;
  Tensor out = Tensor::from(reduced_shape(x.shape(), axis, keepdim), std::move(v));
  return finish(op, out, {x}, [x, out, s, factor]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i] * factor;
  });
}
}  // namespace

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  return reduce_axis(x, axis, keepdim, 1.0, "sum_axis");
}

Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.rank()) throw DimensionError("mean_axis: axis out of range for " + shape_str(x.shape()));
  return reduce_axis(x, axis, keepdim, 1.0 / static_cast<double>(x.dim(axis)), "mean_axis");
}

Tensor max_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.rank()) throw DimensionError("max_axis: axis out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<double> v(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.len) * s.inner + i;
      for (std::size_t l = 1; l < s.len; ++l) {
        const std::size_t idx = (o * s.len + l) * s.inner + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      v[o * s.inner + i] = xv[best];
      arg[o * s.inner + i] = best;
    }
  }
  Tensor out = Tensor::from(reduced_shape(x.shape(), axis, keepdim), std::move(v));
  return finish("max_axis", out, {x}, [x, out, arg]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<double> v(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(xv[base + l * s.inner] - mx);
        v[base + l * s.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) v[base + l * s.inner] /= z;
    }
  }
  Tensor out = Tensor::from(x.shape(), std::move(v));
  return finish("softmax", out, {x}, [x, out, s]() mutable {
    auto g = out.grad();
    auto y = out.values();
    auto gx = x.grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t k = base + l * s.inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("log_softmax: axis out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<double> v(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = xv[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += std::exp(xv[base + l * s.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t l = 0; l < s.len; ++l) v[base + l * s.inner] = xv[base + l * s.inner] - lse;
    }
  }
  Tensor out = Tensor::from(x.shape(), std::move(v));
  return finish("log_softmax", out, {x}, [x, out, s]() mutable {
    auto g = out.grad();
    auto y = out.values();
    auto gx = x.grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        double gs = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) gs += g[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t k = base + l * s.inner;
          gx[k] += g[k] - std::exp(y[k]) * gs;
        }
      }
    }
  });
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n, 0.0);
  detail::gemm_acc(false, false, m, n, k, a.values().data(), b.values().data(), v.data());
  Tensor out = Tensor::from({m, n}, std::move(v));
  return finish("matmul", out, {a, b}, [a, b, out, m, n, k]() mutable {
    const double* g = out.grad().data();
    if (a.requires_grad()) detail::gemm_acc(false, true, m, k, n, g, b.values().data(), a.grad().data());
    if (b.requires_grad()) detail::gemm_acc(true, false, k, n, m, a.values().data(), g, b.grad().data());
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const std::size_t t = x.dim(0), in = x.dim(1), outc = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outc)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match width " + std::to_string(outc));
  }
  std::vector<double> v(t * outc, 0.0);
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t r = 0; r < t; ++r) std::copy(bv.begin(), bv.end(), v.begin() + r * outc);
  }
  detail::gemm_acc(false, false, t, outc, in, x.values().data(), w.values().data(), v.data());
  Tensor out = Tensor::from({t, outc}, std::move(v));
  return finish("linear", out, {x, w, bias}, [x, w, bias, out, t, in, outc]() mutable {
    const double* g = out.grad().data();
    if (x.requires_grad()) detail::gemm_acc(false, true, t, in, outc, g, w.values().data(), x.grad().data());
    if (w.requires_grad()) detail::gemm_acc(true, false, in, outc, t, x.values().data(), g, w.grad().data());
    if (bias.defined() && bias.requires_grad()) {
      auto gb = bias.grad();
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < outc; ++c) gb[c] += g[r * outc + c];
    }
  });
}

// ---- spatial -------------------------------------------------------------------

namespace {

struct ConvGeom {
  std::size_t cin, h, w, cout, k, stride, pad, oh, ow;
};

// col[(c*k*k + ky*k + kx) x (oy*ow + ox)]
void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::size_t opix = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * opix;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.ow, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, const ConvGeom& g, double* gx) {
  const std::size_t opix = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * opix;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = gx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* what) {
  if (in + 2 * pad < k) {
    throw ConfigError(std::string("conv2d: ") + what + " extent " + std::to_string(in) + " with padding " +
                      std::to_string(pad) + " is smaller than kernel " + std::to_string(k));
  }
  const std::size_t span = in + 2 * pad - k;
  if (span % stride > pad) {
    throw ConfigError(std::string("conv2d: non-integral output ") + what + " (extent " + std::to_string(in) +
                      ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(pad) + ")");
  }
  return span / stride + 1;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t padding) {
  require_rank(x, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  ConvGeom g{};
  g.cin = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cout = kernel.dim(0);
  g.k = kernel.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.cin || kernel.dim(3) != g.k) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  if (g.k != 1 && g.k != 3 && g.k != 7) throw ConfigError("conv2d: kernel size must be 1, 3 or 7");
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs " + std::to_string(g.cout) + " channels");
  }
  g.oh = conv_extent(g.h, g.k, stride, padding, "height");
  g.ow = conv_extent(g.w, g.k, stride, padding, "width");

  const std::size_t opix = g.oh * g.ow;
  const std::size_t kdim = g.cin * g.k * g.k;
  const bool direct = g.k == 1 && stride == 1 && padding == 0;
  std::vector<double> col;
  if (!direct) {
    col.resize(kdim * opix);
    im2col(x.values().data(), g, col.data());
  }
  const double* colp = direct ? x.values().data() : col.data();

  std::vector<double> v(g.cout * opix, 0.0);
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t c = 0; c < g.cout; ++c) std::fill_n(v.begin() + c * opix, opix, bv[c]);
  }
  detail::gemm_acc(false, false, g.cout, opix, kdim, kernel.values().data(), colp, v.data());
  Tensor out = Tensor::from({g.cout, g.oh, g.ow}, std::move(v));

  return finish("conv2d", out, {x, kernel, bias},
                [x, kernel, bias, out, g, direct, col = std::move(col), opix, kdim]() mutable {
                  const double* gout = out.grad().data();
                  if (kernel.requires_grad()) {
                    const double* colp = direct ? x.values().data() : col.data();
                    detail::gemm_acc(false, true, g.cout, kdim, opix, gout, colp, kernel.grad().data());
                  }
                  if (bias.defined() && bias.requires_grad()) {
                    auto gb = bias.grad();
                    for (std::size_t c = 0; c < g.cout; ++c) {
                      double s = 0.0;
                      for (std::size_t p = 0; p < opix; ++p) s += gout[c * opix + p];
                      gb[c] += s;
                    }
                  }
                  if (x.requires_grad()) {
                    if (direct) {
                      detail::gemm_acc(true, false, kdim, opix, g.cout, kernel.values().data(), gout,
                                       x.grad().data());
                    } else {
                      std::vector<double> gcol(kdim * opix, 0.0);
                      detail::gemm_acc(true, false, kdim, opix, g.cout, kernel.values().data(), gout, gcol.data());
                      col2im_acc(gcol.data(), g, x.grad().data());
                    }
                  }
                });
}

namespace {
struct ResizeTap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<ResizeTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ConfigError("bilinear_resize: target size must be at least 1x1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) {
    return reshape(x, x.shape());
  }
  const auto ty = resize_taps(h, out_h);
  const auto tx = resize_taps(w, out_w);
  std::vector<double> v(c * out_h * out_w);
  auto xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = xv.data() + ch * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double top = src[a.i0 * w + b.i0] * (1.0 - b.w1) + src[a.i0 * w + b.i1] * b.w1;
        const double bot = src[a.i1 * w + b.i0] * (1.0 - b.w1) + src[a.i1 * w + b.i1] * b.w1;
        v[(ch * out_h + oy) * out_w + ox] = top * (1.0 - a.w1) + bot * a.w1;
      }
    }
  }
  Tensor out = Tensor::from({c, out_h, out_w}, std::move(v));
  return finish("bilinear_resize", out, {x}, [x, out, ty, tx, c, h, w, out_h, out_w]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* dst = gx.data() + ch * h * w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[ox];
          const double go = g[(ch * out_h + oy) * out_w + ox];
          dst[a.i0 * w + b.i0] += go * (1.0 - a.w1) * (1.0 - b.w1);
          dst[a.i0 * w + b.i1] += go * (1.0 - a.w1) * b.w1;
          dst[a.i1 * w + b.i0] += go * a.w1 * (1.0 - b.w1);
          dst[a.i1 * w + b.i1] += go * a.w1 * b.w1;
        }
      }
    }
  });
}

namespace {
thread_local bool g_sample_stats = false;
}  // namespace

SampleStatsScope::SampleStatsScope() : previous_(g_sample_stats) { g_sample_stats = true; }
SampleStatsScope::~SampleStatsScope() { g_sample_stats = previous_; }

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, Mode mode) {
  require_rank(x, 3, "batchnorm2d");
  const std::size_t c = x.dim(0);
  const std::size_t n = x.dim(1) * x.dim(2);
  if (gamma.numel() != c || beta.numel() != c || stats.running_mean.numel() != c ||
      stats.running_var.numel() != c) {
    throw DimensionError("batchnorm2d: parameters sized for " + std::to_string(gamma.numel()) +
                         " channels, input " + shape_str(x.shape()));
  }
  const bool sample_stats = mode == Mode::Train || g_sample_stats;
  auto xv = x.values();
  std::vector<double> mean(c), invstd(c), xhat(x.numel()), v(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* px = xv.data() + ch * n;
    double mu, var;
    if (sample_stats) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += px[i];
      mu = s / static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) ss += (px[i] - mu) * (px[i] - mu);
      var = ss / static_cast<double>(n);
      const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
      if (mode == Mode::Train) {
        stats.running_mean[ch] = (1.0 - stats.momentum) * stats.running_mean[ch] + stats.momentum * mu;
        stats.running_var[ch] = (1.0 - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
      }
    } else {
      mu = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    mean[ch] = mu;
    invstd[ch] = 1.0 / std::sqrt(var + stats.eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double xh = (px[i] - mu) * invstd[ch];
      xhat[ch * n + i] = xh;
      v[ch * n + i] = gamma[ch] * xh + beta[ch];
    }
  }
  Tensor out = Tensor::from(x.shape(), std::move(v));
  return finish("batchnorm2d", out, {x, gamma, beta},
                [x, gamma, beta, out, xhat = std::move(xhat), invstd, c, n, sample_stats]() mutable {
                  auto g = out.grad();
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    double sg = 0.0, sgx = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                      sg += g[ch * n + i];
                      sgx += g[ch * n + i] * xhat[ch * n + i];
                    }
                    if (gamma.requires_grad()) gamma.grad()[ch] += sgx;
                    if (beta.requires_grad()) beta.grad()[ch] += sg;
                    if (!x.requires_grad()) continue;
                    auto gx = x.grad();
                    const double k = gamma[ch] * invstd[ch];
                    if (sample_stats) {
                      const double dn = static_cast<double>(n);
                      for (std::size_t i = 0; i < n; ++i) {
                        gx[ch * n + i] += k * (g[ch * n + i] - sg / dn - xhat[ch * n + i] * sgx / dn);
                      }
                    } else {
                      for (std::size_t i = 0; i < n; ++i) gx[ch * n + i] += k * g[ch * n + i];
                    }
                  }
                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t t = x.dim(0), c = x.dim(1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("layer_norm: parameters sized " + std::to_string(gamma.numel()) + " for input " +
                         shape_str(x.shape()));
  }
  auto xv = x.values();
  std::vector<double> xhat(x.numel()), invstd(t), v(x.numel());
  for (std::size_t r = 0; r < t; ++r) {
    const double* px = xv.data() + r * c;
    double s = 0.0;
    for (std::size_t i = 0; i < c; ++i) s += px[i];
    const double mu = s / static_cast<double>(c);
    double ss = 0.0;
    for (std::size_t i = 0; i < c; ++i) ss += (px[i] - mu) * (px[i] - mu);
    invstd[r] = 1.0 / std::sqrt(ss / static_cast<double>(c) + eps);
    for (std::size_t i = 0; i < c; ++i) {
      xhat[r * c + i] = (px[i] - mu) * invstd[r];
      v[r * c + i] = gamma[i] * xhat[r * c + i] + beta[i];
    }
  }
  Tensor out = Tensor::from(x.shape(), std::move(v));
  return finish("layer_norm", out, {x, gamma, beta},
                [x, gamma, beta, out, xhat = std::move(xhat), invstd, t, c]() mutable {
                  auto g = out.grad();
                  const bool rg = gamma.requires_grad(), rb = beta.requires_grad(), rx = x.requires_grad();
                  const double dc = static_cast<double>(c);
                  std::vector<double> dxh(c);
                  for (std::size_t r = 0; r < t; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t i = 0; i < c; ++i) {
                      const double gi = g[r * c + i];
                      if (rg) gamma.grad()[i] += gi * xhat[r * c + i];
                      if (rb) beta.grad()[i] += gi;
                      dxh[i] = gi * gamma[i];
                      s1 += dxh[i];
                      s2 += dxh[i] * xhat[r * c + i];
                    }
                    if (!rx) continue;
                    auto gx = x.grad();
                    for (std::size_t i = 0; i < c; ++i) {
                      gx[r * c + i] += invstd[r] * (dxh[i] - s1 / dc - xhat[r * c + i] * s2 / dc);
                    }
                  }
                });
}

namespace {
// token row index for pixel (y, x) in window-major order
std::vector<std::size_t> window_order(std::size_t h, std::size_t w, std::size_t win) {
  std::vector<std::size_t> pix_to_tok(h * w);
  const std::size_t wx = w / win;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t widx = (y / win) * wx + (x / win);
      const std::size_t inner = (y % win) * win + (x % win);
      pix_to_tok[y * w + x] = widx * win * win + inner;
    }
  }
  return pix_to_tok;
}

void check_window(std::size_t h, std::size_t w, std::size_t win, const char* op) {
  if (win == 0 || h % win != 0 || w % win != 0) {
    throw ConfigError(std::string(op) + ": window " + std::to_string(win) + " does not divide " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
}
}  // namespace

Tensor to_window_tokens(const Tensor& x, std::size_t win) {
  require_rank(x, 3, "to_window_tokens");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  check_window(h, w, win, "to_window_tokens");
  const auto order = window_order(h, w, win);
  std::vector<double> v(x.numel());
  auto xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) v[order[p] * c + ch] = xv[ch * h * w + p];
  Tensor out = Tensor::from({h * w, c}, std::move(v));
  return finish("to_window_tokens", out, {x}, [x, out, order, c, h, w]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) gx[ch * h * w + p] += g[order[p] * c + ch];
  });
}

Tensor from_window_tokens(const Tensor& tokens, std::size_t channels, std::size_t h, std::size_t w,
                          std::size_t win) {
  require_rank(tokens, 2, "from_window_tokens");
  if (tokens.dim(0) != h * w || tokens.dim(1) != channels) {
    throw DimensionError("from_window_tokens: tokens " + shape_str(tokens.shape()) + " do not form " +
                         std::to_string(channels) + "x" + std::to_string(h) + "x" + std::to_string(w));
  }
  check_window(h, w, win, "from_window_tokens");
  const auto order = window_order(h, w, win);
  const std::size_t c = channels;
  std::vector<double> v(tokens.numel());
  auto tv = tokens.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) v[ch * h * w + p] = tv[order[p] * c + ch];
  Tensor out = Tensor::from({c, h, w}, std::move(v));
  return finish("from_window_tokens", out, {tokens}, [tokens, out, order, c, h, w]() mutable {
    auto g = out.grad();
    auto gt = tokens.grad();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) gt[order[p] * c + ch] += g[ch * h * w + p];
  });
}

Tensor window_attention(const Tensor& qkv, std::size_t window_tokens, std::size_t heads,
                        std::vector<double>* weights_out) {
  require_rank(qkv, 2, "window_attention");
  const std::size_t t = qkv.dim(0);
  if (qkv.dim(1) % 3 != 0) throw DimensionError("window_attention: qkv width must be 3*C, got " + shape_str(qkv.shape()));
  const std::size_t c = qkv.dim(1) / 3;
  if (heads == 0 || c % heads != 0) throw ConfigError("window_attention: heads must divide channel count");
  if (window_tokens == 0 || t % window_tokens != 0) {
    throw ConfigError("window_attention: token count not a multiple of the window size");
  }
  const std::size_t nw = t / window_tokens, n = window_tokens, d = c / heads, row = 3 * c;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  auto q = qkv.values();
  std::vector<double> attn(nw * heads * n * n);
  std::vector<double> v(t * c, 0.0);
  for (std::size_t wi = 0; wi < nw; ++wi) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      double* a = attn.data() + (wi * heads + hd) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = q.data() + (wi * n + i) * row + hd * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = q.data() + (wi * n + j) * row + c + hd * d;
          double s = 0.0;
          for (std::size_t e = 0; e < d; ++e) s += qi[e] * kj[e];
          a[i * n + j] = s * sc;
          mx = std::max(mx, a[i * n + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          a[i * n + j] = std::exp(a[i * n + j] - mx);
          z += a[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= z;
        double* oi = v.data() + (wi * n + i) * c + hd * d;
        for (std::size_t j = 0; j < n; ++j) {
          const double* vj = q.data() + (wi * n + j) * row + 2 * c + hd * d;
          const double aij = a[i * n + j];
          for (std::size_t e = 0; e < d; ++e) oi[e] += aij * vj[e];
        }
      }
    }
  }
  if (weights_out) *weights_out = attn;
  Tensor out = Tensor::from({t, c}, std::move(v));
  return finish("window_attention", out, {qkv}, [qkv, out, attn = std::move(attn), nw, heads, n, d, c, row, sc]() mutable {
    auto g = out.grad();
    auto q = qkv.values();
    auto gq = qkv.grad();
    std::vector<double> da(n * n);
    for (std::size_t wi = 0; wi < nw; ++wi) {
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const double* a = attn.data() + (wi * heads + hd) * n * n;
        for (std::size_t i = 0; i < n; ++i) {
          const double* gi = g.data() + (wi * n + i) * c + hd * d;
          for (std::size_t j = 0; j < n; ++j) {
            const double* vj = q.data() + (wi * n + j) * row + 2 * c + hd * d;
            double* gvj = gq.data() + (wi * n + j) * row + 2 * c + hd * d;
            double s = 0.0;
            const double aij = a[i * n + j];
            for (std::size_t e = 0; e < d; ++e) {
              s += gi[e] * vj[e];
              gvj[e] += aij * gi[e];
            }
            da[i * n + j] = s;
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += da[i * n + j] * a[i * n + j];
          for (std::size_t j = 0; j < n; ++j) da[i * n + j] = a[i * n + j] * (da[i * n + j] - dot) * sc;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double* qi = q.data() + (wi * n + i) * row + hd * d;
          double* gqi = gq.data() + (wi * n + i) * row + hd * d;
          for (std::size_t j = 0; j < n; ++j) {
            const double ds = da[i * n + j];
            const double* kj = q.data() + (wi * n + j) * row + c + hd * d;
            double* gkj = gq.data() + (wi * n + j) * row + c + hd * d;
            for (std::size_t e = 0; e < d; ++e) {
              gqi[e] += ds * kj[e];
              gkj[e] += ds * qi[e];
            }
          }
        }
      }
    }
  });
}

Tensor cosine_similarity_map(const Tensor& a, const Tensor& b, double eps) {
  require_same_shape(a, b, "cosine_similarity_map");
  require_rank(a, 3, "cosine_similarity_map");
  const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> dot(hw, 0.0), na(hw, 0.0), nb(hw, 0.0), v(hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) {
      const double x = av[ch * hw + p], y = bv[ch * hw + p];
      dot[p] += x * y;
      na[p] += x * x;
      nb[p] += y * y;
    }
  }
  for (std::size_t p = 0; p < hw; ++p) {
    na[p] = std::sqrt(na[p]);
    nb[p] = std::sqrt(nb[p]);
    v[p] = dot[p] / (std::max(na[p], eps) * std::max(nb[p], eps));
  }
  Tensor out = Tensor::from({a.dim(1), a.dim(2)}, std::move(v));
  return finish("cosine_similarity_map", out, {a, b}, [a, b, out, dot, na, nb, c, hw, eps]() mutable {
    auto g = out.grad();
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t p = 0; p < hw; ++p) {
      const double da = std::max(na[p], eps), db = std::max(nb[p], eps);
      const double inv = 1.0 / (da * db);
      const double cos = dot[p] * inv;
      // the clamped norm is constant below eps
      const double ka = na[p] > eps ? cos / (da * na[p]) : 0.0;
      const double kb = nb[p] > eps ? cos / (db * nb[p]) : 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t i = ch * hw + p;
        if (a.requires_grad()) a.grad()[i] += g[p] * (bv[i] * inv - ka * av[i]);
        if (b.requires_grad()) b.grad()[i] += g[p] * (av[i] * inv - kb * bv[i]);
      }
    }
  });
}

// ---- losses ----------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, int ignore_index) {
  require_rank(logits, 3, "cross_entropy");
  const std::size_t k = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  if (labels.size() != hw) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  for (int l : labels) {
    if (l == ignore_index) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto lv = logits.values();
  std::vector<double> prob(k * hw);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = lv[p];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, lv[c * hw + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      prob[c * hw + p] = std::exp(lv[c * hw + p] - mx);
      z += prob[c * hw + p];
    }
    for (std::size_t c = 0; c < k; ++c) prob[c * hw + p] /= z;
    if (labels[p] == ignore_index) continue;
    total += -(lv[static_cast<std::size_t>(labels[p]) * hw + p] - mx - std::log(z));
    ++count;
  }
  const double denom = count > 0 ? static_cast<double>(count) : 1.0;
  Tensor out = Tensor::scalar(total / denom);
  std::vector<int> lab(labels.begin(), labels.end());
  return finish("cross_entropy", out, {logits},
                [logits, out, prob = std::move(prob), lab = std::move(lab), k, hw, denom, ignore_index]() mutable {
                  const double g = out.grad()[0] / denom;
                  auto gl = logits.grad();
                  for (std::size_t p = 0; p < hw; ++p) {
                    if (lab[p] == ignore_index) continue;
                    for (std::size_t c = 0; c < k; ++c) {
                      const double onehot = static_cast<std::size_t>(lab[p]) == c ? 1.0 : 0.0;
                      gl[c * hw + p] += g * (prob[c * hw + p] - onehot);
                    }
                  }
                });
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "l1_loss");
  auto pv = pred.values();
  auto tv = target.values();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - tv[i]);
  const double n = static_cast<double>(pv.size());
  Tensor out = Tensor::scalar(s / n);
  return finish("l1_loss", out, {pred, target}, [pred, target, out, n]() mutable {
    const double g = out.grad()[0] / n;
    auto pv = pred.values();
    auto tv = target.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double d = pv[i] - tv[i];
      const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (pred.requires_grad()) pred.grad()[i] += g * sgn;
      if (target.requires_grad()) target.grad()[i] -= g * sgn;
    }
  });
}

Tensor l1_normalized(const Tensor& pred, const Tensor& target, double eps) {
  require_same_shape(pred, target, "l1_normalized");
  require_rank(pred, 3, "l1_normalized");
  const std::size_t c = pred.dim(0), hw = pred.dim(1) * pred.dim(2);
  auto pv = pred.values();
  auto tv = target.values();
  std::vector<double> norm(hw, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) norm[p] += pv[ch * hw + p] * pv[ch * hw + p];
  for (double& v : norm) v = std::sqrt(v);
  double s = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) s += std::abs(pv[ch * hw + p] / (norm[p] + eps) - tv[ch * hw + p]);
  const double n = static_cast<double>(c * hw);
  Tensor out = Tensor::scalar(s / n);
  return finish("l1_normalized", out, {pred}, [pred, target, out, norm, c, hw, n, eps]() mutable {
    const double g = out.grad()[0] / n;
    auto pv = pred.values();
    auto tv = target.values();
    auto gp = pred.grad();
    std::vector<double> sg(c);
    for (std::size_t p = 0; p < hw; ++p) {
      const double d = norm[p] + eps;
      double dot = 0.0;  // sum_c sgn_c * p_c
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double diff = pv[ch * hw + p] / d - tv[ch * hw + p];
        sg[ch] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        dot += sg[ch] * pv[ch * hw + p];
      }
      const double kn = norm[p] > 0.0 ? dot / (d * d * norm[p]) : 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) gp[ch * hw + p] += g * (sg[ch] / d - kn * pv[ch * hw + p]);
    }
  });
}

}  // namespace mtcp::ops

#include "mtcp/coherence.hpp"

#include <algorithm>

#include "mtcp/errors.hpp"

namespace mtcp {

namespace o = ops;

Cbam::Cbam(std::size_t channels, std::size_t reduction, nn::Rng& rng) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError("cbam: channels " + std::to_string(channels) + " not divisible by reduction " +
                      std::to_string(reduction));
  }
  fc1_ = nn::Linear(channels, channels / reduction, rng);
  fc2_ = nn::Linear(channels / reduction, channels, rng);
  spatial_ = nn::Conv2d(2, 1, 1, rng);
}

Tensor Cbam::operator()(const Tensor& x, CbamTrace* trace) const {
  if (x.rank() != 3 || x.dim(0) != channels()) {
    throw DimensionError("cbam: expected " + std::to_string(channels()) + " channels, got " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor flat = o::reshape(x, {c, h * w});
  // Both descriptors go through the shared perceptron as two rows.
  Tensor avg = o::reshape(o::mean_axis(flat, 1), {1, c});
  Tensor mx = o::reshape(o::max_axis(flat, 1), {1, c});
  const Tensor desc_parts[] = {avg, mx};
  Tensor mlp = fc2_(o::relu(fc1_(o::concat(desc_parts, 0))));  // [2 x C]
  Tensor ch = o::sigmoid(o::reshape(o::sum_axis(mlp, 0), {c, 1, 1}));
  Tensor y = o::mul(x, ch);

  const Tensor pooled[] = {o::mean_axis(y, 0), o::max_axis(y, 0)};
  Tensor sp = o::sigmoid(spatial_(o::concat(pooled, 0)));  // [1 x H x W]
  if (trace) {
    trace->channel = ch;
    trace->spatial = sp;
  }
  return o::mul(y, sp);
}

void Cbam::collect(nn::ParamSet& ps, const std::string& prefix) const {
  fc1_.collect(ps, prefix + ".fc1");
  fc2_.collect(ps, prefix + ".fc2");
  spatial_.collect(ps, prefix + ".spatial");
}

CbamBlock::CbamBlock(std::size_t channels, std::size_t reduction, bool relu, nn::Rng& rng)
    : cbam_(channels, reduction, rng), bn_(channels), relu_(relu) {}

Tensor CbamBlock::operator()(const Tensor& x, ops::Mode mode, CbamTrace* trace) {
  Tensor y = bn_(cbam_(x, trace), mode);
  return relu_ ? o::relu(y) : y;
}

void CbamBlock::collect(nn::ParamSet& ps, const std::string& prefix) const {
  cbam_.collect(ps, prefix + ".cbam");
  bn_.collect(ps, prefix + ".bn");
}

Tensor coherence_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("coherence_loss: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  return o::add_scalar(o::scale(o::mean(o::cosine_similarity_map(a, b)), -1.0), 1.0);
}

Tensor gram_fuse(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || a.shape() != b.shape()) {
    throw DimensionError("gram_fuse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
  Tensor af = o::reshape(a, {c, hw});
  Tensor bf = o::reshape(b, {c, hw});
  Tensor g = o::scale(o::matmul(af, o::transpose(bf)), 1.0 / static_cast<double>(hw));
  return o::reshape(o::matmul(g, bf), a.shape());
}

CoherenceFusion::CoherenceFusion(const CfmConfig& config, nn::Rng& rng) : config_(config) {
  if (config_.num_aux < 1) throw ConfigError("cfm: need at least one auxiliary task");
  const std::size_t c = config_.channels;
  for (std::size_t i = 0; i < config_.num_aux; ++i) gates_.emplace_back(c, c, 1, rng);
  project_ = nn::Conv2d(c * config_.num_aux, c, 1, rng);
  main_branch_ = CbamBlock(c, config_.reduction, true, rng);
  aux_branch_ = CbamBlock(c, config_.reduction, true, rng);
  output_ = CbamBlock(c, config_.reduction, false, rng);
}

Tensor CoherenceFusion::gated_concat(std::span<const Tensor> aux) const {
  if (aux.empty()) throw ConfigError("cfm: empty auxiliary feature list");
  if (aux.size() != gates_.size()) {
    throw DimensionError("cfm: expected " + std::to_string(gates_.size()) + " auxiliary maps, got " +
                         std::to_string(aux.size()));
  }
  std::vector<Tensor> gated;
  gated.reserve(aux.size());
  for (std::size_t i = 0; i < aux.size(); ++i) gated.push_back(o::mul(aux[i], o::sigmoid(gates_[i](aux[i]))));
  if (gated.size() == 1) return gated.front();
  return o::concat(gated, 0);
}

Tensor CoherenceFusion::gate_aux(std::span<const Tensor> aux) const { return project_(gated_concat(aux)); }

CfmOutput CoherenceFusion::forward(const Tensor& main, std::span<const Tensor> aux, ops::Mode mode) {
  for (const auto& t : aux) {
    if (t.shape() != main.shape()) {
      throw DimensionError("cfm: auxiliary " + shape_str(t.shape()) + " vs main " + shape_str(main.shape()));
    }
  }
  Tensor main_b = main_branch_(main, mode);
  Tensor aux_b = aux_branch_(gate_aux(aux), mode);
  CfmOutput out;
  out.coherence = coherence_loss(main_b, aux_b);
  out.fused = output_(gram_fuse(main_b, aux_b), mode);
  if (config_.residual) out.fused = o::add(out.fused, main);
  return out;
}

void CoherenceFusion::collect(nn::ParamSet& ps, const std::string& prefix) const {
  for (std::size_t i = 0; i < gates_.size(); ++i) gates_[i].collect(ps, prefix + ".gate" + std::to_string(i));
  project_.collect(ps, prefix + ".project");
  main_branch_.collect(ps, prefix + ".main");
  aux_branch_.collect(ps, prefix + ".aux");
  output_.collect(ps, prefix + ".out");
}

}  // namespace mtcp

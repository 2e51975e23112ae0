#include "mtcp/benchkit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include "mtcp/errors.hpp"
#include "mtcp/nn.hpp"

namespace mtcp::bench {

namespace {

constexpr std::array<double, 3> kBackgroundRgb{0.12, 0.12, 0.15};
constexpr std::uint64_t kValIndexOffset = std::uint64_t{1} << 32;
constexpr char kDumpMagic[7] = {'M', 'T', 'C', 'P', 'D', 'S', '1'};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Hit {
  double depth = std::numeric_limits<double>::infinity();
  std::array<double, 3> normal{0.0, 0.0, 1.0};  // output convention
};

// Rays start on the z = 0 plane at (x, y) and travel along +z.
bool hit_sphere(const Primitive& p, double x, double y, Hit& hit) {
  const double dx = x - p.center[0], dy = y - p.center[1];
  const double q = p.radius * p.radius - dx * dx - dy * dy;
  if (q <= 0.0) return false;
  const double dz = std::sqrt(q);
  hit.depth = p.center[2] - dz;
  hit.normal = {dx / p.radius, dy / p.radius, dz / p.radius};
  return true;
}

bool hit_box(const Primitive& p, double x, double y, Hit& hit) {
  const double c = std::cos(p.yaw), s = std::sin(p.yaw);
  const double wx = x - p.center[0], wy = y - p.center[1], wz = -p.center[2];
  // world = R local with R a rotation about y; local = R^T world
  const std::array<double, 3> o{c * wx - s * wz, wy, s * wx + c * wz};
  const std::array<double, 3> d{-s, 0.0, c};
  double t_near = -std::numeric_limits<double>::infinity(), t_far = std::numeric_limits<double>::infinity();
  std::array<double, 3> n_local{0.0, 0.0, 0.0};
  for (int a = 0; a < 3; ++a) {
    const double h = p.half_extent[a];
    if (std::abs(d[a]) < 1e-12) {
      if (std::abs(o[a]) > h) return false;
      continue;
    }
    double t1 = (-h - o[a]) / d[a], t2 = (h - o[a]) / d[a];
    if (t1 > t2) std::swap(t1, t2);
    if (t1 > t_near) {
      t_near = t1;
      n_local = {0.0, 0.0, 0.0};
      n_local[a] = d[a] > 0.0 ? -1.0 : 1.0;
    }
    t_far = std::min(t_far, t2);
  }
  if (t_near > t_far || t_near <= 0.0) return false;
  const double nx = c * n_local[0] + s * n_local[2];
  const double nz = -s * n_local[0] + c * n_local[2];
  hit.depth = t_near;
  hit.normal = {nx, n_local[1], -nz};
  return true;
}

bool hit_plane(const Primitive& p, double x, double y, Hit& hit) {
  const double dx = x - p.center[0], dy = y - p.center[1];
  if (std::abs(dx) > p.half_extent[0] || std::abs(dy) > p.half_extent[1]) return false;
  const double sx = p.slope[0], sy = p.slope[1];
  const double norm = std::sqrt(sx * sx + sy * sy + 1.0);
  hit.depth = p.center[2] + sx * dx + sy * dy;
  hit.normal = {sx / norm, sy / norm, 1.0 / norm};
  return true;
}

std::array<double, 3> light_direction() {
  const double x = -0.4, y = -0.5, z = 0.75;
  const double n = std::sqrt(x * x + y * y + z * z);
  return {x / n, y / n, z / n};
}

Primitive random_primitive(nn::Rng& rng) {
  Primitive p;
  p.label = 1 + static_cast<int>(rng.below(kNumClasses - 1));
  p.kind = class_kind(p.label);
  const auto base = class_albedo(p.label);
  for (int c = 0; c < 3; ++c) p.albedo[c] = std::clamp(base[c] + rng.uniform(-0.08, 0.08), 0.0, 1.0);
  p.center[0] = rng.uniform(-1.5, 1.5);
  p.center[1] = rng.uniform(-1.5, 1.5);
  switch (p.kind) {
    case PrimitiveKind::Sphere:
      p.radius = rng.uniform(0.35, 0.8);
      p.center[2] = rng.uniform(1.0 + p.radius, 8.0);
      break;
    case PrimitiveKind::Box: {
      for (auto& h : p.half_extent) h = rng.uniform(0.25, 0.6);
      p.yaw = rng.uniform(-0.8, 0.8);
      // The rotated footprint reaches at most |hx| + |hz| towards the camera.
      const double reach = p.half_extent[0] + p.half_extent[2];
      p.center[2] = rng.uniform(1.0 + reach, 8.0);
      break;
    }
    case PrimitiveKind::Plane: {
      p.half_extent[0] = rng.uniform(0.5, 1.2);
      p.half_extent[1] = rng.uniform(0.5, 1.2);
      p.slope = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      const double span = std::abs(p.slope[0]) * p.half_extent[0] + std::abs(p.slope[1]) * p.half_extent[1];
      p.center[2] = rng.uniform(1.0 + span, 9.8 - span);
      break;
    }
  }
  return p;
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 | std::uint32_t{b[3]} << 24;
}

void write_f32(std::ostream& os, std::span<const double> values) {
  for (double v : values) write_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

void read_f32(std::istream& is, std::span<double> out) {
  for (double& v : out) v = std::bit_cast<float>(read_u32(is));
}

}  // namespace

void DatasetConfig::validate() const {
  if (height == 0 || width == 0) throw ConfigError("dataset: image size must be positive");
  if (train_count < 1 || val_count < 1) throw ConfigError("dataset: train and val counts must be at least 1");
  if (min_shapes < 1 || min_shapes > max_shapes) throw ConfigError("dataset: invalid shapes-per-scene range");
}

double pixel_to_world(std::size_t index, std::size_t extent) {
  return ((static_cast<double>(index) + 0.5) / static_cast<double>(extent) * 2.0 - 1.0) * kViewExtent;
}

PrimitiveKind class_kind(int label) {
  switch (label) {
    case 1:
    case 2: return PrimitiveKind::Sphere;
    case 3:
    case 4: return PrimitiveKind::Box;
    case 5: return PrimitiveKind::Plane;
  }
  throw ConfigError("benchkit: no primitive for class " + std::to_string(label));
}

std::array<double, 3> class_albedo(int label) {
  switch (label) {
    case 1: return {0.85, 0.30, 0.25};
    case 2: return {0.25, 0.45, 0.85};
    case 3: return {0.90, 0.60, 0.20};
    case 4: return {0.30, 0.75, 0.40};
    case 5: return {0.70, 0.70, 0.65};
  }
  throw ConfigError("benchkit: no albedo for class " + std::to_string(label));
}

SceneSample render_scene(std::span<const Primitive> primitives, std::size_t height, std::size_t width) {
  SceneSample s;
  s.height = height;
  s.width = width;
  const std::size_t hw = height * width;
  s.rgb = Tensor::zeros({3, height, width});
  s.depth = Tensor::full({1, height, width}, kFarPlane);
  s.normals = Tensor::zeros({3, height, width});
  s.seg_labels.assign(hw, 0);
  const auto light = light_direction();
  for (std::size_t v = 0; v < height; ++v) {
    const double y = pixel_to_world(v, height);
    for (std::size_t u = 0; u < width; ++u) {
      const double x = pixel_to_world(u, width);
      const std::size_t p = v * width + u;
      Hit best;
      const Primitive* owner = nullptr;
      for (const auto& prim : primitives) {
        Hit h;
        bool ok = false;
        switch (prim.kind) {
          case PrimitiveKind::Sphere: ok = hit_sphere(prim, x, y, h); break;
          case PrimitiveKind::Box: ok = hit_box(prim, x, y, h); break;
          case PrimitiveKind::Plane: ok = hit_plane(prim, x, y, h); break;
        }
        if (ok && h.depth < best.depth && h.depth < kFarPlane) {
          best = h;
          owner = &prim;
        }
      }
      if (!owner) {
        s.normals[2 * hw + p] = 1.0;
        for (int c = 0; c < 3; ++c) s.rgb[c * hw + p] = kBackgroundRgb[c];
        continue;
      }
      s.seg_labels[p] = owner->label;
      s.depth[p] = best.depth;
      double shade = 0.0;
      for (int c = 0; c < 3; ++c) {
        s.normals[c * hw + p] = best.normal[c];
        shade += best.normal[c] * light[c];
      }
      shade = 0.25 + 0.75 * std::max(0.0, shade);
      for (int c = 0; c < 3; ++c) s.rgb[c * hw + p] = std::clamp(owner->albedo[c] * shade, 0.0, 1.0);
    }
  }
  return s;
}

SceneSample generate_scene(std::uint64_t seed, std::size_t index, const DatasetConfig& config) {
  config.validate();
  nn::Rng rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index))));
  const std::size_t count = config.min_shapes + rng.below(config.max_shapes - config.min_shapes + 1);
  std::vector<Primitive> prims;
  for (std::size_t i = 0; i < count; ++i) prims.push_back(random_primitive(rng));
  return render_scene(prims, config.height, config.width);
}

Dataset make_dataset(const DatasetConfig& config) {
  config.validate();
  return {make_split(config, Split::Train), make_split(config, Split::Val)};
}

std::vector<SceneSample> make_split(const DatasetConfig& config, Split split) {
  const bool train = split == Split::Train;
  const std::size_t count = train ? config.train_count : config.val_count;
  const std::size_t offset = train ? 0 : kValIndexOffset;
  std::vector<SceneSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(config.seed, offset + i, config));
  return out;
}

std::vector<int> argmax_labels(const Tensor& logits) {
  if (logits.rank() != 3) throw DimensionError("argmax_labels: expected [K x H x W], got " + shape_str(logits.shape()));
  const std::size_t k = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  std::vector<int> out(hw, 0);
  for (std::size_t p = 0; p < hw; ++p) {
    double best = logits[p];
    for (std::size_t c = 1; c < k; ++c) {
      if (logits[c * hw + p] > best) {
        best = logits[c * hw + p];
        out[p] = static_cast<int>(c);
      }
    }
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {}

void ConfusionMatrix::add(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("miou: " + std::to_string(pred.size()) + " predictions for " + std::to_string(gt.size()) +
                         " labels");
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0 || gt[i] >= classes_ || pred[i] < 0 || pred[i] >= classes_) {
      throw std::out_of_range("miou: class id outside [0, " + std::to_string(classes_) + ")");
    }
    ++counts_[gt[i] * classes_ + pred[i]];
  }
}

double ConfusionMatrix::miou() const {
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes_; ++c) {
    std::uint64_t gt_total = 0, pred_total = 0;
    for (int j = 0; j < classes_; ++j) {
      gt_total += count(c, j);
      pred_total += count(j, c);
    }
    if (gt_total == 0) continue;
    const std::uint64_t tp = count(c, c);
    sum += static_cast<double>(tp) / static_cast<double>(gt_total + pred_total - tp);
    ++present;
  }
  return present == 0 ? 0.0 : sum / present;
}

double miou(std::span<const int> pred, std::span<const int> gt, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt);
  return cm.miou();
}

double rmse(std::span<const double> pred, std::span<const double> gt) {
  MetricAccumulator acc;
  acc.add_depth(pred, gt);
  return acc.rmse();
}

double mean_angular_error(const Tensor& pred, const Tensor& gt) {
  MetricAccumulator acc;
  acc.add_normals(pred, gt);
  return acc.mean_angular_error();
}

void MetricAccumulator::add_segmentation(std::span<const int> pred, std::span<const int> gt) {
  confusion_.add(pred, gt);
}

void MetricAccumulator::add_depth(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw DimensionError("rmse: size mismatch");
  for (std::size_t i = 0; i < gt.size(); ++i) depth_sq_ += (pred[i] - gt[i]) * (pred[i] - gt[i]);
  depth_n_ += gt.size();
}

void MetricAccumulator::add_normals(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.rank() != 3 || pred.dim(0) != 3) {
    throw DimensionError("mean_angular_error: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  const std::size_t hw = pred.dim(1) * pred.dim(2);
  for (std::size_t p = 0; p < hw; ++p) {
    double dot = 0.0, norm = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      dot += pred[c * hw + p] * gt[c * hw + p];
      norm += pred[c * hw + p] * pred[c * hw + p];
    }
    dot /= std::max(std::sqrt(norm), 1e-8);
    angle_sum_ += std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi;
  }
  angle_n_ += hw;
}

double MetricAccumulator::rmse() const {
  return depth_n_ == 0 ? 0.0 : std::sqrt(depth_sq_ / static_cast<double>(depth_n_));
}

double MetricAccumulator::mean_angular_error() const {
  return angle_n_ == 0 ? 0.0 : angle_sum_ / static_cast<double>(angle_n_);
}

double aggregate_score(double miou, double rmse, double merr_degrees) {
  return (miou + (1.0 - rmse / kFarPlane) + (1.0 - merr_degrees / 90.0)) / 3.0;
}

void write_sample(const std::filesystem::path& path, const SceneSample& sample) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kDumpMagic, sizeof kDumpMagic);
  write_u32(os, static_cast<std::uint32_t>(sample.height));
  write_u32(os, static_cast<std::uint32_t>(sample.width));
  write_f32(os, sample.rgb.values());
  for (int l : sample.seg_labels) os.put(static_cast<char>(static_cast<unsigned char>(l)));
  write_f32(os, sample.depth.values());
  write_f32(os, sample.normals.values());
  if (!os) throw IoError("failed writing " + path.string());
}

SceneSample read_sample(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[sizeof kDumpMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kDumpMagic, sizeof magic) != 0) throw IoError(path.string() + ": not a sample dump");
  SceneSample s;
  s.height = read_u32(is);
  s.width = read_u32(is);
  const std::size_t hw = s.height * s.width;
  s.rgb = Tensor::zeros({3, s.height, s.width});
  s.depth = Tensor::zeros({1, s.height, s.width});
  s.normals = Tensor::zeros({3, s.height, s.width});
  read_f32(is, s.rgb.values());
  s.seg_labels.resize(hw);
  for (auto& l : s.seg_labels) l = static_cast<unsigned char>(is.get());
  read_f32(is, s.depth.values());
  read_f32(is, s.normals.values());
  if (!is) throw IoError(path.string() + ": truncated sample dump");
  return s;
}

}  // namespace mtcp::bench

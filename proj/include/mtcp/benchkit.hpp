#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mtcp/tensor.hpp"

namespace mtcp::bench {

inline constexpr double kFarPlane = 10.0;
inline constexpr int kNumClasses = 6;  // background + five (shape, colour) classes
/// Half-width in metres of the square region the orthographic camera sees.
inline constexpr double kViewExtent = 2.0;

struct SceneSample {
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor rgb;                   // [3 x H x W] in [0, 1]
  std::vector<int> seg_labels;  // H * W class ids
  Tensor depth;                 // [1 x H x W] metres, background at kFarPlane
  Tensor normals;               // [3 x H x W] unit vectors, z towards the camera
};

struct DatasetConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t train_count = 200;
  std::size_t val_count = 50;
  std::uint64_t seed = 0;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;

  void validate() const;
};

enum class PrimitiveKind { Sphere, Box, Plane };

/// Scene geometry in camera coordinates: x right, y down, z away from the
/// camera (depth). Normals are reported with z flipped so that a surface
/// facing the camera has normal (0, 0, 1).
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  int label = 1;
  std::array<double, 3> albedo{1.0, 1.0, 1.0};
  std::array<double, 3> center{0.0, 0.0, 5.0};
  double radius = 0.5;                                // sphere
  std::array<double, 3> half_extent{0.5, 0.5, 0.5};  // box; plane uses x and y as the footprint
  double yaw = 0.0;                                   // box rotation about the y axis
  std::array<double, 2> slope{0.0, 0.0};              // plane: dz/dx, dz/dy
};

/// Pixel (u, v) centre in camera x or y.
double pixel_to_world(std::size_t index, std::size_t extent);

/// Label of each of the five foreground classes: (kind, base albedo).
PrimitiveKind class_kind(int label);
std::array<double, 3> class_albedo(int label);

SceneSample render_scene(std::span<const Primitive> primitives, std::size_t height, std::size_t width);
/// Random scene for (seed, index); bit-identical for identical arguments.
SceneSample generate_scene(std::uint64_t seed, std::size_t index, const DatasetConfig& config = {});

struct Dataset {
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;
};

enum class Split { Train, Val };

/// Train samples use indices [0, train_count); validation samples come from
/// a disjoint index range.
Dataset make_dataset(const DatasetConfig& config);
std::vector<SceneSample> make_split(const DatasetConfig& config, Split split);

// ---- metrics -----------------------------------------------------------------

/// Per-pixel argmax over class channels of logits[K x H x W].
std::vector<int> argmax_labels(const Tensor& logits);

/// Confusion counts pooled across images.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = kNumClasses);
  void add(std::span<const int> pred, std::span<const int> gt);
  /// IoU averaged over classes present in the ground truth seen so far.
  double miou() const;
  std::uint64_t count(int gt, int pred) const { return counts_[gt * classes_ + pred]; }

 private:
  int classes_;
  std::vector<std::uint64_t> counts_;
};

double miou(std::span<const int> pred, std::span<const int> gt, int num_classes = kNumClasses);
double rmse(std::span<const double> pred, std::span<const double> gt);
/// Predictions are normalised per pixel (norm clamped at 1e-8); inputs are [3 x H x W].
double mean_angular_error(const Tensor& pred, const Tensor& gt);

/// Pooled validation metrics for the three tasks.
class MetricAccumulator {
 public:
  void add_segmentation(std::span<const int> pred, std::span<const int> gt);
  void add_depth(std::span<const double> pred, std::span<const double> gt);
  void add_normals(const Tensor& pred, const Tensor& gt);

  double miou() const { return confusion_.miou(); }
  double rmse() const;
  double mean_angular_error() const;

 private:
  ConfusionMatrix confusion_;
  double depth_sq_ = 0.0;
  std::size_t depth_n_ = 0;
  double angle_sum_ = 0.0;
  std::size_t angle_n_ = 0;
};

/// mean(mIoU, 1 - RMSE / far plane, 1 - mErr / 90 degrees).
double aggregate_score(double miou, double rmse, double merr_degrees);

// ---- dump --------------------------------------------------------------------

/// Header "MTCPDS1", little-endian u32 height and width, then rgb (f32),
/// labels (u8), depth (f32) and normals (f32) planes.
void write_sample(const std::filesystem::path& path, const SceneSample& sample);
SceneSample read_sample(const std::filesystem::path& path);

}  // namespace mtcp::bench

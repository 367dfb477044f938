#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mixtrain/rng.hpp"
#include "mixtrain/synthetic_data.hpp"

namespace mixtrain {

enum class TransformKind {
  scale_jitter,
  solarize,
  brightness,
  contrast,
  sharpness,
  translate,
  rotate,
  shear,
  cutout,
};

enum class Strength { normal, strong };

std::string_view to_string(TransformKind k);
std::string_view to_string(Strength s);
/// Kinds that only the strong pipeline may apply.
bool is_strong_only(TransformKind k);

struct TransformSpec {
  TransformKind kind;
  double probability = 1.0;
  double magnitude_min = 0.0;
  double magnitude_max = 0.0;
  int count_min = 1;  // patches per application (cutout only)
  int count_max = 1;
};

struct AppliedTransform {
  TransformKind kind;
  double magnitude = 0.0;
  double aux = 0.0;  // second parameter: y ratio for translate, axis for shear

  friend bool operator==(const AppliedTransform&, const AppliedTransform&) = default;
};

struct AugRecord {
  Strength strength = Strength::normal;
  std::vector<AppliedTransform> applied;
  std::vector<std::size_t> kept;     // input index of every surviving target, in order
  std::vector<std::size_t> dropped;  // input indices removed by geometric transforms
  bool all_dropped = false;          // input had targets and none survived

  std::string to_json_line() const;
  friend bool operator==(const AugRecord&, const AugRecord&) = default;
};

/// Transform table for the two pipeline strengths, in application order.
std::vector<TransformSpec> build_pipeline(Strength strength);

/// Pixel-level transforms. `magnitude` is the sampled ratio in (0, 1).
/// Throws std::invalid_argument when a pixel lies outside [0, 1].
Image apply_photometric(const Image& image, TransformKind kind, double magnitude);

/// Forward affine map x' = a*x + b*y + tx, y' = c*x + d*y + ty.
struct Affine {
  double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;

  static Affine translation(double dx, double dy);
  static Affine rotation(double degrees, double cx, double cy);
  /// axis 0 shears x by y, axis 1 shears y by x.
  static Affine shear(double degrees, int axis, double cx, double cy);

  void apply(double x, double y, double* ox, double* oy) const;
  Affine inverse() const;
};

/// Result of a transform that may remove targets.
struct GeometricResult {
  Sample sample;
  std::vector<std::size_t> kept;
  std::vector<std::size_t> dropped;
};

/// Resamples the image under `map` (nearest neighbour, per-channel mean fill)
/// into a canvas of the same size, remapping targets through the corner hull.
GeometricResult apply_affine(const Sample& s, const Affine& map);

/// Multiplies both image dimensions and all box coordinates by `factor`.
GeometricResult apply_scale(const Sample& s, double factor);

/// Places `s` into a height x width canvas at offset (ox, oy) (may be negative,
/// which crops). Uncovered pixels take the per-channel mean.
GeometricResult place_on_canvas(const Sample& s, int height, int width, int ox, int oy);

/// Convenience wrapper. translate: magnitude is the signed x ratio of the
/// width; rotate/shear: signed degrees; scale_jitter: factor.
GeometricResult apply_geometric(const Sample& s, TransformKind kind, double magnitude);

/// Box survival rule shared by all geometric transforms.
bool box_survives(const Box& before, const Box& after_clipped);

/// Fills 1..5 squares of side ratio*min(H,W) with the per-channel image mean.
/// Annotations pass through untouched. One entry per square is appended to
/// `applied` (magnitude = side ratio).
Sample apply_cutout(const Sample& s, Rng& rng, int count_min = 1, int count_max = 5,
                    double ratio_min = 0.05, double ratio_max = 0.2,
                    std::vector<AppliedTransform>* applied = nullptr);

struct PipelineResult {
  Sample sample;
  AugRecord record;
};

PipelineResult apply_pipeline(const Sample& s, const std::vector<TransformSpec>& pipeline,
                              Strength strength, Rng& rng);

}  // namespace mixtrain

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "mixtrain/box_geometry.hpp"
#include "mixtrain/image.hpp"

namespace mixtrain {

enum class Provenance { human, pseudo };

struct LabeledBox {
  Box box;
  int category = 0;
  Provenance provenance = Provenance::human;
  std::optional<double> score;  // set iff provenance == pseudo

  static LabeledBox human(const Box& b, int category) { return {b, category, Provenance::human, {}}; }
  static LabeledBox pseudo(const Box& b, int category, double score) {
    return {b, category, Provenance::pseudo, score};
  }

  friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

struct Sample {
  int id = 0;
  Image image;
  std::vector<LabeledBox> targets;  // annotations used for training
  std::vector<LabeledBox> clean;    // uncorrupted ground truth, evaluation only

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class ShapeKind { rectangle, disk, triangle };

struct SceneConfig {
  int image_size = 64;
  int min_shapes = 1;
  int max_shapes = 4;
  int num_categories = 3;
  int min_shape_size = 12;
  int max_shape_size = 20;
  double max_overlap_iou = 0.4;
  double pixel_noise = 0.04;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

struct NoiseConfig {
  double p_miss = 0.3;
  double sigma_loc = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const NoiseConfig&, const NoiseConfig&) = default;
};

/// Shape kind drawn for a category. Categories beyond the three filled kinds
/// are outlined variants of the same kinds.
ShapeKind shape_kind_for(int category);
bool shape_is_outlined(int category);

/// One rendered object: its category plus the pixel mask it covers.
struct RenderedShape {
  int category = 0;
  std::vector<std::uint8_t> mask;  // row-major image_size x image_size
};

/// Renders one scene. Targets are the tight boxes of each shape's pixel mask in
/// pixel-edge coordinates; `shapes` (optional) receives the masks.
Sample render_scene(std::uint64_t rng_seed, const SceneConfig& cfg,
                    std::vector<RenderedShape>* shapes = nullptr);

/// Drops and jitters the human targets of `s`. The clean copy is kept in
/// `Sample::clean`.
Sample corrupt_annotations(const Sample& s, const NoiseConfig& n);

/// In-memory dataset. Sample i is rendered from seed derive(scene.seed, i) and
/// corrupted with derive(noise.seed, i).
class Dataset {
 public:
  Dataset() = default;
  Dataset(int count, const SceneConfig& scene, const NoiseConfig& noise);
  Dataset(std::vector<Sample> samples, const SceneConfig& scene, const NoiseConfig& noise)
      : scene_(scene), noise_(noise), samples_(std::move(samples)) {}

  std::size_t size() const { return samples_.size(); }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  auto begin() const { return samples_.begin(); }
  auto end() const { return samples_.end(); }
  const SceneConfig& scene() const { return scene_; }
  const NoiseConfig& noise() const { return noise_; }

 private:
  SceneConfig scene_;
  NoiseConfig noise_;
  std::vector<Sample> samples_;
};

Dataset make_dataset(int count, const SceneConfig& scene, const NoiseConfig& noise);

struct BenchmarkSplits {
  Dataset train;
  Dataset test;
};

/// Train and test splits rendered from seeds derived from `seed`; the seeds in
/// `scene` and `noise` are ignored.
BenchmarkSplits make_benchmark(std::uint64_t seed, int train_count, int test_count,
                               SceneConfig scene = {}, NoiseConfig noise = {});

/// Writes `<dir>/images/<id>.raw` (u32 LE height, width, channels followed by
/// f32 LE pixels in row, column, channel order) and `<dir>/annotations.json`.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void write_raw_image(const Image& img, const std::filesystem::path& file);
Image read_raw_image(const std::filesystem::path& file);

}  // namespace mixtrain

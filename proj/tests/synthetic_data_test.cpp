#include "mixtrain/synthetic_data.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "mixtrain/rng.hpp"
#include "oracles.hpp"

namespace mixtrain {
namespace {

SceneConfig scene_with(int lo, int hi, std::uint64_t seed = 1) {
  SceneConfig c;
  c.min_shapes = lo;
  c.max_shapes = hi;
  c.seed = seed;
  return c;
}

TEST(RenderSceneTest, DeterministicForSeed) {
  const SceneConfig cfg;
  EXPECT_EQ(render_scene(7, cfg), render_scene(7, cfg));
  EXPECT_NE(render_scene(7, cfg).image, render_scene(8, cfg).image);
}

TEST(RenderSceneTest, DegenerateShapeRangeGivesOneTarget) {
  const SceneConfig cfg = scene_with(1, 1);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Sample s = render_scene(seed, cfg);
    ASSERT_EQ(s.targets.size(), 1u);
    EXPECT_EQ(s.targets[0].provenance, Provenance::human);
    EXPECT_FALSE(s.targets[0].score.has_value());
  }
}

TEST(RenderSceneTest, RejectsInvalidConfig) {
  SceneConfig tiny_shape;
  tiny_shape.min_shape_size = 3;
  tiny_shape.max_shape_size = 8;
  EXPECT_THROW(render_scene(0, tiny_shape), std::invalid_argument);
  SceneConfig one_cat;
  one_cat.num_categories = 1;
  EXPECT_THROW(render_scene(0, one_cat), std::invalid_argument);
  SceneConfig small_image;
  small_image.image_size = 16;
  EXPECT_THROW(render_scene(0, small_image), std::invalid_argument);
}

TEST(RenderSceneTest, TargetsAreTightMaskBoxes) {
  for (int cats : {3, 6}) {
    SceneConfig cfg;
    cfg.num_categories = cats;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      std::vector<RenderedShape> shapes;
      const Sample s = render_scene(seed, cfg, &shapes);
      ASSERT_EQ(shapes.size(), s.targets.size());
      ASSERT_EQ(s.clean, s.targets);
      for (std::size_t o = 0; o < shapes.size(); ++o) {
        const Box& b = s.targets[o].box;
        EXPECT_EQ(shapes[o].category, s.targets[o].category);
        EXPECT_GE(s.targets[o].category, 0);
        EXPECT_LT(s.targets[o].category, cats);
        for (int y = 0; y < cfg.image_size; ++y) {
          for (int x = 0; x < cfg.image_size; ++x) {
            if (!shapes[o].mask[y * cfg.image_size + x]) continue;
            EXPECT_TRUE(x >= b.x_min() && x + 1 <= b.x_max() && y >= b.y_min() && y + 1 <= b.y_max());
          }
        }
        Box tight = b;
        ASSERT_TRUE(oracle::mask_bbox(shapes[o].mask, cfg.image_size, cfg.image_size, &tight));
        EXPECT_EQ(tight, b);
      }
    }
  }
}

TEST(RenderSceneTest, RespectsOverlapAndBoundsAndPixelRange) {
  const SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Sample s = render_scene(seed, cfg);
    EXPECT_EQ(s.image.height(), 64);
    EXPECT_EQ(s.image.channels(), 3);
    for (float v : s.image.pixels()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    for (std::size_t i = 0; i < s.targets.size(); ++i) {
      const Box& b = s.targets[i].box;
      EXPECT_GE(b.x_min(), 0.0);
      EXPECT_LE(b.x_max(), 64.0);
      EXPECT_GE(b.y_min(), 0.0);
      EXPECT_LE(b.y_max(), 64.0);
      for (std::size_t j = i + 1; j < s.targets.size(); ++j) {
        EXPECT_LE(iou(b, s.targets[j].box), cfg.max_overlap_iou);
      }
    }
  }
}

TEST(CorruptTest, IdentityNoise) {
  const Sample s = render_scene(3, SceneConfig{});
  NoiseConfig n;
  n.p_miss = 0.0;
  n.sigma_loc = 0.0;
  const Sample out = corrupt_annotations(s, n);
  EXPECT_EQ(out.targets, s.targets);
  EXPECT_EQ(out.clean, s.targets);
}

TEST(CorruptTest, DropAllKeepsClean) {
  const Sample s = render_scene(3, scene_with(2, 4));
  NoiseConfig n;
  n.p_miss = 1.0;
  const Sample out = corrupt_annotations(s, n);
  EXPECT_TRUE(out.targets.empty());
  EXPECT_EQ(out.clean, s.targets);
}

TEST(CorruptTest, DropRateConcentrates) {
  NoiseConfig n;
  n.p_miss = 0.3;
  n.sigma_loc = 0.0;
  std::size_t total = 0, kept = 0;
  for (std::uint64_t i = 0; total < 10000; ++i) {
    const Sample s = render_scene(i, SceneConfig{});
    n.seed = derive_seed(99, {i});
    const Sample out = corrupt_annotations(s, n);
    total += s.targets.size();
    kept += out.targets.size();
  }
  const double dropped = 1.0 - static_cast<double>(kept) / total;
  EXPECT_GE(dropped, 0.28);
  EXPECT_LE(dropped, 0.32);
  // 99% binomial interval around p_miss.
  const double half = 2.576 * std::sqrt(0.3 * 0.7 / total);
  EXPECT_NEAR(dropped, 0.3, half);
}

TEST(CorruptTest, JitterStaysValidAndClipped) {
  NoiseConfig n;
  n.p_miss = 0.0;
  n.sigma_loc = 6.0;
  double sq = 0.0;
  int count = 0;
  for (std::uint64_t i = 0; i < 300; ++i) {
    const Sample s = render_scene(i, SceneConfig{});
    n.seed = i;
    const Sample out = corrupt_annotations(s, n);
    ASSERT_EQ(out.targets.size(), s.targets.size());
    EXPECT_LE(out.targets.size(), out.clean.size());
    for (std::size_t k = 0; k < out.targets.size(); ++k) {
      const Box& b = out.targets[k].box;
      EXPECT_TRUE(Box::is_valid(b.x_min(), b.y_min(), b.x_max(), b.y_max()));
      EXPECT_GE(b.x_min(), 0.0);
      EXPECT_LE(b.x_max(), 64.0);
      EXPECT_GE(b.y_min(), 0.0);
      EXPECT_LE(b.y_max(), 64.0);
      EXPECT_EQ(out.targets[k].category, s.targets[k].category);
      const double d = b.x_min() - s.targets[k].box.x_min();
      if (b.x_min() > 0.0) {
        sq += d * d;
        ++count;
      }
    }
  }
  // Unclipped corner offsets have roughly the configured spread.
  EXPECT_NEAR(std::sqrt(sq / count), 6.0, 1.0);
}

TEST(CorruptTest, DeterministicForNoiseSeed) {
  const Sample s = render_scene(5, scene_with(3, 4));
  NoiseConfig n;
  n.seed = 11;
  EXPECT_EQ(corrupt_annotations(s, n), corrupt_annotations(s, n));
}

TEST(DatasetTest, IdsAndDeterminism) {
  SceneConfig scene;
  scene.seed = 4;
  NoiseConfig noise;
  noise.seed = 5;
  const Dataset ds = make_dataset(3, scene, noise);
  ASSERT_EQ(ds.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(ds[i].id, i);
  std::vector<Sample> first(ds.begin(), ds.end());
  std::vector<Sample> second(ds.begin(), ds.end());
  EXPECT_EQ(first, second);
  EXPECT_EQ(make_dataset(3, scene, noise)[2], ds[2]);
  EXPECT_THROW(make_dataset(0, scene, noise), std::invalid_argument);
}

TEST(DatasetTest, CleanTargetsMatchRenderedScenes) {
  SceneConfig scene;
  scene.seed = 21;
  const Dataset ds = make_dataset(20, scene, NoiseConfig{});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample r = render_scene(derive_seed(scene.seed, {i}), scene);
    EXPECT_EQ(ds[i].clean, r.targets);
    EXPECT_EQ(ds[i].image, r.image);
  }
}

TEST(DatasetTest, NoJitterMeansSurvivorsEqualClean) {
  NoiseConfig noise;
  noise.sigma_loc = 0.0;
  const Dataset ds = make_dataset(50, SceneConfig{}, noise);
  for (const Sample& s : ds) {
    EXPECT_LE(s.targets.size(), s.clean.size());
    for (const auto& t : s.targets) {
      EXPECT_NE(std::find(s.clean.begin(), s.clean.end(), t), s.clean.end());
    }
  }
}

TEST(DatasetTest, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "mixtrain_ds_roundtrip";
  std::filesystem::remove_all(dir);
  SceneConfig scene;
  scene.seed = 8;
  const Dataset ds = make_dataset(4, scene, NoiseConfig{});
  save_dataset(ds, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "annotations.json"));
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(back[i], ds[i]);
  EXPECT_EQ(back.scene(), ds.scene());
  EXPECT_EQ(back.noise(), ds.noise());
  std::filesystem::remove_all(dir);
}

TEST(DatasetTest, RawImageHeaderLayout) {
  const auto file = std::filesystem::temp_directory_path() / "mixtrain_raw_test.raw";
  Image img(2, 3, 3);
  img.at(1, 0, 2) = 0.5f;
  write_raw_image(img, file);
  EXPECT_EQ(std::filesystem::file_size(file), 12u + 2 * 3 * 3 * 4);
  EXPECT_EQ(read_raw_image(file), img);
  std::filesystem::remove(file);
}

}  // namespace
}  // namespace mixtrain

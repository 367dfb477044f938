#include "mixtrain/augmentation.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>

#include "oracles.hpp"

namespace mixtrain {
namespace {

Image random_image(std::uint64_t seed, int h = 16, int w = 20) {
  Rng rng(seed);
  Image img(h, w, 3);
  for (float& v : img.pixels()) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  return img;
}

Sample one_box_sample(const Box& b, int size = 100) {
  Sample s;
  s.image = Image(size, size, 3, 0.5f);
  s.targets = {LabeledBox::human(b, 1)};
  s.clean = s.targets;
  return s;
}

TEST(PipelineTableTest, NormalHasFiveSpecsWithoutStrongKinds) {
  const auto p = build_pipeline(Strength::normal);
  ASSERT_EQ(p.size(), 5u);
  EXPECT_EQ(p[0].kind, TransformKind::scale_jitter);
  EXPECT_EQ(p[0].probability, 1.0);
  EXPECT_EQ(p[0].magnitude_min, 0.5);
  EXPECT_EQ(p[0].magnitude_max, 1.5);
  for (std::size_t i = 1; i < p.size(); ++i) {
    EXPECT_EQ(p[i].probability, 0.25);
    EXPECT_EQ(p[i].magnitude_min, 0.0);
    EXPECT_EQ(p[i].magnitude_max, 1.0);
  }
  for (const auto& s : p) EXPECT_FALSE(is_strong_only(s.kind));
}

TEST(PipelineTableTest, StrongHasNineSpecs) {
  const auto p = build_pipeline(Strength::strong);
  ASSERT_EQ(p.size(), 9u);
  EXPECT_EQ(p[5].kind, TransformKind::translate);
  EXPECT_EQ(p[5].probability, 0.3);
  EXPECT_EQ(p[5].magnitude_max, 0.1);
  EXPECT_EQ(p[6].kind, TransformKind::rotate);
  EXPECT_EQ(p[6].magnitude_max, 30.0);
  EXPECT_EQ(p[7].kind, TransformKind::shear);
  EXPECT_EQ(p[7].magnitude_max, 30.0);
  EXPECT_EQ(p[8].kind, TransformKind::cutout);
  EXPECT_EQ(p[8].magnitude_min, 0.05);
  EXPECT_EQ(p[8].magnitude_max, 0.2);
  EXPECT_EQ(p[8].count_min, 1);
  EXPECT_EQ(p[8].count_max, 5);
}

TEST(PhotometricTest, Identities) {
  Image img = random_image(1);
  for (float& v : img.pixels()) v *= 0.9f;
  EXPECT_EQ(apply_photometric(img, TransformKind::solarize, 0.95), img);
  EXPECT_EQ(apply_photometric(img, TransformKind::brightness, 0.5), img);
  const Image flat(8, 8, 3, 0.3f);
  EXPECT_EQ(apply_photometric(flat, TransformKind::contrast, 0.5), flat);
  EXPECT_EQ(apply_photometric(flat, TransformKind::sharpness, 0.8), flat);
}

TEST(PhotometricTest, MatchesPixelFormulas) {
  const Image img = random_image(2, 6, 7);
  const double r = 0.37;
  const Image sol = apply_photometric(img, TransformKind::solarize, r);
  const Image bri = apply_photometric(img, TransformKind::brightness, r);
  const Image con = apply_photometric(img, TransformKind::contrast, 0.9);
  const Image sha = apply_photometric(img, TransformKind::sharpness, r);
  double mean = 0.0;
  for (float v : img.pixels()) mean += v;
  mean /= static_cast<double>(img.size());
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 7; ++x) {
        const double v = img.at(c, y, x);
        EXPECT_FLOAT_EQ(sol.at(c, y, x), static_cast<float>(v > r ? 1.0 - v : v));
        EXPECT_FLOAT_EQ(bri.at(c, y, x), static_cast<float>(std::min(1.0, v * 0.87)));
        EXPECT_NEAR(con.at(c, y, x), std::clamp(mean + 1.4 * (v - mean), 0.0, 1.0), 1e-6);
        double acc = 0.0;
        int n = 0;
        for (int yy = std::max(0, y - 1); yy <= std::min(5, y + 1); ++yy) {
          for (int xx = std::max(0, x - 1); xx <= std::min(6, x + 1); ++xx) {
            acc += img.at(c, yy, xx);
            ++n;
          }
        }
        EXPECT_NEAR(sha.at(c, y, x), std::clamp(v + r * (v - acc / n), 0.0, 1.0), 1e-6);
      }
    }
  }
}

TEST(PhotometricTest, RejectsOutOfRangePixels) {
  Image img(4, 4, 3, 0.5f);
  img.at(0, 1, 1) = 1.5f;
  EXPECT_THROW(apply_photometric(img, TransformKind::brightness, 0.3), std::invalid_argument);
  img.at(0, 1, 1) = -0.1f;
  EXPECT_THROW(apply_photometric(img, TransformKind::solarize, 0.3), std::invalid_argument);
}

TEST(PhotometricTest, OutputStaysInUnitRange) {
  Rng rng(12);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Image img = random_image(seed);
    for (auto kind : {TransformKind::solarize, TransformKind::brightness, TransformKind::contrast,
                      TransformKind::sharpness}) {
      const double r = uniform(rng, 0.0, 1.0);
      for (float v : apply_photometric(img, kind, r).pixels()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
    }
  }
}

TEST(GeometricTest, ZeroRotationIsIdentity) {
  Sample s = render_scene(3, SceneConfig{});
  const auto out = apply_geometric(s, TransformKind::rotate, 0.0);
  EXPECT_EQ(out.sample.image, s.image);
  EXPECT_EQ(out.sample.targets, s.targets);
  EXPECT_TRUE(out.dropped.empty());
}

TEST(GeometricTest, TranslateShiftsBox) {
  const Sample s = one_box_sample(Box::make(10, 10, 20, 20));
  const auto out = apply_geometric(s, TransformKind::translate, 0.1);
  ASSERT_EQ(out.sample.targets.size(), 1u);
  const Box& b = out.sample.targets[0].box;
  EXPECT_NEAR(b.x_min(), 20.0, 1e-9);
  EXPECT_NEAR(b.y_min(), 10.0, 1e-9);
  EXPECT_NEAR(b.x_max(), 30.0, 1e-9);
  EXPECT_NEAR(b.y_max(), 20.0, 1e-9);
}

TEST(GeometricTest, RotationGivesCornerHull) {
  const Sample s = one_box_sample(Box::make(30, 40, 60, 55));
  const auto out = apply_geometric(s, TransformKind::rotate, 30.0);
  ASSERT_EQ(out.sample.targets.size(), 1u);
  const double t = 30.0 * std::acos(-1.0) / 180.0;
  double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
  for (double x : {30.0, 60.0}) {
    for (double y : {40.0, 55.0}) {
      const double rx = 50 + std::cos(t) * (x - 50) - std::sin(t) * (y - 50);
      const double ry = 50 + std::sin(t) * (x - 50) + std::cos(t) * (y - 50);
      x0 = std::min(x0, rx);
      y0 = std::min(y0, ry);
      x1 = std::max(x1, rx);
      y1 = std::max(y1, ry);
    }
  }
  const Box& b = out.sample.targets[0].box;
  EXPECT_NEAR(b.x_min(), x0, 1e-9);
  EXPECT_NEAR(b.y_min(), y0, 1e-9);
  EXPECT_NEAR(b.x_max(), x1, 1e-9);
  EXPECT_NEAR(b.y_max(), y1, 1e-9);
}

TEST(GeometricTest, SurvivalRuleDropsSlivers) {
  const Sample s = one_box_sample(Box::make(90, 10, 99, 20));
  const auto out = apply_geometric(s, TransformKind::translate, 0.08);
  EXPECT_TRUE(out.sample.targets.empty());
  ASSERT_EQ(out.dropped.size(), 1u);
  EXPECT_FALSE(box_survives(Box::make(0, 0, 10, 10), Box::make(0, 0, 2, 10)));
  EXPECT_TRUE(box_survives(Box::make(0, 0, 10, 10), Box::make(0, 0, 2.5, 10)));
  EXPECT_FALSE(box_survives(Box::make(0, 0, 2, 2), Box::make(0, 0, 1.9, 2)));
}

TEST(GeometricTest, ScaleJitterScalesImageAndBoxes) {
  const Sample s = one_box_sample(Box::make(10, 20, 30, 40), 64);
  const auto out = apply_geometric(s, TransformKind::scale_jitter, 1.5);
  EXPECT_EQ(out.sample.image.width(), 96);
  EXPECT_EQ(out.sample.image.height(), 96);
  const Box& b = out.sample.targets[0].box;
  EXPECT_DOUBLE_EQ(b.x_min(), 15.0);
  EXPECT_DOUBLE_EQ(b.y_max(), 60.0);
}

TEST(GeometricTest, CanvasPlacementCropsAndPads) {
  Sample s = one_box_sample(Box::make(10, 10, 20, 20), 40);
  s.image.at(0, 10, 10) = 1.0f;
  const auto out = place_on_canvas(s, 64, 64, 5, -3);
  EXPECT_EQ(out.sample.image.height(), 64);
  EXPECT_EQ(out.sample.image.at(0, 7, 15), 1.0f);
  const Box& b = out.sample.targets[0].box;
  EXPECT_EQ(b, Box::make(15, 7, 25, 17));
  const float fill = s.image.channel_means()[0];
  EXPECT_EQ(out.sample.image.at(0, 60, 60), fill);
}

// For every object, the tight box of its transformed pixel mask must sit inside
// the remapped box. Nearest-neighbour sampling moves a pixel centre by at most
// half a pixel relative to the exact map, hence the 0.5 px allowance. A disk
// rotated by 30 degrees keeps its tight box while the corner hull grows by
// (cos 30 + sin 30)^2 ~ 1.87, so the looseness bound leaves room for that and
// for rasterisation of small shapes.
TEST(GeometricTest, RemappingIsSoundAgainstMaskOracle) {
  const SceneConfig cfg;
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    std::vector<RenderedShape> shapes;
    const Sample scene = render_scene(seed, cfg, &shapes);
    for (std::size_t o = 0; o < shapes.size(); ++o) {
      Sample s;
      s.image = Image(64, 64, 1);
      for (int i = 0; i < 64 * 64; ++i) s.image.pixels()[i] = shapes[o].mask[i] ? 1.0f : 0.0f;
      s.targets = {scene.targets[o]};
      for (auto [kind, mag] : std::vector<std::pair<TransformKind, double>>{
               {TransformKind::rotate, 30.0}, {TransformKind::rotate, -17.0},
               {TransformKind::shear, 30.0}, {TransformKind::shear, -22.0},
               {TransformKind::translate, 0.07}}) {
        const auto out = apply_geometric(s, kind, mag);
        if (out.sample.targets.empty()) continue;
        std::vector<std::uint8_t> mask(64 * 64);
        for (int i = 0; i < 64 * 64; ++i) mask[i] = out.sample.image.pixels()[i] > 0.5f;
        Box tight = out.sample.targets[0].box;
        if (!oracle::mask_bbox(mask, 64, 64, &tight)) continue;
        const Box& b = out.sample.targets[0].box;
        EXPECT_GE(tight.x_min(), b.x_min() - 0.5);
        EXPECT_GE(tight.y_min(), b.y_min() - 0.5);
        EXPECT_LE(tight.x_max(), b.x_max() + 0.5);
        EXPECT_LE(tight.y_max(), b.y_max() + 0.5);
        if (kind == TransformKind::rotate && area(tight) >= 100.0) {
          EXPECT_LE(area(b), 2.5 * area(tight)) << "seed " << seed << " object " << o;
        }
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 300);
}

TEST(GeometricTest, PhotometricNeverMovesBoxes) {
  Rng rng(5);
  const Sample s = render_scene(9, SceneConfig{});
  std::vector<TransformSpec> photometric;
  for (auto spec : build_pipeline(Strength::normal)) {
    if (spec.kind == TransformKind::scale_jitter) continue;
    spec.probability = 1.0;
    photometric.push_back(spec);
  }
  const auto out = apply_pipeline(s, photometric, Strength::normal, rng);
  EXPECT_EQ(out.sample.targets, s.targets);
  EXPECT_EQ(out.record.applied.size(), 4u);
}

TEST(CutoutTest, FillsSquaresWithMeanAndKeepsBoxes) {
  const SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Sample s = render_scene(seed, cfg);
    Rng rng(seed);
    std::vector<AppliedTransform> applied;
    const Sample out = apply_cutout(s, rng, 1, 5, 0.05, 0.2, &applied);
    EXPECT_EQ(out.targets, s.targets);
    EXPECT_GE(applied.size(), 1u);
    EXPECT_LE(applied.size(), 5u);
    const auto fill = s.image.channel_means();
    for (const auto& a : applied) {
      EXPECT_GT(a.magnitude, 0.05);
      EXPECT_LT(a.magnitude, 0.2);
      EXPECT_GE(a.aux, 3.2);
    }
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
          if (out.image.at(c, y, x) != s.image.at(c, y, x)) EXPECT_EQ(out.image.at(c, y, x), fill[c]);
        }
      }
    }
  }
}

TEST(PipelineTest, OnlyScaleFiresWhenDrawsFail) {
  auto pipeline = build_pipeline(Strength::strong);
  for (auto& spec : pipeline) {
    if (spec.kind != TransformKind::scale_jitter) spec.probability = 0.0;
  }
  Rng rng(1);
  const Sample s = render_scene(1, SceneConfig{});
  const auto out = apply_pipeline(s, pipeline, Strength::strong, rng);
  ASSERT_EQ(out.record.applied.size(), 1u);
  EXPECT_EQ(out.record.applied[0].kind, TransformKind::scale_jitter);
  const double f = out.record.applied[0].magnitude;
  const auto expected = apply_scale(s, f);
  EXPECT_EQ(out.sample, expected.sample);
}

TEST(PipelineTest, Deterministic) {
  const Sample s = render_scene(2, SceneConfig{});
  for (auto strength : {Strength::normal, Strength::strong}) {
    Rng a(77), b(77);
    const auto pa = apply_pipeline(s, build_pipeline(strength), strength, a);
    const auto pb = apply_pipeline(s, build_pipeline(strength), strength, b);
    EXPECT_EQ(pa.sample, pb.sample);
    EXPECT_EQ(pa.record, pb.record);
  }
}

TEST(PipelineTest, FiringRatesAndRecordConsistency) {
  const SceneConfig cfg;
  int translate = 0, cutout = 0, solarize = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const Sample s = render_scene(i % 50, cfg);
    Rng rng(derive_seed(3, {i}));
    const auto out = apply_pipeline(s, build_pipeline(Strength::strong), Strength::strong, rng);
    bool t = false, c = false, so = false;
    for (const auto& a : out.record.applied) {
      t |= a.kind == TransformKind::translate;
      c |= a.kind == TransformKind::cutout;
      so |= a.kind == TransformKind::solarize;
    }
    translate += t;
    cutout += c;
    solarize += so;
    EXPECT_EQ(out.record.kept.size(), out.sample.targets.size());
    EXPECT_EQ(out.record.kept.size() + out.record.dropped.size(), s.targets.size());
    for (std::size_t k = 0; k < out.record.kept.size(); ++k) {
      EXPECT_EQ(out.sample.targets[k].category, s.targets[out.record.kept[k]].category);
    }
    EXPECT_EQ(out.record.all_dropped, !s.targets.empty() && out.sample.targets.empty());
    for (float v : out.sample.image.pixels()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);

    Rng rng2(derive_seed(4, {i}));
    const auto normal = apply_pipeline(s, build_pipeline(Strength::normal), Strength::normal, rng2);
    for (const auto& a : normal.record.applied) EXPECT_FALSE(is_strong_only(a.kind));
  }
  // 99.9% binomial bounds around 300 and 250.
  EXPECT_NEAR(translate, 300, 48);
  EXPECT_NEAR(solarize, 250, 45);
  EXPECT_EQ(cutout, 1000);
}

TEST(PipelineTest, RecordSerializesToJsonLine) {
  Rng rng(3);
  const auto out = apply_pipeline(render_scene(4, SceneConfig{}), build_pipeline(Strength::strong),
                                  Strength::strong, rng);
  const std::string line = out.record.to_json_line();
  EXPECT_EQ(line.find('\n'), std::string::npos);
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j["strength"], "strong");
  EXPECT_EQ(j["applied"].size(), out.record.applied.size());
}

}  // namespace
}  // namespace mixtrain

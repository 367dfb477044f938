#include "mixtrain/synthetic_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mixtrain/rng.hpp"

namespace mixtrain {

namespace {

using Mask = std::vector<std::uint8_t>;

Mask erode(const Mask& m, int n) {
  Mask out(m.size(), 0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const auto at = [&](int yy, int xx) {
        return yy >= 0 && yy < n && xx >= 0 && xx < n && m[yy * n + xx];
      };
      out[y * n + x] = at(y, x) && at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1);
    }
  }
  return out;
}

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

Mask draw_mask(ShapeKind kind, bool outlined, double x0, double y0, double w, double h,
               bool flip, double apex, int n) {
  Mask m(static_cast<std::size_t>(n) * n, 0);
  const double cx = x0 + 0.5 * w;
  const double cy = y0 + 0.5 * h;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      bool in = false;
      switch (kind) {
        case ShapeKind::rectangle:
          in = px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
          break;
        case ShapeKind::disk: {
          const double r = 0.5 * w;
          in = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
          break;
        }
        case ShapeKind::triangle: {
          const double top = flip ? y0 + h : y0;
          const double base = flip ? y0 : y0 + h;
          const double ax = x0 + apex * w;
          const double e0 = edge(ax, top, x0, base, px, py);
          const double e1 = edge(x0, base, x0 + w, base, px, py);
          const double e2 = edge(x0 + w, base, ax, top, px, py);
          in = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
          break;
        }
      }
      m[y * n + x] = in ? 1 : 0;
    }
  }
  if (outlined) {
    const Mask inner = erode(erode(m, n), n);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = m[i] && !inner[i];
  }
  return m;
}

std::optional<Box> mask_bbox(const Mask& m, int n) {
  int x0 = n, y0 = n, x1 = -1, y1 = -1;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      if (!m[y * n + x]) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) return std::nullopt;
  return Box::make(x0, y0, x1 + 1, y1 + 1);
}

std::array<float, 3> random_color(Rng& rng) {
  return {static_cast<float>(uniform(rng, 0.0, 1.0)), static_cast<float>(uniform(rng, 0.0, 1.0)),
          static_cast<float>(uniform(rng, 0.0, 1.0))};
}

double color_distance(const std::array<float, 3>& a, const std::array<float, 3>& b) {
  double d = 0.0;
  for (int c = 0; c < 3; ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(d);
}

}  // namespace

void SceneConfig::validate() const {
  if (num_categories < 2 || num_categories > 6) {
    throw std::invalid_argument("SceneConfig: num_categories must be in [2, 6]");
  }
  if (image_size < 32) throw std::invalid_argument("SceneConfig: image_size must be >= 32");
  if (min_shape_size < 4) throw std::invalid_argument("SceneConfig: min_shape_size must be >= 4");
  if (max_shape_size < min_shape_size || max_shape_size > image_size) {
    throw std::invalid_argument("SceneConfig: bad shape size range");
  }
  if (min_shapes < 1 || max_shapes < min_shapes) {
    throw std::invalid_argument("SceneConfig: bad shapes-per-image range");
  }
  if (!(max_overlap_iou >= 0.0 && max_overlap_iou < 1.0)) {
    throw std::invalid_argument("SceneConfig: max_overlap_iou must be in [0, 1)");
  }
  if (pixel_noise < 0.0) throw std::invalid_argument("SceneConfig: pixel_noise must be >= 0");
}

void NoiseConfig::validate() const {
  if (!(p_miss >= 0.0 && p_miss < 1.0) && p_miss != 1.0) {
    throw std::invalid_argument("NoiseConfig: p_miss must be in [0, 1]");
  }
  if (!(sigma_loc >= 0.0) || !std::isfinite(sigma_loc)) {
    throw std::invalid_argument("NoiseConfig: sigma_loc must be >= 0");
  }
}

ShapeKind shape_kind_for(int category) { return static_cast<ShapeKind>(category % 3); }
bool shape_is_outlined(int category) { return category >= 3; }

Sample render_scene(std::uint64_t rng_seed, const SceneConfig& cfg,
                    std::vector<RenderedShape>* shapes) {
  cfg.validate();
  Rng rng(rng_seed);
  const int n = cfg.image_size;

  Sample s;
  s.image = Image(n, n, 3);
  const auto bg = random_color(rng);
  const double gx = uniform(rng, -0.15, 0.15);
  const double gy = uniform(rng, -0.15, 0.15);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double ramp = gx * (x / double(n) - 0.5) + gy * (y / double(n) - 0.5);
        s.image.at(c, y, x) = static_cast<float>(std::clamp(bg[c] + ramp, 0.0, 1.0));
      }
    }
  }

  const int wanted = uniform_int(rng, cfg.min_shapes, cfg.max_shapes);
  if (shapes) shapes->clear();
  constexpr int kMaxAttempts = 60;
  for (int k = 0; k < wanted; ++k) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const int category = uniform_int(rng, 0, cfg.num_categories - 1);
      const ShapeKind kind = shape_kind_for(category);
      double w = uniform(rng, cfg.min_shape_size, cfg.max_shape_size);
      double h = uniform(rng, cfg.min_shape_size, cfg.max_shape_size);
      if (kind == ShapeKind::disk) h = w;
      const double x0 = uniform(rng, 0.0, n - w);
      const double y0 = uniform(rng, 0.0, n - h);
      const bool flip = bernoulli(rng, 0.5);
      const double apex = uniform(rng, 0.2, 0.8);
      auto color = random_color(rng);
      for (int tries = 0; tries < 20 && color_distance(color, bg) < 0.45; ++tries) {
        color = random_color(rng);
      }

      Mask mask = draw_mask(kind, shape_is_outlined(category), x0, y0, w, h, flip, apex, n);
      const auto bbox = mask_bbox(mask, n);
      if (!bbox || bbox->width() < 4 || bbox->height() < 4) continue;
      const bool overlaps = std::any_of(s.targets.begin(), s.targets.end(), [&](const LabeledBox& t) {
        return iou(t.box, *bbox) > cfg.max_overlap_iou;
      });
      if (overlaps) continue;

      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          if (!mask[y * n + x]) continue;
          for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = color[c];
        }
      }
      s.targets.push_back(LabeledBox::human(*bbox, category));
      if (shapes) shapes->push_back({category, std::move(mask)});
      break;
    }
  }

  if (cfg.pixel_noise > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.pixel_noise);
    for (float& v : s.image.pixels()) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
  }
  s.clean = s.targets;
  return s;
}

Sample corrupt_annotations(const Sample& s, const NoiseConfig& n) {
  n.validate();
  Rng rng(n.seed);
  std::normal_distribution<double> jitter(0.0, n.sigma_loc > 0.0 ? n.sigma_loc : 1.0);
  const double w = s.image.width();
  const double h = s.image.height();

  Sample out;
  out.id = s.id;
  out.image = s.image;
  out.clean = s.clean.empty() ? s.targets : s.clean;
  for (const LabeledBox& t : s.targets) {
    if (t.provenance != Provenance::human) {
      throw std::invalid_argument("corrupt_annotations: expects human targets only");
    }
    if (bernoulli(rng, n.p_miss)) continue;
    if (n.sigma_loc == 0.0) {
      out.targets.push_back(t);
      continue;
    }
    // Jitter may invert or collapse a box; resample until it is valid.
    Box jittered = t.box;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const double x0 = std::clamp(t.box.x_min() + jitter(rng), 0.0, w);
      const double y0 = std::clamp(t.box.y_min() + jitter(rng), 0.0, h);
      const double x1 = std::clamp(t.box.x_max() + jitter(rng), 0.0, w);
      const double y1 = std::clamp(t.box.y_max() + jitter(rng), 0.0, h);
      if (Box::is_valid(x0, y0, x1, y1)) {
        jittered = Box::make(x0, y0, x1, y1);
        ok = true;
      }
    }
    out.targets.push_back(LabeledBox::human(jittered, t.category));
  }
  return out;
}

Dataset::Dataset(int count, const SceneConfig& scene, const NoiseConfig& noise)
    : scene_(scene), noise_(noise) {
  if (count < 1) throw std::invalid_argument("make_dataset: count must be >= 1");
  scene.validate();
  noise.validate();
  samples_.reserve(count);
  for (int i = 0; i < count; ++i) {
    Sample clean = render_scene(derive_seed(scene.seed, {static_cast<std::uint64_t>(i)}), scene);
    clean.id = i;
    NoiseConfig per_sample = noise;
    per_sample.seed = derive_seed(noise.seed, {static_cast<std::uint64_t>(i)});
    samples_.push_back(corrupt_annotations(clean, per_sample));
  }
}

Dataset make_dataset(int count, const SceneConfig& scene, const NoiseConfig& noise) {
  return Dataset(count, scene, noise);
}

BenchmarkSplits make_benchmark(std::uint64_t seed, int train_count, int test_count,
                               SceneConfig scene, NoiseConfig noise) {
  SceneConfig test_scene = scene;
  NoiseConfig test_noise = noise;
  scene.seed = derive_seed(seed, {1});
  noise.seed = derive_seed(seed, {2});
  test_scene.seed = derive_seed(seed, {3});
  test_noise.seed = derive_seed(seed, {4});
  return {Dataset(train_count, scene, noise), Dataset(test_count, test_scene, test_noise)};
}

// ---------------------------------------------------------------------------
// Disk format

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("raw image: truncated header");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

nlohmann::json boxes_to_json(const std::vector<LabeledBox>& boxes) {
  auto arr = nlohmann::json::array();
  for (const auto& b : boxes) {
    arr.push_back({b.box.x_min(), b.box.y_min(), b.box.x_max(), b.box.y_max(), b.category});
  }
  return arr;
}

std::vector<LabeledBox> boxes_from_json(const nlohmann::json& arr) {
  std::vector<LabeledBox> out;
  for (const auto& e : arr) {
    out.push_back(LabeledBox::human(
        Box::make(e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<double>(),
                  e.at(3).get<double>()),
        e.at(4).get<int>()));
  }
  return out;
}

std::string image_name(int id) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << id << ".raw";
  return os.str();
}

}  // namespace

void write_raw_image(const Image& img, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  put_u32(os, img.height());
  put_u32(os, img.width());
  put_u32(os, img.channels());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        const float v = img.at(c, y, x);
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(os, bits);
      }
    }
  }
}

Image read_raw_image(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  const int h = static_cast<int>(get_u32(is));
  const int w = static_cast<int>(get_u32(is));
  const int c = static_cast<int>(get_u32(is));
  Image img(h, w, c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        const std::uint32_t bits = get_u32(is);
        float v;
        std::memcpy(&v, &bits, 4);
        img.at(ch, y, x) = v;
      }
    }
  }
  return img;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  nlohmann::json ann;
  const auto& sc = ds.scene();
  ann["scene"] = {{"image_size", sc.image_size},       {"min_shapes", sc.min_shapes},
                  {"max_shapes", sc.max_shapes},       {"num_categories", sc.num_categories},
                  {"min_shape_size", sc.min_shape_size}, {"max_shape_size", sc.max_shape_size},
                  {"max_overlap_iou", sc.max_overlap_iou}, {"pixel_noise", sc.pixel_noise},
                  {"seed", sc.seed}};
  ann["noise"] = {{"p_miss", ds.noise().p_miss},
                  {"sigma_loc", ds.noise().sigma_loc},
                  {"seed", ds.noise().seed}};
  auto samples = nlohmann::json::array();
  for (const Sample& s : ds) {
    const std::string name = image_name(s.id);
    write_raw_image(s.image, dir / "images" / name);
    samples.push_back({{"id", s.id},
                       {"file", "images/" + name},
                       {"noisy", boxes_to_json(s.targets)},
                       {"clean", boxes_to_json(s.clean)}});
  }
  ann["samples"] = std::move(samples);
  std::ofstream os(dir / "annotations.json");
  if (!os) throw std::runtime_error("cannot write annotations in " + dir.string());
  os << ann.dump(1) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "annotations.json");
  if (!is) throw std::runtime_error("no annotations.json in " + dir.string());
  const nlohmann::json ann = nlohmann::json::parse(is);
  SceneConfig sc;
  const auto& js = ann.at("scene");
  sc.image_size = js.at("image_size");
  sc.min_shapes = js.at("min_shapes");
  sc.max_shapes = js.at("max_shapes");
  sc.num_categories = js.at("num_categories");
  sc.min_shape_size = js.at("min_shape_size");
  sc.max_shape_size = js.at("max_shape_size");
  sc.max_overlap_iou = js.at("max_overlap_iou");
  sc.pixel_noise = js.at("pixel_noise");
  sc.seed = js.at("seed");
  NoiseConfig nc;
  nc.p_miss = ann.at("noise").at("p_miss");
  nc.sigma_loc = ann.at("noise").at("sigma_loc");
  nc.seed = ann.at("noise").at("seed");

  std::vector<Sample> samples;
  for (const auto& e : ann.at("samples")) {
    Sample s;
    s.id = e.at("id");
    s.image = read_raw_image(dir / e.at("file").get<std::string>());
    s.targets = boxes_from_json(e.at("noisy"));
    s.clean = boxes_from_json(e.at("clean"));
    samples.push_back(std::move(s));
  }
  return Dataset(std::move(samples), sc, nc);
}

}  // namespace mixtrain

#include "mixtrain/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mixtrain {

std::string_view to_string(TransformKind k) {
  switch (k) {
    case TransformKind::scale_jitter: return "scale_jitter";
    case TransformKind::solarize: return "solarize";
    case TransformKind::brightness: return "brightness";
    case TransformKind::contrast: return "contrast";
    case TransformKind::sharpness: return "sharpness";
    case TransformKind::translate: return "translate";
    case TransformKind::rotate: return "rotate";
    case TransformKind::shear: return "shear";
    case TransformKind::cutout: return "cutout";
  }
  return "?";
}

std::string_view to_string(Strength s) { return s == Strength::normal ? "normal" : "strong"; }

bool is_strong_only(TransformKind k) {
  return k == TransformKind::translate || k == TransformKind::rotate ||
         k == TransformKind::shear || k == TransformKind::cutout;
}

std::string AugRecord::to_json_line() const {
  nlohmann::json j;
  j["strength"] = to_string(strength);
  auto arr = nlohmann::json::array();
  for (const auto& a : applied) {
    arr.push_back({{"kind", to_string(a.kind)}, {"magnitude", a.magnitude}, {"aux", a.aux}});
  }
  j["applied"] = std::move(arr);
  j["kept"] = kept;
  j["dropped"] = dropped;
  j["all_dropped"] = all_dropped;
  return j.dump();
}

std::vector<TransformSpec> build_pipeline(Strength strength) {
  std::vector<TransformSpec> p = {
      {TransformKind::scale_jitter, 1.0, 0.5, 1.5},
      {TransformKind::solarize, 0.25, 0.0, 1.0},
      {TransformKind::brightness, 0.25, 0.0, 1.0},
      {TransformKind::contrast, 0.25, 0.0, 1.0},
      {TransformKind::sharpness, 0.25, 0.0, 1.0},
  };
  if (strength == Strength::strong) {
    p.push_back({TransformKind::translate, 0.3, 0.0, 0.1});
    p.push_back({TransformKind::rotate, 0.3, 0.0, 30.0});
    p.push_back({TransformKind::shear, 0.3, 0.0, 30.0});
    p.push_back({TransformKind::cutout, 1.0, 0.05, 0.2, 1, 5});
  }
  return p;
}

// ---------------------------------------------------------------------------
// Photometric

namespace {

void check_range(const Image& img) {
  for (float v : img.pixels()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw std::invalid_argument("apply_photometric: pixel outside [0, 1]");
    }
  }
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

Image box_blur3(const Image& img) {
  Image out(img.height(), img.width(), img.channels());
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        double acc = 0.0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy;
            const int xx = x + dx;
            if (yy < 0 || yy >= img.height() || xx < 0 || xx >= img.width()) continue;
            acc += img.at(c, yy, xx);
            ++n;
          }
        }
        out.at(c, y, x) = static_cast<float>(acc / n);
      }
    }
  }
  return out;
}

}  // namespace

Image apply_photometric(const Image& image, TransformKind kind, double magnitude) {
  check_range(image);
  Image out = image;
  auto px = out.pixels();
  switch (kind) {
    case TransformKind::solarize:
      for (float& v : px) {
        if (v > magnitude) v = 1.0f - v;
      }
      break;
    case TransformKind::brightness: {
      const double f = 0.5 + magnitude;
      for (float& v : px) v = clamp01(v * f);
      break;
    }
    case TransformKind::contrast: {
      const double f = 0.5 + magnitude;
      const double mean = image.mean();
      for (float& v : px) v = clamp01(mean + f * (v - mean));
      break;
    }
    case TransformKind::sharpness: {
      const Image blurred = box_blur3(image);
      const auto b = blurred.pixels();
      for (std::size_t i = 0; i < px.size(); ++i) px[i] = clamp01(px[i] + magnitude * (px[i] - b[i]));
      break;
    }
    default:
      throw std::invalid_argument("apply_photometric: not a photometric transform");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometric

Affine Affine::translation(double dx, double dy) { return {1, 0, 0, 1, dx, dy}; }

Affine Affine::rotation(double degrees, double cx, double cy) {
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t);
  const double sn = std::sin(t);
  return {cs, -sn, sn, cs, cx - cs * cx + sn * cy, cy - sn * cx - cs * cy};
}

Affine Affine::shear(double degrees, int axis, double cx, double cy) {
  const double k = std::tan(degrees * std::numbers::pi / 180.0);
  if (axis == 0) return {1, k, 0, 1, -k * cy, 0};
  return {1, 0, k, 1, 0, -k * cx};
}

void Affine::apply(double x, double y, double* ox, double* oy) const {
  *ox = a * x + b * y + tx;
  *oy = c * x + d * y + ty;
}

Affine Affine::inverse() const {
  const double det = a * d - b * c;
  if (det == 0.0) throw std::invalid_argument("Affine: singular map");
  Affine inv;
  inv.a = d / det;
  inv.b = -b / det;
  inv.c = -c / det;
  inv.d = a / det;
  inv.tx = -(inv.a * tx + inv.b * ty);
  inv.ty = -(inv.c * tx + inv.d * ty);
  return inv;
}

bool box_survives(const Box& before, const Box& after_clipped) {
  const double a = area(after_clipped);
  return a >= 0.25 * area(before) && a >= 4.0;
}

namespace {

// Maps each target through `map_box`, clips to the canvas and applies the
// survival rule.
template <typename MapBox>
void remap_targets(const Sample& in, Sample& out, MapBox map_box, GeometricResult& res) {
  const double w = out.image.width();
  const double h = out.image.height();
  for (std::size_t i = 0; i < in.targets.size(); ++i) {
    const LabeledBox& t = in.targets[i];
    const auto mapped = map_box(t.box);
    Box clipped = t.box;
    if (mapped && clip_box(*mapped, w, h, &clipped) && box_survives(t.box, clipped)) {
      LabeledBox nt = t;
      nt.box = clipped;
      out.targets.push_back(nt);
      res.kept.push_back(i);
    } else {
      res.dropped.push_back(i);
    }
  }
}

}  // namespace

GeometricResult apply_affine(const Sample& s, const Affine& map) {
  const Affine inv = map.inverse();
  const int h = s.image.height();
  const int w = s.image.width();
  const int nc = s.image.channels();
  const auto fill = s.image.channel_means();

  GeometricResult res;
  Sample& out = res.sample;
  out.id = s.id;
  out.clean = s.clean;
  out.image = Image(h, w, nc);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double sx, sy;
      inv.apply(x + 0.5, y + 0.5, &sx, &sy);
      const int ix = static_cast<int>(std::floor(sx));
      const int iy = static_cast<int>(std::floor(sy));
      const bool inside = ix >= 0 && ix < w && iy >= 0 && iy < h;
      for (int c = 0; c < nc; ++c) out.image.at(c, y, x) = inside ? s.image.at(c, iy, ix) : fill[c];
    }
  }

  remap_targets(s, out, [&](const Box& b) -> std::optional<Box> {
    const double xs[4] = {b.x_min(), b.x_max(), b.x_min(), b.x_max()};
    const double ys[4] = {b.y_min(), b.y_min(), b.y_max(), b.y_max()};
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (int k = 0; k < 4; ++k) {
      double ox, oy;
      map.apply(xs[k], ys[k], &ox, &oy);
      x0 = std::min(x0, ox);
      y0 = std::min(y0, oy);
      x1 = std::max(x1, ox);
      y1 = std::max(y1, oy);
    }
    if (!Box::is_valid(x0, y0, x1, y1)) return std::nullopt;
    return Box::make(x0, y0, x1, y1);
  }, res);
  return res;
}

GeometricResult apply_scale(const Sample& s, double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor)) {
    throw std::invalid_argument("apply_scale: factor must be positive");
  }
  const int h = s.image.height();
  const int w = s.image.width();
  const int nh = std::max(1, static_cast<int>(std::lround(h * factor)));
  const int nw = std::max(1, static_cast<int>(std::lround(w * factor)));
  const double fy = static_cast<double>(nh) / h;
  const double fx = static_cast<double>(nw) / w;

  GeometricResult res;
  Sample& out = res.sample;
  out.id = s.id;
  out.clean = s.clean;
  out.image = Image(nh, nw, s.image.channels());
  for (int y = 0; y < nh; ++y) {
    const int iy = std::min(h - 1, static_cast<int>(std::floor((y + 0.5) / fy)));
    for (int x = 0; x < nw; ++x) {
      const int ix = std::min(w - 1, static_cast<int>(std::floor((x + 0.5) / fx)));
      for (int c = 0; c < s.image.channels(); ++c) out.image.at(c, y, x) = s.image.at(c, iy, ix);
    }
  }
  for (std::size_t i = 0; i < s.targets.size(); ++i) {
    LabeledBox t = s.targets[i];
    t.box = Box::make(t.box.x_min() * fx, t.box.y_min() * fy, t.box.x_max() * fx,
                      t.box.y_max() * fy);
    out.targets.push_back(t);
    res.kept.push_back(i);
  }
  return res;
}

GeometricResult place_on_canvas(const Sample& s, int height, int width, int ox, int oy) {
  const auto fill = s.image.channel_means();
  GeometricResult res;
  Sample& out = res.sample;
  out.id = s.id;
  out.clean = s.clean;
  out.image = Image(height, width, s.image.channels());
  for (int c = 0; c < s.image.channels(); ++c) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const int sx = x - ox;
        const int sy = y - oy;
        const bool inside = sx >= 0 && sx < s.image.width() && sy >= 0 && sy < s.image.height();
        out.image.at(c, y, x) = inside ? s.image.at(c, sy, sx) : fill[c];
      }
    }
  }
  remap_targets(s, out, [&](const Box& b) -> std::optional<Box> {
    return Box::make(b.x_min() + ox, b.y_min() + oy, b.x_max() + ox, b.y_max() + oy);
  }, res);
  return res;
}

GeometricResult apply_geometric(const Sample& s, TransformKind kind, double magnitude) {
  const double cx = 0.5 * s.image.width();
  const double cy = 0.5 * s.image.height();
  switch (kind) {
    case TransformKind::scale_jitter:
      return apply_scale(s, magnitude);
    case TransformKind::translate:
      return apply_affine(s, Affine::translation(magnitude * s.image.width(), 0.0));
    case TransformKind::rotate:
      return apply_affine(s, Affine::rotation(magnitude, cx, cy));
    case TransformKind::shear:
      return apply_affine(s, Affine::shear(magnitude, 0, cx, cy));
    default:
      throw std::invalid_argument("apply_geometric: not a geometric transform");
  }
}

Sample apply_cutout(const Sample& s, Rng& rng, int count_min, int count_max, double ratio_min,
                    double ratio_max, std::vector<AppliedTransform>* applied) {
  Sample out = s;
  const auto fill = s.image.channel_means();
  const int h = s.image.height();
  const int w = s.image.width();
  const int count = uniform_int(rng, count_min, count_max);
  for (int k = 0; k < count; ++k) {
    const double ratio = uniform(rng, ratio_min, ratio_max);
    const double side = ratio * std::min(h, w);
    const double x0 = uniform(rng, 0.0, w - side);
    const double y0 = uniform(rng, 0.0, h - side);
    for (int y = 0; y < h; ++y) {
      const double py = y + 0.5;
      if (py < y0 || py >= y0 + side) continue;
      for (int x = 0; x < w; ++x) {
        const double px = x + 0.5;
        if (px < x0 || px >= x0 + side) continue;
        for (int c = 0; c < s.image.channels(); ++c) out.image.at(c, y, x) = fill[c];
      }
    }
    if (applied) applied->push_back({TransformKind::cutout, ratio, side});
  }
  return out;
}

PipelineResult apply_pipeline(const Sample& s, const std::vector<TransformSpec>& pipeline,
                              Strength strength, Rng& rng) {
  PipelineResult res;
  res.sample = s;
  res.record.strength = strength;
  // Position in the current sample -> index in the input sample.
  std::vector<std::size_t> origin(s.targets.size());
  for (std::size_t i = 0; i < origin.size(); ++i) origin[i] = i;

  const auto absorb = [&](GeometricResult&& g) {
    std::vector<std::size_t> next;
    for (std::size_t k : g.kept) next.push_back(origin[k]);
    for (std::size_t k : g.dropped) res.record.dropped.push_back(origin[k]);
    origin = std::move(next);
    res.sample = std::move(g.sample);
  };
  const auto signed_magnitude = [&](const TransformSpec& spec) {
    const double m = uniform(rng, spec.magnitude_min, spec.magnitude_max);
    return bernoulli(rng, 0.5) ? -m : m;
  };

  for (const TransformSpec& spec : pipeline) {
    if (!bernoulli(rng, spec.probability)) continue;
    const double cx = 0.5 * res.sample.image.width();
    const double cy = 0.5 * res.sample.image.height();
    switch (spec.kind) {
      case TransformKind::scale_jitter: {
        const double f = uniform(rng, spec.magnitude_min, spec.magnitude_max);
        res.record.applied.push_back({spec.kind, f, 0.0});
        absorb(apply_scale(res.sample, f));
        break;
      }
      case TransformKind::solarize:
      case TransformKind::brightness:
      case TransformKind::contrast:
      case TransformKind::sharpness: {
        const double r = uniform(rng, spec.magnitude_min, spec.magnitude_max);
        res.record.applied.push_back({spec.kind, r, 0.0});
        res.sample.image = apply_photometric(res.sample.image, spec.kind, r);
        break;
      }
      case TransformKind::translate: {
        const double rx = signed_magnitude(spec);
        const double ry = signed_magnitude(spec);
        res.record.applied.push_back({spec.kind, rx, ry});
        absorb(apply_affine(res.sample, Affine::translation(rx * res.sample.image.width(),
                                                            ry * res.sample.image.height())));
        break;
      }
      case TransformKind::rotate: {
        const double deg = signed_magnitude(spec);
        res.record.applied.push_back({spec.kind, deg, 0.0});
        absorb(apply_affine(res.sample, Affine::rotation(deg, cx, cy)));
        break;
      }
      case TransformKind::shear: {
        const double deg = signed_magnitude(spec);
        const int axis = bernoulli(rng, 0.5) ? 1 : 0;
        res.record.applied.push_back({spec.kind, deg, static_cast<double>(axis)});
        absorb(apply_affine(res.sample, Affine::shear(deg, axis, cx, cy)));
        break;
      }
      case TransformKind::cutout:
        res.sample = apply_cutout(res.sample, rng, spec.count_min, spec.count_max,
                                  spec.magnitude_min, spec.magnitude_max, &res.record.applied);
        break;
    }
  }
  res.record.kept = origin;
  res.record.all_dropped = !s.targets.empty() && res.sample.targets.empty();
  return res;
}

}  // namespace mixtrain

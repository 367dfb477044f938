#include "mixtrain/box_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mixtrain {

bool Box::is_valid(double x_min, double y_min, double x_max, double y_max) {
  return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
         std::isfinite(y_max) && x_min < x_max && y_min < y_max;
}

Box Box::make(double x_min, double y_min, double x_max, double y_max) {
  if (!is_valid(x_min, y_min, x_max, y_max)) {
    std::ostringstream msg;
    msg << "invalid box [" << x_min << ", " << y_min << ", " << x_max << ", " << y_max << "]";
    throw std::invalid_argument(msg.str());
  }
  return Box(x_min, y_min, x_max, y_max);
}

double area(const Box& b) { return b.width() * b.height(); }

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
  const double h = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

double iou(const Box& a, const Box& b) {
  if (a == b) return 1.0;
  const double inter = intersection_area(a, b);
  if (inter == 0.0) return 0.0;
  const double uni = area(a) + area(b) - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

bool clip_box(const Box& b, double width, double height, Box* out) {
  const double x0 = std::clamp(b.x_min(), 0.0, width);
  const double y0 = std::clamp(b.y_min(), 0.0, height);
  const double x1 = std::clamp(b.x_max(), 0.0, width);
  const double y1 = std::clamp(b.y_max(), 0.0, height);
  if (!Box::is_valid(x0, y0, x1, y1)) return false;
  *out = Box::make(x0, y0, x1, y1);
  return true;
}

std::vector<std::size_t> nms_indices(std::span<const ScoredBox> dets, double iou_threshold,
                                     bool class_agnostic) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw std::invalid_argument("nms: iou_threshold must lie in (0, 1]");
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });

  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const ScoredBox& cand = dets[idx];
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (!class_agnostic && dets[k].category != cand.category) continue;
      if (iou(dets[k].box, cand.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

std::vector<ScoredBox> nms(std::span<const ScoredBox> dets, double iou_threshold,
                           bool class_agnostic) {
  std::vector<ScoredBox> out;
  for (std::size_t idx : nms_indices(dets, iou_threshold, class_agnostic)) {
    out.push_back(dets[idx]);
  }
  return out;
}

}  // namespace mixtrain

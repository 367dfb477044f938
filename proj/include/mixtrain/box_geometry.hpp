#pragma once

#include <span>
#include <vector>

namespace mixtrain {

/// Axis-aligned box in continuous pixel coordinates. Construction through
/// `Box::make` enforces finite corners and strictly positive extent, so
/// `area` and `iou` never divide by zero.
class Box {
 public:
  static Box make(double x_min, double y_min, double x_max, double y_max);
  static bool is_valid(double x_min, double y_min, double x_max, double y_max);

  double x_min() const { return x_min_; }
  double y_min() const { return y_min_; }
  double x_max() const { return x_max_; }
  double y_max() const { return y_max_; }
  double width() const { return x_max_ - x_min_; }
  double height() const { return y_max_ - y_min_; }
  double center_x() const { return 0.5 * (x_min_ + x_max_); }
  double center_y() const { return 0.5 * (y_min_ + y_max_); }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  Box(double x_min, double y_min, double x_max, double y_max)
      : x_min_(x_min), y_min_(y_min), x_max_(x_max), y_max_(y_max) {}

  double x_min_;
  double y_min_;
  double x_max_;
  double y_max_;
};

struct ScoredBox {
  Box box;
  double score = 0.0;
  int category = 0;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

double area(const Box& b);
double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);

/// Clips `b` to [0,width]x[0,height]. Returns false when nothing with
/// positive area remains.
bool clip_box(const Box& b, double width, double height, Box* out);

/// Greedy non-maximum suppression. The result is sorted by descending score;
/// equal scores keep their input order. Suppression is per category unless
/// `class_agnostic` is set.
std::vector<ScoredBox> nms(std::span<const ScoredBox> dets, double iou_threshold,
                           bool class_agnostic = false);

/// Same as `nms` but returns indices into `dets`.
std::vector<std::size_t> nms_indices(std::span<const ScoredBox> dets, double iou_threshold,
                                     bool class_agnostic = false);

}  // namespace mixtrain

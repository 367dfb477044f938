#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mixtrain/detector.hpp"

namespace mixtrain {

/// Exponential moving average of the student parameters.
template <typename T>
struct EmaState {
  std::vector<T> params;
  double momentum = 0.999;
  std::int64_t update_count = 0;

  /// Teacher starts as a copy of the student.
  static EmaState from_student(std::span<const T> student, double momentum) {
    return {std::vector<T>(student.begin(), student.end()), momentum, 0};
  }
};

/// params <- m*params + (1-m)*student. Throws on length mismatch.
template <typename T>
void ema_update(EmaState<T>& state, std::span<const T> student);

/// Output of one teacher forward pass, shared by pseudo-box generation and
/// target scoring. Boxes handed in and out are in original image coordinates.
struct TeacherView {
  std::vector<Proposal> proposals;
  std::vector<Box> predicted;  // decoded, clipped box per proposal (anchor if degenerate)
  double scale = 1.0;          // teacher input was the image scaled by this factor
  DetectorConfig config;
};

/// Runs the teacher network. Keeps a count of forward passes so callers can
/// check that one pass serves both consumers.
template <typename T>
class Teacher {
 public:
  explicit Teacher(const DetectorConfig& cfg) : detector_(cfg) {}

  /// `scale` != 1 resizes the image and places it at the canvas origin.
  TeacherView view(const EmaState<T>& state, const Image& image, double scale = 1.0) const;

  std::int64_t forward_count() const { return forward_count_; }

 private:
  TinyDetector<T> detector_;
  mutable std::int64_t forward_count_ = 0;
};

/// Teacher detections above `score_threshold` after NMS, as pseudo boxes.
std::vector<LabeledBox> predict_pseudo_boxes(const TeacherView& view, double score_threshold = 0.9,
                                             double nms_threshold = 0.5);

/// For each target, the teacher probability of the target's category at the
/// proposal whose predicted box overlaps the target most (ties: lowest index).
std::vector<double> score_targets(const TeacherView& view, std::span<const LabeledBox> targets);

}  // namespace mixtrain

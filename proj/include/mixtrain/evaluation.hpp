#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixtrain/box_geometry.hpp"
#include "mixtrain/synthetic_data.hpp"

namespace mixtrain {

/// COCO-protocol AP summary. NaN-free: undefined entries are reported as -1.
struct EvalResult {
  double map = 0.0;    // mean over IoU 0.50:0.05:0.95 and categories
  double map50 = 0.0;
  double map75 = 0.0;
  double map_small = -1.0;
  double map_medium = -1.0;
  double map_large = -1.0;
  std::vector<double> per_category;  // AP averaged over thresholds; -1 if no ground truth

  std::string to_json() const;
};

struct MatchFlags {
  std::vector<bool> tp;         // per detection
  std::vector<int> matched_gt;  // gt index or -1
  std::vector<bool> ignored;    // detection matched an ignored gt or is out of area range
};

/// Greedy matching of score-sorted detections against ground truth of the
/// same category. `gt_ignore` (optional) marks gts outside the area range.
MatchFlags match_detections(std::span<const ScoredBox> dets, std::span<const LabeledBox> gts,
                            double iou_threshold, const std::vector<bool>& gt_ignore = {});

/// 101-point interpolated AP from score-ordered TP flags. Empty optional when
/// `n_gt` is 0 (category undefined).
std::optional<double> average_precision(const std::vector<bool>& tp_flags, int n_gt);

struct EvalConfig {
  int max_detections = 100;
  double small_area_frac = 0.015;
  double medium_area_frac = 0.08;
};

/// Per-image detections vs per-image ground truth (clean annotations).
EvalResult coco_map(std::span<const std::vector<ScoredBox>> detections,
                    std::span<const std::vector<LabeledBox>> ground_truth, int num_categories,
                    double image_area, const EvalConfig& cfg = {});

/// The ten COCO IoU thresholds.
std::vector<double> coco_iou_thresholds();

}  // namespace mixtrain

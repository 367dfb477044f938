#pragma once

#include <span>
#include <vector>

#include "mixtrain/synthetic_data.hpp"

namespace mixtrain {

enum class MergeStrategy { off, missing, loc_noise, hybrid };

struct MatchPair {
  std::size_t pseudo;
  std::size_t gt;
  double iou;
};

/// Greedy one-to-one matching by descending IoU (ties by pseudo index, then
/// gt index). Only pairs with IoU >= `min_iou` are matched.
std::vector<MatchPair> iou_match(std::span<const LabeledBox> pseudo, std::span<const LabeledBox> gt,
                                 double min_iou = 0.5);

struct MixResult {
  std::vector<LabeledBox> targets;
  int n_added = 0;
  int n_replaced = 0;
};

/// Adds every pseudo box whose best IoU with the ground truth is below 0.5.
MixResult merge_missing_labels(std::span<const LabeledBox> gt, std::span<const LabeledBox> pseudo);

/// Replaces each ground-truth box by its matched pseudo box of the same
/// category. Target count is unchanged.
MixResult merge_loc_noise(std::span<const LabeledBox> gt, std::span<const LabeledBox> pseudo);

/// Both of the above over a single matching.
MixResult merge_hybrid(std::span<const LabeledBox> gt, std::span<const LabeledBox> pseudo);

MixResult merge_targets(MergeStrategy strategy, std::span<const LabeledBox> gt,
                        std::span<const LabeledBox> pseudo);

}  // namespace mixtrain

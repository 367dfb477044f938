#include "mixtrain/target_mixer.hpp"

#include <algorithm>
#include <tuple>

namespace mixtrain {

namespace {

constexpr double kMatchIou = 0.5;

double max_iou(const LabeledBox& p, std::span<const LabeledBox> gt) {
  double best = 0.0;
  for (const auto& g : gt) best = std::max(best, iou(p.box, g.box));
  return best;
}

LabeledBox replacement(const LabeledBox& g, const LabeledBox& p) {
  LabeledBox out = g;
  out.box = p.box;
  out.provenance = Provenance::pseudo;
  out.score = p.score.value_or(1.0);
  return out;
}

}  // namespace

std::vector<MatchPair> iou_match(std::span<const LabeledBox> pseudo, std::span<const LabeledBox> gt,
                                 double min_iou) {
  std::vector<MatchPair> cands;
  for (std::size_t p = 0; p < pseudo.size(); ++p) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(pseudo[p].box, gt[g].box);
      if (v >= min_iou) cands.push_back({p, g, v});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const MatchPair& a, const MatchPair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    return std::tie(a.pseudo, a.gt) < std::tie(b.pseudo, b.gt);
  });
  std::vector<bool> p_used(pseudo.size(), false);
  std::vector<bool> g_used(gt.size(), false);
  std::vector<MatchPair> out;
  for (const MatchPair& m : cands) {
    if (p_used[m.pseudo] || g_used[m.gt]) continue;
    p_used[m.pseudo] = g_used[m.gt] = true;
    out.push_back(m);
  }
  return out;
}

MixResult merge_missing_labels(std::span<const LabeledBox> gt, std::span<const LabeledBox> pseudo) {
  MixResult r;
  r.targets.assign(gt.begin(), gt.end());
  for (const auto& p : pseudo) {
    if (max_iou(p, gt) < kMatchIou) {
      r.targets.push_back(p);
      ++r.n_added;
    }
  }
  return r;
}

MixResult merge_loc_noise(std::span<const LabeledBox> gt, std::span<const LabeledBox> pseudo) {
  MixResult r;
  r.targets.assign(gt.begin(), gt.end());
  for (const MatchPair& m : iou_match(pseudo, gt, kMatchIou)) {
    if (pseudo[m.pseudo].category != gt[m.gt].category) continue;
    r.targets[m.gt] = replacement(gt[m.gt], pseudo[m.pseudo]);
    ++r.n_replaced;
  }
  return r;
}

MixResult merge_hybrid(std::span<const LabeledBox> gt, std::span<const LabeledBox> pseudo) {
  MixResult r;
  r.targets.assign(gt.begin(), gt.end());
  std::vector<bool> matched(pseudo.size(), false);
  for (const MatchPair& m : iou_match(pseudo, gt, kMatchIou)) {
    matched[m.pseudo] = true;
    if (pseudo[m.pseudo].category != gt[m.gt].category) continue;
    r.targets[m.gt] = replacement(gt[m.gt], pseudo[m.pseudo]);
    ++r.n_replaced;
  }
  for (std::size_t p = 0; p < pseudo.size(); ++p) {
    if (matched[p] || max_iou(pseudo[p], gt) >= kMatchIou) continue;
    r.targets.push_back(pseudo[p]);
    ++r.n_added;
  }
  return r;
}

MixResult merge_targets(MergeStrategy strategy, std::span<const LabeledBox> gt,
                        std::span<const LabeledBox> pseudo) {
  switch (strategy) {
    case MergeStrategy::off: return {std::vector<LabeledBox>(gt.begin(), gt.end()), 0, 0};
    case MergeStrategy::missing: return merge_missing_labels(gt, pseudo);
    case MergeStrategy::loc_noise: return merge_loc_noise(gt, pseudo);
    case MergeStrategy::hybrid: return merge_hybrid(gt, pseudo);
  }
  return {};
}

}  // namespace mixtrain

#include "mixtrain/evaluation.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mixtrain {

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

std::string EvalResult::to_json() const {
  nlohmann::json j = {{"map", map},
                      {"map50", map50},
                      {"map75", map75},
                      {"map_small", map_small},
                      {"map_medium", map_medium},
                      {"map_large", map_large},
                      {"per_category", per_category}};
  return j.dump(1);
}

MatchFlags match_detections(std::span<const ScoredBox> dets, std::span<const LabeledBox> gts,
                            double iou_threshold, const std::vector<bool>& gt_ignore) {
  MatchFlags f;
  f.tp.assign(dets.size(), false);
  f.matched_gt.assign(dets.size(), -1);
  f.ignored.assign(dets.size(), false);
  std::vector<bool> used(gts.size(), false);
  const auto ignored = [&](std::size_t g) { return !gt_ignore.empty() && gt_ignore[g]; };

  for (std::size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    double best_iou = iou_threshold;
    bool best_ignored = false;
    // Non-ignored gts are preferred; an ignored match only counts when
    // nothing else qualifies.
    for (int pass = 0; pass < 2 && best < 0; ++pass) {
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (used[g] || gts[g].category != dets[d].category) continue;
        if (ignored(g) != (pass == 1)) continue;
        const double v = iou(dets[d].box, gts[g].box);
        if (v >= best_iou && (best < 0 || v > best_iou)) {
          best_iou = v;
          best = static_cast<int>(g);
          best_ignored = pass == 1;
        }
      }
    }
    if (best >= 0) {
      used[best] = true;
      f.tp[d] = true;
      f.matched_gt[d] = best;
      f.ignored[d] = best_ignored;
    }
  }
  return f;
}

std::optional<double> average_precision(const std::vector<bool>& tp_flags, int n_gt) {
  if (n_gt <= 0) return std::nullopt;
  const std::size_t n = tp_flags.size();
  std::vector<double> recall(n), precision(n);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (tp_flags[i] ? tp : fp) += 1.0;
    recall[i] = tp / n_gt;
    precision[i] = tp / (tp + fp);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int t = 0; t <= 100; ++t) {
    const double r = t / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[it - recall.begin()];
  }
  return sum / 101.0;
}

namespace {

struct RangeResult {
  // ap[category][threshold], nullopt if no gt
  std::vector<std::vector<std::optional<double>>> ap;
};

RangeResult evaluate_range(std::span<const std::vector<ScoredBox>> detections,
                           std::span<const std::vector<LabeledBox>> ground_truth, int num_categories,
                           double area_lo, double area_hi, const EvalConfig& cfg) {
  const auto thresholds = coco_iou_thresholds();
  const auto in_range = [&](double a) { return a >= area_lo && a < area_hi; };

  // Per image: top max_detections by score, then split by category.
  std::vector<std::vector<ScoredBox>> top(detections.size());
  for (std::size_t im = 0; im < detections.size(); ++im) {
    top[im].assign(detections[im].begin(), detections[im].end());
    std::stable_sort(top[im].begin(), top[im].end(),
                     [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
    if (static_cast<int>(top[im].size()) > cfg.max_detections) {
      top[im].erase(top[im].begin() + cfg.max_detections, top[im].end());
    }
  }

  RangeResult res;
  res.ap.assign(num_categories, std::vector<std::optional<double>>(thresholds.size()));
  for (int cat = 0; cat < num_categories; ++cat) {
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
      struct Scored {
        double score;
        bool tp;
      };
      std::vector<Scored> all;
      int n_gt = 0;
      for (std::size_t im = 0; im < detections.size(); ++im) {
        std::vector<LabeledBox> gts;
        std::vector<bool> ignore;
        for (const auto& g : ground_truth[im]) {
          if (g.category != cat) continue;
          gts.push_back(g);
          const bool ign = !in_range(area(g.box));
          ignore.push_back(ign);
          if (!ign) ++n_gt;
        }
        std::vector<ScoredBox> dets;
        for (const auto& d : top[im]) {
          if (d.category == cat) dets.push_back(d);
        }
        const MatchFlags m = match_detections(dets, gts, thresholds[ti], ignore);
        for (std::size_t d = 0; d < dets.size(); ++d) {
          if (m.ignored[d]) continue;
          if (!m.tp[d] && !in_range(area(dets[d].box))) continue;
          all.push_back({dets[d].score, m.tp[d]});
        }
      }
      std::stable_sort(all.begin(), all.end(),
                       [](const Scored& a, const Scored& b) { return a.score > b.score; });
      std::vector<bool> flags;
      flags.reserve(all.size());
      for (const Scored& s : all) flags.push_back(s.tp);
      res.ap[cat][ti] = average_precision(flags, n_gt);
    }
  }
  return res;
}

// Mean over defined (category, threshold) entries restricted to `thr_index`
// (all thresholds when negative). -1 when nothing is defined.
double mean_ap(const RangeResult& r, int thr_index) {
  double sum = 0.0;
  int n = 0;
  for (const auto& per_thr : r.ap) {
    for (std::size_t ti = 0; ti < per_thr.size(); ++ti) {
      if (thr_index >= 0 && static_cast<int>(ti) != thr_index) continue;
      if (!per_thr[ti]) continue;
      sum += *per_thr[ti];
      ++n;
    }
  }
  return n == 0 ? -1.0 : sum / n;
}

}  // namespace

EvalResult coco_map(std::span<const std::vector<ScoredBox>> detections,
                    std::span<const std::vector<LabeledBox>> ground_truth, int num_categories,
                    double image_area, const EvalConfig& cfg) {
  if (detections.size() != ground_truth.size()) {
    throw std::invalid_argument("coco_map: detections and ground truth differ in image count");
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const RangeResult all = evaluate_range(detections, ground_truth, num_categories, 0.0, kInf, cfg);

  EvalResult r;
  r.map = std::max(0.0, mean_ap(all, -1));
  r.map50 = std::max(0.0, mean_ap(all, 0));
  r.map75 = std::max(0.0, mean_ap(all, 5));
  for (const auto& per_thr : all.ap) {
    double sum = 0.0;
    int n = 0;
    for (const auto& v : per_thr) {
      if (v) {
        sum += *v;
        ++n;
      }
    }
    r.per_category.push_back(n == 0 ? -1.0 : sum / n);
  }
  const double s_hi = cfg.small_area_frac * image_area;
  const double m_hi = cfg.medium_area_frac * image_area;
  r.map_small = mean_ap(evaluate_range(detections, ground_truth, num_categories, 0.0, s_hi, cfg), -1);
  r.map_medium =
      mean_ap(evaluate_range(detections, ground_truth, num_categories, s_hi, m_hi, cfg), -1);
  r.map_large = mean_ap(evaluate_range(detections, ground_truth, num_categories, m_hi, kInf, cfg), -1);
  return r;
}

}  // namespace mixtrain

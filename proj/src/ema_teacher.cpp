#include "mixtrain/ema_teacher.hpp"

#include <stdexcept>

#include "mixtrain/augmentation.hpp"

namespace mixtrain {

template <typename T>
void ema_update(EmaState<T>& state, std::span<const T> student) {
  if (student.size() != state.params.size()) {
    throw std::invalid_argument("ema_update: parameter length mismatch");
  }
  const T m = static_cast<T>(state.momentum);
  const T one_minus = static_cast<T>(1.0 - state.momentum);
  for (std::size_t i = 0; i < student.size(); ++i) {
    state.params[i] = m * state.params[i] + one_minus * student[i];
  }
  ++state.update_count;
}

template void ema_update<float>(EmaState<float>&, std::span<const float>);
template void ema_update<double>(EmaState<double>&, std::span<const double>);

template <typename T>
TeacherView Teacher<T>::view(const EmaState<T>& state, const Image& image, double scale) const {
  const DetectorConfig& cfg = detector_.config();
  TeacherView v;
  v.config = cfg;
  v.scale = scale;
  ++forward_count_;
  if (scale == 1.0) {
    v.proposals = detector_.proposals(detector_.forward(state.params, image));
  } else {
    Sample s;
    s.image = image;
    const Sample scaled = apply_scale(s, scale).sample;
    const Sample canvas = place_on_canvas(scaled, cfg.height, cfg.width, 0, 0).sample;
    v.proposals = detector_.proposals(detector_.forward(state.params, canvas.image));
  }
  v.predicted.reserve(v.proposals.size());
  for (const Proposal& p : v.proposals) {
    Box decoded = p.anchor;
    Box clipped = p.anchor;
    if (decode_box(p.deltas, p.anchor, &decoded) && clip_box(decoded, cfg.width, cfg.height, &clipped)) {
      v.predicted.push_back(clipped);
    } else {
      v.predicted.push_back(p.anchor);
    }
  }
  return v;
}

template class Teacher<float>;
template class Teacher<double>;

std::vector<LabeledBox> predict_pseudo_boxes(const TeacherView& view, double score_threshold,
                                             double nms_threshold) {
  std::vector<LabeledBox> out;
  for (const ScoredBox& d :
       decode_detections(view.proposals, view.config, score_threshold, nms_threshold)) {
    Box b = d.box;
    if (view.scale != 1.0) {
      const double w = view.config.width;
      const double h = view.config.height;
      const Box back = Box::make(b.x_min() / view.scale, b.y_min() / view.scale,
                                 b.x_max() / view.scale, b.y_max() / view.scale);
      if (!clip_box(back, w, h, &b)) continue;
    }
    out.push_back(LabeledBox::pseudo(b, d.category, d.score));
  }
  return out;
}

std::vector<double> score_targets(const TeacherView& view, std::span<const LabeledBox> targets) {
  std::vector<double> scores;
  scores.reserve(targets.size());
  for (const LabeledBox& t : targets) {
    const Box query = view.scale == 1.0
                          ? t.box
                          : Box::make(t.box.x_min() * view.scale, t.box.y_min() * view.scale,
                                      t.box.x_max() * view.scale, t.box.y_max() * view.scale);
    std::size_t best = 0;
    double best_iou = -1.0;
    for (std::size_t i = 0; i < view.predicted.size(); ++i) {
      const double v = iou(view.predicted[i], query);
      if (v > best_iou) {
        best_iou = v;
        best = i;
      }
    }
    if (best_iou < 0.0) {
      scores.push_back(0.0);
      continue;
    }
    scores.push_back(softmax(view.proposals[best].logits)[t.category]);
  }
  return scores;
}

}  // namespace mixtrain

#include "mixtrain/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mixtrain/rng.hpp"

namespace mixtrain {

std::size_t DetectorConfig::num_params() const {
  const std::size_t f = features;
  const std::size_t k2 = static_cast<std::size_t>(head_kernel) * head_kernel;
  return f * 27 + f + f * f * 9 + f + head_outputs() * f * k2 + head_outputs();
}

void DetectorConfig::validate() const {
  if (height <= 0 || width <= 0 || height % kStride != 0 || width % kStride != 0) {
    throw std::invalid_argument("DetectorConfig: image size must be a positive multiple of 4");
  }
  if (features <= 0) throw std::invalid_argument("DetectorConfig: features must be positive");
  if (num_categories < 1) throw std::invalid_argument("DetectorConfig: need at least one category");
  if (head_kernel <= 0 || head_kernel % 2 == 0) {
    throw std::invalid_argument("DetectorConfig: head_kernel must be odd");
  }
  if (!(anchor_size > 0.0)) throw std::invalid_argument("DetectorConfig: anchor_size must be > 0");
}

Box anchor_box(const DetectorConfig& cfg, int row, int col) {
  const double cx = (col + 0.5) * DetectorConfig::kStride;
  const double cy = (row + 0.5) * DetectorConfig::kStride;
  const double half = 0.5 * cfg.anchor_size;
  return Box::make(cx - half, cy - half, cx + half, cy + half);
}

std::vector<Box> anchor_boxes(const DetectorConfig& cfg) {
  std::vector<Box> out;
  out.reserve(cfg.num_proposals());
  for (int r = 0; r < cfg.grid_h(); ++r) {
    for (int c = 0; c < cfg.grid_w(); ++c) out.push_back(anchor_box(cfg, r, c));
  }
  return out;
}

std::array<double, 4> encode_box(const Box& box, const Box& anchor) {
  return {(box.center_x() - anchor.center_x()) / anchor.width(),
          (box.center_y() - anchor.center_y()) / anchor.height(),
          std::log(box.width() / anchor.width()), std::log(box.height() / anchor.height())};
}

bool decode_box(const std::array<double, 4>& deltas, const Box& anchor, Box* out) {
  // exp() is bounded so a wild regression cannot overflow.
  constexpr double kMaxLog = 4.0;
  const double cx = anchor.center_x() + deltas[0] * anchor.width();
  const double cy = anchor.center_y() + deltas[1] * anchor.height();
  const double w = anchor.width() * std::exp(std::min(deltas[2], kMaxLog));
  const double h = anchor.height() * std::exp(std::min(deltas[3], kMaxLog));
  const double x0 = cx - 0.5 * w;
  const double y0 = cy - 0.5 * h;
  const double x1 = cx + 0.5 * w;
  const double y1 = cy + 0.5 * h;
  if (!Box::is_valid(x0, y0, x1, y1)) return false;
  *out = Box::make(x0, y0, x1, y1);
  return true;
}

// ---------------------------------------------------------------------------
// Network

namespace {

// Input accessor is (channel, y, x) -> value; output column n = oy*wo + ox,
// row r = (c*k + ky)*k + kx.
template <typename T, typename In>
void im2col(const In& in, int channels, int h, int w, int k, int stride, int pad,
            Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>* col) {
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  col->resize(channels * k * k, ho * wo);
  T* dst = col->data();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
          const int y = oy * stride + ky - pad;
          for (int kx = 0; kx < k; ++kx) {
            const int x = ox * stride + kx - pad;
            *dst++ = (y >= 0 && y < h && x >= 0 && x < w) ? in(c, y, x) : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col into a (channels x h*w) activation matrix.
template <typename T>
void col2im(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>& col, int channels, int h,
            int w, int k, int stride, int pad,
            Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>* out) {
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  out->setZero(channels, h * w);
  const T* src = col.data();
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < k; ++ky) {
          const int y = oy * stride + ky - pad;
          for (int kx = 0; kx < k; ++kx) {
            const int x = ox * stride + kx - pad;
            const T v = *src++;
            if (y >= 0 && y < h && x >= 0 && x < w) (*out)(c, y * w + x) += v;
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
TinyDetector<T>::TinyDetector(DetectorConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t f = cfg_.features;
  const std::size_t k2 = static_cast<std::size_t>(cfg_.head_kernel) * cfg_.head_kernel;
  layout_.w1 = 0;
  layout_.b1 = layout_.w1 + f * 27;
  layout_.w2 = layout_.b1 + f;
  layout_.b2 = layout_.w2 + f * f * 9;
  layout_.wh = layout_.b2 + f;
  layout_.bh = layout_.wh + cfg_.head_outputs() * f * k2;
  layout_.total = layout_.bh + cfg_.head_outputs();
}

template <typename T>
std::vector<T> TinyDetector<T>::init_params(std::uint64_t seed) const {
  std::vector<T> p(layout_.total, T(0));
  Rng rng(seed);
  const auto fill = [&](std::size_t off, std::size_t n, double fan_in, double fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < n; ++i) p[off + i] = static_cast<T>(uniform(rng, -a, a));
  };
  const double f = cfg_.features;
  const double k2 = cfg_.head_kernel * cfg_.head_kernel;
  fill(layout_.w1, layout_.b1 - layout_.w1, 3 * 9, f * 9);
  fill(layout_.w2, layout_.b2 - layout_.w2, f * 9, f * 9);
  fill(layout_.wh, layout_.bh - layout_.wh, f * k2, cfg_.head_outputs() * k2);
  return p;
}

template <typename T>
ForwardPass<T> TinyDetector<T>::forward(std::span<const T> params, const Image& image) const {
  if (params.size() != layout_.total) {
    throw std::invalid_argument("TinyDetector::forward: parameter vector has wrong length");
  }
  if (image.height() != cfg_.height || image.width() != cfg_.width || image.channels() != 3) {
    throw std::invalid_argument("TinyDetector::forward: image shape does not match config");
  }
  using CMap = Eigen::Map<const Mat>;
  using CVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  const int f = cfg_.features;
  const int k = cfg_.head_kernel;
  const int h1 = cfg_.height / 2, w1 = cfg_.width / 2;
  const int gh = cfg_.grid_h(), gw = cfg_.grid_w();

  ForwardPass<T> p;
  im2col<T>([&](int c, int y, int x) { return static_cast<T>(image.at(c, y, x)); }, 3,
            cfg_.height, cfg_.width, 3, 2, 1, &p.col1);
  p.z1.noalias() = CMap(params.data() + layout_.w1, f, 27) * p.col1;
  p.z1.colwise() += CVec(params.data() + layout_.b1, f);

  const Mat a1 = p.z1.cwiseMax(T(0));
  im2col<T>([&](int c, int y, int x) { return a1(c, y * w1 + x); }, f, h1, w1, 3, 2, 1, &p.col2);
  p.z2.noalias() = CMap(params.data() + layout_.w2, f, f * 9) * p.col2;
  p.z2.colwise() += CVec(params.data() + layout_.b2, f);

  const Mat a2 = p.z2.cwiseMax(T(0));
  im2col<T>([&](int c, int y, int x) { return a2(c, y * gw + x); }, f, gh, gw, k, 1, k / 2,
            &p.colh);
  p.out.noalias() = CMap(params.data() + layout_.wh, cfg_.head_outputs(), f * k * k) * p.colh;
  p.out.colwise() += CVec(params.data() + layout_.bh, cfg_.head_outputs());
  return p;
}

template <typename T>
std::vector<Proposal> TinyDetector<T>::proposals(const ForwardPass<T>& pass) const {
  const int nl = cfg_.num_categories + 1;
  std::vector<Proposal> out;
  out.reserve(cfg_.num_proposals());
  const auto anchors = anchor_boxes(cfg_);
  for (int i = 0; i < cfg_.num_proposals(); ++i) {
    Proposal prop{anchors[i], std::vector<double>(nl), {}};
    for (int c = 0; c < nl; ++c) prop.logits[c] = static_cast<double>(pass.out(c, i));
    for (int d = 0; d < 4; ++d) prop.deltas[d] = static_cast<double>(pass.out(nl + d, i));
    out.push_back(std::move(prop));
  }
  return out;
}

template <typename T>
std::vector<T> TinyDetector<T>::backward(std::span<const T> params, const ForwardPass<T>& pass,
                                         const Mat& d_out) const {
  using CMap = Eigen::Map<const Mat>;
  const int f = cfg_.features;
  const int k = cfg_.head_kernel;
  const int h1 = cfg_.height / 2, w1 = cfg_.width / 2;
  const int gh = cfg_.grid_h(), gw = cfg_.grid_w();
  const int no = cfg_.head_outputs();
  if (d_out.rows() != no || d_out.cols() != cfg_.num_proposals()) {
    throw std::invalid_argument("TinyDetector::backward: gradient shape mismatch");
  }

  // Blocks are evaluated into aligned temporaries: Eigen's reductions peel by
  // destination alignment, which would make results depend on the heap.
  std::vector<T> grad(layout_.total, T(0));
  const auto put = [&](std::size_t offset, const Mat& block) {
    std::copy(block.data(), block.data() + block.size(), grad.begin() + offset);
  };
  put(layout_.wh, d_out * pass.colh.transpose());
  put(layout_.bh, d_out.rowwise().sum());

  Mat d_colh = CMap(params.data() + layout_.wh, no, f * k * k).transpose() * d_out;
  Mat d_a2;
  col2im<T>(d_colh, f, gh, gw, k, 1, k / 2, &d_a2);
  const Mat d_z2 = (pass.z2.array() > T(0)).select(d_a2, T(0));
  put(layout_.w2, d_z2 * pass.col2.transpose());
  put(layout_.b2, d_z2.rowwise().sum());

  Mat d_col2 = CMap(params.data() + layout_.w2, f, f * 9).transpose() * d_z2;
  Mat d_a1;
  col2im<T>(d_col2, f, h1, w1, 3, 2, 1, &d_a1);
  const Mat d_z1 = (pass.z1.array() > T(0)).select(d_a1, T(0));
  put(layout_.w1, d_z1 * pass.col1.transpose());
  put(layout_.b1, d_z1.rowwise().sum());
  return grad;
}

template class TinyDetector<float>;
template class TinyDetector<double>;

// ---------------------------------------------------------------------------
// Assignment and loss

Assignment assign_labels(std::span<const Box> anchors, std::span<const LabeledBox> targets,
                         double fg_iou) {
  const std::size_t np = anchors.size();
  const std::size_t nt = targets.size();
  Assignment a;
  a.target.assign(np, Assignment::kBackground);
  a.forced.assign(np, false);
  a.weight.assign(nt, 1.0);
  if (nt == 0) return a;

  std::vector<double> m(np * nt);
  for (std::size_t i = 0; i < np; ++i) {
    for (std::size_t g = 0; g < nt; ++g) m[i * nt + g] = iou(anchors[i], targets[g].box);
  }
  for (std::size_t i = 0; i < np; ++i) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < nt; ++g) {
      if (m[i * nt + g] > best_iou) {
        best_iou = m[i * nt + g];
        best = static_cast<int>(g);
      }
    }
    if (best_iou >= fg_iou) a.target[i] = best;
  }
  // Every target claims its best proposal; a proposal already claimed by an
  // earlier target is skipped so that no target ends up without one.
  std::vector<bool> claimed(np, false);
  for (std::size_t g = 0; g < nt; ++g) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t i = 0; i < np; ++i) {
      if (claimed[i]) continue;
      if (m[i * nt + g] > best_iou) {
        best_iou = m[i * nt + g];
        best = static_cast<int>(i);
      }
    }
    if (best < 0) continue;
    claimed[best] = true;
    if (a.target[best] != static_cast<int>(g)) {
      a.target[best] = static_cast<int>(g);
      a.forced[best] = best_iou < fg_iou;
    } else if (best_iou < fg_iou) {
      a.forced[best] = true;
    }
  }
  return a;
}

Assignment assign_labels(std::span<const Proposal> proposals, std::span<const LabeledBox> targets,
                         double fg_iou) {
  std::vector<Box> anchors;
  anchors.reserve(proposals.size());
  for (const auto& p : proposals) anchors.push_back(p.anchor);
  return assign_labels(anchors, targets, fg_iou);
}

std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

namespace {

// Cross-entropy against `label`; writes dL/dlogits scaled by `w`.
double cross_entropy(std::span<const double> logits, int label, double w, double* grad) {
  const auto p = softmax(logits);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double loss = mx + std::log(z) - logits[label];
  for (std::size_t i = 0; i < p.size(); ++i) {
    grad[i] += w * (p[i] - (static_cast<int>(i) == label ? 1.0 : 0.0));
  }
  return loss;
}

double smooth_l1(double x, double beta, double* grad) {
  const double ax = std::abs(x);
  if (ax < beta) {
    *grad = x / beta;
    return 0.5 * x * x / beta;
  }
  *grad = x > 0 ? 1.0 : -1.0;
  return ax - 0.5 * beta;
}

}  // namespace

LossResult detection_loss(std::span<const Proposal> proposals, const Assignment& assignment,
                          std::span<const LabeledBox> targets, int num_categories,
                          const LossConfig& cfg) {
  const int nl = num_categories + 1;
  const int no = nl + 4;
  const std::size_t np = proposals.size();
  if (assignment.target.size() != np || assignment.weight.size() != targets.size()) {
    throw std::invalid_argument("detection_loss: assignment does not match inputs");
  }
  LossResult res;
  res.terms.assign(np, 0.0);
  res.d_out.assign(np * no, 0.0);
  for (std::size_t i = 0; i < np; ++i) {
    const Proposal& p = proposals[i];
    double* g = res.d_out.data() + i * no;
    const int t = assignment.target[i];
    if (t == Assignment::kBackground) {
      res.terms[i] = cross_entropy(p.logits, num_categories, 1.0, g);
      continue;
    }
    const double w = assignment.weight[t];
    if (w == 0.0) continue;  // zero-weight targets keep their proposals but emit no loss
    const LabeledBox& tgt = targets[t];
    double term = cross_entropy(p.logits, tgt.category, w, g);
    const auto enc = encode_box(tgt.box, p.anchor);
    double reg = 0.0;
    for (int d = 0; d < 4; ++d) {
      double dg = 0.0;
      reg += smooth_l1(p.deltas[d] - enc[d], cfg.smooth_l1_beta, &dg);
      g[nl + d] += w * cfg.reg_weight * dg;
    }
    term += cfg.reg_weight * reg;
    res.terms[i] = w * term;
  }
  for (double v : res.terms) res.total += v;
  return res;
}

template <typename T>
typename TinyDetector<T>::Mat output_gradient(const LossResult& loss, const DetectorConfig& cfg,
                                              double scale) {
  const int no = cfg.head_outputs();
  typename TinyDetector<T>::Mat m(no, cfg.num_proposals());
  if (static_cast<Eigen::Index>(loss.d_out.size()) != m.size()) {
    throw std::invalid_argument("output_gradient: loss does not match detector config");
  }
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(scale * loss.d_out[i]);
  return m;
}

template TinyDetector<float>::Mat output_gradient<float>(const LossResult&, const DetectorConfig&,
                                                         double);
template TinyDetector<double>::Mat output_gradient<double>(const LossResult&,
                                                           const DetectorConfig&, double);

std::vector<ScoredBox> decode_detections(std::span<const Proposal> proposals,
                                         const DetectorConfig& cfg, double score_threshold,
                                         double nms_threshold, bool class_agnostic) {
  std::vector<ScoredBox> dets;
  for (const Proposal& p : proposals) {
    const auto prob = softmax(p.logits);
    int cat = 0;
    for (int c = 1; c < cfg.num_categories; ++c) {
      if (prob[c] > prob[cat]) cat = c;
    }
    if (!(prob[cat] > score_threshold)) continue;
    Box decoded = p.anchor;
    Box clipped = p.anchor;
    if (!decode_box(p.deltas, p.anchor, &decoded)) continue;
    if (!clip_box(decoded, cfg.width, cfg.height, &clipped)) continue;
    dets.push_back({clipped, prob[cat], cat});
  }
  return nms(dets, nms_threshold, class_agnostic);
}

// ---------------------------------------------------------------------------
// Optimiser

template <typename T>
void Sgd<T>::step(std::span<T> params, std::span<const T> grad, double lr) {
  if (params.size() != velocity_.size() || grad.size() != velocity_.size()) {
    throw std::invalid_argument("Sgd::step: size mismatch");
  }
  const T m = static_cast<T>(momentum_);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = m * velocity_[i] + grad[i];
    params[i] -= rate * velocity_[i];
  }
}

template class Sgd<float>;
template class Sgd<double>;

// ---------------------------------------------------------------------------
// Checkpoints

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  std::filesystem::path p = checkpoint;
  std::string suffix;
  if (p.extension() == ".ema") {
    suffix = ".ema";
    p.replace_extension();
  }
  p.replace_extension(".json");
  return p.string() + suffix;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const float> params,
                     const CheckpointMeta& meta) {
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (float v : params) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      const unsigned char b[4] = {static_cast<unsigned char>(bits),
                                  static_cast<unsigned char>(bits >> 8),
                                  static_cast<unsigned char>(bits >> 16),
                                  static_cast<unsigned char>(bits >> 24)};
      os.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  const DetectorConfig& c = meta.config;
  nlohmann::json j = {{"S", c.grid_h()},        {"F", c.features},
                      {"C", c.num_categories},  {"H", c.height},
                      {"W", c.width},           {"head_kernel", c.head_kernel},
                      {"anchor_size", c.anchor_size}, {"iteration", meta.iteration},
                      {"num_params", params.size()}};
  std::ofstream js(sidecar_path(path));
  if (!js) throw std::runtime_error("cannot write sidecar for " + path.string());
  js << j.dump(1) << '\n';
}

std::vector<float> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream js(sidecar_path(path));
  if (!js) throw std::runtime_error("missing sidecar for " + path.string());
  const nlohmann::json j = nlohmann::json::parse(js);
  CheckpointMeta m;
  m.config.height = j.at("H");
  m.config.width = j.at("W");
  m.config.features = j.at("F");
  m.config.num_categories = j.at("C");
  m.config.head_kernel = j.value("head_kernel", DetectorConfig{}.head_kernel);
  m.config.anchor_size = j.value("anchor_size", DetectorConfig{}.anchor_size);
  m.iteration = j.at("iteration");
  m.config.validate();

  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<float> params(m.config.num_params());
  for (float& v : params) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
      throw std::runtime_error("checkpoint truncated: " + path.string());
    }
    const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                               (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
    std::memcpy(&v, &bits, 4);
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("checkpoint has trailing data: " + path.string());
  }
  if (meta) *meta = m;
  return params;
}

}  // namespace mixtrain

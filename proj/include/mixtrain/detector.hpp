#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "mixtrain/box_geometry.hpp"
#include "mixtrain/image.hpp"
#include "mixtrain/synthetic_data.hpp"

namespace mixtrain {

/// Shape of the grid detector: conv3x3/s2 -> ReLU -> conv3x3/s2 -> ReLU ->
/// linear conv head. One proposal per output cell.
struct DetectorConfig {
  int height = 64;
  int width = 64;
  int features = 24;        // F, width of both conv stages
  int num_categories = 3;   // C; logit index C is background
  int head_kernel = 7;      // spatial support of the linear head (odd)
  double anchor_size = 16;  // side of the square anchor centred on each cell

  static constexpr int kStride = 4;

  int grid_h() const { return height / kStride; }
  int grid_w() const { return width / kStride; }
  int num_proposals() const { return grid_h() * grid_w(); }
  int head_outputs() const { return num_categories + 1 + 4; }
  std::size_t num_params() const;
  void validate() const;

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

struct Proposal {
  Box anchor;
  std::vector<double> logits;  // C+1
  std::array<double, 4> deltas{};
};

/// Anchor of cell (row, col).
Box anchor_box(const DetectorConfig& cfg, int row, int col);
std::vector<Box> anchor_boxes(const DetectorConfig& cfg);

/// Anchor-relative box parameterisation: centre offsets over anchor size and
/// log scale ratios.
std::array<double, 4> encode_box(const Box& box, const Box& anchor);
/// Inverse of `encode_box`. Returns false if the decoded box is degenerate.
bool decode_box(const std::array<double, 4>& deltas, const Box& anchor, Box* out);

/// Cached activations of one forward pass.
template <typename T>
struct ForwardPass {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  Mat col1, z1, col2, z2, colh, out;  // out: head_outputs x num_proposals
};

template <typename T>
class TinyDetector {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

  explicit TinyDetector(DetectorConfig cfg);

  const DetectorConfig& config() const { return cfg_; }
  std::size_t num_params() const { return cfg_.num_params(); }

  /// Glorot-uniform weights, zero biases.
  std::vector<T> init_params(std::uint64_t seed) const;

  /// Throws std::invalid_argument on image or parameter shape mismatch.
  ForwardPass<T> forward(std::span<const T> params, const Image& image) const;
  std::vector<Proposal> proposals(const ForwardPass<T>& pass) const;

  /// Gradient of the loss w.r.t. all parameters given dL/d(head output).
  std::vector<T> backward(std::span<const T> params, const ForwardPass<T>& pass,
                          const Mat& d_out) const;

 private:
  struct Layout {
    std::size_t w1, b1, w2, b2, wh, bh, total;
  };

  DetectorConfig cfg_;
  Layout layout_{};
};

/// Per-proposal training target.
struct Assignment {
  static constexpr int kBackground = -1;
  std::vector<int> target;      // per proposal: target index or kBackground
  std::vector<bool> forced;     // assigned by the best-proposal rule below 0.5 IoU
  std::vector<double> weight;   // per target w(g), defaults to 1
};

/// Max-IoU assignment at `fg_iou`, plus a forced best proposal per target.
/// Weights are initialised to 1 and never influence the mapping.
Assignment assign_labels(std::span<const Box> anchors, std::span<const LabeledBox> targets,
                         double fg_iou = 0.5);
Assignment assign_labels(std::span<const Proposal> proposals,
                         std::span<const LabeledBox> targets, double fg_iou = 0.5);

struct LossConfig {
  double reg_weight = 1.0;  // lambda
  double smooth_l1_beta = 1.0;
};

struct LossResult {
  double total = 0.0;
  std::vector<double> terms;  // per proposal
  // dL/d(head output), head_outputs x num_proposals, column-major
  std::vector<double> d_out;
};

LossResult detection_loss(std::span<const Proposal> proposals, const Assignment& assignment,
                          std::span<const LabeledBox> targets, int num_categories,
                          const LossConfig& cfg = {});

/// Packs `loss.d_out` into the matrix layout `TinyDetector::backward` wants.
template <typename T>
typename TinyDetector<T>::Mat output_gradient(const LossResult& loss, const DetectorConfig& cfg,
                                              double scale = 1.0);

std::vector<double> softmax(std::span<const double> logits);

/// Detections from proposals: argmax over foreground classes, score strictly
/// above `score_threshold`, decoded and clipped to the image, then NMS.
std::vector<ScoredBox> decode_detections(std::span<const Proposal> proposals,
                                         const DetectorConfig& cfg, double score_threshold,
                                         double nms_threshold, bool class_agnostic = false);

/// SGD with heavy-ball momentum: v <- momentum*v + g; theta <- theta - lr*v.
template <typename T>
class Sgd {
 public:
  explicit Sgd(std::size_t n, double momentum = 0.9) : velocity_(n, T(0)), momentum_(momentum) {}

  void step(std::span<T> params, std::span<const T> grad, double lr);

  std::span<const T> velocity() const { return velocity_; }
  std::span<T> velocity() { return velocity_; }
  double momentum() const { return momentum_; }

 private:
  std::vector<T> velocity_;
  double momentum_;
};

/// Checkpoint: little-endian f32 vector at `path`, JSON sidecar at
/// `path` with extension replaced by ".json" (suffixes after it preserved).
struct CheckpointMeta {
  DetectorConfig config;
  std::int64_t iteration = 0;
};

void save_checkpoint(const std::filesystem::path& path, std::span<const float> params,
                     const CheckpointMeta& meta);
std::vector<float> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta);
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

}  // namespace mixtrain

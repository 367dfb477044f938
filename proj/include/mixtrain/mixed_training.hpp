#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixtrain/augmentation.hpp"
#include "mixtrain/detector.hpp"
#include "mixtrain/ema_teacher.hpp"
#include "mixtrain/evaluation.hpp"
#include "mixtrain/synthetic_data.hpp"
#include "mixtrain/target_mixer.hpp"

namespace mixtrain {

enum class TrainMode { sitraining_normal, sitraining_strong, mixtraining };
enum class MixBranches { both, normal_only, strong_only };

std::string_view to_string(TrainMode m);
std::string_view to_string(MergeStrategy s);
std::string_view to_string(MixBranches b);
TrainMode parse_train_mode(std::string_view s);
MergeStrategy parse_merge_strategy(std::string_view s);
MixBranches parse_mix_branches(std::string_view s);

struct TrainConfig {
  TrainMode mode = TrainMode::mixtraining;
  int total_iterations = 12000;
  int batch_size = 4;
  double lr = 0.001;
  double momentum = 0.9;
  std::vector<double> lr_decay_at = {2.0 / 3.0, 8.0 / 9.0};  // fractions of the schedule
  double lr_decay_factor = 0.1;
  int warmup_iterations = 300;

  double strong_branch_probability = 0.5;
  double easy_threshold = 0.9;
  double pseudo_score_threshold = 0.9;
  double pseudo_nms_threshold = 0.5;
  MergeStrategy merge_strategy = MergeStrategy::hybrid;
  MixBranches mix_on = MixBranches::both;
  double ema_momentum = 0.999;
  bool teacher_scale_jitter = false;
  bool cache_pseudo_per_epoch = false;

  int eval_interval = 2000;
  double eval_score_threshold = 0.05;
  double eval_nms_threshold = 0.5;

  std::uint64_t seed = 0;
  DetectorConfig detector;
  LossConfig loss;
  double fg_iou = 0.5;

  void validate() const;
  double lr_at(int iteration) const;  // iteration is 0-based
};

nlohmann::json to_json(const TrainConfig& c);
/// Fields missing from `j` keep the values already in `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct IterationStats {
  int iteration = 0;  // 1-based index of the completed step
  double loss = 0.0;
  int n_pseudo = 0;
  int n_missing_added = 0;
  int n_replaced = 0;
  double easy_ratio = 0.0;
  int n_strong = 0;
  int n_images = 0;
  int n_background_only = 0;  // images whose targets were all dropped by augmentation

  std::string branch() const;  // "normal", "strong" or "mixed" over the batch
};

struct EvalRow {
  int iteration = 0;
  EvalResult student;
  EvalResult teacher;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, nlohmann::json dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const nlohmann::json& dump() const { return dump_; }

 private:
  nlohmann::json dump_;
};

/// Strong branch with probability `p`.
Strength choose_branch(Rng& rng, double p);

/// Easy-target gating: normal branch -> 1 for every target; strong branch -> 1
/// iff the teacher score exceeds `easy_threshold`.
std::vector<double> target_weights(std::span<const double> scores, Strength branch,
                                   double easy_threshold);

/// Everything one image contributes to a step.
struct SampleStep {
  Strength branch = Strength::normal;
  std::vector<LabeledBox> mixed;      // targets after pseudo-box mixing
  std::vector<double> scores;         // teacher scores of `mixed` (empty if not run)
  std::vector<double> weights;        // per augmented target
  Sample augmented;                   // detector input and remapped targets
  AugRecord record;
  Assignment assignment;
  LossResult loss;
  int n_pseudo = 0;
  int n_added = 0;
  int n_replaced = 0;
  bool teacher_ran = false;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, const Dataset& train);

  const TrainConfig& config() const { return cfg_; }
  const std::vector<float>& student() const { return student_; }
  std::vector<float>& student() { return student_; }
  const EmaState<float>& teacher() const { return teacher_; }
  EmaState<float>& teacher() { return teacher_; }
  Sgd<float>& optimizer() { return sgd_; }
  int iteration() const { return iteration_; }
  void set_iteration(int it) { iteration_ = it; }
  std::int64_t teacher_forwards() const { return teacher_net_.forward_count(); }

  /// Sample indices of the batch for a 0-based iteration.
  std::vector<std::size_t> batch_indices(int iteration) const;

  /// Runs the per-image part of a training step (teacher, mixing, branch,
  /// augmentation, assignment, loss) without touching any parameters.
  SampleStep prepare_sample(const Sample& s, int iteration, int slot) const;

  /// One optimisation step over the next batch.
  IterationStats step();

  /// Student and teacher detections for every sample of `ds`.
  std::vector<std::vector<ScoredBox>> detect(const Dataset& ds, bool use_teacher) const;
  EvalRow evaluate(const Dataset& test) const;

 private:
  TrainConfig cfg_;
  const Dataset* train_;
  TinyDetector<float> net_;
  Teacher<float> teacher_net_;
  std::vector<float> student_;
  EmaState<float> teacher_;
  Sgd<float> sgd_;
  int iteration_ = 0;

  struct CachedPseudo {
    int epoch = -1;
    std::vector<LabeledBox> boxes;
  };
  mutable std::vector<CachedPseudo> pseudo_cache_;
};

/// Header plus one row per step: iteration,loss,n_pseudo,n_missing_added,
/// n_replaced,easy_ratio,branch,map,map50,map75 (eval columns blank off-interval).
class StatsCsvWriter {
 public:
  explicit StatsCsvWriter(std::ostream& os, bool write_header = true);
  void write(const IterationStats& s, const EvalResult* eval = nullptr);

 private:
  std::ostream& os_;
};

struct LoopCallbacks {
  std::function<void(const IterationStats&, const EvalRow*)> on_step;
  std::function<void(const EvalRow&)> on_eval;
};

struct LoopResult {
  std::vector<IterationStats> stats;
  std::vector<EvalRow> evals;
};

/// Runs from `trainer.iteration()` to `total_iterations`, evaluating on `test`
/// every `eval_interval` steps and at the end (and at step 0 when nothing
/// is trained).
LoopResult train_loop(Trainer& trainer, const Dataset& test, const LoopCallbacks& cb = {});

}  // namespace mixtrain

#include "mixtrain/mixed_training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace mixtrain {

std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::sitraining_normal: return "sitraining-normal";
    case TrainMode::sitraining_strong: return "sitraining-strong";
    case TrainMode::mixtraining: return "mixtraining";
  }
  return "?";
}

std::string_view to_string(MergeStrategy s) {
  switch (s) {
    case MergeStrategy::off: return "off";
    case MergeStrategy::missing: return "missing";
    case MergeStrategy::loc_noise: return "loc-noise";
    case MergeStrategy::hybrid: return "hybrid";
  }
  return "?";
}

std::string_view to_string(MixBranches b) {
  switch (b) {
    case MixBranches::both: return "both";
    case MixBranches::normal_only: return "normal";
    case MixBranches::strong_only: return "strong";
  }
  return "?";
}

namespace {

std::string normalize(std::string_view s) {
  std::string out(s);
  std::replace(out.begin(), out.end(), '_', '-');
  return out;
}

}  // namespace

TrainMode parse_train_mode(std::string_view s) {
  const std::string n = normalize(s);
  if (n == "sitraining-normal") return TrainMode::sitraining_normal;
  if (n == "sitraining-strong") return TrainMode::sitraining_strong;
  if (n == "mixtraining") return TrainMode::mixtraining;
  throw std::invalid_argument("unknown mode: " + std::string(s));
}

MergeStrategy parse_merge_strategy(std::string_view s) {
  const std::string n = normalize(s);
  if (n == "off") return MergeStrategy::off;
  if (n == "missing") return MergeStrategy::missing;
  if (n == "loc-noise") return MergeStrategy::loc_noise;
  if (n == "hybrid") return MergeStrategy::hybrid;
  throw std::invalid_argument("unknown merge strategy: " + std::string(s));
}

MixBranches parse_mix_branches(std::string_view s) {
  const std::string n = normalize(s);
  if (n == "both") return MixBranches::both;
  if (n == "normal") return MixBranches::normal_only;
  if (n == "strong") return MixBranches::strong_only;
  throw std::invalid_argument("unknown mix branch selection: " + std::string(s));
}

void TrainConfig::validate() const {
  const auto open01 = [](double v) { return v > 0.0 && v < 1.0; };
  const auto closed01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (total_iterations < 0) throw std::invalid_argument("total_iterations must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0, 1)");
  if (!open01(easy_threshold)) throw std::invalid_argument("easy_threshold must be in (0, 1)");
  if (!open01(pseudo_score_threshold)) {
    throw std::invalid_argument("pseudo_score_threshold must be in (0, 1)");
  }
  if (!(pseudo_nms_threshold > 0.0 && pseudo_nms_threshold <= 1.0)) {
    throw std::invalid_argument("pseudo_nms_threshold must be in (0, 1]");
  }
  if (!closed01(strong_branch_probability)) {
    throw std::invalid_argument("strong_branch_probability must be in [0, 1]");
  }
  if (!closed01(ema_momentum)) throw std::invalid_argument("ema_momentum must be in [0, 1]");
  if (eval_interval < 1) throw std::invalid_argument("eval_interval must be >= 1");
  detector.validate();
}

double TrainConfig::lr_at(int iteration) const {
  double rate = lr;
  for (double frac : lr_decay_at) {
    if (iteration >= static_cast<int>(std::floor(frac * total_iterations))) rate *= lr_decay_factor;
  }
  if (warmup_iterations > 0 && iteration < warmup_iterations) {
    rate *= static_cast<double>(iteration + 1) / warmup_iterations;
  }
  return rate;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"mode", to_string(c.mode)},
      {"iterations", c.total_iterations},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"momentum", c.momentum},
      {"lr_decay_at", c.lr_decay_at},
      {"lr_decay_factor", c.lr_decay_factor},
      {"warmup_iterations", c.warmup_iterations},
      {"strong_prob", c.strong_branch_probability},
      {"easy_threshold", c.easy_threshold},
      {"pseudo_threshold", c.pseudo_score_threshold},
      {"pseudo_nms_threshold", c.pseudo_nms_threshold},
      {"merge_strategy", to_string(c.merge_strategy)},
      {"mix_on", to_string(c.mix_on)},
      {"ema_momentum", c.ema_momentum},
      {"teacher_scale_jitter", c.teacher_scale_jitter},
      {"cache_pseudo_per_epoch", c.cache_pseudo_per_epoch},
      {"eval_interval", c.eval_interval},
      {"eval_score_threshold", c.eval_score_threshold},
      {"eval_nms_threshold", c.eval_nms_threshold},
      {"seed", c.seed},
      {"fg_iou", c.fg_iou},
      {"reg_weight", c.loss.reg_weight},
      {"smooth_l1_beta", c.loss.smooth_l1_beta},
      {"detector",
       {{"H", c.detector.height},
        {"W", c.detector.width},
        {"F", c.detector.features},
        {"C", c.detector.num_categories},
        {"head_kernel", c.detector.head_kernel},
        {"anchor_size", c.detector.anchor_size}}},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  const nlohmann::json known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  if (j.contains("detector")) {
    for (const auto& [key, value] : j.at("detector").items()) {
      if (!known.at("detector").contains(key)) {
        throw std::invalid_argument("config: unknown detector key '" + key + "'");
      }
    }
  }
  const auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
  get("iterations", c.total_iterations);
  get("batch_size", c.batch_size);
  get("lr", c.lr);
  get("momentum", c.momentum);
  get("lr_decay_at", c.lr_decay_at);
  get("lr_decay_factor", c.lr_decay_factor);
  get("warmup_iterations", c.warmup_iterations);
  get("strong_prob", c.strong_branch_probability);
  get("easy_threshold", c.easy_threshold);
  get("pseudo_threshold", c.pseudo_score_threshold);
  get("pseudo_nms_threshold", c.pseudo_nms_threshold);
  if (j.contains("merge_strategy")) {
    c.merge_strategy = parse_merge_strategy(j.at("merge_strategy").get<std::string>());
  }
  if (j.contains("mix_on")) c.mix_on = parse_mix_branches(j.at("mix_on").get<std::string>());
  get("ema_momentum", c.ema_momentum);
  get("teacher_scale_jitter", c.teacher_scale_jitter);
  get("cache_pseudo_per_epoch", c.cache_pseudo_per_epoch);
  get("eval_interval", c.eval_interval);
  get("eval_score_threshold", c.eval_score_threshold);
  get("eval_nms_threshold", c.eval_nms_threshold);
  get("seed", c.seed);
  get("fg_iou", c.fg_iou);
  get("reg_weight", c.loss.reg_weight);
  get("smooth_l1_beta", c.loss.smooth_l1_beta);
  if (j.contains("detector")) {
    const auto& d = j.at("detector");
    if (d.contains("H")) c.detector.height = d.at("H");
    if (d.contains("W")) c.detector.width = d.at("W");
    if (d.contains("F")) c.detector.features = d.at("F");
    if (d.contains("C")) c.detector.num_categories = d.at("C");
    if (d.contains("head_kernel")) c.detector.head_kernel = d.at("head_kernel");
    if (d.contains("anchor_size")) c.detector.anchor_size = d.at("anchor_size");
  }
  return c;
}

std::string IterationStats::branch() const {
  if (n_strong == 0) return "normal";
  if (n_strong == n_images) return "strong";
  return "mixed";
}

Strength choose_branch(Rng& rng, double p) {
  return bernoulli(rng, p) ? Strength::strong : Strength::normal;
}

std::vector<double> target_weights(std::span<const double> scores, Strength branch,
                                   double easy_threshold) {
  std::vector<double> w(scores.size(), 1.0);
  if (branch == Strength::strong) {
    for (std::size_t i = 0; i < scores.size(); ++i) w[i] = scores[i] > easy_threshold ? 1.0 : 0.0;
  }
  return w;
}

// ---------------------------------------------------------------------------

namespace {

enum Stream : std::uint64_t { kOrder = 1, kAugment = 2, kBranch = 3, kTeacherScale = 4 };

}  // namespace

Trainer::Trainer(TrainConfig cfg, const Dataset& train)
    : cfg_(std::move(cfg)),
      train_(&train),
      net_(cfg_.detector),
      teacher_net_(cfg_.detector),
      student_(net_.init_params(derive_seed(cfg_.seed, {0}))),
      teacher_(EmaState<float>::from_student(student_, cfg_.ema_momentum)),
      sgd_(student_.size(), cfg_.momentum) {
  cfg_.validate();
  if (train.size() == 0) throw std::invalid_argument("Trainer: empty training set");
  pseudo_cache_.resize(train.size());
}

std::vector<std::size_t> Trainer::batch_indices(int iteration) const {
  const std::size_t n = train_->size();
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  std::int64_t perm_epoch = -1;
  for (int k = 0; k < cfg_.batch_size; ++k) {
    const std::int64_t pos = static_cast<std::int64_t>(iteration) * cfg_.batch_size + k;
    const std::int64_t epoch = pos / static_cast<std::int64_t>(n);
    if (epoch != perm_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(derive_seed(cfg_.seed, {kOrder, static_cast<std::uint64_t>(epoch)}));
      std::shuffle(perm.begin(), perm.end(), rng);
      perm_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

SampleStep Trainer::prepare_sample(const Sample& s, int iteration, int slot) const {
  const auto it = static_cast<std::uint64_t>(iteration);
  const auto sl = static_cast<std::uint64_t>(slot);
  Rng aug_rng(derive_seed(cfg_.seed, {kAugment, it, sl}));
  Rng branch_rng(derive_seed(cfg_.seed, {kBranch, it, sl}));
  Rng scale_rng(derive_seed(cfg_.seed, {kTeacherScale, it, sl}));

  SampleStep st;
  switch (cfg_.mode) {
    case TrainMode::sitraining_normal: st.branch = Strength::normal; break;
    case TrainMode::sitraining_strong: st.branch = Strength::strong; break;
    case TrainMode::mixtraining:
      st.branch = choose_branch(branch_rng, cfg_.strong_branch_probability);
      break;
  }

  st.mixed = s.targets;
  if (cfg_.mode == TrainMode::mixtraining) {
    const bool mix_here = cfg_.merge_strategy != MergeStrategy::off &&
                          (cfg_.mix_on == MixBranches::both ||
                           (cfg_.mix_on == MixBranches::normal_only && st.branch == Strength::normal) ||
                           (cfg_.mix_on == MixBranches::strong_only && st.branch == Strength::strong));
    const bool need_scores = st.branch == Strength::strong;
    if (mix_here || need_scores) {
      const double scale =
          cfg_.teacher_scale_jitter ? uniform(scale_rng, 0.5, 1.5) : 1.0;
      const TeacherView view = teacher_net_.view(teacher_, s.image, scale);
      st.teacher_ran = true;
      if (mix_here) {
        std::vector<LabeledBox> pseudo;
        auto& cache = pseudo_cache_[static_cast<std::size_t>(s.id) % pseudo_cache_.size()];
        const int epoch = static_cast<int>(
            (static_cast<std::int64_t>(iteration) * cfg_.batch_size) / train_->size());
        if (cfg_.cache_pseudo_per_epoch && cache.epoch == epoch) {
          pseudo = cache.boxes;
        } else {
          pseudo = predict_pseudo_boxes(view, cfg_.pseudo_score_threshold, cfg_.pseudo_nms_threshold);
          if (cfg_.cache_pseudo_per_epoch) cache = {epoch, pseudo};
        }
        st.n_pseudo = static_cast<int>(pseudo.size());
        MixResult mix = merge_targets(cfg_.merge_strategy, s.targets, pseudo);
        st.mixed = std::move(mix.targets);
        st.n_added = mix.n_added;
        st.n_replaced = mix.n_replaced;
      }
      st.scores = score_targets(view, st.mixed);
    }
  }

  std::vector<double> mixed_weights;
  if (st.branch == Strength::strong && st.teacher_ran) {
    mixed_weights = target_weights(st.scores, st.branch, cfg_.easy_threshold);
  } else {
    mixed_weights.assign(st.mixed.size(), 1.0);
  }

  Sample work;
  work.id = s.id;
  work.image = s.image;
  work.targets = st.mixed;
  PipelineResult aug = apply_pipeline(work, build_pipeline(st.branch), st.branch, aug_rng);

  // Fit the (possibly rescaled) image back onto the detector canvas.
  const int H = cfg_.detector.height;
  const int W = cfg_.detector.width;
  const int h = aug.sample.image.height();
  const int w = aug.sample.image.width();
  const int ox = w <= W ? uniform_int(aug_rng, 0, W - w) : -uniform_int(aug_rng, 0, w - W);
  const int oy = h <= H ? uniform_int(aug_rng, 0, H - h) : -uniform_int(aug_rng, 0, h - H);
  GeometricResult canvas = place_on_canvas(aug.sample, H, W, ox, oy);
  std::vector<std::size_t> kept;
  for (std::size_t k : canvas.kept) kept.push_back(aug.record.kept[k]);
  for (std::size_t k : canvas.dropped) aug.record.dropped.push_back(aug.record.kept[k]);
  aug.record.kept = kept;
  aug.record.all_dropped = !st.mixed.empty() && kept.empty();

  st.augmented = std::move(canvas.sample);
  st.record = std::move(aug.record);
  for (std::size_t k : st.record.kept) st.weights.push_back(mixed_weights[k]);
  return st;
}

IterationStats Trainer::step() {
  const int it = iteration_;
  const auto indices = batch_indices(it);
  IterationStats stats;
  stats.iteration = it + 1;
  stats.n_images = static_cast<int>(indices.size());

  std::vector<float> grad(student_.size(), 0.0f);
  int n_scored = 0;
  int n_easy = 0;
  const double inv_batch = 1.0 / static_cast<double>(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& s = (*train_)[indices[k]];
    SampleStep st = prepare_sample(s, it, static_cast<int>(k));
    const ForwardPass<float> pass = net_.forward(student_, st.augmented.image);
    const auto props = net_.proposals(pass);
    st.assignment = assign_labels(props, st.augmented.targets, cfg_.fg_iou);
    st.assignment.weight = st.weights;
    st.loss = detection_loss(props, st.assignment, st.augmented.targets,
                             cfg_.detector.num_categories, cfg_.loss);
    if (!std::isfinite(st.loss.total)) {
      throw TrainingAborted("non-finite loss at iteration " + std::to_string(it + 1),
                            {{"iteration", it + 1},
                             {"sample_id", s.id},
                             {"branch", to_string(st.branch)},
                             {"augmentation", nlohmann::json::parse(st.record.to_json_line())}});
    }
    const auto g = net_.backward(student_, pass, output_gradient<float>(st.loss, cfg_.detector, inv_batch));
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];

    stats.loss += st.loss.total * inv_batch;
    stats.n_pseudo += st.n_pseudo;
    stats.n_missing_added += st.n_added;
    stats.n_replaced += st.n_replaced;
    if (st.branch == Strength::strong) ++stats.n_strong;
    if (st.record.all_dropped) ++stats.n_background_only;
    for (double sc : st.scores) {
      ++n_scored;
      if (sc > cfg_.easy_threshold) ++n_easy;
    }
  }
  for (float g : grad) {
    if (!std::isfinite(g)) {
      throw TrainingAborted("non-finite gradient at iteration " + std::to_string(it + 1),
                            {{"iteration", it + 1}, {"loss", stats.loss}});
    }
  }
  stats.easy_ratio = n_scored == 0 ? 0.0 : static_cast<double>(n_easy) / n_scored;

  sgd_.step(student_, grad, cfg_.lr_at(it));
  ema_update<float>(teacher_, student_);
  ++iteration_;
  return stats;
}

std::vector<std::vector<ScoredBox>> Trainer::detect(const Dataset& ds, bool use_teacher) const {
  const std::vector<float>& params = use_teacher ? teacher_.params : student_;
  std::vector<std::vector<ScoredBox>> out;
  out.reserve(ds.size());
  for (const Sample& s : ds) {
    const auto props = net_.proposals(net_.forward(params, s.image));
    out.push_back(decode_detections(props, cfg_.detector, cfg_.eval_score_threshold,
                                    cfg_.eval_nms_threshold));
  }
  return out;
}

EvalRow Trainer::evaluate(const Dataset& test) const {
  std::vector<std::vector<LabeledBox>> gts;
  gts.reserve(test.size());
  for (const Sample& s : test) gts.push_back(s.clean);
  const double image_area = static_cast<double>(cfg_.detector.height) * cfg_.detector.width;
  EvalRow row;
  row.iteration = iteration_;
  row.student = coco_map(detect(test, false), gts, cfg_.detector.num_categories, image_area);
  row.teacher = coco_map(detect(test, true), gts, cfg_.detector.num_categories, image_area);
  return row;
}

// ---------------------------------------------------------------------------

StatsCsvWriter::StatsCsvWriter(std::ostream& os, bool write_header) : os_(os) {
  if (write_header) {
    os_ << "iteration,loss,n_pseudo,n_missing_added,n_replaced,easy_ratio,branch,map,map50,map75\n";
  }
}

void StatsCsvWriter::write(const IterationStats& s, const EvalResult* eval) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%.9g,%d,%d,%d,%.6f,%s,", s.iteration, s.loss, s.n_pseudo,
                s.n_missing_added, s.n_replaced, s.easy_ratio, s.branch().c_str());
  os_ << buf;
  if (eval) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f", eval->map, eval->map50, eval->map75);
    os_ << buf;
  } else {
    os_ << ",,";
  }
  os_ << '\n';
}

LoopResult train_loop(Trainer& trainer, const Dataset& test, const LoopCallbacks& cb) {
  LoopResult res;
  const TrainConfig& cfg = trainer.config();
  if (trainer.iteration() >= cfg.total_iterations) {
    EvalRow row = trainer.evaluate(test);
    if (cb.on_eval) cb.on_eval(row);
    res.evals.push_back(std::move(row));
    return res;
  }
  while (trainer.iteration() < cfg.total_iterations) {
    IterationStats st = trainer.step();
    const bool eval_now =
        trainer.iteration() % cfg.eval_interval == 0 || trainer.iteration() == cfg.total_iterations;
    if (eval_now) {
      EvalRow row = trainer.evaluate(test);
      if (cb.on_eval) cb.on_eval(row);
      if (cb.on_step) cb.on_step(st, &row);
      res.evals.push_back(std::move(row));
    } else if (cb.on_step) {
      cb.on_step(st, nullptr);
    }
    res.stats.push_back(st);
  }
  return res;
}

}  // namespace mixtrain

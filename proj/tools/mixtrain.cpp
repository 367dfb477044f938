#include <malloc.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mixtrain/mixed_training.hpp"
#include "mixtrain/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mixtrain;

namespace {

constexpr int kExitBadArgs = 2;
constexpr int kExitAbort = 3;

std::string now_iso() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::invalid_argument("cannot read " + p.string());
  return json::parse(is);
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p);
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("cannot write " + p.string());
}

/// Empties `dir` when --force is given; refuses a non-empty directory otherwise.
void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw std::invalid_argument(dir.string() + " exists and is not a directory");
  }
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw std::invalid_argument(dir.string() + " is not empty (use --force)");
    for (const auto& e : fs::directory_iterator(dir)) fs::remove_all(e.path());
  }
  fs::create_directories(dir);
}

/// Keeps the header and every row whose leading iteration is <= `last`.
void truncate_csv(const fs::path& p, int last) {
  if (!fs::exists(p)) return;
  std::ifstream is(p);
  std::string header, line;
  std::getline(is, header);
  std::vector<std::string> keep;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (std::stoi(line.substr(0, line.find(','))) <= last) keep.push_back(line);
  }
  is.close();
  std::ofstream os(p, std::ios::trunc);
  os << header << '\n';
  for (const auto& l : keep) os << l << '\n';
}

json eval_json(const EvalResult& r) { return json::parse(r.to_json()); }

// ---------------------------------------------------------------------------

struct GenerateArgs {
  fs::path out;
  int count = 2000;
  int test_count = 500;
  std::uint64_t seed = 0;
  double p_miss = 0.3;
  double sigma_loc = 2.0;
  bool force = false;
};

int cmd_generate(const GenerateArgs& a) {
  NoiseConfig noise{a.p_miss, a.sigma_loc, 0};
  noise.validate();
  if (a.count < 1 || a.test_count < 1) throw std::invalid_argument("counts must be >= 1");
  prepare_output_dir(a.out, a.force);
  const auto [train, test] = make_benchmark(a.seed, a.count, a.test_count, SceneConfig{}, noise);
  save_dataset(train, a.out / "train");
  save_dataset(test, a.out / "test");

  std::size_t n_clean = 0, n_noisy = 0;
  for (const Sample& s : train) {
    n_clean += s.clean.size();
    n_noisy += s.targets.size();
  }
  const double drop = n_clean ? 1.0 - static_cast<double>(n_noisy) / n_clean : 0.0;
  write_json(a.out / "manifest.json",
             {{"kind", "dataset"},
              {"seed", a.seed},
              {"created", now_iso()},
              {"train_count", a.count},
              {"test_count", a.test_count},
              {"p_miss", a.p_miss},
              {"sigma_loc", a.sigma_loc},
              {"annotation_drop_fraction", drop},
              {"artifacts", {{"train", "train"}, {"test", "test"}}}});
  std::cout << "wrote " << a.count << " train and " << a.test_count << " test images to "
            << a.out.string() << " (drop fraction " << drop << ")\n";
  return 0;
}

struct StopRequested {};

// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path data;
  fs::path out;
  std::optional<fs::path> config;
  std::optional<std::string> mode;
  std::optional<int> iterations;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> merge_strategy;
  std::optional<double> strong_prob;
  std::optional<double> easy_threshold;
  std::optional<double> pseudo_threshold;
  std::optional<double> ema_momentum;
  std::optional<int> eval_interval;
  std::optional<int> stop_after;
  bool resume = false;
  bool force = false;
};

Dataset load_split(const fs::path& data, const std::string& split) {
  const fs::path dir = data / split;
  if (!fs::exists(dir / "annotations.json")) {
    throw std::invalid_argument("no dataset split at " + dir.string());
  }
  return load_dataset(dir);
}

TrainConfig resolve_config(const TrainArgs& a, const SceneConfig& scene) {
  TrainConfig c;
  c.detector.height = scene.image_size;
  c.detector.width = scene.image_size;
  c.detector.num_categories = scene.num_categories;
  if (a.config) c = train_config_from_json(read_json(*a.config), c);
  if (a.mode) c.mode = parse_train_mode(*a.mode);
  if (a.iterations) c.total_iterations = *a.iterations;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.lr) c.lr = *a.lr;
  if (a.seed) c.seed = *a.seed;
  if (a.merge_strategy) c.merge_strategy = parse_merge_strategy(*a.merge_strategy);
  if (a.strong_prob) c.strong_branch_probability = *a.strong_prob;
  if (a.easy_threshold) c.easy_threshold = *a.easy_threshold;
  if (a.pseudo_threshold) c.pseudo_score_threshold = *a.pseudo_threshold;
  if (a.ema_momentum) c.ema_momentum = *a.ema_momentum;
  if (a.eval_interval) c.eval_interval = *a.eval_interval;
  c.validate();
  if (c.detector.height != scene.image_size || c.detector.width != scene.image_size ||
      c.detector.num_categories != scene.num_categories) {
    throw std::invalid_argument("detector shape does not match the dataset");
  }
  return c;
}

struct RunFiles {
  fs::path dir;
  fs::path manifest() const { return dir / "manifest.json"; }
  fs::path stats() const { return dir / "stats.csv"; }
  fs::path evals() const { return dir / "eval.csv"; }
  fs::path student() const { return dir / "checkpoint.bin"; }
  fs::path teacher() const { return dir / "checkpoint.bin.ema"; }
  fs::path velocity() const { return dir / "optimizer.bin"; }
  fs::path eval_json() const { return dir / "eval.json"; }
  fs::path abort_json() const { return dir / "abort.json"; }
};

json artifacts() {
  return {{"stats_csv", "stats.csv"},
          {"eval_csv", "eval.csv"},
          {"checkpoint", "checkpoint.bin"},
          {"checkpoint_ema", "checkpoint.bin.ema"},
          {"optimizer", "optimizer.bin"},
          {"eval_json", "eval.json"}};
}

void save_state(const RunFiles& f, Trainer& tr) {
  const CheckpointMeta meta{tr.config().detector, tr.iteration()};
  save_checkpoint(f.student(), tr.student(), meta);
  save_checkpoint(f.teacher(), tr.teacher().params, meta);
  const auto v = tr.optimizer().velocity();
  save_checkpoint(f.velocity(), std::span<const float>(v.data(), v.size()), meta);
}

/// Restores student, teacher and optimizer state; returns the restored
/// iteration or 0 when the run has no checkpoint yet.
int restore_state(const RunFiles& f, Trainer& tr) {
  if (!fs::exists(f.student())) return 0;
  CheckpointMeta ms, mt, mv;
  std::vector<float> student = load_checkpoint(f.student(), &ms);
  std::vector<float> teacher = load_checkpoint(f.teacher(), &mt);
  std::vector<float> velocity = load_checkpoint(f.velocity(), &mv);
  if (ms.iteration != mt.iteration || ms.iteration != mv.iteration) {
    throw std::runtime_error("checkpoint files disagree on the iteration");
  }
  if (student.size() != tr.student().size() || teacher.size() != student.size() ||
      velocity.size() != student.size()) {
    throw std::runtime_error("checkpoint does not match the configured detector");
  }
  tr.student() = std::move(student);
  tr.teacher().params = std::move(teacher);
  tr.teacher().update_count = ms.iteration;
  auto v = tr.optimizer().velocity();
  std::copy(velocity.begin(), velocity.end(), v.begin());
  tr.set_iteration(static_cast<int>(ms.iteration));
  return static_cast<int>(ms.iteration);
}

int cmd_train(const TrainArgs& a) {
  const Dataset train = load_split(a.data, "train");
  const Dataset test = load_split(a.data, "test");
  const TrainConfig cfg = resolve_config(a, train.scene());
  const RunFiles f{a.out};

  json manifest;
  int start = 0;
  const bool resuming = a.resume && fs::exists(f.manifest());
  if (resuming) {
    manifest = read_json(f.manifest());
    if (manifest.at("config") != to_json(cfg)) {
      throw std::invalid_argument("--resume: configuration differs from " + f.manifest().string());
    }
  } else {
    prepare_output_dir(f.dir, a.force);
    manifest = {{"kind", "train"},
                {"config", to_json(cfg)},
                {"seed", cfg.seed},
                {"data", fs::absolute(a.data).string()},
                {"started", now_iso()},
                {"artifacts", artifacts()}};
  }

  Trainer tr(cfg, train);
  if (resuming) start = restore_state(f, tr);
  truncate_csv(f.stats(), start);
  truncate_csv(f.evals(), start);
  manifest["status"] = "running";
  manifest["resumed_from"] = start;
  write_json(f.manifest(), manifest);

  const bool fresh_stats = !fs::exists(f.stats());
  std::ofstream stats(f.stats(), std::ios::app);
  StatsCsvWriter writer(stats, fresh_stats);
  const bool fresh_evals = !fs::exists(f.evals());
  std::ofstream evals(f.evals(), std::ios::app);
  if (fresh_evals) {
    evals << "iteration,student_map,student_map50,student_map75,teacher_map,teacher_map50,"
             "teacher_map75\n";
  }

  LoopCallbacks cb;
  cb.on_eval = [&](const EvalRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.iteration,
                  r.student.map, r.student.map50, r.student.map75, r.teacher.map,
                  r.teacher.map50, r.teacher.map75);
    evals << buf << std::flush;
    std::cerr << "iteration " << r.iteration << ": student mAP " << r.student.map
              << " teacher mAP " << r.teacher.map << '\n';
  };
  cb.on_step = [&](const IterationStats& s, const EvalRow* r) {
    writer.write(s, r ? &r->student : nullptr);
    if (r) {
      stats.flush();
      save_state(f, tr);
      if (a.stop_after && tr.iteration() >= *a.stop_after) throw StopRequested{};
    }
  };

  try {
    const LoopResult res = train_loop(tr, test, cb);
    stats.flush();
    if (cfg.total_iterations == 0 || tr.iteration() == start) save_state(f, tr);
    if (!res.evals.empty()) {
      const EvalRow& last = res.evals.back();
      write_json(f.eval_json(), {{"iteration", last.iteration},
                                 {"student", eval_json(last.student)},
                                 {"teacher", eval_json(last.teacher)}});
    }
  } catch (const StopRequested&) {
    manifest["status"] = "stopped";
    manifest["stopped_at"] = tr.iteration();
    write_json(f.manifest(), manifest);
    std::cerr << "stopped at iteration " << tr.iteration() << "; continue with --resume\n";
    return 0;
  } catch (const TrainingAborted& e) {
    stats.flush();
    write_json(f.abort_json(), {{"error", e.what()}, {"dump", e.dump()}});
    manifest["status"] = "aborted";
    manifest["finished"] = now_iso();
    write_json(f.manifest(), manifest);
    std::cerr << "training aborted: " << e.what() << " (see " << f.abort_json().string() << ")\n";
    return kExitAbort;
  }
  manifest["status"] = "finished";
  manifest["finished"] = now_iso();
  write_json(f.manifest(), manifest);
  return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::optional<fs::path> run;
  std::optional<fs::path> checkpoint;
  fs::path data;
  std::string split = "test";
  bool use_ema = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
  if (a.run.has_value() == a.checkpoint.has_value()) {
    throw std::invalid_argument("give exactly one of --run and --checkpoint");
  }
  fs::path ckpt = a.run ? *a.run / "checkpoint.bin" : *a.checkpoint;
  if (a.use_ema) ckpt += ".ema";
  if (!fs::exists(ckpt)) throw std::invalid_argument("no checkpoint at " + ckpt.string());
  const fs::path out_dir = a.run ? *a.run : ckpt.parent_path();

  TrainConfig cfg;
  if (a.run && fs::exists(*a.run / "manifest.json")) {
    cfg = train_config_from_json(read_json(*a.run / "manifest.json").at("config"));
  }
  const Dataset ds = load_split(a.data, a.split);
  CheckpointMeta meta;
  const std::vector<float> params = load_checkpoint(ckpt, &meta);
  const DetectorConfig& dc = meta.config;
  if (dc.height != ds.scene().image_size || dc.width != ds.scene().image_size ||
      dc.num_categories != ds.scene().num_categories) {
    throw std::runtime_error("checkpoint detector shape does not match the dataset");
  }

  const TinyDetector<float> net(dc);
  std::vector<std::vector<ScoredBox>> dets;
  std::vector<std::vector<LabeledBox>> gts;
  for (const Sample& s : ds) {
    dets.push_back(decode_detections(net.proposals(net.forward(params, s.image)), dc,
                                     cfg.eval_score_threshold, cfg.eval_nms_threshold));
    gts.push_back(s.clean);
  }
  const EvalResult r =
      coco_map(dets, gts, dc.num_categories, static_cast<double>(dc.height) * dc.width);
  json out = eval_json(r);
  out["split"] = a.split;
  out["checkpoint"] = ckpt.string();
  out["iteration"] = meta.iteration;
  out["use_ema"] = a.use_ema;
  const fs::path file = out_dir / ("eval_" + a.split + (a.use_ema ? "_ema" : "") + ".json");
  write_json(file, out);
  std::cout << out.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
  fs::path out;
  std::vector<fs::path> runs;
};

int cmd_report(const ReportArgs& a) {
  for (const auto& r : a.runs) {
    if (!fs::exists(r / "stats.csv")) throw std::invalid_argument("no stats.csv in " + r.string());
  }
  const ReportFiles files = write_report(a.runs, a.out);
  for (const auto& p : {files.map_svg, files.pseudo_svg, files.easy_svg, files.merged_csv}) {
    std::cout << p.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Per-sample Eigen buffers sit just above glibc's default mmap threshold.
  mallopt(M_MMAP_THRESHOLD, 16 << 20);
  mallopt(M_TRIM_THRESHOLD, 64 << 20);

  CLI::App app{"Mixed-augmentation detector training on synthetic shapes"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Render a synthetic train/test dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--count", gen.count, "Training images")->capture_default_str();
  g->add_option("--test-count", gen.test_count, "Test images")->capture_default_str();
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  g->add_option("--p-miss", gen.p_miss, "Probability of dropping an annotation")
      ->capture_default_str();
  g->add_option("--sigma-loc", gen.sigma_loc, "Box corner jitter in pixels")
      ->capture_default_str();
  g->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a detector");
  t->add_option("--data", tr.data, "Dataset directory from `generate`")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--config", tr.config, "JSON config file");
  t->add_option("--mode", tr.mode, "sitraining-normal, sitraining-strong or mixtraining");
  t->add_option("--iterations", tr.iterations);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.lr);
  t->add_option("--seed", tr.seed);
  t->add_option("--merge-strategy", tr.merge_strategy)
      ->check(CLI::IsMember({"off", "missing", "loc-noise", "hybrid"}));
  t->add_option("--strong-prob", tr.strong_prob);
  t->add_option("--easy-threshold", tr.easy_threshold);
  t->add_option("--pseudo-threshold", tr.pseudo_threshold);
  t->add_option("--ema-momentum", tr.ema_momentum);
  t->add_option("--eval-interval", tr.eval_interval);
  t->add_option("--stop-after", tr.stop_after,
                 "Stop at the first checkpoint at or after this iteration");
  t->add_flag("--resume", tr.resume, "Continue from the run directory's last checkpoint");
  t->add_flag("--force", tr.force, "Overwrite a non-empty run directory");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Compute COCO mAP of a checkpoint");
  e->add_option("--run", ev.run, "Run directory");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
  e->add_flag("--use-ema", ev.use_ema, "Evaluate the EMA teacher");

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Plot and merge the stats of one or more runs");
  r->add_option("--out", rep.out, "Output directory")->required();
  r->add_option("runs", rep.runs, "Run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitBadArgs;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_evaluate(ev);
    if (*r) return cmd_report(rep);
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kExitBadArgs;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kExitAbort;
  }
  return kExitBadArgs;
}

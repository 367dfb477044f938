// Comparative acceptance criteria on the synthetic benchmark: 2000 train / 500
// test images, 64x64, C=3, p_miss=0.3, sigma_loc=2.0, seeds 1..3.
//
// Usage: acceptance_benchmark [output_dir]. Every run's stats.csv lands in
// output_dir/<run>/ so the curves can be plotted with `mixtrain report`.

#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "harness.hpp"
#include "mixtrain/mixed_training.hpp"

namespace mixtrain::acceptance {
namespace {

namespace fs = std::filesystem;

constexpr int kSeeds = 3;
constexpr int kShort = 12000;
constexpr int kLong = 24000;

fs::path g_out = "acceptance_runs";

struct Run {
  std::vector<IterationStats> stats;
  std::vector<EvalRow> evals;
  double final_map() const { return evals.empty() ? 0.0 : evals.back().student.map; }
};

struct Variant {
  std::string name;
  TrainMode mode;
  MergeStrategy merge;
};

const Variant kSiNormal{"sitraining-normal", TrainMode::sitraining_normal, MergeStrategy::off};
const Variant kSiStrong{"sitraining-strong", TrainMode::sitraining_strong, MergeStrategy::off};
const Variant kMixHybrid{"mixtraining-hybrid", TrainMode::mixtraining, MergeStrategy::hybrid};
const Variant kMixOff{"mixtraining-off", TrainMode::mixtraining, MergeStrategy::off};

BenchmarkSplits benchmark_data(int seed) {
  return make_benchmark(static_cast<std::uint64_t>(seed), 2000, 500, SceneConfig{},
                        NoiseConfig{0.3, 2.0, 0});
}

Run train(const Variant& v, int iterations, int seed, const BenchmarkSplits& data) {
  TrainConfig cfg;
  cfg.mode = v.mode;
  cfg.merge_strategy = v.merge;
  cfg.total_iterations = iterations;
  cfg.seed = static_cast<std::uint64_t>(seed);

  const fs::path dir = g_out / (v.name + "-" + std::to_string(iterations / 1000) + "k-seed" +
                                std::to_string(seed));
  fs::create_directories(dir);
  std::ofstream csv(dir / "stats.csv");
  StatsCsvWriter writer(csv);

  Trainer trainer(cfg, data.train);
  LoopCallbacks cb;
  cb.on_step = [&](const IterationStats& s, const EvalRow* r) {
    writer.write(s, r ? &r->student : nullptr);
  };
  LoopResult res = train_loop(trainer, data.test, cb);
  Run run{std::move(res.stats), std::move(res.evals)};
  std::fprintf(stderr, "  %-22s %2dk seed %d: student mAP %.4f teacher mAP %.4f\n", v.name.c_str(),
               iterations / 1000, seed, run.final_map(), run.evals.back().teacher.map);
  return run;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Least-squares slope of y against the 1-based iteration index.
double slope(const std::vector<IterationStats>& stats, bool pseudo) {
  const double n = static_cast<double>(stats.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& s : stats) {
    const double x = s.iteration;
    const double y = pseudo ? s.n_pseudo : s.n_missing_added;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double den = n * sxx - sx * sx;
  return den == 0.0 ? 0.0 : (n * sxy - sx * sy) / den;
}

// Final student mAP per variant and seed on the 12k schedule, plus the
// MixTraining(hybrid) statistics for the pseudo-box trend.
std::map<std::string, std::vector<double>> g_short;
std::vector<std::vector<IterationStats>> g_hybrid_stats;

std::string pts(double map) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * map);
  return buf;
}

std::string per_seed(const std::vector<double>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + pts(v[i]);
  return out + "]";
}

Outcome short_schedule_ordering() {
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const BenchmarkSplits data = benchmark_data(seed);
    for (const Variant* v : {&kSiNormal, &kSiStrong, &kMixOff, &kMixHybrid}) {
      Run r = train(*v, kShort, seed, data);
      g_short[v->name].push_back(r.final_map());
      if (v == &kMixHybrid) g_hybrid_stats.push_back(std::move(r.stats));
    }
  }
  const double si = mean(g_short[kSiNormal.name]);
  const double off = mean(g_short[kMixOff.name]);
  const double mix = mean(g_short[kMixHybrid.name]);
  const bool pass = mix - si >= 0.01 && si < off && off < mix;
  return {pass, "mAP x100 averaged over 3 seeds: SiTraining(normal) " + pts(si) + " " +
                    per_seed(g_short[kSiNormal.name]) + ", MixTraining(merge off) " + pts(off) + " " +
                    per_seed(g_short[kMixOff.name]) + ", MixTraining(hybrid) " + pts(mix) + " " +
                    per_seed(g_short[kMixHybrid.name]) +
                    "; need hybrid - SiTraining >= 1.00 and SiTraining < merge off < hybrid"};
}

Outcome long_schedule_dynamics() {
  std::vector<double> si6, si24, mix24;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const BenchmarkSplits data = benchmark_data(seed);
    si6.push_back(train(kSiNormal, kShort / 2, seed, data).final_map());
    si24.push_back(train(kSiNormal, kLong, seed, data).final_map());
    mix24.push_back(train(kMixHybrid, kLong, seed, data).final_map());
  }
  const double si_peak = std::max(mean(si6), mean(g_short[kSiNormal.name]));
  const double mix12 = mean(g_short[kMixHybrid.name]);
  const bool si_declines = mean(si24) < si_peak;
  const bool mix_holds = mean(mix24) >= mix12 - 0.002;
  return {si_declines && mix_holds,
          "SiTraining(normal) 6k " + pts(mean(si6)) + " 12k " + pts(mean(g_short[kSiNormal.name])) +
              " 24k " + pts(mean(si24)) + (si_declines ? " (declines)" : " (no decline)") +
              "; MixTraining(hybrid) 12k " + pts(mix12) + " 24k " + pts(mean(mix24)) +
              (mix_holds ? " (>= 12k - 0.20)" : " (< 12k - 0.20)")};
}

Outcome strong_only_underperforms() {
  const double normal = mean(g_short[kSiNormal.name]);
  const double strong = mean(g_short[kSiStrong.name]);
  return {!g_short[kSiStrong.name].empty() && strong < normal,
          "SiTraining(strong) " + pts(strong) + " " + per_seed(g_short[kSiStrong.name]) +
              " vs SiTraining(normal) " + pts(normal) + " at 12k"};
}

Outcome pseudo_box_trend() {
  bool pass = g_hybrid_stats.size() == kSeeds;
  std::string detail = "linear-fit slopes per 1k iterations (n_pseudo, n_missing_added):";
  for (std::size_t i = 0; i < g_hybrid_stats.size(); ++i) {
    const double sp = slope(g_hybrid_stats[i], true);
    const double sm = slope(g_hybrid_stats[i], false);
    pass = pass && sp > 0.0 && sm > 0.0;
    char buf[96];
    std::snprintf(buf, sizeof(buf), " seed %zu (%.4f, %.4f)", i + 1, 1000 * sp, 1000 * sm);
    detail += buf;
  }
  return {pass, detail};
}

Outcome noise_recovery() {
  const double mix = mean(g_short[kMixHybrid.name]);
  const double off = mean(g_short[kMixOff.name]);
  return {!g_short[kMixHybrid.name].empty() && mix - off >= 0.005,
          "MixTraining(hybrid) " + pts(mix) + " vs MixTraining(merge off) " + pts(off) +
              ", difference " + pts(mix - off) + " (need >= 0.50)"};
}

void write_summary() {
  nlohmann::json j;
  for (const auto& [name, maps] : g_short) j["final_map_12k"][name] = maps;
  std::ofstream(g_out / "summary.json") << j.dump(2) << '\n';
}

}  // namespace
}  // namespace mixtrain::acceptance

int main(int argc, char** argv) {
  using namespace mixtrain::acceptance;
  mallopt(M_MMAP_THRESHOLD, 16 << 20);
  mallopt(M_TRIM_THRESHOLD, 64 << 20);
  if (argc > 1) g_out = argv[1];
  const int rc = run_all({
      {5, "MixTraining beats SiTraining, mixed augmentation alone in between", 45 * 60,
       short_schedule_ordering},
      {6, "long schedule: SiTraining declines, MixTraining holds", 60 * 60, long_schedule_dynamics},
      {7, "strong-only augmentation underperforms normal", 0, strong_only_underperforms},
      {8, "pseudo-box counts rise over training", 0, pseudo_box_trend},
      {9, "pseudo boxes recover missing annotations", 0, noise_recovery},
  });
  write_summary();
  return rc;
}

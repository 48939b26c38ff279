// Acceptance run: one PASS/FAIL line per criterion.
//
//   xtc_acceptance [results.json]
//
// Criteria 1-6 and the exact halves of 11/12 replay the unit-test oracles
// through doctest filters. Findings 7-10 and 12 train on the desk benchmark
// (default_config()) with three seeds each.

#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtc/config.hpp"
#include "xtc/pipeline.hpp"

using namespace xtc;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

nlohmann::ordered_json g_results;
int g_failed = 0;

void verdict(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("%s  %2d  %s: %s\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failed;
  g_results["criteria"][std::to_string(id)] = {{"pass", ok}, {"what", what}, {"detail", detail}};
}

// Runs the named unit-test cases quietly; true when all ran and passed.
bool run_cases(const std::string& filter, int* count = nullptr) {
  doctest::Context ctx;
  ctx.setOption("test-case", filter.c_str());
  std::ostringstream sink;
  ctx.setCout(&sink);
  const int rc = ctx.run();
  // Read the matched count from the summary so an empty filter cannot pass.
  int n = 0;
  int passed = 0;
  const auto text = sink.str();
  const auto at = text.find("test cases:");
  if (at != std::string::npos) std::sscanf(text.c_str() + at, "test cases: %d | %d passed", &n, &passed);
  if (count) *count = n;
  const bool ok = rc == 0 && n > 0 && passed == n;
  if (!ok) std::fputs(text.c_str(), stdout);
  return ok;
}

void oracle_criterion(int id, const std::string& what, const std::string& filter) {
  int n = 0;
  const bool ok = run_cases(filter, &n);
  verdict(id, ok, what, std::to_string(n) + " oracle test cases");
}

std::string pts(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

struct Bench {
  HarnessConfig cfg = default_config();
  TaskData data;
  EncoderModel teacher;
  std::map<std::string, TrainResult> cache;
  double seconds = 0.0;

  ExperimentSpec base(std::uint64_t seed) const {
    auto s = cfg.experiment;
    s.seed = seed;
    return s;
  }

  EncoderModel student(SelectionStrategy strategy) const {
    return reduce_teacher(teacher, strategy, cfg.experiment.student_layers);
  }

  // Memoized by spec hash plus the student's initialization.
  const TrainResult& run(const ExperimentSpec& spec, const std::string& init) {
    const std::string key = spec_hash(spec) + "/" + init;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    EncoderModel s;
    if (init == "random") {
      s = random_student(teacher, spec.student_layers, derive_seed(spec.seed, SeedStream::kInit, 1));
    } else {
      s = student(parse_selection_strategy(init));
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto r = train(spec, teacher, s, data, cfg.task);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return cache.emplace(key, std::move(r)).first->second;
  }

  std::vector<double> accuracies(const ExperimentSpec& spec, const std::string& init) {
    std::vector<double> out;
    for (auto seed : kSeeds) {
      auto s = spec;
      s.seed = seed;
      out.push_back(run(s, init).best_metric);
    }
    return out;
  }
};

std::string summary(const std::string& name, const std::vector<double>& v) {
  const auto s = mean_sd(v);
  return name + " " + pts(s.mean) + " ± " + pts(s.sd);
}

void record(const std::string& key, const std::vector<double>& v) {
  g_results["experiments"][key] = v;
}

}  // namespace

int main(int argc, char** argv) {
  const auto start = std::chrono::steady_clock::now();

  oracle_criterion(1, "Quantizer exactness",
                   "binarize and ternarize match*,binarize is optimal*,binarize is scale*,quantizer edge cases,"
                   "quantizer worked examples,int8 activation quantizer");
  oracle_criterion(2, "Codec round-trip",
                   "pack/unpack round-trips*,packed layout*,pack worked examples,checkpoint round-trip*,"
                   "segment records*,corrupt checkpoints*");
  oracle_criterion(3, "Gradients", "finite-difference gradients*,STE gradient*,straight-through estimator,KD loss gradients");
  oracle_criterion(4, "KD losses", "KD losses match*,kd_objective decomposes*,KD loss limiting*,KD worked examples,self-distillation*");
  oracle_criterion(5, "Scheduler", "stage boundaries*,learning-rate schedule properties,budget presets per task class,schedule worked examples");
  oracle_criterion(6, "Compression ratios", "model size accounting,1-bit checkpoint*");

  Bench b;
  b.data = generate_dataset(b.cfg.task);
  {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = train_teacher(b.cfg, b.data);
    b.teacher = r.student;
    b.teacher.set_requires_grad(false);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("      teacher: %s%% validation accuracy (%.0f s)\n", pts(r.best_metric).c_str(), secs);
    g_results["teacher_accuracy"] = r.best_metric;
  }

  // Finding 1: longer training helps the 1-bit student.
  {
    auto spec = b.base(1);
    spec.budget = BudgetLabel::kA;
    const auto a = b.accuracies(spec, "skip");
    spec.budget = BudgetLabel::kC;
    const auto c = b.accuracies(spec, "skip");
    record("budget_A", a);
    record("budget_C", c);
    const double gap = mean_sd(c).mean - mean_sd(a).mean;
    verdict(7, gap >= 0.005, "Finding 1 (budget)",
            summary("A", a) + ", " + summary("C", c) + ", C - A = " + pts(gap) + " pts (need >= 0.50)");
  }

  // Finding 2: one-stage KD with an LR grid matches multi-stage KD.
  {
    std::map<KDScheduleKind, double> best;
    std::string detail;
    for (auto kind : {KDScheduleKind::kOneStage, KDScheduleKind::kTwoStage}) {
      auto spec = b.base(1);
      spec.budget = BudgetLabel::kA;
      spec.schedule = kind;
      double top = -1.0;
      double top_lr = 0.0;
      for (double lr : spec.lr_grid) {
        spec.peak_lr = lr;
        const auto acc = b.accuracies(spec, "skip");
        record(std::string("grid_") + to_string(kind) + "_" + std::to_string(lr), acc);
        if (mean_sd(acc).mean > top) {
          top = mean_sd(acc).mean;
          top_lr = lr;
        }
      }
      best[kind] = top;
      char buf[96];
      std::snprintf(buf, sizeof buf, "%s best %s (lr %g)", to_string(kind), pts(top).c_str(), top_lr);
      detail += (detail.empty() ? "" : ", ") + std::string(buf);
    }
    const double gap = best[KDScheduleKind::kOneStage] - best[KDScheduleKind::kTwoStage];
    verdict(8, gap >= -0.003, "Finding 2 (stages)",
            detail + ", 1S - 2S = " + pts(gap) + " pts (need >= -0.30)");
  }

  // Finding 3: augmentation matters for the short small-task budget.
  {
    auto spec = b.base(1);
    spec.task_class = TaskClass::kSmallDA;
    spec.budget = BudgetLabel::kA;
    const auto with = b.accuracies(spec, "skip");
    spec.augment = false;
    const auto without = b.accuracies(spec, "skip");
    record("da_on", with);
    record("da_off", without);
    const double drop = mean_sd(with).mean - mean_sd(without).mean;
    verdict(9, drop >= 0.003, "Finding 3 (DA)",
            summary("DA", with) + ", " + summary("no DA", without) + ", drop = " + pts(drop) +
                " pts (need >= 0.30)");
  }

  // Finding 4: skip initialization versus random, top and bottom.
  {
    auto spec = b.base(1);
    spec.budget = BudgetLabel::kA;
    spec.policy = QuantPolicy::full_precision();
    std::map<std::string, double> mean;
    std::string detail;
    for (const std::string init : {"skip", "top", "bottom", "random"}) {
      spec.selection = init == "random" ? SelectionStrategy::kSkip : parse_selection_strategy(init);
      const auto acc = b.accuracies(spec, init);
      record("init_" + init, acc);
      mean[init] = mean_sd(acc).mean;
      detail += (detail.empty() ? "" : ", ") + summary(init, acc);
    }
    const bool ok = mean["skip"] - mean["random"] >= 0.01 && mean["skip"] >= mean["top"] &&
                    mean["skip"] >= mean["bottom"];
    verdict(10, ok, "Finding 4 (layer reduction)",
            detail + " (need skip >= random + 1.00, skip >= top, skip >= bottom)");
  }

  // Determinism: two runs of one spec give identical CSV bytes.
  {
    auto spec = b.base(7);
    spec.epochs = 1;
    spec.schedule = KDScheduleKind::kTwoStage;
    spec.augment = true;
    spec.augment_factor = 2;
    spec.lora_rank = 1;
    auto csv = [&](const TrainResult& r) {
      std::ostringstream o;
      r.log.write_steps_csv(o);
      r.log.write_evals_csv(o);
      return o.str();
    };
    const auto s = b.student(SelectionStrategy::kSkip);
    const auto first = csv(train(spec, b.teacher, s, b.data, b.cfg.task));
    const auto second = csv(train(spec, b.teacher, s, b.data, b.cfg.task));
    int n = 0;
    const bool cases = run_cases("fixed specs give bit-identical logs", &n);
    verdict(11, first == second && cases, "Determinism",
            std::to_string(first.size()) + " CSV bytes compared on the benchmark, " +
                (first == second ? "identical" : "DIFFERENT") + "; unit check " +
                (cases ? "ok" : "failed"));
  }

  // LoRa and continued training.
  {
    int n = 0;
    const bool identity = run_cases("LoRa with V = 0 leaves outputs unchanged", &n);
    auto spec = b.base(1);
    spec.budget = BudgetLabel::kA;
    const auto plain = b.accuracies(spec, "skip");
    auto lspec = spec;
    lspec.lora_rank = 1;
    const auto lora = b.accuracies(lspec, "skip");
    record("lora_off", plain);
    record("lora_rank1", lora);
    const double lora_gap = mean_sd(lora).mean - mean_sd(plain).mean;

    // Accuracy reached inside the continued round only.
    std::vector<double> continued;
    for (auto seed : kSeeds) {
      auto s = spec;
      s.seed = seed;
      const auto& first = b.run(s, "skip");
      s.continue_rounds = 1;
      const auto more = continue_train(s, b.teacher, first, b.data, b.cfg.task);
      double best = 0.0;
      for (std::size_t i = first.log.evals.size(); i < more.log.evals.size(); ++i) {
        best = std::max(best, more.log.evals[i].accuracy);
      }
      continued.push_back(best);
    }
    record("continued", continued);
    const auto base_stats = mean_sd(plain);
    const double band = std::max(base_stats.sd, 0.001);
    const double cont_gap = mean_sd(continued).mean - base_stats.mean;
    const bool ok = identity && lora_gap >= -0.003 && cont_gap >= -band;
    verdict(12, ok, "LoRa and continued training",
            std::string("V=0 identity ") + (identity ? "ok" : "failed") + ", " +
                summary("rank-1", lora) + " vs " + summary("none", plain) + " (" + pts(lora_gap) +
                " pts, need >= -0.30), " + summary("continued", continued) + " (" +
                pts(cont_gap) + " pts, need >= -" + pts(band) + ")");
  }

  const double total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("      %d criteria failed; %zu training runs, %.0f s training, %.0f s total\n",
              g_failed, b.cache.size(), b.seconds, total);
  g_results["failed"] = g_failed;
  g_results["seconds"] = total;
  if (argc > 1) {
    std::ofstream out(argv[1]);
    out << g_results.dump(2) << "\n";
  }
  return g_failed == 0 ? 0 : 1;
}

#include "xtc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "xtc/errors.hpp"

namespace xtc {

namespace fs = std::filesystem;

TrainResult train_teacher(const HarnessConfig& config, const TaskData& data) {
  ExperimentSpec spec;
  spec.name = "teacher";
  spec.mode = TrainMode::kHardLabel;
  spec.policy = QuantPolicy::full_precision();
  spec.epochs = config.teacher.epochs;
  spec.augment = false;
  spec.peak_lr = config.teacher.peak_lr;
  spec.lr_grid = {config.teacher.peak_lr};
  spec.batch_size = config.experiment.batch_size;
  spec.optimizer = config.experiment.optimizer;
  spec.seed = config.experiment.seed;
  EncoderModel init(config.teacher.model_config(config.task), config.teacher.init_seed);
  return train(spec, EncoderModel{}, init, data, config.task);
}

EncoderModel load_teacher(const HarnessConfig& config) {
  const fs::path path = config.teacher.checkpoint.empty()
                            ? output_root(config) / "teacher" / "model.xtc"
                            : fs::path(config.teacher.checkpoint);
  if (!fs::exists(path)) {
    throw std::runtime_error("teacher checkpoint '" + path.string() +
                             "' not found; run train-teacher first");
  }
  auto teacher = load_checkpoint(path);
  teacher.set_requires_grad(false);
  return teacher;
}

EncoderModel reduce_teacher(const EncoderModel& teacher, SelectionStrategy strategy,
                            std::uint32_t layers, LayerSelection* selection) {
  const auto sel = LayerSelection::make(
      strategy, static_cast<std::uint32_t>(teacher.layers.size()), layers);
  if (selection) *selection = sel;
  return init_student_from_teacher(teacher, sel);
}

EncoderModel random_student(const EncoderModel& teacher, std::uint32_t layers,
                            std::uint64_t seed) {
  auto c = teacher.config();
  c.num_layers = layers;
  c.activation_bits = 32;
  return EncoderModel(c, seed);
}

SizeSummary size_summary(const EncoderModel& model) {
  SizeSummary s;
  std::ostringstream packed;
  write_checkpoint(model, packed);
  s.checkpoint_bytes = static_cast<double>(packed.str().size());
  EncoderModel fp = model.clone();
  fp.apply_policy(QuantPolicy::full_precision());
  for (auto& [name, m] : fp.mutable_matrices()) m->lora.reset();
  std::ostringstream full;
  write_checkpoint(fp, full);
  s.fp32_checkpoint_bytes = static_cast<double>(full.str().size());
  ParamInventory weights;
  for (const auto& e : model.inventory(false)) {
    if (e.bits < 32) weights.push_back(e);
  }
  s.weight_bit_ratio = weights.empty() ? 1.0 : model_size(weights).ratio;
  s.model_ratio = model_size(model.inventory(false)).ratio;
  return s;
}

void write_run(const fs::path& dir, const std::string& command, const HarnessConfig& config,
               const TrainResult& result, bool checkpoint) {
  fs::create_directories(dir);
  result.log.save(dir.string());
  {
    std::ofstream out(dir / "config.yaml");
    out << to_yaml(config);
  }
  const auto& x = config.experiment;
  nlohmann::ordered_json j;
  j["command"] = command;
  j["budget"] = to_string(x.budget);
  j["task_class"] = to_string(x.task_class);
  j["schedule"] = to_string(x.schedule);
  j["peak_lr"] = x.peak_lr;
  j["seed"] = x.seed;
  j["bits"] = x.mode == TrainMode::kHardLabel && command == "train-teacher"
                  ? 32
                  : x.policy.attention.bits();
  j["augment"] = x.effective_augment();
  j["epochs"] = x.effective_epochs();
  j["lora_rank"] = x.lora_rank.value_or(0);
  j["spec_hash"] = result.log.spec_hash;
  if (checkpoint && !result.student.layers.empty()) {
    save_checkpoint(result.student, dir / "model.xtc");
    const auto sizes = size_summary(result.student);
    j["checkpoint_bytes"] = sizes.checkpoint_bytes;
    j["fp32_checkpoint_bytes"] = sizes.fp32_checkpoint_bytes;
    j["weight_bit_ratio"] = sizes.weight_bit_ratio;
    j["model_ratio"] = sizes.model_ratio;
  }
  std::ofstream out(dir / "run.json");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("could not write " + (dir / "run.json").string());
}

std::vector<RunRecord> scan_runs(const fs::path& root) {
  std::vector<RunRecord> runs;
  if (!fs::exists(root)) return runs;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().filename() == "run.json") {
      dirs.push_back(entry.path().parent_path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    if (!fs::exists(d / "evals.csv")) continue;
    std::ifstream jin(d / "run.json");
    const auto j = nlohmann::json::parse(jin);
    RunRecord r;
    r.dir = d;
    r.command = j.value("command", "");
    r.budget = j.value("budget", "");
    r.schedule = j.value("schedule", "");
    r.peak_lr = j.value("peak_lr", 0.0);
    r.seed = j.value("seed", std::uint64_t{0});
    r.bits = j.value("bits", 32);
    r.augment = j.value("augment", false);
    r.lora_rank = j.value("lora_rank", std::size_t{0});
    std::ifstream ein(d / "evals.csv");
    const auto evals = read_evals_csv(ein);
    r.epochs = evals.size();
    for (const auto& e : evals) r.best_accuracy = std::max(r.best_accuracy, e.accuracy);
    runs.push_back(std::move(r));
  }
  return runs;
}

MeanSd mean_sd(const std::vector<double>& values) {
  MeanSd out;
  out.n = values.size();
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - out.mean) * (v - out.mean);
    out.sd = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return out;
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string lr_text(double lr) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", lr);
  return buf;
}

}  // namespace

std::string build_report(const fs::path& root) {
  const auto runs = scan_runs(root);
  std::ostringstream o;
  o << "# XTC report\n\n";
  o << "Accuracies are best validation accuracy (%) per run, read from each run's evals.csv.\n\n";

  std::map<std::string, std::vector<double>> by_budget;
  std::map<std::string, std::size_t> budget_epochs;
  for (const auto& r : runs) {
    if (r.command != "compare-budgets") continue;
    by_budget[r.budget].push_back(r.best_accuracy);
    budget_epochs[r.budget] = r.epochs;
  }
  o << "## Training budgets\n\n";
  if (by_budget.empty()) {
    o << "No compare-budgets runs found.\n\n";
  } else {
    o << "| Budget | Epochs | Seeds | Accuracy (mean ± sd) |\n|---|---|---|---|\n";
    for (const auto& [budget, accs] : by_budget) {
      const auto s = mean_sd(accs);
      o << "| Budget-" << budget << " | " << budget_epochs[budget] << " | " << s.n << " | "
        << pct(s.mean) << " ± " << pct(s.sd) << " |\n";
    }
    o << "\n";
  }

  std::map<std::string, std::map<double, std::vector<double>>> by_stage;
  std::vector<double> lrs;
  for (const auto& r : runs) {
    if (r.command != "grid") continue;
    by_stage[r.schedule][r.peak_lr].push_back(r.best_accuracy);
    lrs.push_back(r.peak_lr);
  }
  std::sort(lrs.begin(), lrs.end());
  lrs.erase(std::unique(lrs.begin(), lrs.end()), lrs.end());
  o << "## KD stages by peak learning rate\n\n";
  if (by_stage.empty()) {
    o << "No grid runs found.\n\n";
  } else {
    o << "| KD |";
    for (double lr : lrs) o << " " << lr_text(lr) << " |";
    o << " Best (above) |\n|---|";
    for (std::size_t i = 0; i <= lrs.size(); ++i) o << "---|";
    o << "\n";
    for (const auto& [stage, cells] : by_stage) {
      o << "| " << stage << " |";
      double best = -1.0;
      for (double lr : lrs) {
        auto it = cells.find(lr);
        if (it == cells.end()) {
          o << " - |";
          continue;
        }
        const auto s = mean_sd(it->second);
        best = std::max(best, s.mean);
        o << " " << pct(s.mean) << " |";
      }
      o << " " << (best >= 0.0 ? pct(best) : "-") << " |\n";
    }
    o << "\n";
  }

  o << "## Runs\n\n";
  if (runs.empty()) {
    o << "No runs found under " << root.string() << ".\n";
    return o.str();
  }
  o << "| Run | Command | Budget | KD | LR | Seed | Bits | DA | LoRa | Best acc | Metrics CSV |\n"
       "|---|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : runs) {
    const auto rel = fs::relative(r.dir, root).string();
    o << "| " << rel << " | " << r.command << " | " << r.budget << " | " << r.schedule << " | "
      << lr_text(r.peak_lr) << " | " << r.seed << " | " << r.bits << " | "
      << (r.augment ? "yes" : "no") << " | " << r.lora_rank << " | " << pct(r.best_accuracy)
      << " | " << rel << "/metrics.csv |\n";
  }
  return o.str();
}

}  // namespace xtc

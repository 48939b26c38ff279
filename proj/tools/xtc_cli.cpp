// xtc: command-line driver for the two-step compression pipeline.
//
//   xtc train-teacher   --config cfg.yaml
//   xtc reduce          --layers 2 --strategy skip
//   xtc compress        --bits 1 --kd one-stage --budget C
//   xtc grid            --kd one-stage,two-stage --seeds 3
//   xtc compare-budgets --budgets A,C --seeds 3
//   xtc report
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "xtc/errors.hpp"
#include "xtc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace xtc;

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string lr_dir(double lr) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "lr-%g", lr);
  return buf;
}

QuantizerSpec weight_spec(const HarnessConfig& c, int bits) {
  QuantizerSpec s = c.experiment.policy.attention;
  switch (bits) {
    case 1: s.kind = QuantKind::kBinary; break;
    case 2: s.kind = QuantKind::kTernary; break;
    case 32: s.kind = QuantKind::kNone; break;
    default: throw ConfigError("must be 1, 2 or 32", "quant.bits");
  }
  return s;
}

void set_bits(HarnessConfig& c, int bits) {
  const auto s = weight_spec(c, bits);
  const bool embeddings = c.experiment.policy.embeddings.kind != QuantKind::kNone;
  c.experiment.policy.attention = s;
  c.experiment.policy.ffn = s;
  c.experiment.policy.embeddings = embeddings || bits == 32 ? s : QuantizerSpec::none();
  if (bits == 32) c.experiment.policy.int8_activations = false;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("could not write " + path.string());
}

void print_result(const std::string& what, const TrainResult& r) {
  std::printf("%s: best validation accuracy %.2f%% at epoch %zu (%zu steps)\n", what.c_str(),
              100.0 * r.best_metric, r.best_epoch, r.log.steps.size());
}

// Reduced student from a previous `reduce`, else a fresh Step-I student.
EncoderModel initial_student(const HarnessConfig& c, const EncoderModel& teacher,
                             const std::string& explicit_path) {
  if (!explicit_path.empty()) return load_checkpoint(explicit_path);
  const auto reduced = output_root(c) / "reduce" / "model.xtc";
  if (fs::exists(reduced)) {
    auto s = load_checkpoint(reduced);
    s.apply_policy(QuantPolicy::full_precision());
    return s;
  }
  if (c.experiment.student_layers == teacher.layers.size()) return teacher.clone();
  return reduce_teacher(teacher, c.experiment.selection, c.experiment.student_layers);
}

TrainResult run_compression(const HarnessConfig& c, const EncoderModel& teacher,
                            const EncoderModel& student, const TaskData& data) {
  auto r = train(c.experiment, teacher, student, data, c.task);
  if (c.experiment.continue_rounds > 0) {
    r = continue_train(c.experiment, teacher, r, data, c.task);
  }
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Extreme compression of tiny transformer encoders"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "YAML configuration (defaults when omitted)");
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Master seed override");

  auto* teacher_cmd = app.add_subcommand("train-teacher", "Train the fp32 teacher from scratch");

  auto* reduce_cmd = app.add_subcommand("reduce", "Step I: initialize a shallower student");
  std::uint32_t layers = 0;
  std::string strategy;
  bool init_only = false;
  reduce_cmd->add_option("--layers", layers, "Student depth")->required();
  reduce_cmd->add_option("--strategy", strategy, "skip, top or bottom")->default_val("skip");
  reduce_cmd->add_flag("--init-only", init_only, "Write the initialized student without fp32 KD");

  auto* compress_cmd = app.add_subcommand("compress", "Step II: quantization-aware KD");
  int bits = 1;
  std::string kd;
  std::string budget;
  std::string student_path;
  compress_cmd->add_option("--bits", bits, "Weight bits: 1, 2 or 32")->default_val(1);
  compress_cmd->add_option("--kd", kd, "one-stage, two-stage or three-stage");
  compress_cmd->add_option("--budget", budget, "A, B or C");
  compress_cmd->add_option("--student", student_path, "Student checkpoint to start from");

  auto* grid_cmd = app.add_subcommand("grid", "Peak learning-rate grid per KD schedule");
  std::string grid_kd;
  std::size_t grid_seeds = 1;
  grid_cmd->add_option("--kd", grid_kd, "Comma-separated KD schedules");
  grid_cmd->add_option("--seeds", grid_seeds, "Seeds per grid cell")->default_val(1);
  grid_cmd->add_option("--bits", bits, "Weight bits: 1, 2 or 32")->default_val(1);

  auto* budgets_cmd = app.add_subcommand("compare-budgets", "Accuracy per training budget");
  std::string budget_list = "A,C";
  std::size_t seeds = 3;
  budgets_cmd->add_option("--budgets", budget_list, "Comma-separated budgets")->default_val("A,C");
  budgets_cmd->add_option("--seeds", seeds, "Seeds per budget")->default_val(3);
  budgets_cmd->add_option("--bits", bits, "Weight bits: 1, 2 or 32")->default_val(1);

  auto* report_cmd = app.add_subcommand("report", "Markdown tables from existing run logs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    HarnessConfig cfg = config_path.empty() ? default_config() : load_config(config_path);
    if (seed) {
      cfg.experiment.seed = *seed;
      cfg.validate();
    }
    const fs::path root = output_root(cfg);

    if (*report_cmd) {
      const auto text = build_report(root);
      write_text(root / "report.md", text);
      std::cout << text;
      return 0;
    }

    const auto data = generate_dataset(cfg.task);

    if (*teacher_cmd) {
      auto r = train_teacher(cfg, data);
      write_run(root / "teacher", "train-teacher", cfg, r);
      print_result("teacher", r);
      return 0;
    }

    const auto teacher = load_teacher(cfg);

    if (*reduce_cmd) {
      cfg.experiment.student_layers = layers;
      cfg.experiment.selection = parse_selection_strategy(strategy);
      cfg.experiment.name = "reduce";
      set_bits(cfg, 32);
      cfg.experiment.schedule = KDScheduleKind::kOneStage;
      cfg.validate();
      LayerSelection sel;
      auto student = reduce_teacher(teacher, cfg.experiment.selection, layers, &sel);
      std::cout << "selected teacher layers:";
      for (auto i : sel.indices) std::cout << " " << i;
      std::cout << "\n";
      const auto dir = root / "reduce";
      nlohmann::json j;
      j["strategy"] = to_string(sel.strategy);
      j["teacher_layers"] = teacher.layers.size();
      j["indices"] = sel.indices;
      write_text(dir / "selection.json", j.dump(2) + "\n");
      if (init_only) {
        save_checkpoint(student, dir / "model.xtc");
        write_text(dir / "config.yaml", to_yaml(cfg));
        return 0;
      }
      auto r = train(cfg.experiment, teacher, student, data, cfg.task);
      write_run(dir, "reduce", cfg, r);
      print_result("reduced student (fp32)", r);
      return 0;
    }

    if (*compress_cmd) {
      set_bits(cfg, bits);
      if (!kd.empty()) cfg.experiment.schedule = parse_schedule_kind(kd);
      if (!budget.empty()) cfg.experiment.budget = parse_budget_label(budget);
      cfg.experiment.name = "compress";
      cfg.validate();
      const auto student = initial_student(cfg, teacher, student_path);
      auto r = run_compression(cfg, teacher, student, data);
      write_run(root / "compress", "compress", cfg, r);
      print_result("compressed student", r);
      const auto sizes = size_summary(r.student);
      std::printf("weight-bit ratio vs fp32: %.1f\n", sizes.weight_bit_ratio);
      std::printf("checkpoint: %.0f bytes packed, %.0f bytes fp32 (x%.1f)\n",
                  sizes.checkpoint_bytes, sizes.fp32_checkpoint_bytes,
                  sizes.fp32_checkpoint_bytes / sizes.checkpoint_bytes);
      return 0;
    }

    if (*grid_cmd) {
      set_bits(cfg, bits);
      std::vector<KDScheduleKind> schedules;
      for (const auto& s : split_list(grid_kd)) schedules.push_back(parse_schedule_kind(s));
      if (schedules.empty()) schedules.push_back(cfg.experiment.schedule);
      if (grid_seeds < 1) throw ConfigError("must be >= 1", "grid.seeds");
      cfg.validate();
      const auto student = initial_student(cfg, teacher, "");
      for (auto kind : schedules) {
        for (std::size_t k = 0; k < grid_seeds; ++k) {
          HarnessConfig c = cfg;
          c.experiment.schedule = kind;
          c.experiment.seed = cfg.experiment.seed + k;
          c.experiment.name = "grid";
          const auto base = root / "grid" / to_string(kind) / ("seed-" + std::to_string(c.experiment.seed));
          auto outcome = lr_grid_search(c.experiment, [&](const ExperimentSpec& s) {
            HarnessConfig run_cfg = c;
            run_cfg.experiment = s;
            auto r = train(s, teacher, student, data, c.task);
            write_run(base / lr_dir(s.peak_lr), "grid", run_cfg, r, false);
            return r;
          });
          std::printf("%s seed %llu: best lr %g (%.2f%%)\n", to_string(kind),
                      static_cast<unsigned long long>(c.experiment.seed), outcome.best_lr,
                      100.0 * outcome.best_run.best_metric);
        }
      }
      write_text(root / "report.md", build_report(root));
      return 0;
    }

    if (*budgets_cmd) {
      set_bits(cfg, bits);
      if (seeds < 1) throw ConfigError("must be >= 1", "compare-budgets.seeds");
      std::vector<BudgetLabel> labels;
      for (const auto& b : split_list(budget_list)) labels.push_back(parse_budget_label(b));
      if (labels.empty()) throw ConfigError("no budgets given", "compare-budgets.budgets");
      cfg.validate();
      const auto student = initial_student(cfg, teacher, "");
      for (auto label : labels) {
        for (std::size_t k = 0; k < seeds; ++k) {
          HarnessConfig c = cfg;
          c.experiment.budget = label;
          c.experiment.seed = cfg.experiment.seed + k;
          c.experiment.name = "compare-budgets";
          auto r = run_compression(c, teacher, student, data);
          write_run(root / "compare-budgets" / (std::string("budget-") + to_string(label)) /
                        ("seed-" + std::to_string(c.experiment.seed)),
                    "compare-budgets", c, r, false);
          print_result(std::string("budget ") + to_string(label) + " seed " +
                           std::to_string(c.experiment.seed),
                       r);
        }
      }
      const auto text = build_report(root);
      write_text(root / "report.md", text);
      std::cout << text;
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xtc/config.hpp"
#include "xtc/trainer.hpp"

namespace xtc {

/// Hard-label fp32 training of the configured teacher from scratch.
TrainResult train_teacher(const HarnessConfig& config, const TaskData& data);

/// Loads teacher.checkpoint, or <root>/teacher/teacher.xtc when the field is
/// empty. Throws std::runtime_error when neither exists.
EncoderModel load_teacher(const HarnessConfig& config);

/// Step I: a student initialized from the selected teacher layers.
EncoderModel reduce_teacher(const EncoderModel& teacher, SelectionStrategy strategy,
                            std::uint32_t layers, LayerSelection* selection = nullptr);

/// Fully random student with the teacher's shape and `layers` layers.
EncoderModel random_student(const EncoderModel& teacher, std::uint32_t layers, std::uint64_t seed);

struct SizeSummary {
  double checkpoint_bytes = 0.0;
  double fp32_checkpoint_bytes = 0.0;
  double weight_bit_ratio = 0.0;  // quantized matrices only, scales excluded
  double model_ratio = 0.0;       // whole inventory, scales excluded
};

/// Sizes of `model` as stored (packed) and as an fp32 copy.
SizeSummary size_summary(const EncoderModel& model);

/// Writes config.yaml, metrics.csv, evals.csv, summary.json and run.json
/// (command, budget, schedule, learning rate, seed, bits, augmentation,
/// LoRa rank, spec hash) into `dir`; `checkpoint` adds model.xtc.
void write_run(const std::filesystem::path& dir, const std::string& command,
               const HarnessConfig& config, const TrainResult& result,
               bool checkpoint = true);

struct RunRecord {
  std::filesystem::path dir;
  std::string command;
  std::string budget;
  std::string schedule;
  double peak_lr = 0.0;
  std::uint64_t seed = 0;
  int bits = 32;
  bool augment = false;
  std::size_t lora_rank = 0;
  double best_accuracy = 0.0;  // max over evals.csv
  std::size_t epochs = 0;
};

/// Every run directory under `root` (one holding run.json and evals.csv).
std::vector<RunRecord> scan_runs(const std::filesystem::path& root);

/// Markdown with a budget table (mean and sd over seeds) and a KD-stage by
/// learning-rate table, built only from files written by write_run.
std::string build_report(const std::filesystem::path& root);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

MeanSd mean_sd(const std::vector<double>& values);

}  // namespace xtc

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "xtc/data.hpp"
#include "xtc/distillation.hpp"
#include "xtc/model.hpp"
#include "xtc/schedule.hpp"

namespace xtc {

/// kDistill trains against the teacher with the stage-scheduled KD
/// objective; kHardLabel ignores the teacher and minimizes cross entropy.
enum class TrainMode { kDistill, kHardLabel };

const char* to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& text);

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::optional<double> max_grad_norm;

  void validate() const;
};

/// Adam moments for one parameter list. Buffers are created on the first
/// step and must keep matching the parameter shapes afterwards.
struct OptimizerState {
  OptimizerConfig config;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::size_t step = 0;
};

/// Decoupled weight decay (AdamW) applied to parameters marked `decay`.
/// Returns the global gradient norm before clipping.
double adam_step(OptimizerState& state, const std::vector<NamedParam>& params, double lr);

struct ExperimentSpec {
  std::string name = "experiment";
  TrainMode mode = TrainMode::kDistill;

  // Step I provenance; consumed by the CLI, recorded for reproducibility.
  std::string teacher_checkpoint;  // empty: train the teacher from scratch
  SelectionStrategy selection = SelectionStrategy::kSkip;
  std::uint32_t student_layers = 2;

  QuantPolicy policy;
  KDScheduleKind schedule = KDScheduleKind::kOneStage;
  AttentionTarget attention_target = AttentionTarget::kProbabilities;

  BudgetLabel budget = BudgetLabel::kA;
  TaskClass task_class = TaskClass::kSmallDA;
  bool longer_budget = false;
  std::optional<std::size_t> epochs;  // overrides the budget cell
  std::optional<bool> augment;        // overrides the budget cell's DA flag
  double augment_prob = 0.3;
  std::size_t augment_factor = 5;

  std::vector<double> lr_grid{1e-4};
  double peak_lr = 1e-4;
  double warmup_fraction = 0.1;
  double stage_one_multiplier = 2.5;
  std::size_t batch_size = 32;
  OptimizerConfig optimizer;

  std::optional<std::size_t> lora_rank;
  float lora_init_scale = 0.02F;
  std::size_t continue_rounds = 0;

  std::uint64_t seed = 1;

  void validate() const;
  std::size_t effective_epochs() const;
  bool effective_augment() const;
};

/// Stable `key=value` lines covering every field; the basis of spec_hash.
std::string describe(const ExperimentSpec& spec);
/// 16 hex digits (FNV-1a 64 of describe()).
std::string spec_hash(const ExperimentSpec& spec);

enum class SeedStream : std::uint64_t { kData = 1, kAugment = 2, kInit = 3, kDropout = 4, kShuffle = 5 };

/// Independent sub-seed of a master seed (splitmix64 mixing).
std::uint64_t derive_seed(std::uint64_t master, SeedStream stream, std::uint64_t index = 0);

struct StepRecord {
  std::size_t step = 0;
  std::size_t stage = 0;
  int gamma = 0;
  int beta = 0;
  double lr = 0.0;
  double loss_logit = 0.0;
  double loss_hidden = 0.0;
  double loss_att = 0.0;
  double total = 0.0;
};

struct EvalRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // steps completed when evaluated
  double accuracy = 0.0;
  double best_so_far = 0.0;
};

struct MetricsLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::string spec_hash;

  double best_metric() const;
  std::size_t best_epoch() const;  // 0 when nothing was evaluated

  void append(const MetricsLog& other);

  void write_steps_csv(std::ostream& out) const;
  void write_evals_csv(std::ostream& out) const;
  std::string summary_json() const;
  /// Writes metrics.csv, evals.csv and summary.json into `dir`.
  void save(const std::string& dir) const;
};

std::vector<StepRecord> read_steps_csv(std::istream& in);
std::vector<EvalRecord> read_evals_csv(std::istream& in);

struct TrainResult {
  EncoderModel student;  // best-validation snapshot
  MetricsLog log;
  double best_metric = 0.0;
  std::size_t best_epoch = 0;
};

/// Fraction of examples whose argmax logit equals the label.
double evaluate(const EncoderModel& model, const Dataset& data, std::size_t batch_size = 256);

/// Quantization-aware training of `student` against a frozen `teacher`.
/// The student's quantizers are set from spec.policy and, when requested,
/// a LoRa adapter is attached before the first step. Evaluates once per
/// epoch and returns the best-validation snapshot. Throws TrainingError on
/// a non-finite loss.
TrainResult train(const ExperimentSpec& spec, const EncoderModel& teacher,
                  const EncoderModel& student, const TaskData& data, const ToyTaskSpec& task);

/// spec.continue_rounds further full-budget rounds, each restarting the LR
/// schedule from the previous round's best weights. Step numbers in the
/// returned log keep increasing across rounds.
TrainResult continue_train(const ExperimentSpec& spec, const EncoderModel& teacher,
                           const TrainResult& trained, const TaskData& data,
                           const ToyTaskSpec& task);

struct GridOutcome {
  double best_lr = 0.0;
  std::vector<double> lrs;      // ascending
  std::vector<double> metrics;  // best-validation metric per lr
  TrainResult best_run;
};

using GridRunner = std::function<TrainResult(const ExperimentSpec&)>;

/// Runs `run` once per grid value (same seed) and keeps the highest best
/// metric; ties go to the smaller learning rate.
GridOutcome lr_grid_search(const ExperimentSpec& spec, const GridRunner& run);

}  // namespace xtc

#include "xtc/schedule.hpp"

#include <cmath>

#include "xtc/errors.hpp"

namespace xtc {

const char* to_string(KDScheduleKind kind) {
  switch (kind) {
    case KDScheduleKind::kOneStage: return "one-stage";
    case KDScheduleKind::kTwoStage: return "two-stage";
    case KDScheduleKind::kThreeStage: return "three-stage";
  }
  return "one-stage";
}

KDScheduleKind parse_schedule_kind(const std::string& text) {
  if (text == "one-stage" || text == "one_stage" || text == "1S") return KDScheduleKind::kOneStage;
  if (text == "two-stage" || text == "two_stage" || text == "2S") return KDScheduleKind::kTwoStage;
  if (text == "three-stage" || text == "three_stage" || text == "3S") {
    return KDScheduleKind::kThreeStage;
  }
  throw ConfigError("unknown KD schedule '" + text + "'");
}

std::size_t stage_count(KDScheduleKind kind) {
  switch (kind) {
    case KDScheduleKind::kOneStage: return 1;
    case KDScheduleKind::kTwoStage: return 2;
    case KDScheduleKind::kThreeStage: return 3;
  }
  return 1;
}

std::vector<std::pair<std::size_t, std::size_t>> stage_bounds(std::size_t total_steps,
                                                              KDScheduleKind kind) {
  const std::size_t T = total_steps;
  switch (kind) {
    case KDScheduleKind::kOneStage: return {{0, T}};
    case KDScheduleKind::kTwoStage: return {{0, T / 2}, {T / 2, T}};
    case KDScheduleKind::kThreeStage: return {{0, T / 3}, {T / 3, 2 * T / 3}, {2 * T / 3, T}};
  }
  return {{0, T}};
}

StageInfo stage_at(std::size_t step, std::size_t total_steps, KDScheduleKind kind) {
  if (step >= total_steps) {
    throw RangeError("stage_at: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(total_steps) + ")");
  }
  const auto bounds = stage_bounds(total_steps, kind);
  std::size_t idx = 0;
  while (step >= bounds[idx].second) ++idx;
  switch (kind) {
    case KDScheduleKind::kOneStage: return {{1, 1}, 0};
    case KDScheduleKind::kTwoStage:
      return {idx == 0 ? KDWeights{0, 1} : KDWeights{1, 0}, idx};
    case KDScheduleKind::kThreeStage: {
      static const KDWeights kStages[3] = {{0, 1}, {1, 1}, {1, 0}};
      return {kStages[idx], idx};
    }
  }
  return {{1, 1}, 0};
}

void LRSchedule::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("must be > 0", "schedule.peak_lr");
  if (total_steps < 1) throw ConfigError("must be >= 1", "schedule.total_steps");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("must be in (0, 1)", "schedule.warmup_fraction");
  }
  if (!(stage_one_multiplier > 0.0)) {
    throw ConfigError("must be > 0", "schedule.stage_one_multiplier");
  }
}

std::size_t warmup_steps(std::size_t length, double warmup_fraction) {
  const auto w = static_cast<std::size_t>(
      std::floor(warmup_fraction * static_cast<double>(length) + 1e-9));
  return w < 1 ? 1 : w;
}

double lr_at(std::size_t step, const LRSchedule& schedule, KDScheduleKind kind) {
  if (step >= schedule.total_steps) {
    throw RangeError("lr_at: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(schedule.total_steps) + ")");
  }
  const auto bounds = stage_bounds(schedule.total_steps, kind);
  std::size_t idx = 0;
  while (step >= bounds[idx].second) ++idx;
  const auto [start, end] = bounds[idx];
  const std::size_t n = end - start;
  const std::size_t u = step - start;
  const std::size_t w = warmup_steps(n, schedule.warmup_fraction);
  double peak = schedule.peak_lr;
  if (kind != KDScheduleKind::kOneStage && idx == 0) peak *= schedule.stage_one_multiplier;
  if (u < w) return peak * (static_cast<double>(u) / static_cast<double>(w));
  return peak * (static_cast<double>(n - u) / static_cast<double>(n - w));
}

const char* to_string(BudgetLabel label) {
  switch (label) {
    case BudgetLabel::kA: return "A";
    case BudgetLabel::kB: return "B";
    case BudgetLabel::kC: return "C";
  }
  return "A";
}

BudgetLabel parse_budget_label(const std::string& text) {
  if (text == "A" || text == "a") return BudgetLabel::kA;
  if (text == "B" || text == "b") return BudgetLabel::kB;
  if (text == "C" || text == "c") return BudgetLabel::kC;
  throw ConfigError("unknown budget '" + text + "' (expected A, B or C)");
}

const char* to_string(TaskClass task_class) {
  switch (task_class) {
    case TaskClass::kLargeNoDA: return "large_no_da";
    case TaskClass::kQnliLike: return "qnli_like";
    case TaskClass::kSmallDA: return "small_da";
    case TaskClass::kColaMrpcLike: return "cola_mrpc_like";
  }
  return "large_no_da";
}

TaskClass parse_task_class(const std::string& text) {
  if (text == "large_no_da" || text == "qqp_mnli") return TaskClass::kLargeNoDA;
  if (text == "qnli_like" || text == "qnli") return TaskClass::kQnliLike;
  if (text == "small_da" || text == "sst2_stsb_rte") return TaskClass::kSmallDA;
  if (text == "cola_mrpc_like" || text == "cola_mrpc") return TaskClass::kColaMrpcLike;
  throw ConfigError("unknown task class '" + text + "'");
}

BudgetCell budget_preset(BudgetLabel label, TaskClass task_class, bool longer) {
  struct Row {
    bool da;
    std::size_t a, b, c_short, c_long;
  };
  Row row{};
  switch (task_class) {
    case TaskClass::kLargeNoDA: row = {false, 3, 9, 18, 36}; break;
    case TaskClass::kQnliLike: row = {true, 1, 3, 6, 9}; break;
    case TaskClass::kSmallDA: row = {true, 1, 3, 12, 12}; break;
    case TaskClass::kColaMrpcLike: row = {true, 1, 3, 12, 18}; break;
    default: throw ConfigError("unknown task class", "budget.task_class");
  }
  switch (label) {
    case BudgetLabel::kA: return {row.a, row.da};
    case BudgetLabel::kB: return {row.b, row.da};
    case BudgetLabel::kC: return {longer ? row.c_long : row.c_short, row.da};
  }
  throw ConfigError("unknown budget label", "budget.label");
}

TrainingBudget TrainingBudget::preset(BudgetLabel label, bool longer) {
  TrainingBudget b{label, {}};
  for (auto c : {TaskClass::kLargeNoDA, TaskClass::kQnliLike, TaskClass::kSmallDA,
                 TaskClass::kColaMrpcLike}) {
    b.cells[c] = budget_preset(label, c, longer);
  }
  return b;
}

const BudgetCell& TrainingBudget::at(TaskClass task_class) const {
  auto it = cells.find(task_class);
  if (it == cells.end()) throw ConfigError("no budget cell for class", "budget.task_class");
  return it->second;
}

std::size_t total_steps(std::size_t epochs, std::size_t dataset_size, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("must be >= 1", "trainer.batch_size");
  return epochs * ((dataset_size + batch_size - 1) / batch_size);
}

}  // namespace xtc

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xtc/distillation.hpp"

namespace xtc {

enum class KDScheduleKind { kOneStage, kTwoStage, kThreeStage };

const char* to_string(KDScheduleKind kind);
KDScheduleKind parse_schedule_kind(const std::string& text);
std::size_t stage_count(KDScheduleKind kind);

struct StageInfo {
  KDWeights weights;
  std::size_t stage_index = 0;
};

/// Half-open stage intervals [start, end) with floored boundaries.
std::vector<std::pair<std::size_t, std::size_t>> stage_bounds(std::size_t total_steps,
                                                              KDScheduleKind kind);

/// One-stage: (1,1). Two-stage: (0,1) then (1,0) from floor(T/2).
/// Three-stage: (0,1), (1,1) from floor(T/3), (1,0) from floor(2T/3).
StageInfo stage_at(std::size_t step, std::size_t total_steps, KDScheduleKind kind);

struct LRSchedule {
  double peak_lr = 1e-4;
  std::size_t total_steps = 1;
  double warmup_fraction = 0.10;
  double stage_one_multiplier = 2.5;

  void validate() const;
};

/// Warmup steps for a stage of `length` steps (at least 1).
std::size_t warmup_steps(std::size_t length, double warmup_fraction);

/// Per stage: linear rise from 0 to the stage peak over the warmup, then
/// linear decay reaching 0 at the stage end. Stage I of a multi-stage
/// schedule peaks at stage_one_multiplier * peak_lr.
double lr_at(std::size_t step, const LRSchedule& schedule, KDScheduleKind kind);

enum class BudgetLabel { kA, kB, kC };
enum class TaskClass { kLargeNoDA, kQnliLike, kSmallDA, kColaMrpcLike };

const char* to_string(BudgetLabel label);
BudgetLabel parse_budget_label(const std::string& text);
const char* to_string(TaskClass task_class);
TaskClass parse_task_class(const std::string& text);

struct BudgetCell {
  std::size_t epochs = 1;
  bool use_da = false;
};

/// Table cell for (label, class). Cells listing two values return the
/// smaller one unless `longer` is set.
BudgetCell budget_preset(BudgetLabel label, TaskClass task_class, bool longer = false);

struct TrainingBudget {
  BudgetLabel label = BudgetLabel::kA;
  std::map<TaskClass, BudgetCell> cells;

  static TrainingBudget preset(BudgetLabel label, bool longer = false);
  const BudgetCell& at(TaskClass task_class) const;
};

/// epochs * ceil(dataset_size / batch_size)
std::size_t total_steps(std::size_t epochs, std::size_t dataset_size, std::size_t batch_size);

}  // namespace xtc

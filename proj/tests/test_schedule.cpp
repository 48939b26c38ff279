#include <doctest.h>

#include <cmath>

#include "xtc/errors.hpp"
#include "xtc/schedule.hpp"

using namespace xtc;

TEST_CASE("stage boundaries for every T in 1..1000") {
  for (std::size_t T = 1; T <= 1000; ++T) {
    const auto one = stage_bounds(T, KDScheduleKind::kOneStage);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == std::pair<std::size_t, std::size_t>{0, T});

    const auto two = stage_bounds(T, KDScheduleKind::kTwoStage);
    REQUIRE(two.size() == 2);
    REQUIRE(two[0].second == T / 2);
    REQUIRE(two[1] == std::pair<std::size_t, std::size_t>{T / 2, T});

    const auto three = stage_bounds(T, KDScheduleKind::kThreeStage);
    REQUIRE(three.size() == 3);
    REQUIRE(three[0].second == T / 3);
    REQUIRE(three[1].first == T / 3);
    REQUIRE(three[1].second == 2 * T / 3);
    REQUIRE(three[2] == std::pair<std::size_t, std::size_t>{2 * T / 3, T});

    for (std::size_t t = 0; t < T; ++t) {
      const auto s2 = stage_at(t, T, KDScheduleKind::kTwoStage);
      const bool late = t >= T / 2;
      REQUIRE(s2.weights == (late ? KDWeights{1, 0} : KDWeights{0, 1}));
      const auto s3 = stage_at(t, T, KDScheduleKind::kThreeStage);
      const KDWeights want3 = t < T / 3 ? KDWeights{0, 1} : t < 2 * T / 3 ? KDWeights{1, 1} : KDWeights{1, 0};
      REQUIRE(s3.weights == want3);
      REQUIRE(stage_at(t, T, KDScheduleKind::kOneStage).weights == KDWeights{1, 1});
    }
  }
}

TEST_CASE("learning-rate schedule properties") {
  for (std::size_t T = 2; T <= 400; T += 7) {
    for (auto kind : {KDScheduleKind::kOneStage, KDScheduleKind::kTwoStage, KDScheduleKind::kThreeStage}) {
      LRSchedule s{3e-4, T, 0.1, 2.5};
      const auto bounds = stage_bounds(T, kind);
      for (std::size_t i = 0; i < bounds.size(); ++i) {
        const auto [a, b] = bounds[i];
        if (b - a < 2) continue;
        const double peak = (i == 0 && kind != KDScheduleKind::kOneStage) ? 2.5 * 3e-4 : 3e-4;
        const std::size_t w = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(0.1 * (b - a) + 1e-9)));
        CHECK(warmup_steps(b - a, 0.1) == w);
        CHECK(lr_at(a, s, kind) == 0.0);
        CHECK(lr_at(a + w, s, kind) == peak);  // exact
        double prev = -1;
        for (std::size_t t = a; t < b; ++t) {
          const double lr = lr_at(t, s, kind);
          REQUIRE(lr >= 0.0);
          REQUIRE(lr <= peak);
          if (t <= a + w) REQUIRE(lr >= prev);
          else REQUIRE(lr <= prev);
          prev = lr;
        }
      }
      if (kind != KDScheduleKind::kOneStage && T >= 20) {
        double max1 = 0, max2 = 0;
        for (std::size_t t = 0; t < T; ++t) {
          double& m = stage_at(t, T, kind).stage_index == 0 ? max1 : max2;
          m = std::max(m, lr_at(t, s, kind));
        }
        CHECK(std::fabs(max1 / max2 - 2.5) < 1e-9);
      }
    }
  }
  LRSchedule s{1e-4, 10, 0.1, 2.5};
  CHECK_THROWS_AS(lr_at(10, s, KDScheduleKind::kOneStage), RangeError);
}

TEST_CASE("budget presets per task class") {
  struct Row {
    TaskClass c;
    bool da;
    std::size_t a, b, c_short, c_long;
  };
  for (auto r : {Row{TaskClass::kLargeNoDA, false, 3, 9, 18, 36}, Row{TaskClass::kQnliLike, true, 1, 3, 6, 9},
                 Row{TaskClass::kSmallDA, true, 1, 3, 12, 12}, Row{TaskClass::kColaMrpcLike, true, 1, 3, 12, 18}}) {
    CHECK(budget_preset(BudgetLabel::kA, r.c).epochs == r.a);
    CHECK(budget_preset(BudgetLabel::kB, r.c).epochs == r.b);
    CHECK(budget_preset(BudgetLabel::kC, r.c).epochs == r.c_short);
    CHECK(budget_preset(BudgetLabel::kC, r.c, true).epochs == r.c_long);
    CHECK(budget_preset(BudgetLabel::kA, r.c).use_da == r.da);
    CHECK(TrainingBudget::preset(BudgetLabel::kC, true).at(r.c).epochs == r.c_long);
  }
  CHECK(total_steps(3, 5000, 32) == 3 * 157);
  CHECK(total_steps(1, 32, 32) == 1);
  CHECK_THROWS_AS(total_steps(1, 10, 0), ConfigError);
  CHECK(parse_budget_label("C") == BudgetLabel::kC);
  CHECK_THROWS_AS(parse_budget_label("D"), ConfigError);
  CHECK(parse_schedule_kind(to_string(KDScheduleKind::kThreeStage)) == KDScheduleKind::kThreeStage);
}

TEST_CASE("schedule worked examples") {
  CHECK(stage_at(49, 100, KDScheduleKind::kTwoStage).weights == KDWeights{0, 1});
  CHECK(stage_at(50, 100, KDScheduleKind::kTwoStage).weights == KDWeights{1, 0});
  CHECK(stage_at(33, 99, KDScheduleKind::kThreeStage).weights == KDWeights{1, 1});
  CHECK(stage_at(66, 99, KDScheduleKind::kThreeStage).weights == KDWeights{1, 0});
  LRSchedule s{1e-4, 1000, 0.1, 2.5};
  CHECK(lr_at(100, s, KDScheduleKind::kOneStage) == 1e-4);
  CHECK(lr_at(999, s, KDScheduleKind::kOneStage) == doctest::Approx(1e-4 / 900).epsilon(1e-12));
  double max1 = 0, max2 = 0;
  for (std::size_t t = 0; t < 1000; ++t) {
    (t < 500 ? max1 : max2) = std::max(t < 500 ? max1 : max2, lr_at(t, s, KDScheduleKind::kTwoStage));
  }
  CHECK(max1 == doctest::Approx(2.5e-4).epsilon(1e-12));
  CHECK(max2 == 1e-4);
  CHECK(budget_preset(BudgetLabel::kA, TaskClass::kLargeNoDA).epochs == 3);
  CHECK_FALSE(budget_preset(BudgetLabel::kA, TaskClass::kLargeNoDA).use_da);
  CHECK(budget_preset(BudgetLabel::kB, TaskClass::kSmallDA).epochs == 3);
  CHECK(budget_preset(BudgetLabel::kB, TaskClass::kSmallDA).use_da);
  CHECK(budget_preset(BudgetLabel::kC, TaskClass::kQnliLike).epochs == 6);
  CHECK(budget_preset(BudgetLabel::kC, TaskClass::kQnliLike, true).epochs == 9);
}

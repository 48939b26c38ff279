#include "xtc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "xtc/errors.hpp"

namespace xtc {

const char* to_string(TrainMode mode) {
  return mode == TrainMode::kHardLabel ? "hard_label" : "distill";
}

TrainMode parse_train_mode(const std::string& text) {
  if (text == "distill" || text == "kd") return TrainMode::kDistill;
  if (text == "hard_label" || text == "hard-label") return TrainMode::kHardLabel;
  throw ConfigError("unknown train mode '" + text + "'", "trainer.mode");
}

void OptimizerConfig::validate() const {
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("must be in [0, 1)", "optimizer.beta1");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("must be in [0, 1)", "optimizer.beta2");
  if (!(eps > 0.0)) throw ConfigError("must be > 0", "optimizer.eps");
  if (!(weight_decay >= 0.0)) throw ConfigError("must be >= 0", "optimizer.weight_decay");
  if (max_grad_norm && !(*max_grad_norm > 0.0)) {
    throw ConfigError("must be > 0", "optimizer.max_grad_norm");
  }
}

double adam_step(OptimizerState& state, const std::vector<NamedParam>& params, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0F);
      state.v.emplace_back(p.tensor.numel(), 0.0F);
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: optimizer holds " + std::to_string(state.m.size()) +
                         " buffers for " + std::to_string(params.size()) + " parameters");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel()) {
      throw DimensionError("adam_step: buffer shape mismatch for " + params[i].name);
    }
    for (float g : params[i].tensor.grad_view()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  const auto& c = state.config;
  double clip = 1.0;
  if (c.max_grad_norm && norm > *c.max_grad_norm) clip = *c.max_grad_norm / norm;

  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto w = t.mutable_data();
    const auto g = t.grad_view();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double wd = params[i].decay ? c.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j] * clip;
      m[j] = static_cast<float>(c.beta1 * m[j] + (1.0 - c.beta1) * gj);
      v[j] = static_cast<float>(c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj);
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps) + wd * w[j];
      w[j] = static_cast<float>(w[j] - lr * update);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

void ExperimentSpec::validate() const {
  if (batch_size < 1) throw ConfigError("must be >= 1", "trainer.batch_size");
  if (lr_grid.empty()) throw ConfigError("grid must be non-empty", "trainer.lr_grid");
  for (double lr : lr_grid) {
    if (!(lr > 0.0)) throw ConfigError("learning rates must be > 0", "trainer.lr_grid");
  }
  LRSchedule{peak_lr, 1, warmup_fraction, stage_one_multiplier}.validate();
  if (epochs && *epochs < 1) throw ConfigError("must be >= 1", "trainer.epochs");
  if (augment_factor < 1) throw ConfigError("must be >= 1", "augment.factor");
  if (!(augment_prob >= 0.0 && augment_prob <= 1.0)) {
    throw ConfigError("must be in [0, 1]", "augment.substitution_prob");
  }
  if (lora_rank && *lora_rank < 1) throw ConfigError("must be >= 1", "lora.rank");
  if (student_layers < 1) throw ConfigError("must be >= 1", "student.layers");
  policy.attention.validate();
  policy.ffn.validate();
  policy.embeddings.validate();
  optimizer.validate();
}

std::size_t ExperimentSpec::effective_epochs() const {
  return epochs.value_or(budget_preset(budget, task_class, longer_budget).epochs);
}

bool ExperimentSpec::effective_augment() const {
  return augment.value_or(budget_preset(budget, task_class, longer_budget).use_da);
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string describe_quantizer(const QuantizerSpec& q) {
  std::string s = to_string(q.kind);
  s += q.granularity == Granularity::kPerRow ? "/per_row" : "/per_tensor";
  s += "/" + fmt(q.ternary_threshold_factor);
  if (q.ste_clip) s += "/clip=" + fmt(*q.ste_clip);
  return s;
}

}  // namespace

std::string describe(const ExperimentSpec& s) {
  std::ostringstream o;
  o << "name=" << s.name << "\n"
    << "mode=" << to_string(s.mode) << "\n"
    << "teacher_checkpoint=" << s.teacher_checkpoint << "\n"
    << "selection=" << to_string(s.selection) << "\n"
    << "student_layers=" << s.student_layers << "\n"
    << "policy.attention=" << describe_quantizer(s.policy.attention) << "\n"
    << "policy.ffn=" << describe_quantizer(s.policy.ffn) << "\n"
    << "policy.embeddings=" << describe_quantizer(s.policy.embeddings) << "\n"
    << "policy.int8_activations=" << s.policy.int8_activations << "\n"
    << "schedule=" << to_string(s.schedule) << "\n"
    << "attention_target="
    << (s.attention_target == AttentionTarget::kScores ? "scores" : "probabilities") << "\n"
    << "budget=" << to_string(s.budget) << "\n"
    << "task_class=" << to_string(s.task_class) << "\n"
    << "longer_budget=" << s.longer_budget << "\n"
    << "epochs=" << s.effective_epochs() << "\n"
    << "augment=" << s.effective_augment() << "\n"
    << "augment_prob=" << fmt(s.augment_prob) << "\n"
    << "augment_factor=" << s.augment_factor << "\n"
    << "lr_grid=";
  for (std::size_t i = 0; i < s.lr_grid.size(); ++i) o << (i ? "," : "") << fmt(s.lr_grid[i]);
  o << "\n"
    << "peak_lr=" << fmt(s.peak_lr) << "\n"
    << "warmup_fraction=" << fmt(s.warmup_fraction) << "\n"
    << "stage_one_multiplier=" << fmt(s.stage_one_multiplier) << "\n"
    << "batch_size=" << s.batch_size << "\n"
    << "optimizer=" << fmt(s.optimizer.beta1) << "," << fmt(s.optimizer.beta2) << ","
    << fmt(s.optimizer.eps) << "," << fmt(s.optimizer.weight_decay) << ","
    << (s.optimizer.max_grad_norm ? fmt(*s.optimizer.max_grad_norm) : "none") << "\n"
    << "lora_rank=" << (s.lora_rank ? std::to_string(*s.lora_rank) : "none") << "\n"
    << "lora_init_scale=" << fmt(s.lora_init_scale) << "\n"
    << "continue_rounds=" << s.continue_rounds << "\n"
    << "seed=" << s.seed << "\n";
  return o.str();
}

std::string spec_hash(const ExperimentSpec& spec) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : describe(spec)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t derive_seed(std::uint64_t master, SeedStream stream, std::uint64_t index) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(stream) * 0x10001ULL + index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------

double MetricsLog::best_metric() const {
  return evals.empty() ? 0.0 : evals.back().best_so_far;
}

std::size_t MetricsLog::best_epoch() const {
  std::size_t best = 0;
  double acc = -1.0;
  for (const auto& e : evals) {
    if (e.accuracy > acc) {
      acc = e.accuracy;
      best = e.epoch;
    }
  }
  return best;
}

void MetricsLog::append(const MetricsLog& other) {
  const std::size_t step_offset = steps.empty() ? 0 : steps.back().step + 1;
  const std::size_t epoch_offset = evals.empty() ? 0 : evals.back().epoch;
  const double prior_best = best_metric();
  for (auto r : other.steps) {
    r.step += step_offset;
    steps.push_back(r);
  }
  for (auto e : other.evals) {
    e.epoch += epoch_offset;
    e.step += step_offset;
    e.best_so_far = std::max(e.best_so_far, evals.empty() ? 0.0 : prior_best);
    evals.push_back(e);
  }
}

void MetricsLog::write_steps_csv(std::ostream& out) const {
  out << "step,stage,gamma,beta,lr,loss_logit,loss_hidden,loss_att,total\n";
  char buf[256];
  for (const auto& r : steps) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.stage + 1,
                  r.gamma, r.beta, r.lr, r.loss_logit, r.loss_hidden, r.loss_att, r.total);
    out << buf;
  }
}

void MetricsLog::write_evals_csv(std::ostream& out) const {
  out << "epoch,step,accuracy,best_so_far\n";
  char buf[128];
  for (const auto& e : evals) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g\n", e.epoch, e.step, e.accuracy,
                  e.best_so_far);
    out << buf;
  }
}

std::string MetricsLog::summary_json() const {
  nlohmann::ordered_json j;
  j["best_metric"] = best_metric();
  j["best_epoch"] = best_epoch();
  j["spec_hash"] = spec_hash;
  j["steps"] = steps.size();
  j["epochs"] = evals.size();
  j["final_metric"] = evals.empty() ? 0.0 : evals.back().accuracy;
  return j.dump(2) + "\n";
}

void MetricsLog::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  const std::filesystem::path d(dir);
  std::ofstream steps_out(d / "metrics.csv");
  write_steps_csv(steps_out);
  std::ofstream evals_out(d / "evals.csv");
  write_evals_csv(evals_out);
  std::ofstream summary(d / "summary.json");
  summary << summary_json();
  if (!steps_out || !evals_out || !summary) {
    throw std::runtime_error("could not write metrics into " + dir);
  }
}

namespace {

std::vector<std::vector<std::string>> read_csv_rows(std::istream& in, const std::string& header) {
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw std::runtime_error("unexpected CSV header '" + line + "'");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

std::vector<StepRecord> read_steps_csv(std::istream& in) {
  std::vector<StepRecord> out;
  for (const auto& c : read_csv_rows(in, "step,stage,gamma,beta,lr,loss_logit,loss_hidden,loss_att,total")) {
    if (c.size() != 9) throw std::runtime_error("metrics row with " + std::to_string(c.size()) + " cells");
    out.push_back({std::stoul(c[0]), std::stoul(c[1]) - 1, std::stoi(c[2]), std::stoi(c[3]),
                   std::stod(c[4]), std::stod(c[5]), std::stod(c[6]), std::stod(c[7]),
                   std::stod(c[8])});
  }
  return out;
}

std::vector<EvalRecord> read_evals_csv(std::istream& in) {
  std::vector<EvalRecord> out;
  for (const auto& c : read_csv_rows(in, "epoch,step,accuracy,best_so_far")) {
    if (c.size() != 4) throw std::runtime_error("eval row with " + std::to_string(c.size()) + " cells");
    out.push_back({std::stoul(c[0]), std::stoul(c[1]), std::stod(c[2]), std::stod(c[3])});
  }
  return out;
}

// ---------------------------------------------------------------------------

double evaluate(const EncoderModel& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw InputError("evaluate: empty dataset");
  NoGradGuard guard;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  const std::size_t c = model.config().num_classes;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto out = forward(model, data.batch(idx));
    const auto logits = out.logits.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = logits.subspan(r * c, c);
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      if (pred == data.labels[idx[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

bool finite(double v) { return std::isfinite(v); }

std::string diagnostic(const StepRecord& r) {
  std::ostringstream o;
  o << "non-finite loss at step " << r.step << " (stage " << r.stage + 1 << ", gamma " << r.gamma
    << ", beta " << r.beta << ", lr " << r.lr << "): logit=" << r.loss_logit
    << " hidden=" << r.loss_hidden << " att=" << r.loss_att << " total=" << r.total;
  return o.str();
}

TrainResult run_round(const ExperimentSpec& spec, const EncoderModel& teacher,
                      EncoderModel student, const TaskData& data, const ToyTaskSpec& task,
                      std::uint64_t round) {
  Dataset train_set = data.train;
  if (spec.effective_augment()) {
    const auto aug = AugmenterSpec::for_task(task, spec.augment_prob, spec.augment_factor,
                                             derive_seed(spec.seed, SeedStream::kAugment));
    train_set = augment(data.train, task, aug);
  }
  const std::size_t epochs = spec.effective_epochs();
  const std::size_t per_epoch = (train_set.size() + spec.batch_size - 1) / spec.batch_size;
  const std::size_t T = total_steps(epochs, train_set.size(), spec.batch_size);
  const LRSchedule lrs{spec.peak_lr, T, spec.warmup_fraction, spec.stage_one_multiplier};
  lrs.validate();

  const bool distill = spec.mode == TrainMode::kDistill;
  KDPairing pairing;
  if (distill) {
    const auto sl = student.layers.size();
    const auto tl = teacher.layers.size();
    pairing = sl == tl ? identity_pairing(sl)
                       : pairing_from_selection(LayerSelection::make(spec.selection,
                                                                     static_cast<std::uint32_t>(tl),
                                                                     static_cast<std::uint32_t>(sl)));
    validate_pairing(pairing, sl, tl);
  }

  student.set_requires_grad(true);
  const auto params = student.parameters();
  OptimizerState opt{spec.optimizer, {}, {}, 0};

  TrainResult result;
  result.log.spec_hash = spec_hash(spec);
  result.student = student.clone();
  double best = -1.0;

  std::mt19937_64 shuffle_rng(derive_seed(spec.seed, SeedStream::kShuffle, round));
  std::vector<std::size_t> order(train_set.size());
  std::vector<std::size_t> idx;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t lo = b * spec.batch_size;
      const std::size_t hi = std::min(order.size(), lo + spec.batch_size);
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(lo),
                 order.begin() + static_cast<std::ptrdiff_t>(hi));
      const auto batch = train_set.batch(idx);

      const auto stage = stage_at(step, T, spec.schedule);
      StepRecord rec;
      rec.step = step;
      rec.stage = stage.stage_index;
      rec.gamma = stage.weights.gamma;
      rec.beta = stage.weights.beta;
      rec.lr = lr_at(step, lrs, spec.schedule);

      const auto s_out = forward(student, batch);
      Tensor loss;
      if (distill) {
        ModelOutputs t_out;
        {
          NoGradGuard guard;
          t_out = forward(teacher, batch);
        }
        const auto terms = kd_terms(s_out, t_out, pairing, spec.attention_target);
        loss = combine_terms(terms, stage.weights);
        rec.loss_logit = terms.logit.item();
        rec.loss_hidden = terms.hidden.item();
        rec.loss_att = terms.att.item();
      } else {
        rec.gamma = 1;
        rec.beta = 0;
        loss = cross_entropy(s_out.logits, train_set.batch_labels(idx));
        rec.loss_logit = loss.item();
      }
      rec.total = loss.item();
      if (!finite(rec.total) || !finite(rec.loss_logit) || !finite(rec.loss_hidden) ||
          !finite(rec.loss_att)) {
        throw TrainingError(diagnostic(rec));
      }
      result.log.steps.push_back(rec);

      student.zero_grad();
      loss.backward();
      adam_step(opt, params, rec.lr);
    }
    const double acc = evaluate(student, data.val);
    if (acc > best) {
      best = acc;
      result.student = student.clone();
      result.best_epoch = epoch;
    }
    result.log.evals.push_back({epoch, step, acc, best});
  }
  result.best_metric = best;
  result.student.set_requires_grad(false);
  return result;
}

}  // namespace

TrainResult train(const ExperimentSpec& spec, const EncoderModel& teacher,
                  const EncoderModel& student, const TaskData& data, const ToyTaskSpec& task) {
  spec.validate();
  if (spec.mode == TrainMode::kDistill && teacher.layers.empty()) {
    throw ConfigError("distillation needs a teacher", "trainer.mode");
  }
  EncoderModel s = student.clone();
  s.apply_policy(spec.policy);
  if (spec.lora_rank) {
    attach_lora(s, *spec.lora_rank, spec.lora_init_scale, derive_seed(spec.seed, SeedStream::kInit));
  }
  return run_round(spec, teacher, std::move(s), data, task, 0);
}

TrainResult continue_train(const ExperimentSpec& spec, const EncoderModel& teacher,
                           const TrainResult& trained, const TaskData& data,
                           const ToyTaskSpec& task) {
  spec.validate();
  TrainResult out;
  out.student = trained.student.clone();
  out.log = trained.log;
  out.best_metric = trained.best_metric;
  out.best_epoch = trained.best_epoch;
  EncoderModel start = trained.student.clone();
  for (std::size_t r = 1; r <= spec.continue_rounds; ++r) {
    start.apply_policy(spec.policy);
    const std::size_t epochs_before = out.log.evals.size();
    auto round = run_round(spec, teacher, std::move(start), data, task, r);
    start = round.student.clone();
    if (round.best_metric > out.best_metric) {
      out.student = std::move(round.student);
      out.best_metric = round.best_metric;
      out.best_epoch = epochs_before + round.best_epoch;
    }
    out.log.append(round.log);
  }
  return out;
}

GridOutcome lr_grid_search(const ExperimentSpec& spec, const GridRunner& run) {
  if (spec.lr_grid.empty()) throw ConfigError("grid must be non-empty", "trainer.lr_grid");
  GridOutcome out;
  out.lrs = spec.lr_grid;
  std::sort(out.lrs.begin(), out.lrs.end());
  out.lrs.erase(std::unique(out.lrs.begin(), out.lrs.end()), out.lrs.end());
  bool have = false;
  for (double lr : out.lrs) {
    ExperimentSpec s = spec;
    s.peak_lr = lr;
    auto r = run(s);
    out.metrics.push_back(r.best_metric);
    if (!have || r.best_metric > out.best_run.best_metric) {
      out.best_lr = lr;
      out.best_run = std::move(r);
      have = true;
    }
  }
  return out;
}

}  // namespace xtc

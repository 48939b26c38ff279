#include "xtc/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "xtc/errors.hpp"

namespace xtc {

TransformerConfig TeacherSetup::model_config(const ToyTaskSpec& task) const {
  TransformerConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.ffn_dim = ffn_dim;
  c.vocab_size = task.vocab_size;
  c.max_seq_len = task.seq_len;
  c.num_classes = task.num_classes;
  c.activation = activation;
  return c;
}

HarnessConfig::HarnessConfig() {
  task.rule = LabelRule::kMajorityClass;
  task.num_classes = 8;
  task.seed = 11;
  experiment.policy = QuantPolicy::uniform(QuantizerSpec::binary(), true);
  experiment.task_class = TaskClass::kLargeNoDA;
  experiment.peak_lr = 5e-4;
  experiment.lr_grid = {1e-4, 5e-4, 2e-3};
}

HarnessConfig default_config() { return HarnessConfig{}; }

void HarnessConfig::validate() const {
  if (schema_version != kSchemaVersion) {
    throw ConfigError("unsupported version " + std::to_string(schema_version) + " (expected " +
                          std::to_string(kSchemaVersion) + ")",
                      "schema_version");
  }
  if (output_root.empty()) throw ConfigError("must not be empty", "output.root");
  task.validate();
  const auto tc = teacher.model_config(task);
  try {
    tc.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.what(), "teacher");
  }
  if (teacher.epochs < 1) throw ConfigError("must be >= 1", "teacher.epochs");
  if (!(teacher.peak_lr > 0.0)) throw ConfigError("must be > 0", "teacher.peak_lr");
  if (teacher.checkpoint.empty() && experiment.student_layers > teacher.layers) {
    throw ConfigError("student deeper than teacher", "student.layers");
  }
  experiment.validate();
}

namespace {

const char* to_string(Activation a) { return a == Activation::kRelu ? "relu" : "gelu"; }

const char* granularity_name(Granularity g) {
  return g == Granularity::kPerRow ? "per_row" : "per_tensor";
}

const char* target_name(AttentionTarget t) {
  return t == AttentionTarget::kScores ? "scores" : "probabilities";
}

// One mapping in the document; remembers which keys were read so that
// anything left over can be reported as unknown.
class Section {
 public:
  Section(const YAML::Node& node, std::string name) : node_(node), name_(std::move(name)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw ConfigError("must be a mapping", name_);
  }

  std::string path(const std::string& key) const {
    return name_.empty() ? key : name_ + "." + key;
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto v = lookup(key);
    if (!v) return;
    out = convert<T>(v, key);
  }

  template <class T>
  void get(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    const auto v = lookup(key);
    if (!v) return;
    if (v.IsNull()) {
      out.reset();
      return;
    }
    out = convert<T>(v, key);
  }

  template <class E, class Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string text;
    get(key, text);
    if (!lookup(key)) return;
    try {
      out = parse(text);
    } catch (const std::exception&) {
      throw ConfigError("invalid value '" + text + "'", path(key));
    }
  }

  bool has(const std::string& key) const { return static_cast<bool>(lookup(key)); }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError("unknown key", path(key));
    }
  }

 private:
  YAML::Node lookup(const std::string& key) const {
    if (!node_ || !node_.IsMap()) return YAML::Node(YAML::NodeType::Undefined);
    return node_[key];
  }

  template <class T>
  T convert(const YAML::Node& v, const std::string& key) const {
    if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.IsSequence()) throw ConfigError("expected a list of numbers", path(key));
      std::vector<double> out;
      for (const auto& item : v) {
        try {
          out.push_back(item.as<double>());
        } catch (const YAML::Exception&) {
          throw ConfigError("expected a list of numbers", path(key));
        }
      }
      return out;
    } else {
      if (!v.IsScalar()) throw ConfigError("expected a scalar", path(key));
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!v.Scalar().empty() && v.Scalar()[0] == '-') {
          throw ConfigError("must be non-negative", path(key));
        }
      }
      try {
        return v.as<T>();
      } catch (const YAML::Exception&) {
        throw ConfigError("cannot read '" + v.Scalar() + "' as " + type_name<T>(), path(key));
      }
    }
  }

  template <class T>
  static const char* type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else return "a string";
  }

  YAML::Node node_;
  std::string name_;
  std::set<std::string> seen_;
};

const std::set<std::string> kSections = {"schema_version", "output", "task",   "teacher",
                                         "student",        "quant",  "kd",     "budget",
                                         "augment",        "trainer", "optimizer", "lora"};

}  // namespace

HarnessConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("not valid YAML: ") + e.what(), "<document>");
  }
  if (!root.IsMap()) throw ConfigError("top level must be a mapping", "<document>");
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (!kSections.count(key)) throw ConfigError("unknown section", key);
  }
  if (!root["schema_version"]) throw ConfigError("required field missing", "schema_version");

  HarnessConfig c;
  Section top(root, "");
  top.get("schema_version", c.schema_version);
  if (c.schema_version != kSchemaVersion) c.validate();

  Section out(root["output"], "output");
  out.get("root", c.output_root);
  out.finish();

  Section task(root["task"], "task");
  task.get_enum("rule", c.task.rule, parse_label_rule);
  task.get("num_classes", c.task.num_classes);
  task.get("vocab_size", c.task.vocab_size);
  task.get("seq_len", c.task.seq_len);
  task.get("train_size", c.task.train_size);
  task.get("val_size", c.task.val_size);
  std::optional<std::uint64_t> task_seed;
  task.get("seed", task_seed);
  task.finish();

  Section teacher(root["teacher"], "teacher");
  teacher.get("layers", c.teacher.layers);
  teacher.get("hidden", c.teacher.hidden);
  teacher.get("heads", c.teacher.heads);
  teacher.get("ffn_dim", c.teacher.ffn_dim);
  teacher.get_enum("activation", c.teacher.activation, [](const std::string& s) {
    if (s == "gelu") return Activation::kGelu;
    if (s == "relu") return Activation::kRelu;
    throw ConfigError("unknown activation");
  });
  teacher.get("checkpoint", c.teacher.checkpoint);
  teacher.get("epochs", c.teacher.epochs);
  teacher.get("peak_lr", c.teacher.peak_lr);
  teacher.get("init_seed", c.teacher.init_seed);
  teacher.finish();

  auto& x = c.experiment;
  x.teacher_checkpoint = c.teacher.checkpoint;
  Section student(root["student"], "student");
  student.get("layers", x.student_layers);
  student.get_enum("strategy", x.selection, parse_selection_strategy);
  student.finish();

  Section quant(root["quant"], "quant");
  QuantizerSpec w = x.policy.attention;
  bool quant_embeddings = x.policy.embeddings.kind != QuantKind::kNone;
  quant.get_enum("weights", w.kind, [](const std::string& s) {
    const auto k = parse_quant_kind(s);
    if (k == QuantKind::kInt8Activation) throw ConfigError("not a weight quantizer");
    return k;
  });
  quant.get_enum("granularity", w.granularity, [](const std::string& s) {
    if (s == "per_tensor") return Granularity::kPerTensor;
    if (s == "per_row") return Granularity::kPerRow;
    throw ConfigError("unknown granularity");
  });
  quant.get("ternary_threshold", w.ternary_threshold_factor);
  quant.get("ste_clip", w.ste_clip);
  quant.get("embeddings", quant_embeddings);
  quant.get("int8_activations", x.policy.int8_activations);
  quant.finish();
  x.policy.attention = w;
  x.policy.ffn = w;
  x.policy.embeddings = quant_embeddings ? w : QuantizerSpec::none();

  Section kd(root["kd"], "kd");
  kd.get_enum("mode", x.mode, parse_train_mode);
  kd.get_enum("schedule", x.schedule, parse_schedule_kind);
  kd.get_enum("attention_target", x.attention_target, [](const std::string& s) {
    if (s == "probabilities") return AttentionTarget::kProbabilities;
    if (s == "scores") return AttentionTarget::kScores;
    throw ConfigError("unknown attention target");
  });
  kd.finish();

  Section budget(root["budget"], "budget");
  budget.get_enum("label", x.budget, parse_budget_label);
  budget.get_enum("task_class", x.task_class, parse_task_class);
  budget.get("longer", x.longer_budget);
  budget.get("epochs", x.epochs);
  budget.finish();

  Section aug(root["augment"], "augment");
  aug.get("enabled", x.augment);
  aug.get("substitution_prob", x.augment_prob);
  aug.get("factor", x.augment_factor);
  aug.finish();

  Section tr(root["trainer"], "trainer");
  tr.get("name", x.name);
  tr.get("batch_size", x.batch_size);
  tr.get("peak_lr", x.peak_lr);
  tr.get("lr_grid", x.lr_grid);
  tr.get("warmup_fraction", x.warmup_fraction);
  tr.get("stage_one_multiplier", x.stage_one_multiplier);
  tr.get("seed", x.seed);
  tr.get("continue_rounds", x.continue_rounds);
  tr.finish();

  Section opt(root["optimizer"], "optimizer");
  opt.get("beta1", x.optimizer.beta1);
  opt.get("beta2", x.optimizer.beta2);
  opt.get("eps", x.optimizer.eps);
  opt.get("weight_decay", x.optimizer.weight_decay);
  opt.get("max_grad_norm", x.optimizer.max_grad_norm);
  opt.finish();

  Section lora(root["lora"], "lora");
  lora.get("rank", x.lora_rank);
  lora.get("init_scale", x.lora_init_scale);
  lora.finish();

  c.task.seed = task_seed.value_or(derive_seed(x.seed, SeedStream::kData));
  c.validate();
  return c;
}

HarnessConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'", "<file>");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_yaml(const HarnessConfig& c) {
  const auto& x = c.experiment;
  const auto& w = x.policy.attention;
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e.SetFloatPrecision(9);
  e << YAML::BeginMap;
  e << YAML::Key << "schema_version" << YAML::Value << c.schema_version;

  e << YAML::Key << "output" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "root" << YAML::Value << c.output_root;
  e << YAML::EndMap;

  e << YAML::Key << "task" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "rule" << YAML::Value << to_string(c.task.rule);
  e << YAML::Key << "num_classes" << YAML::Value << c.task.num_classes;
  e << YAML::Key << "vocab_size" << YAML::Value << c.task.vocab_size;
  e << YAML::Key << "seq_len" << YAML::Value << c.task.seq_len;
  e << YAML::Key << "train_size" << YAML::Value << c.task.train_size;
  e << YAML::Key << "val_size" << YAML::Value << c.task.val_size;
  e << YAML::Key << "seed" << YAML::Value << c.task.seed;
  e << YAML::EndMap;

  e << YAML::Key << "teacher" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "layers" << YAML::Value << c.teacher.layers;
  e << YAML::Key << "hidden" << YAML::Value << c.teacher.hidden;
  e << YAML::Key << "heads" << YAML::Value << c.teacher.heads;
  e << YAML::Key << "ffn_dim" << YAML::Value << c.teacher.ffn_dim;
  e << YAML::Key << "activation" << YAML::Value << to_string(c.teacher.activation);
  e << YAML::Key << "checkpoint" << YAML::Value << c.teacher.checkpoint;
  e << YAML::Key << "epochs" << YAML::Value << c.teacher.epochs;
  e << YAML::Key << "peak_lr" << YAML::Value << c.teacher.peak_lr;
  e << YAML::Key << "init_seed" << YAML::Value << c.teacher.init_seed;
  e << YAML::EndMap;

  e << YAML::Key << "student" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "layers" << YAML::Value << x.student_layers;
  e << YAML::Key << "strategy" << YAML::Value << to_string(x.selection);
  e << YAML::EndMap;

  e << YAML::Key << "quant" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "weights" << YAML::Value << to_string(w.kind);
  e << YAML::Key << "granularity" << YAML::Value << granularity_name(w.granularity);
  e << YAML::Key << "ternary_threshold" << YAML::Value << w.ternary_threshold_factor;
  e << YAML::Key << "ste_clip" << YAML::Value;
  if (w.ste_clip) e << *w.ste_clip;
  else e << YAML::Null;
  e << YAML::Key << "embeddings" << YAML::Value
    << (x.policy.embeddings.kind != QuantKind::kNone);
  e << YAML::Key << "int8_activations" << YAML::Value << x.policy.int8_activations;
  e << YAML::EndMap;

  e << YAML::Key << "kd" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "mode" << YAML::Value << to_string(x.mode);
  e << YAML::Key << "schedule" << YAML::Value << to_string(x.schedule);
  e << YAML::Key << "attention_target" << YAML::Value << target_name(x.attention_target);
  e << YAML::EndMap;

  e << YAML::Key << "budget" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "label" << YAML::Value << to_string(x.budget);
  e << YAML::Key << "task_class" << YAML::Value << to_string(x.task_class);
  e << YAML::Key << "longer" << YAML::Value << x.longer_budget;
  e << YAML::Key << "epochs" << YAML::Value;
  if (x.epochs) e << *x.epochs;
  else e << YAML::Null;
  e << YAML::EndMap;

  e << YAML::Key << "augment" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "enabled" << YAML::Value;
  if (x.augment) e << *x.augment;
  else e << YAML::Null;
  e << YAML::Key << "substitution_prob" << YAML::Value << x.augment_prob;
  e << YAML::Key << "factor" << YAML::Value << x.augment_factor;
  e << YAML::EndMap;

  e << YAML::Key << "trainer" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "name" << YAML::Value << x.name;
  e << YAML::Key << "batch_size" << YAML::Value << x.batch_size;
  e << YAML::Key << "peak_lr" << YAML::Value << x.peak_lr;
  e << YAML::Key << "lr_grid" << YAML::Value << YAML::Flow << x.lr_grid;
  e << YAML::Key << "warmup_fraction" << YAML::Value << x.warmup_fraction;
  e << YAML::Key << "stage_one_multiplier" << YAML::Value << x.stage_one_multiplier;
  e << YAML::Key << "seed" << YAML::Value << x.seed;
  e << YAML::Key << "continue_rounds" << YAML::Value << x.continue_rounds;
  e << YAML::EndMap;

  e << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "beta1" << YAML::Value << x.optimizer.beta1;
  e << YAML::Key << "beta2" << YAML::Value << x.optimizer.beta2;
  e << YAML::Key << "eps" << YAML::Value << x.optimizer.eps;
  e << YAML::Key << "weight_decay" << YAML::Value << x.optimizer.weight_decay;
  e << YAML::Key << "max_grad_norm" << YAML::Value;
  if (x.optimizer.max_grad_norm) e << *x.optimizer.max_grad_norm;
  else e << YAML::Null;
  e << YAML::EndMap;

  e << YAML::Key << "lora" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "rank" << YAML::Value;
  if (x.lora_rank) e << *x.lora_rank;
  else e << YAML::Null;
  e << YAML::Key << "init_scale" << YAML::Value << x.lora_init_scale;
  e << YAML::EndMap;

  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

std::filesystem::path output_root(const HarnessConfig& config) {
  const char* env = std::getenv("XTC_OUT");
  if (env && *env) return env;
  return config.output_root;
}

}  // namespace xtc

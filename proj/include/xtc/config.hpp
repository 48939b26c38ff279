#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "xtc/data.hpp"
#include "xtc/model.hpp"
#include "xtc/trainer.hpp"

namespace xtc {

inline constexpr std::uint32_t kSchemaVersion = 1;

struct TeacherSetup {
  std::uint32_t layers = 4;
  std::uint32_t hidden = 64;
  std::uint32_t heads = 4;
  std::uint32_t ffn_dim = 256;
  Activation activation = Activation::kGelu;
  std::string checkpoint;  // empty: train from scratch
  std::size_t epochs = 5;
  double peak_lr = 1e-3;
  std::uint64_t init_seed = 5;

  /// Vocabulary, sequence length and class count come from the task.
  TransformerConfig model_config(const ToyTaskSpec& task) const;
};

/// Everything one CLI invocation needs. Sections in the YAML document:
/// output, task, teacher, student, quant, kd, budget, augment, trainer,
/// optimizer, lora.
struct HarnessConfig {
  std::uint32_t schema_version = kSchemaVersion;
  std::string output_root = "runs";
  ToyTaskSpec task;
  TeacherSetup teacher;
  ExperimentSpec experiment;

  HarnessConfig();
  void validate() const;
};

/// Desk-scale benchmark defaults: 8-class majority task, 4-layer teacher,
/// 2-layer skip student, 1-bit weights with INT8 activations.
HarnessConfig default_config();

/// Unknown keys, wrong types and out-of-range values throw ConfigError
/// naming the field path. Missing keys keep their defaults.
HarnessConfig parse_config(const std::string& yaml_text);
HarnessConfig load_config(const std::filesystem::path& path);
/// Fully resolved document; parse_config(to_yaml(c)) reproduces c.
std::string to_yaml(const HarnessConfig& config);

/// XTC_OUT, when set and non-empty, replaces config.output_root.
std::filesystem::path output_root(const HarnessConfig& config);

}  // namespace xtc

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xtc/model.hpp"

namespace xtc {

enum class LabelRule { kPatternPresence, kTokenParity, kMajorityClass };

const char* to_string(LabelRule rule);
LabelRule parse_label_rule(const std::string& text);

/// Synthetic classification task. Every rule reads tokens only through
/// their category (token mod category_count()), so two tokens of the same
/// category are interchangeable without changing any label.
struct ToyTaskSpec {
  std::uint32_t vocab_size = 256;
  std::uint32_t seq_len = 32;
  LabelRule rule = LabelRule::kPatternPresence;
  std::uint32_t num_classes = 2;
  std::size_t train_size = 5000;
  std::size_t val_size = 1000;
  std::uint64_t seed = 1;

  std::uint32_t category_count() const;
  std::uint32_t category(int token) const;
  int label_of(std::span<const int> tokens) const;
  void validate() const;
};

struct Dataset {
  std::uint32_t seq_len = 0;
  std::vector<int> tokens;  // [size, seq_len]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const int> example(std::size_t i) const {
    return {tokens.data() + i * seq_len, seq_len};
  }
  TokenBatch batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

struct TaskData {
  Dataset train;
  Dataset val;
};

/// Seeded; classes balanced by construction (round-robin labels, rejection
/// sampling of sequences); no validation sequence also appears in train.
TaskData generate_dataset(const ToyTaskSpec& spec);

struct AugmenterSpec {
  /// synonyms[t] lists tokens that may replace token t.
  std::vector<std::vector<int>> synonyms;
  double substitution_prob = 0.3;
  std::size_t factor = 5;  // output size = factor * input size
  std::uint64_t seed = 7;

  /// Same-category synonyms for every token of the task's vocabulary.
  static AugmenterSpec for_task(const ToyTaskSpec& task, double p = 0.3,
                                std::size_t factor = 5, std::uint64_t seed = 7);
  void validate(const ToyTaskSpec& task) const;
};

struct AugmentStats {
  std::size_t positions = 0;      // token positions in generated copies
  std::size_t substitutions = 0;
};

/// Originals first, then (factor - 1) perturbed copies of each example.
Dataset augment(const Dataset& data, const ToyTaskSpec& task, const AugmenterSpec& spec,
                AugmentStats* stats = nullptr);

}  // namespace xtc

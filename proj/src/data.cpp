#include "xtc/data.hpp"

#include <algorithm>
#include <random>
#include <string_view>
#include <unordered_set>

#include "xtc/errors.hpp"

namespace xtc {

const char* to_string(LabelRule rule) {
  switch (rule) {
    case LabelRule::kPatternPresence: return "pattern_presence";
    case LabelRule::kTokenParity: return "token_parity";
    case LabelRule::kMajorityClass: return "majority_class";
  }
  return "pattern_presence";
}

LabelRule parse_label_rule(const std::string& text) {
  if (text == "pattern_presence") return LabelRule::kPatternPresence;
  if (text == "token_parity") return LabelRule::kTokenParity;
  if (text == "majority_class") return LabelRule::kMajorityClass;
  throw ConfigError("unknown label rule '" + text + "'", "task.rule");
}

std::uint32_t ToyTaskSpec::category_count() const {
  switch (rule) {
    case LabelRule::kPatternPresence: return 4;
    case LabelRule::kTokenParity: return 2;
    case LabelRule::kMajorityClass: return num_classes + 1;  // last one is neutral
  }
  return 2;
}

std::uint32_t ToyTaskSpec::category(int token) const {
  return static_cast<std::uint32_t>(token) % category_count();
}

int ToyTaskSpec::label_of(std::span<const int> tokens) const {
  switch (rule) {
    case LabelRule::kPatternPresence:
      // Category 0 immediately followed by category 1.
      for (std::size_t i = 1; i < tokens.size(); ++i) {
        if (category(tokens[i - 1]) == 0 && category(tokens[i]) == 1) return 1;
      }
      return 0;
    case LabelRule::kTokenParity: {
      int odd = 0;
      for (int t : tokens) odd ^= category(t) == 0 ? 1 : 0;
      return odd;
    }
    case LabelRule::kMajorityClass: {
      std::vector<int> counts(num_classes, 0);
      for (int t : tokens) {
        const auto c = category(t);
        if (c < num_classes) ++counts[c];
      }
      // Ties go to the smallest class; the generator never emits them.
      return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }
  return 0;
}

void ToyTaskSpec::validate() const {
  if (seq_len < 2) throw ConfigError("must be >= 2", "task.seq_len");
  if (num_classes < 2) throw ConfigError("must be >= 2", "task.num_classes");
  if (train_size < 1) throw ConfigError("must be >= 1", "task.train_size");
  if (val_size < 1) throw ConfigError("must be >= 1", "task.val_size");
  if (rule != LabelRule::kMajorityClass && num_classes != 2) {
    throw ConfigError("rule supports exactly 2 classes", "task.num_classes");
  }
  if (vocab_size < 2 * category_count()) {
    throw ConfigError("vocabulary too small for the rule's categories", "task.vocab_size");
  }
}

TokenBatch Dataset::batch(std::span<const std::size_t> indices) const {
  TokenBatch b;
  b.batch = indices.size();
  b.seq_len = seq_len;
  b.ids.reserve(indices.size() * seq_len);
  for (auto i : indices) {
    const auto ex = example(i);
    b.ids.insert(b.ids.end(), ex.begin(), ex.end());
  }
  return b;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[i]);
  return out;
}

namespace {

constexpr int kMaxAttempts = 100000;

struct SequenceHash {
  std::size_t operator()(const std::vector<int>& v) const {
    return std::hash<std::string_view>()(
        std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(int)));
  }
};

std::vector<int> sample_with_label(const ToyTaskSpec& spec, int label, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tok(0, static_cast<int>(spec.vocab_size) - 1);
  std::vector<int> seq(spec.seq_len);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    for (auto& t : seq) t = tok(rng);
    if (spec.rule == LabelRule::kMajorityClass) {
      // Reject ties so every label has a strict winner.
      std::vector<int> counts(spec.num_classes, 0);
      for (int t : seq)
        if (spec.category(t) < spec.num_classes) ++counts[spec.category(t)];
      auto sorted = counts;
      std::sort(sorted.rbegin(), sorted.rend());
      if (sorted[0] == sorted[1]) continue;
    }
    if (spec.label_of(seq) == label) return seq;
  }
  throw GenerationError("could not sample a sequence with label " + std::to_string(label));
}

Dataset generate_split(const ToyTaskSpec& spec, std::size_t n, std::mt19937_64& rng,
                       std::unordered_set<std::vector<int>, SequenceHash>& taken) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % spec.num_classes);
  std::shuffle(labels.begin(), labels.end(), rng);
  Dataset d;
  d.seq_len = spec.seq_len;
  d.tokens.reserve(n * spec.seq_len);
  for (int label : labels) {
    std::vector<int> seq;
    int tries = 0;
    do {
      if (++tries > kMaxAttempts) throw GenerationError("could not draw distinct sequences");
      seq = sample_with_label(spec, label, rng);
    } while (!taken.insert(seq).second);
    d.tokens.insert(d.tokens.end(), seq.begin(), seq.end());
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace

TaskData generate_dataset(const ToyTaskSpec& spec) {
  spec.validate();
  if (spec.train_size < spec.num_classes || spec.val_size < spec.num_classes) {
    throw GenerationError("cannot balance " + std::to_string(spec.num_classes) +
                          " classes over fewer examples than classes");
  }
  std::mt19937_64 rng(spec.seed);
  std::unordered_set<std::vector<int>, SequenceHash> taken;
  TaskData out;
  out.train = generate_split(spec, spec.train_size, rng, taken);
  out.val = generate_split(spec, spec.val_size, rng, taken);
  return out;
}

AugmenterSpec AugmenterSpec::for_task(const ToyTaskSpec& task, double p, std::size_t factor,
                                      std::uint64_t seed) {
  AugmenterSpec a;
  a.substitution_prob = p;
  a.factor = factor;
  a.seed = seed;
  a.synonyms.resize(task.vocab_size);
  for (std::uint32_t t = 0; t < task.vocab_size; ++t) {
    for (std::uint32_t s = task.category(static_cast<int>(t)); s < task.vocab_size;
         s += task.category_count()) {
      if (s != t) a.synonyms[t].push_back(static_cast<int>(s));
    }
  }
  return a;
}

void AugmenterSpec::validate(const ToyTaskSpec& task) const {
  if (factor < 1) throw ConfigError("must be >= 1", "augment.factor");
  if (!(substitution_prob >= 0.0 && substitution_prob <= 1.0)) {
    throw ConfigError("must be in [0, 1]", "augment.substitution_prob");
  }
  if (synonyms.size() > task.vocab_size) {
    throw ConfigError("synonym table has entries beyond the vocabulary", "augment.synonyms");
  }
  for (std::size_t t = 0; t < synonyms.size(); ++t) {
    for (int s : synonyms[t]) {
      if (s < 0 || static_cast<std::uint32_t>(s) >= task.vocab_size) {
        throw ConfigError("synonym " + std::to_string(s) + " outside vocabulary",
                          "augment.synonyms");
      }
      if (task.category(s) != task.category(static_cast<int>(t))) {
        throw ConfigError("synonym " + std::to_string(s) + " of token " + std::to_string(t) +
                              " changes its category",
                          "augment.synonyms");
      }
    }
  }
}

Dataset augment(const Dataset& data, const ToyTaskSpec& task, const AugmenterSpec& spec,
                AugmentStats* stats) {
  spec.validate(task);
  Dataset out = data;
  if (spec.factor == 1) return out;
  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution flip(spec.substitution_prob);
  AugmentStats local;
  const std::vector<int> none;
  out.tokens.reserve(data.tokens.size() * spec.factor);
  out.labels.reserve(data.size() * spec.factor);
  for (std::size_t copy = 1; copy < spec.factor; ++copy) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      for (int t : data.example(i)) {
        ++local.positions;
        const auto& syn = static_cast<std::size_t>(t) < spec.synonyms.size()
                              ? spec.synonyms[static_cast<std::size_t>(t)]
                              : none;
        if (flip(rng) && !syn.empty()) {
          std::uniform_int_distribution<std::size_t> pick(0, syn.size() - 1);
          out.tokens.push_back(syn[pick(rng)]);
          ++local.substitutions;
        } else {
          out.tokens.push_back(t);
        }
      }
      out.labels.push_back(data.labels[i]);
    }
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace xtc

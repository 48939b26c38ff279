#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xtc/quantization.hpp"
#include "xtc/tensor.hpp"

namespace xtc {

enum class Activation : std::uint32_t { kGelu = 0, kRelu = 1 };

struct TransformerConfig {
  std::uint32_t num_layers = 2;
  std::uint32_t hidden = 64;
  std::uint32_t heads = 4;
  std::uint32_t ffn_dim = 256;
  std::uint32_t vocab_size = 256;
  std::uint32_t max_seq_len = 32;
  std::uint32_t num_classes = 2;
  Activation activation = Activation::kGelu;
  /// 8 fake-quantizes the input of every quantized linear layer to INT8;
  /// 32 leaves activations in full precision.
  std::uint32_t activation_bits = 32;

  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

/// Full-precision residual U[d_in, r] * V[r, d_out] added to a quantized weight.
struct LoRaAdapter {
  Tensor u;
  Tensor v;
  std::size_t rank() const { return u.dim(1); }
};

/// A weight matrix whose forward view is quantize(latent) (+ U V).
struct QuantMatrix {
  Tensor weight;  // latent, full precision
  QuantizerSpec spec;
  std::optional<LoRaAdapter> lora;

  /// Graph-building effective weight: straight-through quantizer plus adapter.
  Tensor effective() const;
  /// The quantized view without the adapter, for inspection and export.
  Quantized quantized() const;
};

struct Linear {
  QuantMatrix w;  // [d_in, d_out]
  Tensor bias;    // [d_out]
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct EncoderLayer {
  Linear q, k, v, o;
  Linear ffn_up, ffn_down;
  LayerNormParams ln_attn, ln_ffn;
};

/// Which quantizer each matrix family gets. The classifier head, biases,
/// and layernorm parameters always stay full precision.
struct QuantPolicy {
  QuantizerSpec attention;   // Q, K, V, O
  QuantizerSpec ffn;         // FFN up/down
  QuantizerSpec embeddings;  // token and position tables
  bool int8_activations = false;

  static QuantPolicy full_precision() { return {}; }
  /// Same quantizer on every matrix family.
  static QuantPolicy uniform(const QuantizerSpec& spec, bool int8_activations);
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;  // false for biases and layernorm parameters
};

class EncoderModel {
 public:
  EncoderModel() = default;
  /// Seeded initialization: N(0, 0.02) matrices, zero biases, unit gains.
  EncoderModel(const TransformerConfig& config, std::uint64_t seed);

  const TransformerConfig& config() const { return config_; }
  TransformerConfig& mutable_config() { return config_; }

  QuantMatrix token_embedding;     // [vocab, d]
  QuantMatrix position_embedding;  // [max_seq_len, d]
  LayerNormParams ln_embed;
  std::vector<EncoderLayer> layers;
  Tensor head_weight;  // [d, c]
  Tensor head_bias;    // [c]

  /// Trainable tensors in a fixed order, LoRa factors included.
  std::vector<NamedParam> parameters() const;
  /// Every weight matrix with its checkpoint name.
  std::vector<std::pair<std::string, const QuantMatrix*>> matrices() const;
  std::vector<std::pair<std::string, QuantMatrix*>> mutable_matrices();
  std::size_t parameter_count() const;

  void apply_policy(const QuantPolicy& policy);
  void set_requires_grad(bool value);
  void zero_grad();
  /// Deep copy; the result shares no storage with this model.
  EncoderModel clone() const;

  /// Weight-bit inventory of the forward view (1/2-bit for quantized matrices).
  ParamInventory inventory(bool count_scales = false) const;

 private:
  TransformerConfig config_;
};

struct TokenBatch {
  std::vector<int> ids;  // row-major [batch, seq_len]
  std::size_t batch = 0;
  std::size_t seq_len = 0;
};

struct ModelOutputs {
  Tensor logits;                          // [B, c]
  std::vector<Tensor> hiddens;            // per layer [B*l, d]
  std::vector<Tensor> attentions;         // per layer [B, h, l, l], post-softmax
  std::vector<Tensor> attention_scores;   // per layer [B, h, l, l], pre-softmax
};

ModelOutputs forward(const EncoderModel& model, const TokenBatch& batch);

/// y = x (quantize(W) + U V) + b with a straight-through gradient to W.
Tensor quantized_linear(const Tensor& x, const Linear& layer,
                        bool int8_activations = false);

enum class SelectionStrategy { kSkip, kTop, kBottom, kExplicit };

const char* to_string(SelectionStrategy s);
SelectionStrategy parse_selection_strategy(const std::string& text);

struct LayerSelection {
  SelectionStrategy strategy = SelectionStrategy::kSkip;
  std::vector<std::uint32_t> indices;  // 1-based teacher layers

  /// Skip keeps every (L/n)-th layer ending at the last when n divides L;
  /// otherwise it uses stride floor(L/n) over a centered span, giving
  /// {3,5,7,9,11} for 12 -> 5.
  static LayerSelection make(SelectionStrategy strategy, std::uint32_t teacher_layers,
                             std::uint32_t student_layers);
  static LayerSelection explicit_indices(std::vector<std::uint32_t> indices);
  void validate(std::uint32_t teacher_layers) const;
};

/// Student layer i is a deep copy of teacher layer indices[i]; embeddings
/// and head are copied too.
EncoderModel init_student_from_teacher(const EncoderModel& teacher,
                                       const LayerSelection& selection);

/// Adds a rank-r adapter to every quantized matrix: U ~ N(0, init_scale), V = 0.
void attach_lora(EncoderModel& model, std::size_t rank, float init_scale,
                 std::uint64_t seed);

// Checkpoint: "XTC1", config fields as u32 LE, u32 tensor count, then one
// segment record per tensor. Quantized matrices are stored packed.
void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const EncoderModel& model, std::ostream& out);
EncoderModel read_checkpoint(std::istream& in);

}  // namespace xtc

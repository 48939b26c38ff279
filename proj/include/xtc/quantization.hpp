#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "xtc/tensor.hpp"

namespace xtc {

enum class QuantKind : std::uint8_t { kNone, kBinary, kTernary, kInt8Activation };
enum class Granularity : std::uint8_t { kPerTensor = 0, kPerRow = 1 };

const char* to_string(QuantKind kind);
QuantKind parse_quant_kind(const std::string& text);

struct QuantizerSpec {
  QuantKind kind = QuantKind::kNone;
  Granularity granularity = Granularity::kPerTensor;
  float ternary_threshold_factor = 0.7F;
  /// When set, the straight-through gradient is zeroed where |w| > ste_clip.
  std::optional<float> ste_clip;

  static QuantizerSpec none() { return {}; }
  static QuantizerSpec binary(Granularity g = Granularity::kPerTensor) {
    return {QuantKind::kBinary, g, 0.7F, std::nullopt};
  }
  static QuantizerSpec ternary(Granularity g = Granularity::kPerTensor,
                               float factor = 0.7F) {
    return {QuantKind::kTernary, g, factor, std::nullopt};
  }

  /// Storage bits per element: 1, 2, 8, or 32 for `none`.
  int bits() const;
  /// Throws ConfigError; `weight_rank` checks per-row applicability.
  void validate(std::size_t weight_rank = 2) const;
};

/// Quantized view of a weight tensor with its scale(s). `delta` holds the
/// ternary thresholds (empty for binary).
struct Quantized {
  Tensor q;
  std::vector<float> alpha;
  std::vector<float> delta;
};

/// q_i = alpha * sign(w_i), alpha = mean |w| over the scope, sign(0) = +1.
Quantized binarize(const Tensor& w, const QuantizerSpec& spec = {});
/// Ternary weights: threshold = factor * mean|w|; survivors keep sign and the
/// scope's mean surviving magnitude; everything else becomes 0.
Quantized ternarize(const Tensor& w, const QuantizerSpec& spec = QuantizerSpec::ternary());
/// Dispatch on spec.kind; `none` returns a detached copy with no scales.
Quantized quantize(const Tensor& w, const QuantizerSpec& spec);

struct Int8Quantized {
  Tensor q;  // integer-valued, in [-127, 127]
  float scale = 1.0F;
  Tensor dequantized() const;
};

/// Symmetric INT8: s = max|x| / 127 (1 when x is all zeros), q = clamp(round(x/s)).
/// Rounds half away from zero.
Int8Quantized quantize_activation_int8(const Tensor& x);

/// Quantizes on forward, passes the gradient straight through on backward
/// (zeroed beyond ste_clip when set). `none` returns w itself.
Tensor quantize_ste(const Tensor& w_latent, const QuantizerSpec& spec);
/// INT8 fake quantization with identity gradient.
Tensor fake_quant_int8(const Tensor& x);

// ---------------------------------------------------------------------------
// Bit-packed storage.

/// Bits per element of a packed payload: 1 (binary), 2 (ternary), 8 (int8),
/// or 32 (raw little-endian float).
struct PackedTensor {
  std::uint8_t bits = 32;
  Granularity granularity = Granularity::kPerTensor;
  Shape shape;
  std::vector<float> scales;
  std::vector<std::uint8_t> payload;

  std::size_t numel() const { return shape_numel(shape); }
  /// True for elements stored as 0. Only meaningful for 2-bit payloads.
  std::vector<bool> zero_mask() const;
};

std::size_t packed_byte_length(std::size_t numel, int bits);

/// Encodes `q` against its codebook. 1-bit: bit b of byte k is element 8k+b,
/// set for +alpha. 2-bit: four codes per byte, element 4k+j in bits 2j..2j+1,
/// codes 00 = 0, 01 = +alpha, 10 = -alpha. 8-bit: one int8 per byte.
/// 32-bit: raw floats, `alpha` ignored. Throws CodecError for values outside
/// the codebook.
PackedTensor pack(const Tensor& q, const std::vector<float>& alpha, int bits,
                  Granularity granularity = Granularity::kPerTensor);

struct Unpacked {
  Tensor q;
  std::vector<float> alpha;
};
Unpacked unpack(const PackedTensor& packed);

// ---------------------------------------------------------------------------
// Model-size accounting.

struct ParamEntry {
  std::string name;
  std::size_t element_count = 0;
  int bits = 32;
  /// Marks the entry as scale overhead (e.g. alpha values) rather than weights.
  bool is_scale_overhead_counted = false;
};

using ParamInventory = std::vector<ParamEntry>;

struct SizeReport {
  double bytes = 0.0;                ///< everything, scales included
  double bytes_without_scales = 0.0;
  double fp32_bytes = 0.0;           ///< non-scale entries at 32 bits
  double ratio = 0.0;                ///< fp32_bytes / bytes_without_scales
  double megabytes() const { return bytes / (1024.0 * 1024.0); }
};

SizeReport model_size(const ParamInventory& inventory);

/// BERT-base layout (embeddings, 12 encoder layers, pooler). Weight matrices
/// and embeddings take `weight_bits`; biases and layernorm stay 32-bit.
ParamInventory bert_base_inventory(int weight_bits, bool count_scales = false);

// ---------------------------------------------------------------------------
// Checkpoint segment records:
//   u32 name length, name bytes (UTF-8), u8 bits, u8 granularity,
//   u32 rank, u32 dims[rank], u32 scale count, f32 scales[],
//   u32 payload length, payload bytes. Little-endian throughout.

struct NamedPacked {
  std::string name;
  PackedTensor tensor;
};

void write_u32(std::ostream& out, std::uint32_t value);
void write_f32(std::ostream& out, float value);
void write_segment(std::ostream& out, const NamedPacked& record);

/// Tracks the absolute byte offset so format errors can point at it.
class SegmentReader {
 public:
  explicit SegmentReader(std::istream& in) : in_(in) {}
  std::uint8_t read_u8();
  std::uint32_t read_u32();
  float read_f32();
  std::string read_bytes(std::size_t n);
  NamedPacked read_segment();
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace xtc

#include "xtc/quantization.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "xtc/errors.hpp"

namespace xtc {

const char* to_string(QuantKind kind) {
  switch (kind) {
    case QuantKind::kNone: return "none";
    case QuantKind::kBinary: return "binary";
    case QuantKind::kTernary: return "ternary";
    case QuantKind::kInt8Activation: return "int8_activation";
  }
  return "none";
}

QuantKind parse_quant_kind(const std::string& text) {
  if (text == "none" || text == "32") return QuantKind::kNone;
  if (text == "binary" || text == "1") return QuantKind::kBinary;
  if (text == "ternary" || text == "2") return QuantKind::kTernary;
  if (text == "int8_activation" || text == "8") return QuantKind::kInt8Activation;
  throw ConfigError("unknown quantizer kind '" + text + "'");
}

int QuantizerSpec::bits() const {
  switch (kind) {
    case QuantKind::kBinary: return 1;
    case QuantKind::kTernary: return 2;
    case QuantKind::kInt8Activation: return 8;
    case QuantKind::kNone: break;
  }
  return 32;
}

void QuantizerSpec::validate(std::size_t weight_rank) const {
  if (!(ternary_threshold_factor > 0.0F)) {
    throw ConfigError("must be > 0", "ternary_threshold_factor");
  }
  if (granularity == Granularity::kPerRow && weight_rank != 2) {
    throw ConfigError("per_row granularity requires a 2-D weight", "granularity");
  }
  if (ste_clip && !(*ste_clip > 0.0F)) throw ConfigError("must be > 0", "ste_clip");
}

namespace {

struct Scopes {
  std::size_t count;
  std::size_t size;
};

Scopes scopes_for(const Tensor& w, const QuantizerSpec& spec) {
  if (!w.defined() || w.numel() == 0) {
    throw DimensionError("quantize: empty tensor");
  }
  if (spec.granularity == Granularity::kPerRow) {
    if (w.rank() != 2) throw DimensionError("quantize: per_row requires a 2-D weight");
    return {w.dim(0), w.dim(1)};
  }
  return {1, w.numel()};
}

// Double accumulation makes alpha exact on codebook inputs, so quantizing an
// already quantized tensor reproduces it bit for bit.
float mean_abs(const float* v, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::fabs(static_cast<double>(v[i]));
  return static_cast<float>(s / static_cast<double>(n));
}

}  // namespace

Quantized binarize(const Tensor& w, const QuantizerSpec& spec) {
  const auto [count, size] = scopes_for(w, spec);
  const auto wd = w.data();
  std::vector<float> q(w.numel());
  std::vector<float> alpha(count);
  for (std::size_t s = 0; s < count; ++s) {
    const float* src = wd.data() + s * size;
    const float a = mean_abs(src, size);
    alpha[s] = a;
    for (std::size_t i = 0; i < size; ++i) q[s * size + i] = src[i] >= 0.0F ? a : -a;
  }
  return {Tensor(w.shape(), std::move(q)), std::move(alpha), {}};
}

Quantized ternarize(const Tensor& w, const QuantizerSpec& spec) {
  const auto [count, size] = scopes_for(w, spec);
  const auto wd = w.data();
  std::vector<float> q(w.numel(), 0.0F);
  std::vector<float> alpha(count, 0.0F);
  std::vector<float> delta(count, 0.0F);
  for (std::size_t s = 0; s < count; ++s) {
    const float* src = wd.data() + s * size;
    const float d = spec.ternary_threshold_factor * mean_abs(src, size);
    delta[s] = d;
    double kept = 0.0;
    std::size_t survivors = 0;
    for (std::size_t i = 0; i < size; ++i) {
      if (std::fabs(src[i]) > d) {
        kept += std::fabs(static_cast<double>(src[i]));
        ++survivors;
      }
    }
    if (survivors == 0) continue;
    const float a = static_cast<float>(kept / static_cast<double>(survivors));
    alpha[s] = a;
    for (std::size_t i = 0; i < size; ++i) {
      if (std::fabs(src[i]) > d) q[s * size + i] = src[i] >= 0.0F ? a : -a;
    }
  }
  return {Tensor(w.shape(), std::move(q)), std::move(alpha), std::move(delta)};
}

Quantized quantize(const Tensor& w, const QuantizerSpec& spec) {
  switch (spec.kind) {
    case QuantKind::kBinary: return binarize(w, spec);
    case QuantKind::kTernary: return ternarize(w, spec);
    case QuantKind::kInt8Activation: {
      auto r = quantize_activation_int8(w);
      return {r.dequantized(), {r.scale}, {}};
    }
    case QuantKind::kNone: break;
  }
  return {w.detach(), {}, {}};
}

Tensor Int8Quantized::dequantized() const {
  std::vector<float> out(q.data().begin(), q.data().end());
  for (auto& v : out) v *= scale;
  return Tensor(q.shape(), std::move(out));
}

Int8Quantized quantize_activation_int8(const Tensor& x) {
  if (!x.defined() || x.numel() == 0) throw DimensionError("int8: empty tensor");
  float lanes[16] = {};
  const auto xs = x.data();
  std::size_t i0 = 0;
  for (; i0 + 16 <= xs.size(); i0 += 16)
    for (std::size_t j = 0; j < 16; ++j) {
      const float a = std::fabs(xs[i0 + j]);
      lanes[j] = a > lanes[j] ? a : lanes[j];
    }
  for (; i0 < xs.size(); ++i0) lanes[0] = std::max(lanes[0], std::fabs(xs[i0]));
  const float max_abs = *std::max_element(lanes, lanes + 16);
  const float s = max_abs > 0.0F ? max_abs / 127.0F : 1.0F;
  std::vector<float> q(x.numel());
  const auto xd = x.data();
  // x/s evaluated as x*127/max in double so that exact halves stay exact;
  // std::round rounds half away from zero.
  const double inv = max_abs > 0.0F ? 127.0 / static_cast<double>(max_abs) : 1.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double v = static_cast<double>(xd[i]) * inv;
    const double t = std::trunc(v);
    const double frac = v - t;
    double r = t + (frac >= 0.5 ? 1.0 : 0.0) - (frac <= -0.5 ? 1.0 : 0.0);
    r = r > 127.0 ? 127.0 : r;
    r = r < -127.0 ? -127.0 : r;
    q[i] = static_cast<float>(r);
  }
  return {Tensor(x.shape(), std::move(q)), s};
}

Tensor quantize_ste(const Tensor& w_latent, const QuantizerSpec& spec) {
  if (spec.kind == QuantKind::kNone) return w_latent;
  const auto clip = spec.ste_clip;
  return custom_grad(
      {w_latent}, w_latent.shape(),
      [spec](std::span<const Tensor> in) {
        auto q = quantize(in[0], spec).q;
        return std::vector<float>(q.data().begin(), q.data().end());
      },
      [clip](std::span<const float> g, std::span<const Tensor> in) {
        std::vector<float> out(g.begin(), g.end());
        if (clip) {
          const auto w = in[0].data();
          for (std::size_t i = 0; i < out.size(); ++i)
            if (std::fabs(w[i]) > *clip) out[i] = 0.0F;
        }
        return std::vector<std::vector<float>>{std::move(out)};
      },
      "quantize_ste");
}

Tensor fake_quant_int8(const Tensor& x) {
  return custom_grad(
      {x}, x.shape(),
      [](std::span<const Tensor> in) {
        auto r = quantize_activation_int8(in[0]);
        std::vector<float> out(r.q.data().begin(), r.q.data().end());
        for (auto& v : out) v *= r.scale;
        return out;
      },
      identity_grad(), "fake_quant_int8");
}

// ---------------------------------------------------------------------------

std::vector<bool> PackedTensor::zero_mask() const {
  std::vector<bool> mask(numel(), false);
  if (bits != 2) return mask;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = ((payload[i / 4] >> ((i % 4) * 2)) & 0x3U) == 0;
  }
  return mask;
}

std::size_t packed_byte_length(std::size_t numel, int bits) {
  return (numel * static_cast<std::size_t>(bits) + 7) / 8;
}

namespace {

std::size_t scope_size(const Shape& shape, Granularity g, std::size_t n_scales) {
  const std::size_t n = shape_numel(shape);
  if (g == Granularity::kPerRow) {
    if (shape.size() != 2) throw CodecError("pack: per_row requires a 2-D tensor");
    if (n_scales != shape[0]) throw CodecError("pack: need one scale per row");
    return shape[1];
  }
  if (n_scales != 1) throw CodecError("pack: per_tensor needs exactly one scale");
  return n;
}

[[noreturn]] void outside_codebook(std::size_t i, float v) {
  throw CodecError("pack: element " + std::to_string(i) + " (" + std::to_string(v) +
                   ") is outside the codebook");
}

}  // namespace

PackedTensor pack(const Tensor& q, const std::vector<float>& alpha, int bits,
                  Granularity granularity) {
  PackedTensor out;
  out.bits = static_cast<std::uint8_t>(bits);
  out.granularity = granularity;
  out.shape = q.shape();
  const std::size_t n = q.numel();
  const auto qd = q.data();
  if (bits == 32) {
    out.granularity = Granularity::kPerTensor;
    out.payload.resize(n * 4);
    for (std::size_t i = 0; i < n; ++i) {
      const auto u = std::bit_cast<std::uint32_t>(qd[i]);
      for (int b = 0; b < 4; ++b) out.payload[i * 4 + b] = static_cast<std::uint8_t>(u >> (8 * b));
    }
    return out;
  }
  if (bits != 1 && bits != 2 && bits != 8) {
    throw CodecError("pack: unsupported bit width " + std::to_string(bits));
  }
  const std::size_t scope = n == 0 ? 1 : scope_size(q.shape(), granularity, alpha.size());
  out.scales = alpha;
  out.payload.assign(packed_byte_length(n, bits), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const float a = alpha[i / scope];
    const float v = qd[i];
    if (bits == 1) {
      if (v == a) out.payload[i / 8] |= static_cast<std::uint8_t>(1U << (i % 8));
      else if (v != -a) outside_codebook(i, v);
    } else if (bits == 2) {
      std::uint8_t code = 0;
      if (v == 0.0F) code = 0;
      else if (v == a) code = 1;
      else if (v == -a) code = 2;
      else outside_codebook(i, v);
      out.payload[i / 4] |= static_cast<std::uint8_t>(code << ((i % 4) * 2));
    } else {
      const float k = a > 0.0F ? std::round(v / a) : 0.0F;
      if (k < -127.0F || k > 127.0F || k * a != v) outside_codebook(i, v);
      out.payload[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(k));
    }
  }
  return out;
}

Unpacked unpack(const PackedTensor& packed) {
  const std::size_t n = packed.numel();
  if (packed.payload.size() != packed_byte_length(n, packed.bits)) {
    throw CodecError("unpack: payload holds " + std::to_string(packed.payload.size()) +
                     " bytes, expected " + std::to_string(packed_byte_length(n, packed.bits)));
  }
  std::vector<float> q(n);
  if (packed.bits == 32) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(packed.payload[i * 4 + b]) << (8 * b);
      q[i] = std::bit_cast<float>(u);
    }
    return {Tensor(packed.shape, std::move(q)), {}};
  }
  const std::size_t scope = n == 0 ? 1 : scope_size(packed.shape, packed.granularity, packed.scales.size());
  for (std::size_t i = 0; i < n; ++i) {
    const float a = packed.scales[i / scope];
    if (packed.bits == 1) {
      const bool pos = (packed.payload[i / 8] >> (i % 8)) & 1U;
      // alpha == 0 encodes an all-zero scope; keep it +0 rather than -0.
      q[i] = pos || a == 0.0F ? a : -a;
    } else if (packed.bits == 2) {
      const unsigned code = (packed.payload[i / 4] >> ((i % 4) * 2)) & 0x3U;
      if (code == 3) throw CodecError("unpack: invalid 2-bit code at element " + std::to_string(i));
      q[i] = code == 0 ? 0.0F : code == 1 ? a : -a;
    } else if (packed.bits == 8) {
      q[i] = static_cast<float>(static_cast<std::int8_t>(packed.payload[i])) * a;
    } else {
      throw CodecError("unpack: unsupported bit width " + std::to_string(packed.bits));
    }
  }
  return {Tensor(packed.shape, std::move(q)), packed.scales};
}

// ---------------------------------------------------------------------------

SizeReport model_size(const ParamInventory& inventory) {
  if (inventory.empty()) throw ConfigError("model_size: empty inventory");
  SizeReport r;
  for (const auto& e : inventory) {
    if (e.element_count == 0) throw ConfigError("element_count must be > 0", e.name);
    if (e.bits != 1 && e.bits != 2 && e.bits != 8 && e.bits != 32) {
      throw ConfigError("bits must be one of 1, 2, 8, 32", e.name);
    }
    const double b = static_cast<double>(e.element_count) * e.bits / 8.0;
    r.bytes += b;
    if (!e.is_scale_overhead_counted) {
      r.bytes_without_scales += b;
      r.fp32_bytes += static_cast<double>(e.element_count) * 4.0;
    }
  }
  r.ratio = r.bytes_without_scales > 0.0 ? r.fp32_bytes / r.bytes_without_scales : 0.0;
  return r;
}

ParamInventory bert_base_inventory(int weight_bits, bool count_scales) {
  constexpr std::size_t kVocab = 30522;
  constexpr std::size_t kHidden = 768;
  constexpr std::size_t kFfn = 3072;
  constexpr std::size_t kPositions = 512;
  constexpr std::size_t kTypes = 2;
  constexpr int kLayers = 12;
  ParamInventory inv;
  auto matrix = [&](const std::string& name, std::size_t n) {
    inv.push_back({name, n, weight_bits, false});
    if (count_scales && weight_bits < 32) inv.push_back({name + ".alpha", 1, 32, true});
  };
  auto fp32 = [&](const std::string& name, std::size_t n) { inv.push_back({name, n, 32, false}); };
  matrix("embeddings.word", kVocab * kHidden);
  matrix("embeddings.position", kPositions * kHidden);
  matrix("embeddings.token_type", kTypes * kHidden);
  fp32("embeddings.layernorm", 2 * kHidden);
  for (int l = 0; l < kLayers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (const char* m : {"q", "k", "v", "o"}) {
      matrix(p + m, kHidden * kHidden);
      fp32(p + m + ".bias", kHidden);
    }
    matrix(p + "ffn_up", kHidden * kFfn);
    fp32(p + "ffn_up.bias", kFfn);
    matrix(p + "ffn_down", kFfn * kHidden);
    fp32(p + "ffn_down.bias", kHidden);
    fp32(p + "layernorm1", 2 * kHidden);
    fp32(p + "layernorm2", 2 * kHidden);
  }
  matrix("pooler", kHidden * kHidden);
  fp32("pooler.bias", kHidden);
  return inv;
}

// ---------------------------------------------------------------------------

void write_u32(std::ostream& out, std::uint32_t value) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((value >> (8 * i)) & 0xFFU);
  out.write(b, 4);
}

void write_f32(std::ostream& out, float value) { write_u32(out, std::bit_cast<std::uint32_t>(value)); }

void write_segment(std::ostream& out, const NamedPacked& record) {
  const auto& t = record.tensor;
  write_u32(out, static_cast<std::uint32_t>(record.name.size()));
  out.write(record.name.data(), static_cast<std::streamsize>(record.name.size()));
  out.put(static_cast<char>(t.bits));
  out.put(static_cast<char>(t.granularity));
  write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) write_u32(out, static_cast<std::uint32_t>(d));
  write_u32(out, static_cast<std::uint32_t>(t.scales.size()));
  for (float s : t.scales) write_f32(out, s);
  write_u32(out, static_cast<std::uint32_t>(t.payload.size()));
  out.write(reinterpret_cast<const char*>(t.payload.data()),
            static_cast<std::streamsize>(t.payload.size()));
}

std::string SegmentReader::read_bytes(std::size_t n) {
  std::string s(n, '\0');
  in_.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError("unexpected end of file", offset_ + static_cast<std::uint64_t>(in_.gcount()));
  }
  offset_ += n;
  return s;
}

std::uint8_t SegmentReader::read_u8() { return static_cast<std::uint8_t>(read_bytes(1)[0]); }

std::uint32_t SegmentReader::read_u32() {
  const auto s = read_bytes(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
  return v;
}

float SegmentReader::read_f32() { return std::bit_cast<float>(read_u32()); }

NamedPacked SegmentReader::read_segment() {
  constexpr std::uint32_t kMaxName = 4096;
  constexpr std::uint32_t kMaxRank = 8;
  NamedPacked rec;
  const auto start = offset_;
  const auto name_len = read_u32();
  if (name_len == 0 || name_len > kMaxName) throw FormatError("bad tensor name length", start);
  rec.name = read_bytes(name_len);
  auto& t = rec.tensor;
  const auto bits_at = offset_;
  t.bits = read_u8();
  if (t.bits != 1 && t.bits != 2 && t.bits != 8 && t.bits != 32) {
    throw FormatError("bad bit width " + std::to_string(t.bits) + " for '" + rec.name + "'", bits_at);
  }
  const auto gran_at = offset_;
  const auto gran = read_u8();
  if (gran > 1) throw FormatError("bad granularity for '" + rec.name + "'", gran_at);
  t.granularity = static_cast<Granularity>(gran);
  const auto rank_at = offset_;
  const auto rank = read_u32();
  if (rank > kMaxRank) throw FormatError("bad rank for '" + rec.name + "'", rank_at);
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(read_u32());
  const auto scales_at = offset_;
  const auto n_scales = read_u32();
  if (n_scales > shape_numel(t.shape) + 1) throw FormatError("bad scale count for '" + rec.name + "'", scales_at);
  for (std::uint32_t i = 0; i < n_scales; ++i) t.scales.push_back(read_f32());
  const auto payload_at = offset_;
  const auto len = read_u32();
  if (len != packed_byte_length(shape_numel(t.shape), t.bits)) {
    throw FormatError("payload length mismatch for '" + rec.name + "'", payload_at);
  }
  const auto bytes = read_bytes(len);
  t.payload.assign(bytes.begin(), bytes.end());
  return rec;
}

}  // namespace xtc

#include "xtc/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "xtc/errors.hpp"

namespace xtc {

void TransformerConfig::validate() const {
  auto positive = [](std::uint32_t v, const char* field) {
    if (v < 1) throw ConfigError("must be >= 1", std::string("model.") + field);
  };
  positive(num_layers, "num_layers");
  positive(hidden, "hidden");
  positive(heads, "heads");
  positive(ffn_dim, "ffn_dim");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  positive(num_classes, "num_classes");
  if (hidden % heads != 0) throw ConfigError("hidden must be divisible by heads", "model.heads");
  if (activation != Activation::kGelu && activation != Activation::kRelu) {
    throw ConfigError("unknown activation", "model.activation");
  }
  if (activation_bits != 8 && activation_bits != 32) {
    throw ConfigError("must be 8 or 32", "model.activation_bits");
  }
}

Tensor QuantMatrix::effective() const {
  Tensor w = quantize_ste(weight, spec);
  if (lora) w = add(w, matmul(lora->u, lora->v));
  return w;
}

Quantized QuantMatrix::quantized() const { return quantize(weight, spec); }

QuantPolicy QuantPolicy::uniform(const QuantizerSpec& spec, bool int8_activations) {
  return {spec, spec, spec, int8_activations};
}

namespace {

Tensor normal(Shape shape, std::mt19937_64& rng, float stddev) {
  return Tensor::randn(std::move(shape), rng, stddev, true);
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, float stddev) {
  return {{normal({in, out}, rng, stddev), {}, std::nullopt}, Tensor::zeros({out}, true)};
}

LayerNormParams make_ln(std::size_t d) {
  return {Tensor::full({d}, 1.0F, true), Tensor::zeros({d}, true)};
}

constexpr float kInitStd = 0.02F;

QuantMatrix clone_matrix(const QuantMatrix& m) {
  QuantMatrix out{m.weight.clone(), m.spec, std::nullopt};
  if (m.lora) out.lora = LoRaAdapter{m.lora->u.clone(), m.lora->v.clone()};
  return out;
}

Linear clone_linear(const Linear& l) { return {clone_matrix(l.w), l.bias.clone()}; }
LayerNormParams clone_ln(const LayerNormParams& p) { return {p.gain.clone(), p.bias.clone()}; }

EncoderLayer clone_layer(const EncoderLayer& l) {
  return {clone_linear(l.q),      clone_linear(l.k),      clone_linear(l.v),
          clone_linear(l.o),      clone_linear(l.ffn_up), clone_linear(l.ffn_down),
          clone_ln(l.ln_attn),    clone_ln(l.ln_ffn)};
}

template <typename Layer, typename Fn>
void for_each_linear(Layer& layer, Fn&& fn) {
  fn("q", layer.q);
  fn("k", layer.k);
  fn("v", layer.v);
  fn("o", layer.o);
  fn("ffn_up", layer.ffn_up);
  fn("ffn_down", layer.ffn_down);
}

}  // namespace

EncoderModel::EncoderModel(const TransformerConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.hidden;
  token_embedding = {normal({config.vocab_size, d}, rng, kInitStd), {}, std::nullopt};
  position_embedding = {normal({config.max_seq_len, d}, rng, kInitStd), {}, std::nullopt};
  ln_embed = make_ln(d);
  for (std::uint32_t i = 0; i < config.num_layers; ++i) {
    EncoderLayer layer;
    layer.q = make_linear(d, d, rng, kInitStd);
    layer.k = make_linear(d, d, rng, kInitStd);
    layer.v = make_linear(d, d, rng, kInitStd);
    layer.o = make_linear(d, d, rng, kInitStd);
    layer.ffn_up = make_linear(d, config.ffn_dim, rng, kInitStd);
    layer.ffn_down = make_linear(config.ffn_dim, d, rng, kInitStd);
    layer.ln_attn = make_ln(d);
    layer.ln_ffn = make_ln(d);
    layers.push_back(std::move(layer));
  }
  head_weight = normal({d, config.num_classes}, rng, kInitStd);
  head_bias = Tensor::zeros({config.num_classes}, true);
}

std::vector<std::pair<std::string, const QuantMatrix*>> EncoderModel::matrices() const {
  std::vector<std::pair<std::string, const QuantMatrix*>> out;
  out.emplace_back("embeddings.token", &token_embedding);
  out.emplace_back("embeddings.position", &position_embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    for_each_linear(layers[i], [&](const char* n, const Linear& l) { out.emplace_back(p + n, &l.w); });
  }
  return out;
}

std::vector<std::pair<std::string, QuantMatrix*>> EncoderModel::mutable_matrices() {
  std::vector<std::pair<std::string, QuantMatrix*>> out;
  for (auto& [name, m] : std::as_const(*this).matrices()) {
    out.emplace_back(name, const_cast<QuantMatrix*>(m));
  }
  return out;
}

std::vector<NamedParam> EncoderModel::parameters() const {
  std::vector<NamedParam> out;
  auto add_matrix = [&](const std::string& name, const QuantMatrix& m) {
    out.push_back({name + ".weight", m.weight, true});
    if (m.lora) {
      out.push_back({name + ".lora_u", m.lora->u, true});
      out.push_back({name + ".lora_v", m.lora->v, true});
    }
  };
  auto add_ln = [&](const std::string& name, const LayerNormParams& p) {
    out.push_back({name + ".gain", p.gain, false});
    out.push_back({name + ".bias", p.bias, false});
  };
  add_matrix("embeddings.token", token_embedding);
  add_matrix("embeddings.position", position_embedding);
  add_ln("embeddings.ln", ln_embed);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    for_each_linear(layers[i], [&](const char* n, const Linear& l) {
      add_matrix(p + n, l.w);
      out.push_back({p + n + ".bias", l.bias, false});
    });
    add_ln(p + "ln_attn", layers[i].ln_attn);
    add_ln(p + "ln_ffn", layers[i].ln_ffn);
  }
  out.push_back({"head.weight", head_weight, true});
  out.push_back({"head.bias", head_bias, false});
  return out;
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void EncoderModel::apply_policy(const QuantPolicy& policy) {
  token_embedding.spec = policy.embeddings;
  position_embedding.spec = policy.embeddings;
  for (auto& layer : layers) {
    for (auto* l : {&layer.q, &layer.k, &layer.v, &layer.o}) l->w.spec = policy.attention;
    layer.ffn_up.w.spec = policy.ffn;
    layer.ffn_down.w.spec = policy.ffn;
  }
  config_.activation_bits = policy.int8_activations ? 8 : 32;
}

void EncoderModel::set_requires_grad(bool value) {
  for (auto& p : parameters()) p.tensor.set_requires_grad(value);
}

void EncoderModel::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

EncoderModel EncoderModel::clone() const {
  EncoderModel out;
  out.config_ = config_;
  out.token_embedding = clone_matrix(token_embedding);
  out.position_embedding = clone_matrix(position_embedding);
  out.ln_embed = clone_ln(ln_embed);
  for (const auto& l : layers) out.layers.push_back(clone_layer(l));
  out.head_weight = head_weight.clone();
  out.head_bias = head_bias.clone();
  return out;
}

ParamInventory EncoderModel::inventory(bool count_scales) const {
  ParamInventory inv;
  for (const auto& [name, m] : matrices()) {
    const int bits = m->spec.bits();
    inv.push_back({name, m->weight.numel(), bits, false});
    if (count_scales && bits < 32) {
      const std::size_t scales =
          m->spec.granularity == Granularity::kPerRow ? m->weight.dim(0) : 1;
      inv.push_back({name + ".alpha", scales, 32, true});
    }
    if (m->lora) {
      inv.push_back({name + ".lora", m->lora->u.numel() + m->lora->v.numel(), 32, false});
    }
  }
  for (const auto& p : parameters()) {
    if (!p.decay) inv.push_back({p.name, p.tensor.numel(), 32, false});
  }
  inv.push_back({"head.weight", head_weight.numel(), 32, false});
  return inv;
}

// ---------------------------------------------------------------------------

Tensor quantized_linear(const Tensor& x, const Linear& layer, bool int8_activations) {
  const bool quantized = layer.w.spec.kind != QuantKind::kNone;
  const Tensor in = quantized && int8_activations ? fake_quant_int8(x) : x;
  return add(matmul(in, layer.w.effective()), layer.bias);
}

ModelOutputs forward(const EncoderModel& model, const TokenBatch& batch) {
  const auto& cfg = model.config();
  const std::size_t B = batch.batch;
  const std::size_t len = batch.seq_len;
  if (B == 0 || len == 0 || batch.ids.size() != B * len) {
    throw InputError("forward: token batch is not [batch x seq_len]");
  }
  if (len > cfg.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(len) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (int id : batch.ids) {
    if (id < 0 || static_cast<std::uint32_t>(id) >= cfg.vocab_size) {
      throw InputError("forward: token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  const bool int8 = cfg.activation_bits == 8;
  const std::size_t heads = cfg.heads;
  const float inv_sqrt_dk = 1.0F / std::sqrt(static_cast<float>(cfg.hidden / heads));

  std::vector<int> positions(B * len);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % len);

  Tensor x = add(embedding(model.token_embedding.effective(), batch.ids),
                 embedding(model.position_embedding.effective(), positions));
  x = layernorm(x, model.ln_embed.gain, model.ln_embed.bias);

  ModelOutputs out;
  for (const auto& layer : model.layers) {
    const Tensor q = split_heads(quantized_linear(x, layer.q, int8), B, heads);
    const Tensor k = split_heads(quantized_linear(x, layer.k, int8), B, heads);
    const Tensor v = split_heads(quantized_linear(x, layer.v, int8), B, heads);
    const Tensor scores = scale(matmul(q, k, /*transpose_b=*/true), inv_sqrt_dk);
    const Tensor probs = softmax(scores);
    const Tensor ctx = merge_heads(matmul(probs, v));
    const Tensor h1 = layernorm(add(x, quantized_linear(ctx, layer.o, int8)),
                                layer.ln_attn.gain, layer.ln_attn.bias);
    Tensor up = quantized_linear(h1, layer.ffn_up, int8);
    up = cfg.activation == Activation::kGelu ? gelu(up) : relu(up);
    x = layernorm(add(h1, quantized_linear(up, layer.ffn_down, int8)), layer.ln_ffn.gain,
                  layer.ln_ffn.bias);
    out.hiddens.push_back(x);
    out.attentions.push_back(probs);
    out.attention_scores.push_back(scores);
  }
  out.logits = add(matmul(mean_pool(x, B), model.head_weight), model.head_bias);
  return out;
}

// ---------------------------------------------------------------------------

const char* to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kSkip: return "skip";
    case SelectionStrategy::kTop: return "top";
    case SelectionStrategy::kBottom: return "bottom";
    case SelectionStrategy::kExplicit: return "explicit";
  }
  return "skip";
}

SelectionStrategy parse_selection_strategy(const std::string& text) {
  if (text == "skip") return SelectionStrategy::kSkip;
  if (text == "top") return SelectionStrategy::kTop;
  if (text == "bottom") return SelectionStrategy::kBottom;
  if (text == "explicit") return SelectionStrategy::kExplicit;
  throw ConfigError("unknown layer selection strategy '" + text + "'");
}

LayerSelection LayerSelection::make(SelectionStrategy strategy, std::uint32_t teacher_layers,
                                    std::uint32_t student_layers) {
  if (student_layers < 1 || student_layers > teacher_layers) {
    throw ConfigError("student depth must be in [1, teacher depth]", "student.layers");
  }
  LayerSelection sel{strategy, {}};
  const std::uint32_t n = student_layers;
  const std::uint32_t L = teacher_layers;
  switch (strategy) {
    case SelectionStrategy::kSkip: {
      const std::uint32_t stride = L / n;
      if (L % n == 0) {
        for (std::uint32_t i = 1; i <= n; ++i) sel.indices.push_back(i * stride);
      } else {
        const std::uint32_t span = stride * (n - 1) + 1;
        const std::uint32_t start = 1 + (L - span + 1) / 2;
        for (std::uint32_t i = 0; i < n; ++i) sel.indices.push_back(start + i * stride);
      }
      break;
    }
    case SelectionStrategy::kTop:
      for (std::uint32_t i = L - n + 1; i <= L; ++i) sel.indices.push_back(i);
      break;
    case SelectionStrategy::kBottom:
      for (std::uint32_t i = 1; i <= n; ++i) sel.indices.push_back(i);
      break;
    case SelectionStrategy::kExplicit:
      throw ConfigError("explicit selection needs an index list", "student.strategy");
  }
  return sel;
}

LayerSelection LayerSelection::explicit_indices(std::vector<std::uint32_t> indices) {
  return {SelectionStrategy::kExplicit, std::move(indices)};
}

void LayerSelection::validate(std::uint32_t teacher_layers) const {
  if (indices.empty()) throw ConfigError("empty layer selection", "student.indices");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 1 || indices[i] > teacher_layers) {
      throw ConfigError("index " + std::to_string(indices[i]) + " outside [1, " +
                            std::to_string(teacher_layers) + "]",
                        "student.indices");
    }
    if (i > 0 && indices[i] <= indices[i - 1]) {
      throw ConfigError("indices must be strictly increasing", "student.indices");
    }
  }
}

EncoderModel init_student_from_teacher(const EncoderModel& teacher,
                                       const LayerSelection& selection) {
  const auto& tc = teacher.config();
  selection.validate(tc.num_layers);
  EncoderModel student = teacher.clone();
  student.layers.clear();
  for (auto idx : selection.indices) {
    student.layers.push_back(clone_layer(teacher.layers[idx - 1]));
  }
  student.mutable_config().num_layers = static_cast<std::uint32_t>(selection.indices.size());
  return student;
}

void attach_lora(EncoderModel& model, std::size_t rank, float init_scale, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("must be >= 1", "lora.rank");
  std::mt19937_64 rng(seed);
  for (auto& [name, m] : model.mutable_matrices()) {
    if (m->spec.kind == QuantKind::kNone) continue;
    const std::size_t din = m->weight.dim(0);
    const std::size_t dout = m->weight.dim(1);
    m->lora = LoRaAdapter{Tensor::randn({din, rank}, rng, init_scale, true),
                          Tensor::zeros({rank, dout}, true)};
  }
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'X', 'T', 'C', '1'};

NamedPacked raw_record(const std::string& name, const Tensor& t) {
  return {name, pack(t, {}, 32)};
}

std::vector<std::uint32_t> config_fields(const TransformerConfig& c) {
  return {c.num_layers, c.hidden,      c.heads,       c.ffn_dim,
          c.vocab_size, c.max_seq_len, c.num_classes, static_cast<std::uint32_t>(c.activation),
          c.activation_bits};
}

}  // namespace

void write_checkpoint(const EncoderModel& model, std::ostream& out) {
  std::vector<NamedPacked> records;
  for (const auto& [name, m] : model.matrices()) {
    const int bits = m->spec.bits();
    if (bits < 8) {
      const auto qz = m->quantized();
      records.push_back({name + ".weight", pack(qz.q, qz.alpha, bits, m->spec.granularity)});
    } else {
      records.push_back(raw_record(name + ".weight", m->weight));
    }
    if (m->lora) {
      records.push_back(raw_record(name + ".lora_u", m->lora->u));
      records.push_back(raw_record(name + ".lora_v", m->lora->v));
    }
  }
  for (const auto& p : model.parameters()) {
    if (p.name.ends_with(".weight") && p.name != "head.weight") continue;
    if (p.name.ends_with(".lora_u") || p.name.ends_with(".lora_v")) continue;
    records.push_back(raw_record(p.name, p.tensor));
  }
  out.write(kMagic, 4);
  for (auto f : config_fields(model.config())) write_u32(out, f);
  write_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) write_segment(out, r);
}

EncoderModel read_checkpoint(std::istream& in) {
  SegmentReader reader(in);
  if (reader.read_bytes(4) != std::string(kMagic, 4)) throw FormatError("bad magic", 0);
  TransformerConfig cfg;
  const auto cfg_at = reader.offset();
  cfg.num_layers = reader.read_u32();
  cfg.hidden = reader.read_u32();
  cfg.heads = reader.read_u32();
  cfg.ffn_dim = reader.read_u32();
  cfg.vocab_size = reader.read_u32();
  cfg.max_seq_len = reader.read_u32();
  cfg.num_classes = reader.read_u32();
  cfg.activation = static_cast<Activation>(reader.read_u32());
  cfg.activation_bits = reader.read_u32();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid config block: ") + e.what(), cfg_at);
  }
  const auto count = reader.read_u32();
  std::map<std::string, std::pair<NamedPacked, std::uint64_t>> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = reader.offset();
    auto rec = reader.read_segment();
    auto name = rec.name;
    records.emplace(std::move(name), std::make_pair(std::move(rec), at));
  }

  EncoderModel model(cfg, 0);
  auto take = [&](const std::string& name, const Shape& expected) -> std::pair<Unpacked, const PackedTensor*> {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError("missing tensor '" + name + "'", reader.offset());
    const auto& [rec, at] = it->second;
    if (rec.tensor.shape != expected) {
      throw FormatError("tensor '" + name + "' has shape " + shape_str(rec.tensor.shape) +
                            ", expected " + shape_str(expected),
                        at);
    }
    try {
      return {unpack(rec.tensor), &rec.tensor};
    } catch (const CodecError& e) {
      throw FormatError(e.what(), at);
    }
  };
  auto load_param = [&](const std::string& name, Tensor& dst) {
    auto [u, packed] = take(name, dst.shape());
    dst = Tensor(dst.shape(), std::vector<float>(u.q.data().begin(), u.q.data().end()), true);
  };
  for (auto& [name, m] : model.mutable_matrices()) {
    auto [u, packed] = take(name + ".weight", m->weight.shape());
    m->weight = Tensor(m->weight.shape(),
                       std::vector<float>(u.q.data().begin(), u.q.data().end()), true);
    m->spec = {};
    if (packed->bits == 1) m->spec = QuantizerSpec::binary(packed->granularity);
    else if (packed->bits == 2) m->spec = QuantizerSpec::ternary(packed->granularity);
    if (records.count(name + ".lora_u")) {
      const auto& us = records.at(name + ".lora_u").first.tensor.shape;
      if (us.size() != 2) throw FormatError("bad LoRa shape for '" + name + "'", reader.offset());
      LoRaAdapter a{Tensor::zeros({m->weight.dim(0), us[1]}, true),
                    Tensor::zeros({us[1], m->weight.dim(1)}, true)};
      load_param(name + ".lora_u", a.u);
      load_param(name + ".lora_v", a.v);
      m->lora = std::move(a);
    }
  }
  auto load_ln = [&](const std::string& name, LayerNormParams& p) {
    load_param(name + ".gain", p.gain);
    load_param(name + ".bias", p.bias);
  };
  load_ln("embeddings.ln", model.ln_embed);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto& layer = model.layers[i];
    for_each_linear(layer, [&](const char* n, Linear& l) { load_param(p + n + ".bias", l.bias); });
    load_ln(p + "ln_attn", layer.ln_attn);
    load_ln(p + "ln_ffn", layer.ln_ffn);
  }
  load_param("head.weight", model.head_weight);
  load_param("head.bias", model.head_bias);
  return model;
}

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_checkpoint(model, out);
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

EncoderModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return read_checkpoint(in);
}

}  // namespace xtc

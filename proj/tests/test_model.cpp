#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <sstream>

#include "xtc/errors.hpp"
#include "xtc/model.hpp"

using namespace xtc;

namespace {

TransformerConfig tiny(std::uint32_t layers = 4) {
  TransformerConfig c;
  c.num_layers = layers;
  c.hidden = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.vocab_size = 40;
  c.max_seq_len = 8;
  c.num_classes = 3;
  return c;
}

// Perturbs every parameter so biases and gains are not trivially 0 or 1.
EncoderModel randomized(const TransformerConfig& c, std::uint64_t seed) {
  EncoderModel m(c, seed);
  std::mt19937_64 rng(seed + 100);
  std::normal_distribution<float> n(0.0F, 0.1F);
  for (auto& p : m.parameters()) {
    for (auto& v : p.tensor.mutable_data()) v += n(rng);
  }
  return m;
}

TokenBatch tokens(std::size_t batch, std::size_t len, std::uint32_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
  TokenBatch b{{}, batch, len};
  for (std::size_t i = 0; i < batch * len; ++i) b.ids.push_back(d(rng));
  return b;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

using Mat = std::vector<std::vector<double>>;

Mat linear_ref(const Mat& x, const Linear& l) {
  const std::size_t din = l.w.weight.dim(0), dout = l.w.weight.dim(1);
  Mat y(x.size(), std::vector<double>(dout));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t j = 0; j < dout; ++j) {
      double s = l.bias.at(j);
      for (std::size_t i = 0; i < din; ++i) s += x[r][i] * l.w.weight.at(i * dout + j);
      y[r][j] = s;
    }
  return y;
}

void layernorm_ref(Mat& x, const LayerNormParams& p) {
  for (auto& row : x) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= row.size();
    for (double v : row) var += (v - mu) * (v - mu);
    var /= row.size();
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * p.gain.at(j) + p.bias.at(j);
  }
}

// Plain full-precision encoder for one sequence, written from scratch.
std::vector<double> reference_logits(const EncoderModel& m, const std::vector<int>& ids) {
  const auto& c = m.config();
  const std::size_t d = c.hidden, l = ids.size(), h = c.heads, dk = d / h;
  Mat x(l, std::vector<double>(d));
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x[t][j] = m.token_embedding.weight.at(ids[t] * d + j) +
                m.position_embedding.weight.at(t * d + j);
  layernorm_ref(x, m.ln_embed);
  for (const auto& layer : m.layers) {
    const auto q = linear_ref(x, layer.q), k = linear_ref(x, layer.k), v = linear_ref(x, layer.v);
    Mat ctx(l, std::vector<double>(d));
    for (std::size_t head = 0; head < h; ++head) {
      for (std::size_t i = 0; i < l; ++i) {
        std::vector<double> s(l);
        double mx = -1e300;
        for (std::size_t j = 0; j < l; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < dk; ++e) dot += q[i][head * dk + e] * k[j][head * dk + e];
          s[j] = dot / std::sqrt(double(dk));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& v2 : s) z += (v2 = std::exp(v2 - mx));
        for (std::size_t j = 0; j < l; ++j)
          for (std::size_t e = 0; e < dk; ++e) ctx[i][head * dk + e] += s[j] / z * v[j][head * dk + e];
      }
    }
    auto o = linear_ref(ctx, layer.o);
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t j = 0; j < d; ++j) o[t][j] += x[t][j];
    layernorm_ref(o, layer.ln_attn);
    auto up = linear_ref(o, layer.ffn_up);
    for (auto& row : up)
      for (auto& u : row)
        u = 0.5 * u * (1 + std::tanh(std::sqrt(2 / M_PI) * (u + 0.044715 * u * u * u)));
    auto down = linear_ref(up, layer.ffn_down);
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t j = 0; j < d; ++j) down[t][j] += o[t][j];
    layernorm_ref(down, layer.ln_ffn);
    x = down;
  }
  std::vector<double> logits(c.num_classes);
  for (std::size_t k = 0; k < c.num_classes; ++k) {
    double s = m.head_bias.at(k);
    for (std::size_t j = 0; j < d; ++j) {
      double pooled = 0;
      for (std::size_t t = 0; t < l; ++t) pooled += x[t][j];
      s += pooled / l * m.head_weight.at(j * c.num_classes + k);
    }
    logits[k] = s;
  }
  return logits;
}

}  // namespace

TEST_CASE("full-precision forward matches a from-scratch reference encoder") {
  const auto m = randomized(tiny(2), 3);
  const auto b = tokens(3, 6, 40, 4);
  const auto out = forward(m, b);
  CHECK(out.hiddens.size() == 2);
  CHECK(out.attentions[0].shape() == Shape{3, 2, 6, 6});
  for (std::size_t s = 0; s < b.batch; ++s) {
    std::vector<int> ids(b.ids.begin() + s * 6, b.ids.begin() + (s + 1) * 6);
    const auto ref = reference_logits(m, ids);
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK(out.logits.at(s * 3 + k) == doctest::Approx(ref[k]).epsilon(1e-4));
  }
}

TEST_CASE("forward rejects bad input") {
  EncoderModel m(tiny(1), 1);
  CHECK_THROWS_AS(forward(m, TokenBatch{{1, 2, 40}, 1, 3}), InputError);
  CHECK_THROWS_AS(forward(m, TokenBatch{{1, 2}, 1, 3}), InputError);
  CHECK_THROWS_AS(forward(m, tokens(1, 9, 40, 1)), InputError);
}

TEST_CASE("layer selection rules") {
  using V = std::vector<std::uint32_t>;
  CHECK(LayerSelection::make(SelectionStrategy::kSkip, 12, 5).indices == V{3, 5, 7, 9, 11});
  CHECK(LayerSelection::make(SelectionStrategy::kSkip, 12, 4).indices == V{3, 6, 9, 12});
  CHECK(LayerSelection::make(SelectionStrategy::kSkip, 12, 6).indices == V{2, 4, 6, 8, 10, 12});
  CHECK(LayerSelection::make(SelectionStrategy::kSkip, 4, 2).indices == V{2, 4});
  CHECK(LayerSelection::make(SelectionStrategy::kTop, 12, 4).indices == V{9, 10, 11, 12});
  CHECK(LayerSelection::make(SelectionStrategy::kBottom, 12, 4).indices == V{1, 2, 3, 4});
  for (std::uint32_t L = 1; L <= 24; ++L)
    for (std::uint32_t n = 1; n <= L; ++n)
      for (auto s : {SelectionStrategy::kSkip, SelectionStrategy::kTop, SelectionStrategy::kBottom}) {
        const auto sel = LayerSelection::make(s, L, n);
        REQUIRE(sel.indices.size() == n);
        sel.validate(L);
        for (std::size_t i = 1; i < n; ++i) REQUIRE(sel.indices[i] > sel.indices[i - 1]);
      }
  CHECK_THROWS_AS(LayerSelection::make(SelectionStrategy::kSkip, 4, 5), ConfigError);
  CHECK_THROWS_AS(LayerSelection::explicit_indices({2, 2}).validate(4), ConfigError);
  CHECK_THROWS_AS(LayerSelection::explicit_indices({0}).validate(4), ConfigError);
  CHECK(parse_selection_strategy("top") == SelectionStrategy::kTop);
  CHECK_THROWS_AS(parse_selection_strategy("middle"), ConfigError);
}

TEST_CASE("student layers are deep copies of the selected teacher layers") {
  auto teacher = randomized(tiny(4), 9);
  auto student = init_student_from_teacher(teacher, LayerSelection::make(SelectionStrategy::kSkip, 4, 2));
  REQUIRE(student.layers.size() == 2);
  CHECK(student.config().num_layers == 2);
  CHECK(bit_equal(student.layers[0].q.w.weight, teacher.layers[1].q.w.weight));
  CHECK(bit_equal(student.layers[1].ffn_down.bias, teacher.layers[3].ffn_down.bias));
  CHECK(bit_equal(student.head_weight, teacher.head_weight));
  CHECK(bit_equal(student.token_embedding.weight, teacher.token_embedding.weight));
  student.layers[0].q.w.weight.mutable_data()[0] += 1.0F;
  CHECK(student.layers[0].q.w.weight.at(0) != teacher.layers[1].q.w.weight.at(0));
  // Same-depth selection reproduces the teacher exactly.
  auto same = init_student_from_teacher(teacher, LayerSelection::make(SelectionStrategy::kSkip, 4, 4));
  const auto b = tokens(2, 5, 40, 1);
  CHECK(bit_equal(forward(same, b).logits, forward(teacher, b).logits));
}

TEST_CASE("LoRa with V = 0 leaves outputs unchanged") {
  auto m = randomized(tiny(2), 5);
  m.apply_policy(QuantPolicy::uniform(QuantizerSpec::binary(), true));
  const auto b = tokens(2, 7, 40, 2);
  const auto before = forward(m, b).logits;
  attach_lora(m, 2, 0.02F, 11);
  for (const auto& [name, mat] : m.matrices()) {
    REQUIRE(mat->lora);
    for (float v : mat->lora->v.data()) CHECK(v == 0.0F);
    double norm = 0;
    for (float u : mat->lora->u.data()) norm += u * u;
    CHECK(norm > 0.0);
  }
  CHECK(bit_equal(forward(m, b).logits, before));
}

TEST_CASE("policy none is the plain encoder and quantization changes the view only") {
  auto m = randomized(tiny(2), 6);
  const auto b = tokens(2, 5, 40, 3);
  const auto fp = forward(m, b).logits;
  m.apply_policy(QuantPolicy::full_precision());
  CHECK(bit_equal(forward(m, b).logits, fp));
  auto q = m.clone();
  q.apply_policy(QuantPolicy::uniform(QuantizerSpec::ternary(), false));
  CHECK(bit_equal(q.layers[0].q.w.weight, m.layers[0].q.w.weight));
  CHECK_FALSE(bit_equal(forward(q, b).logits, fp));
  const auto inv = q.inventory();
  bool saw_two = false;
  for (const auto& e : inv) saw_two = saw_two || e.bits == 2;
  CHECK(saw_two);
}

TEST_CASE("checkpoint round-trip reproduces forward outputs bit-identically") {
  const auto b = tokens(3, 8, 40, 8);
  for (int variant = 0; variant < 4; ++variant) {
    auto m = randomized(tiny(2), 20 + variant);
    if (variant == 1) m.apply_policy(QuantPolicy::uniform(QuantizerSpec::binary(), true));
    if (variant == 2) m.apply_policy(QuantPolicy::uniform(QuantizerSpec::ternary(Granularity::kPerRow), false));
    if (variant == 3) {
      m.apply_policy(QuantPolicy::uniform(QuantizerSpec::binary(), true));
      attach_lora(m, 1, 0.1F, 3);
      for (auto& [n, mat] : m.mutable_matrices()) mat->lora->v.mutable_data()[0] = 0.25F;
    }
    std::stringstream ss;
    write_checkpoint(m, ss);
    const auto back = read_checkpoint(ss);
    CHECK(back.config() == m.config());
    const auto a = forward(m, b), c = forward(back, b);
    CHECK(bit_equal(a.logits, c.logits));
    CHECK(bit_equal(a.hiddens.back(), c.hiddens.back()));
  }
}

TEST_CASE("1-bit checkpoints are much smaller than fp32 ones") {
  TransformerConfig c;
  c.num_layers = 2;
  auto m = EncoderModel(c, 1);
  std::stringstream fp;
  write_checkpoint(m, fp);
  m.apply_policy(QuantPolicy::uniform(QuantizerSpec::binary(), true));
  std::stringstream packed;
  write_checkpoint(m, packed);
  CHECK(double(fp.str().size()) / double(packed.str().size()) >= 15.0);
}

TEST_CASE("corrupt checkpoints raise FormatError with an offset") {
  auto m = randomized(tiny(1), 2);
  std::stringstream ss;
  write_checkpoint(m, ss);
  const std::string bytes = ss.str();

  std::string bad_magic = bytes;
  bad_magic[0] = 'Y';
  std::stringstream s1(bad_magic);
  CHECK_THROWS_AS(read_checkpoint(s1), FormatError);

  for (std::size_t cut : {std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::stringstream s2(bytes.substr(0, cut));
    try {
      read_checkpoint(s2);
      FAIL("truncated checkpoint accepted at " << cut);
    } catch (const FormatError& e) {
      CHECK(e.offset() <= cut);
    }
  }
  const auto path = std::filesystem::temp_directory_path() / "xtc_missing_checkpoint.xtc";
  std::filesystem::remove(path);
  CHECK_THROWS(load_checkpoint(path));
}

TEST_CASE("parameters and clone") {
  auto m = randomized(tiny(2), 4);
  const auto params = m.parameters();
  std::size_t count = 0;
  for (const auto& p : params) count += p.tensor.numel();
  CHECK(count == m.parameter_count());
  bool bias_no_decay = false;
  for (const auto& p : params) {
    if (p.name.find("bias") != std::string::npos) bias_no_decay = bias_no_decay || !p.decay;
  }
  CHECK(bias_no_decay);
  auto c = m.clone();
  c.head_bias.mutable_data()[0] += 1.0F;
  CHECK(c.head_bias.at(0) != m.head_bias.at(0));
  CHECK_THROWS_AS(EncoderModel(TransformerConfig{.hidden = 10, .heads = 3}, 1), ConfigError);
}

TEST_CASE("small model matches the reference to 1e-5 and attention rows sum to one") {
  auto c = tiny(2);
  c.hidden = 8;
  c.heads = 2;
  c.ffn_dim = 16;
  const auto m = randomized(c, 12);
  const auto b = tokens(2, 5, 40, 6);
  const auto out = forward(m, b);
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<int> ids(b.ids.begin() + s * 5, b.ids.begin() + (s + 1) * 5);
    const auto ref = reference_logits(m, ids);
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK(std::fabs(out.logits.at(s * 3 + k) - ref[k]) < 1e-5);
  }
  for (const auto& att : out.attentions) {
    for (std::size_t row = 0; row < att.numel() / 5; ++row) {
      double sum_row = 0;
      for (std::size_t j = 0; j < 5; ++j) sum_row += att.at(row * 5 + j);
      REQUIRE(std::fabs(sum_row - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("quantized linear layer") {
  std::mt19937_64 rng(21);
  auto x = Tensor::randn({3, 4}, rng);
  Linear l{{Tensor::randn({4, 2}, rng), QuantizerSpec::binary(), std::nullopt}, Tensor({2}, {0.5F, -0.5F})};
  double alpha = 0;
  for (float v : l.w.weight.data()) alpha += std::fabs(v);
  alpha /= 8;
  const auto y = quantized_linear(x, l);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = l.bias.at(j);
      for (std::size_t i = 0; i < 4; ++i) s += x.at(r * 4 + i) * alpha * (l.w.weight.at(i * 2 + j) >= 0 ? 1 : -1);
      CHECK(std::fabs(y.at(r * 2 + j) - s) < 1e-6);
    }
  Linear plain{{l.w.weight, QuantizerSpec::none(), std::nullopt}, l.bias};
  CHECK(bit_equal(quantized_linear(x, plain), add(matmul(x, l.w.weight), l.bias)));
  Linear zero_u = l;
  zero_u.w.lora = LoRaAdapter{Tensor::zeros({4, 1}), Tensor::randn({1, 2}, rng)};
  CHECK(bit_equal(quantized_linear(x, zero_u), y));
}

TEST_CASE("adapter shapes and parameter counts") {
  CHECK(LayerSelection::make(SelectionStrategy::kTop, 12, 6).indices ==
        std::vector<std::uint32_t>{7, 8, 9, 10, 11, 12});
  for (std::size_t r : {1U, 8U}) {
    auto m = randomized(tiny(2), 3);
    m.apply_policy(QuantPolicy::uniform(QuantizerSpec::binary(), true));
    const auto before = m.parameter_count();
    std::size_t expect = 0;
    for (const auto& [name, mat] : m.matrices()) expect += r * (mat->weight.dim(0) + mat->weight.dim(1));
    attach_lora(m, r, 0.02F, 1);
    CHECK(m.parameter_count() == before + expect);
    CHECK(m.layers[0].q.w.lora->rank() == r);
  }
}

TEST_CASE("1-bit checkpoint of a 2-layer toy model is at least 20x smaller") {
  TransformerConfig c;
  c.num_layers = 2;
  c.hidden = 128;
  c.heads = 4;
  c.ffn_dim = 512;
  auto m = EncoderModel(c, 1);
  std::stringstream fp;
  write_checkpoint(m, fp);
  m.apply_policy(QuantPolicy::uniform(QuantizerSpec::binary(), true));
  std::stringstream packed;
  write_checkpoint(m, packed);
  CHECK(double(fp.str().size()) / double(packed.str().size()) >= 20.0);
}

#include "xtc/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "xtc/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace xtc {

namespace {

#if defined(__GLIBC__)
// Activation buffers are large and short-lived; keep them off mmap so each
// step does not pay fresh page faults.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

thread_local bool g_grad_enabled = true;

void check_same_or_trailing(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return;
  if (b.size() <= a.size() && !b.empty() &&
      std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    return;
  }
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                       " and " + shape_str(b));
}

// Four rows of C against a W-column panel held in local accumulators.
template <std::size_t W>
inline void gemm_panel(const float* __restrict a, const float* __restrict b,
                       float* __restrict c, std::size_t i, std::size_t j0, std::size_t k,
                       std::size_t n) {
  float acc[4][W];
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < W; ++j) acc[r][j] = c[(i + r) * n + j0 + j];
  for (std::size_t p = 0; p < k; ++p) {
    const float* brow = b + p * n + j0;
    const float a0 = a[(i + 0) * k + p];
    const float a1 = a[(i + 1) * k + p];
    const float a2 = a[(i + 2) * k + p];
    const float a3 = a[(i + 3) * k + p];
    for (std::size_t j = 0; j < W; ++j) {
      const float bv = brow[j];
      acc[0][j] += a0 * bv;
      acc[1][j] += a1 * bv;
      acc[2][j] += a2 * bv;
      acc[3][j] += a3 * bv;
    }
  }
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < W; ++j) c[(i + r) * n + j0 + j] = acc[r][j];
}

void gemm_rows(const float* __restrict a, const float* __restrict b, float* __restrict c,
               std::size_t i, std::size_t rows, std::size_t j0, std::size_t k, std::size_t n) {
  for (std::size_t r = i; r < i + rows; ++r) {
    float* crow = c + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[r * k + p];
      const float* brow = b + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[k,n]. Every C entry sums over k in increasing order
// whatever the blocking, so results are reproducible bit for bit.
void gemm_nn(const float* __restrict a, const float* __restrict b, float* __restrict c,
             std::size_t m, std::size_t k, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 64 <= n; j += 64) gemm_panel<64>(a, b, c, i, j, k, n);
    if (j + 32 <= n) {
      gemm_panel<32>(a, b, c, i, j, k, n);
      j += 32;
    }
    if (j + 16 <= n) {
      gemm_panel<16>(a, b, c, i, j, k, n);
      j += 16;
    }
    if (j < n) gemm_rows(a, b, c, i, 4, j, k, n);
  }
  if (i < m) gemm_rows(a, b, c, i, m - i, 0, k, n);
}

std::vector<float> transpose2d(const float* src, std::size_t rows, std::size_t cols) {
  std::vector<float> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n) {
  const auto at = transpose2d(a, k, m);
  gemm_nn(at.data(), b, c, m, k, n);
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
             std::size_t n) {
  const auto bt = transpose2d(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

void require_nonempty_axis(const Tensor& x, const char* op) {
  if (x.rank() == 0 || x.shape().back() == 0 || x.numel() == 0) {
    throw DimensionError(std::string(op) + ": zero-size axis in " +
                         shape_str(x.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<float>& TensorImpl::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0F);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("Tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(data.size()));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0F, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, float stddev,
                     bool requires_grad) {
  std::normal_distribution<float> dist(0.0F, stddev);
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("Tensor::dim: axis out of range");
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() { return impl_->data; }

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor is not a scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return impl_->grad.size() == impl_->data.size(); }

std::vector<float> Tensor::grad() const {
  if (has_grad()) return impl_->grad;
  return std::vector<float>(numel(), 0.0F);
}

std::span<const float> Tensor::grad_view() const { return impl_->grad; }

void Tensor::zero_grad() {
  if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0F);
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

Tensor Tensor::clone() const {
  return Tensor(shape(), impl_->data, impl_->requires_grad);
}

std::vector<TensorImpl*> topological_order(const Tensor& root) {
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  // Iterative post-order DFS; graphs from deep models overflow naive recursion.
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl* child = node->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;
}

void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward: root must be a scalar");
  if (!requires_grad()) return;
  const auto order = topological_order(*this);
  impl_->grad_buffer()[0] += 1.0F;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->node && t->node->backward) {
      t->grad_buffer();
      t->node->backward(*t);
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

Tensor make_result(Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, BackwardFn backward,
                   const char* name) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
    return t.defined() && t.requires_grad();
  });
  if (!needs) return out;
  auto node = std::make_shared<Node>();
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl_ptr());
  node->backward = std::move(backward);
  node->name = name;
  out.impl()->node = std::move(node);
  out.set_requires_grad(true);
  return out;
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2");
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t bk = transpose_b ? b.shape().back() : b.shape()[b.rank() - 2];
  const std::size_t n = transpose_b ? b.shape()[b.rank() - 2] : b.shape().back();
  if (k != bk) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const bool shared_b = b.rank() == 2;
  std::size_t batch = a.numel() / (m * k == 0 ? 1 : m * k);
  if (m * k == 0) batch = 0;
  if (!shared_b) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw DimensionError("matmul: batch axes differ: " + shape_str(a.shape()) +
                           " x " + shape_str(b.shape()));
    }
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<float> out(batch * m * n, 0.0F);
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  if (shared_b && !transpose_b) {
    gemm_nn(ad, bd, out.data(), batch * m, k, n);
  } else {
    const std::size_t bstride = shared_b ? 0 : k * n;
    for (std::size_t s = 0; s < batch; ++s) {
      const float* bs = bd + s * bstride;
      float* os = out.data() + s * m * n;
      if (transpose_b) gemm_nt(ad + s * m * k, bs, os, m, k, n);
      else gemm_nn(ad + s * m * k, bs, os, m, k, n);
    }
  }
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  return make_result(
      std::move(out_shape), std::move(out), {a, b},
      [ai, bi, batch, m, k, n, shared_b, transpose_b](TensorImpl& o) {
        const float* g = o.grad.data();
        const std::size_t bstride = shared_b ? 0 : k * n;
        if (ai->requires_grad) {
          float* ag = ai->grad_buffer().data();
          if (shared_b && !transpose_b) {
            gemm_nt(g, bi->data.data(), ag, batch * m, n, k);
          } else {
            for (std::size_t s = 0; s < batch; ++s) {
              const float* bs = bi->data.data() + s * bstride;
              // out = a b  -> da = g b^T ; out = a b^T -> da = g b
              if (transpose_b) gemm_nn(g + s * m * n, bs, ag + s * m * k, m, n, k);
              else gemm_nt(g + s * m * n, bs, ag + s * m * k, m, n, k);
            }
          }
        }
        if (bi->requires_grad) {
          float* bg = bi->grad_buffer().data();
          if (shared_b && !transpose_b) {
            gemm_tn(ai->data.data(), g, bg, k, batch * m, n);
          } else {
            for (std::size_t s = 0; s < batch; ++s) {
              float* bs = bg + s * bstride;
              const float* as = ai->data.data() + s * m * k;
              // out = a b -> db = a^T g ; out = a b^T -> db = g^T a
              if (transpose_b) gemm_tn(g + s * m * n, as, bs, n, m, k);
              else gemm_tn(as, g + s * m * n, bs, k, m, n);
            }
          }
        }
      },
      "matmul");
}

namespace {

enum class BinOp { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  check_same_or_trailing(a.shape(), b.shape(), name);
  const std::size_t n = a.numel();
  const std::size_t bn = b.numel();
  std::vector<float> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t base = 0; base < n; base += bn) {
    for (std::size_t j = 0; j < bn; ++j) {
      const float x = ad[base + j];
      const float y = bd[j];
      out[base + j] = op == BinOp::kAdd ? x + y : op == BinOp::kSub ? x - y : x * y;
    }
  }
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  return make_result(
      a.shape(), std::move(out), {a, b},
      [ai, bi, op, n, bn](TensorImpl& o) {
        const auto& g = o.grad;
        if (ai->requires_grad) {
          auto& ag = ai->grad_buffer();
          for (std::size_t base = 0; base < n; base += bn)
            for (std::size_t j = 0; j < bn; ++j)
              ag[base + j] += op == BinOp::kMul ? g[base + j] * bi->data[j] : g[base + j];
        }
        if (bi->requires_grad) {
          auto& bg = bi->grad_buffer();
          for (std::size_t base = 0; base < n; base += bn) {
            for (std::size_t j = 0; j < bn; ++j) {
              const float gv = g[base + j];
              if (op == BinOp::kAdd) bg[j] += gv;
              else if (op == BinOp::kSub) bg[j] -= gv;
              else bg[j] += gv * ai->data[base + j];
            }
          }
        }
      },
      name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto ai = a.impl_ptr();
  return make_result(
      a.shape(), std::move(out), {a},
      [ai, factor](TensorImpl& o) {
        auto& ag = ai->grad_buffer();
        for (std::size_t i = 0; i < ag.size(); ++i) ag[i] += o.grad[i] * factor;
      },
      "scale");
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0F ? v : 0.0F;
  auto xi = x.impl_ptr();
  return make_result(
      x.shape(), std::move(out), {x},
      [xi](TensorImpl& o) {
        auto& xg = xi->grad_buffer();
        for (std::size_t i = 0; i < xg.size(); ++i)
          if (xi->data[i] > 0.0F) xg[i] += o.grad[i];
      },
      "relu");
}

namespace {
// Cephes-style exp: range reduction by ln 2 and a degree-5 polynomial,
// accurate to a couple of ulp and vectorizable.
inline float exp_poly(float x) {
  x = x > 88.3762626647949F ? 88.3762626647949F : x;
  x = x < -87.3365447505531F ? -87.3365447505531F : x;
  const float fx = std::floor(x * 1.44269504088896341F + 0.5F);
  x -= fx * 0.693359375F;
  x -= fx * -2.12194440e-4F;
  const float z = x * x;
  float y = 1.9875691500e-4F;
  y = y * x + 1.3981999507e-3F;
  y = y * x + 8.3334519073e-3F;
  y = y * x + 4.1665795894e-2F;
  y = y * x + 1.6666665459e-1F;
  y = y * x + 5.0000001201e-1F;
  y = y * z + x + 1.0F;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(fx) + 127) << 23;
  return y * std::bit_cast<float>(bits);
}

constexpr float kGeluC = 0.7978845608028654F;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715F;
}  // namespace

Tensor gelu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<float> out(xd.size());
  auto th = std::make_shared<std::vector<float>>(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const float v = xd[i];
    const float z = kGeluC * (v + kGeluA * v * v * v);
    const float t = 1.0F - 2.0F / (exp_poly(2.0F * z) + 1.0F);
    (*th)[i] = t;
    out[i] = 0.5F * v * (1.0F + t);
  }
  auto xi = x.impl_ptr();
  return make_result(
      x.shape(), std::move(out), {x},
      [xi, th](TensorImpl& o) {
        auto& xg = xi->grad_buffer();
        for (std::size_t i = 0; i < xg.size(); ++i) {
          const float v = xi->data[i];
          const float t = (*th)[i];
          const float d = 0.5F * (1.0F + t) +
                          0.5F * v * (1.0F - t * t) * kGeluC *
                              (1.0F + 3.0F * kGeluA * v * v);
          xg[i] += o.grad[i] * d;
        }
      },
      "gelu");
}

Tensor softmax(const Tensor& x) {
  require_nonempty_axis(x, "softmax");
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const auto xd = x.data();
  std::vector<float> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xd.data() + r * d;
    float* y = out.data() + r * d;
    const float mx = *std::max_element(in, in + d);
    float z = 0.0F;
    for (std::size_t j = 0; j < d; ++j) {
      y[j] = exp_poly(in[j] - mx);
      z += y[j];
    }
    const float inv = 1.0F / z;
    for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
  }
  auto xi = x.impl_ptr();
  return make_result(
      x.shape(), std::move(out), {x},
      [xi, rows, d](TensorImpl& o) {
        auto& xg = xi->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const float* y = o.data.data() + r * d;
          const float* g = o.grad.data() + r * d;
          float dot = 0.0F;
          for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
          for (std::size_t j = 0; j < d; ++j) xg[r * d + j] += y[j] * (g[j] - dot);
        }
      },
      "softmax");
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  require_nonempty_axis(x, "layernorm");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layernorm: gain/bias must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<float> out(x.numel());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xd.data() + r * d;
    float mu = 0.0F;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<float>(d);
    float var = 0.0F;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<float>(d);
    const float is = 1.0F / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const float h = (in[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  auto xi = x.impl_ptr();
  auto gi = gain.impl_ptr();
  auto bi = bias.impl_ptr();
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [xi, gi, bi, xhat, inv_std, rows, d](TensorImpl& o) {
        const auto& g = o.grad;
        if (gi->requires_grad || bi->requires_grad) {
          auto& gg = gi->grad_buffer();
          auto& bg = bi->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * (*xhat)[r * d + j];
              bg[j] += g[r * d + j];
            }
        }
        if (xi->requires_grad) {
          auto& xg = xi->grad_buffer();
          std::vector<float> dh(d);
          const float inv_d = 1.0F / static_cast<float>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            float mean_dh = 0.0F;
            float mean_dh_h = 0.0F;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = g[r * d + j] * gi->data[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * (*xhat)[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            const float is = (*inv_std)[r];
            for (std::size_t j = 0; j < d; ++j) {
              xg[r * d + j] +=
                  is * (dh[j] - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
            }
          }
        }
      },
      "layernorm");
}

Tensor sum(const Tensor& x) {
  float s = 0.0F;
  for (float v : x.data()) s += v;
  auto xi = x.impl_ptr();
  return make_result(
      {}, {s}, {x},
      [xi](TensorImpl& o) {
        const float g = o.grad[0];
        for (auto& v : xi->grad_buffer()) v += g;
      },
      "sum");
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0F / static_cast<float>(x.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  if (a.numel() == 0) throw DimensionError("mse: empty tensors");
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t n = a.numel();
  float s = 0.0F;
  for (std::size_t i = 0; i < n; ++i) {
    const float e = ad[i] - bd[i];
    s += e * e;
  }
  const float inv_n = 1.0F / static_cast<float>(n);
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  return make_result(
      {}, {s * inv_n}, {a, b},
      [ai, bi, n, inv_n](TensorImpl& o) {
        const float g = o.grad[0] * 2.0F * inv_n;
        if (ai->requires_grad) {
          auto& ag = ai->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) ag[i] += g * (ai->data[i] - bi->data[i]);
        }
        if (bi->requires_grad) {
          auto& bg = bi->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) bg[i] -= g * (ai->data[i] - bi->data[i]);
        }
      },
      "mse");
}

namespace {

void log_softmax_row(const float* in, float* out, std::size_t d) {
  const float mx = *std::max_element(in, in + d);
  float z = 0.0F;
  for (std::size_t j = 0; j < d; ++j) z += std::exp(in[j] - mx);
  const float lz = std::log(z) + mx;
  for (std::size_t j = 0; j < d; ++j) out[j] = in[j] - lz;
}

}  // namespace

Tensor soft_cross_entropy(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("soft_cross_entropy: shape mismatch " +
                         shape_str(student_logits.shape()) + " vs " +
                         shape_str(teacher_logits.shape()));
  }
  require_nonempty_axis(student_logits, "soft_cross_entropy");
  const std::size_t c = student_logits.shape().back();
  const std::size_t rows = student_logits.numel() / c;
  auto log_q = std::make_shared<std::vector<float>>(rows * c);
  auto p = std::make_shared<std::vector<float>>(rows * c);
  float total = 0.0F;
  for (std::size_t r = 0; r < rows; ++r) {
    log_softmax_row(student_logits.data().data() + r * c, log_q->data() + r * c, c);
    log_softmax_row(teacher_logits.data().data() + r * c, p->data() + r * c, c);
    float row = 0.0F;
    for (std::size_t j = 0; j < c; ++j) {
      float& pj = (*p)[r * c + j];
      pj = std::exp(pj);
      row -= pj * (*log_q)[r * c + j];
    }
    total += row;
  }
  const float inv_rows = 1.0F / static_cast<float>(rows);
  auto si = student_logits.impl_ptr();
  auto ti = teacher_logits.impl_ptr();
  return make_result(
      {}, {total * inv_rows}, {student_logits, teacher_logits},
      [si, ti, log_q, p, rows, c, inv_rows](TensorImpl& o) {
        const float g = o.grad[0] * inv_rows;
        if (si->requires_grad) {
          auto& sg = si->grad_buffer();
          for (std::size_t i = 0; i < rows * c; ++i)
            sg[i] += g * (std::exp((*log_q)[i]) - (*p)[i]);
        }
        if (ti->requires_grad) {
          auto& tg = ti->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            float expected = 0.0F;
            for (std::size_t j = 0; j < c; ++j)
              expected += (*p)[r * c + j] * (*log_q)[r * c + j];
            for (std::size_t j = 0; j < c; ++j) {
              const std::size_t i = r * c + j;
              tg[i] -= g * (*p)[i] * ((*log_q)[i] - expected);
            }
          }
        }
      },
      "soft_cross_entropy");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_nonempty_axis(logits, "cross_entropy");
  const std::size_t c = logits.shape().back();
  const std::size_t rows = logits.numel() / c;
  if (labels.size() != rows) throw DimensionError("cross_entropy: label count mismatch");
  auto log_q = std::make_shared<std::vector<float>>(rows * c);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  float total = 0.0F;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw InputError("cross_entropy: label out of range");
    log_softmax_row(logits.data().data() + r * c, log_q->data() + r * c, c);
    total -= (*log_q)[r * c + static_cast<std::size_t>(labels[r])];
  }
  const float inv_rows = 1.0F / static_cast<float>(rows);
  auto li = logits.impl_ptr();
  return make_result(
      {}, {total * inv_rows}, {logits},
      [li, log_q, lab, rows, c, inv_rows](TensorImpl& o) {
        const float g = o.grad[0] * inv_rows;
        auto& lg = li->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const float onehot = static_cast<int>(j) == (*lab)[r] ? 1.0F : 0.0F;
            lg[r * c + j] += g * (std::exp((*log_q)[r * c + j]) - onehot);
          }
      },
      "cross_entropy");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  auto xi = x.impl_ptr();
  return make_result(
      std::move(shape), std::move(out), {x},
      [xi](TensorImpl& o) {
        auto& xg = xi->grad_buffer();
        for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += o.grad[i];
      },
      "reshape");
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[i]) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + i * d);
  }
  auto ti = table.impl_ptr();
  auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_result(
      {ids.size(), d}, std::move(out), {table},
      [ti, idv, d](TensorImpl& o) {
        auto& tg = ti->grad_buffer();
        for (std::size_t i = 0; i < idv->size(); ++i) {
          float* row = tg.data() + static_cast<std::size_t>((*idv)[i]) * d;
          for (std::size_t j = 0; j < d; ++j) row[j] += o.grad[i * d + j];
        }
      },
      "embedding");
}

Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  if (x.rank() != 2 || batch == 0 || heads == 0 || x.dim(0) % batch != 0 ||
      x.dim(1) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(0) / batch;
  const std::size_t dk = x.dim(1) / heads;
  const std::size_t width = x.dim(1);
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < len; ++t)
        std::copy_n(xd.data() + (b * len + t) * width + h * dk, dk,
                    out.data() + ((b * heads + h) * len + t) * dk);
  auto xi = x.impl_ptr();
  return make_result(
      {batch, heads, len, dk}, std::move(out), {x},
      [xi, batch, heads, len, dk, width](TensorImpl& o) {
        auto& xg = xi->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < len; ++t) {
              const float* g = o.grad.data() + ((b * heads + h) * len + t) * dk;
              float* dst = xg.data() + (b * len + t) * width + h * dk;
              for (std::size_t j = 0; j < dk; ++j) dst[j] += g[j];
            }
      },
      "split_heads");
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads: expects [B,h,l,dk]");
  const std::size_t batch = x.dim(0);
  const std::size_t heads = x.dim(1);
  const std::size_t len = x.dim(2);
  const std::size_t dk = x.dim(3);
  const std::size_t width = heads * dk;
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < len; ++t)
        std::copy_n(xd.data() + ((b * heads + h) * len + t) * dk, dk,
                    out.data() + (b * len + t) * width + h * dk);
  auto xi = x.impl_ptr();
  return make_result(
      {batch * len, width}, std::move(out), {x},
      [xi, batch, heads, len, dk, width](TensorImpl& o) {
        auto& xg = xi->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < len; ++t) {
              const float* g = o.grad.data() + (b * len + t) * width + h * dk;
              float* dst = xg.data() + ((b * heads + h) * len + t) * dk;
              for (std::size_t j = 0; j < dk; ++j) dst[j] += g[j];
            }
      },
      "merge_heads");
}

Tensor mean_pool(const Tensor& x, std::size_t batch) {
  if (x.rank() != 2 || batch == 0 || x.dim(0) % batch != 0 || x.dim(0) == 0) {
    throw DimensionError("mean_pool: cannot pool " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(0) / batch;
  const std::size_t d = x.dim(1);
  const float inv = 1.0F / static_cast<float>(len);
  std::vector<float> out(batch * d, 0.0F);
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += xd[(b * len + t) * d + j];
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] *= inv;
  }
  auto xi = x.impl_ptr();
  return make_result(
      {batch, d}, std::move(out), {x},
      [xi, batch, len, d, inv](TensorImpl& o) {
        auto& xg = xi->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < len; ++t)
            for (std::size_t j = 0; j < d; ++j)
              xg[(b * len + t) * d + j] += o.grad[b * d + j] * inv;
      },
      "mean_pool");
}

Tensor custom_grad(std::vector<Tensor> inputs, Shape out_shape, ForwardFn forward,
                   GradOverride backward_override, const char* name) {
  auto out = forward(inputs);
  if (out.size() != shape_numel(out_shape)) {
    throw DimensionError(std::string(name) + ": forward produced " +
                         std::to_string(out.size()) + " values for shape " +
                         shape_str(out_shape));
  }
  auto saved = std::make_shared<std::vector<Tensor>>();
  for (const auto& t : inputs) saved->push_back(t);
  return make_result(
      std::move(out_shape), std::move(out), std::move(inputs),
      [saved, over = std::move(backward_override)](TensorImpl& o) {
        const auto grads = over(o.grad, *saved);
        for (std::size_t i = 0; i < grads.size() && i < saved->size(); ++i) {
          auto* in = (*saved)[i].impl();
          if (grads[i].empty() || !in->requires_grad) continue;
          auto& ig = in->grad_buffer();
          if (grads[i].size() != ig.size())
            throw DimensionError("custom_grad: override gradient has wrong size");
          for (std::size_t j = 0; j < ig.size(); ++j) ig[j] += grads[i][j];
        }
      },
      name);
}

Tensor CustomOp::operator()(std::vector<Tensor> inputs) const {
  Shape shape = inputs.at(0).shape();
  return custom_grad(std::move(inputs), std::move(shape), forward_, override_, name_);
}

Tensor CustomOp::operator()(std::vector<Tensor> inputs, Shape out_shape) const {
  return custom_grad(std::move(inputs), std::move(out_shape), forward_, override_, name_);
}

GradOverride identity_grad() {
  return [](std::span<const float> g, std::span<const Tensor>) {
    return std::vector<std::vector<float>>{std::vector<float>(g.begin(), g.end())};
  };
}

}  // namespace xtc

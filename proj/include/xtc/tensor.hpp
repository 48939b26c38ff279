#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace xtc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// Backward rule of a recorded op. Receives the output (whose grad is
/// populated) and accumulates into the grads of the captured inputs.
using BackwardFn = std::function<void(TensorImpl& out)>;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  const char* name = "";
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves

  /// Returns the grad buffer, allocating zeros on first use.
  std::vector<float>& grad_buffer();
};

/// Dense row-major float tensor with a reverse-mode gradient slot.
///
/// A Tensor is a cheap handle; copies share storage. Operations that take
/// a Tensor requiring grad record a Node on their output, and `backward()`
/// replays those nodes once each in reverse topological order.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, float stddev = 1.0F,
                      bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;
  float at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  /// Gradient buffer; all zeros when no gradient has been accumulated.
  std::vector<float> grad() const;
  std::span<const float> grad_view() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar.
  void backward() const;

  /// Same data, no graph history, no grad requirement (deep copy).
  Tensor detach() const;
  /// Deep copy that keeps requires_grad but drops graph history.
  Tensor clone() const;

  bool is_leaf() const;
  TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const noexcept { return impl_; }

  static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

/// Nodes reachable from `root`, inputs before outputs. Each node appears once.
std::vector<TensorImpl*> topological_order(const Tensor& root);

/// Builds an output tensor and, if any input needs grad, attaches `backward`.
Tensor make_result(Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, BackwardFn backward,
                   const char* name);

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops accept identical shapes, or a right
// operand whose shape equals the trailing axes of the left one (broadcast
// over leading batch axes only).

/// a[..., m, k] x b[k, n], or batched a[B..., m, k] x b[B..., k, n].
/// With transpose_b, b is read as [.., n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

Tensor relu(const Tensor& x);
/// GeLU, tanh approximation.
Tensor gelu(const Tensor& x);

Tensor softmax(const Tensor& x);
/// Normalizes the last axis, then applies gain and bias (both [d]).
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps = 1e-5F);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
/// Batch mean over rows of  -sum softmax(teacher) * log softmax(student).
Tensor soft_cross_entropy(const Tensor& student_logits,
                          const Tensor& teacher_logits);
/// Batch mean of hard-label cross entropy.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor reshape(const Tensor& x, Shape shape);
/// Gathers rows of table[vocab, d] for each id -> [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// [B*l, h*dk] -> [B, h, l, dk]
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t heads);
/// [B, h, l, dk] -> [B*l, h*dk]
Tensor merge_heads(const Tensor& x);
/// [B*l, d] -> [B, d], mean over each group of l rows.
Tensor mean_pool(const Tensor& x, std::size_t batch);

/// Forward computes the output values from the inputs' data. Backward
/// override maps (output grad, saved inputs) to one gradient per input
/// (empty vector = no contribution).
using ForwardFn = std::function<std::vector<float>(std::span<const Tensor>)>;
using GradOverride = std::function<std::vector<std::vector<float>>(
    std::span<const float> out_grad, std::span<const Tensor> inputs)>;

Tensor custom_grad(std::vector<Tensor> inputs, Shape out_shape, ForwardFn forward,
                   GradOverride backward_override, const char* name = "custom");

/// Reusable op handle pairing a forward function with a gradient override,
/// e.g. sign() with an identity override for the straight-through estimator.
class CustomOp {
 public:
  CustomOp(ForwardFn forward, GradOverride backward_override,
           const char* name = "custom")
      : forward_(std::move(forward)),
        override_(std::move(backward_override)),
        name_(name) {}

  /// Output takes the shape of the first input.
  Tensor operator()(std::vector<Tensor> inputs) const;
  Tensor operator()(std::vector<Tensor> inputs, Shape out_shape) const;

 private:
  ForwardFn forward_;
  GradOverride override_;
  const char* name_;
};

/// Gradient override that hands the output gradient to the first input.
GradOverride identity_grad();

}  // namespace xtc

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "grad_check.hpp"
#include "xtc/errors.hpp"
#include "xtc/tensor.hpp"

using namespace xtc;
using xtc::testing::check_gradients;
using xtc::testing::rand_tensor;

namespace {

void require_close_grads(const std::vector<Tensor>& inputs, const std::function<Tensor()>& f) {
  const auto res = check_gradients(inputs, f);
  for (std::size_t i = 0; i < res.size(); ++i) {
    INFO("input " << i << " rel error " << res[i].rel_error);
    CHECK(res[i].rel_error < 1e-3);
    CHECK(res[i].norm > 0.0);
  }
}

}  // namespace

TEST_CASE("construction and shape checks") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(1) == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
  CHECK(Tensor::scalar(4.0F).item() == 4.0F);
}

TEST_CASE("matmul values") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  auto c = matmul(a, b);
  CHECK(c.at(0) == 19.0F);
  CHECK(c.at(1) == 22.0F);
  CHECK(c.at(2) == 43.0F);
  CHECK(c.at(3) == 50.0F);
  auto ct = matmul(a, b, true);
  CHECK(ct.at(0) == 17.0F);
  CHECK(ct.at(1) == 23.0F);
}

TEST_CASE("matmul agrees with a naive triple loop on odd sizes") {
  for (auto [m, k, n] : {std::array<std::size_t, 3>{7, 5, 3}, {33, 17, 65}, {4, 64, 130}}) {
    auto a = rand_tensor({m, k}, 1);
    auto b = rand_tensor({k, n}, 2);
    auto c = matmul(a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += double(a.at(i * k + p)) * b.at(p * n + j);
        worst = std::max(worst, std::fabs(s - c.at(i * n + j)));
      }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("finite-difference gradients of every op") {
  SUBCASE("matmul") {
    auto a = rand_tensor({3, 4}, 1), b = rand_tensor({4, 5}, 2);
    require_close_grads({a, b}, [&] { return matmul(a, b); });
  }
  SUBCASE("matmul transpose_b") {
    auto a = rand_tensor({3, 4}, 3), b = rand_tensor({5, 4}, 4);
    require_close_grads({a, b}, [&] { return matmul(a, b, true); });
  }
  SUBCASE("matmul batched") {
    auto a = rand_tensor({2, 3, 3, 4}, 5), b = rand_tensor({2, 3, 4, 2}, 6);
    require_close_grads({a, b}, [&] { return matmul(a, b); });
  }
  SUBCASE("matmul shared right operand") {
    auto a = rand_tensor({2, 3, 4}, 7), b = rand_tensor({4, 3}, 8);
    require_close_grads({a, b}, [&] { return matmul(a, b); });
  }
  SUBCASE("add, sub, mul with broadcast") {
    auto a = rand_tensor({3, 4}, 9), b = rand_tensor({4}, 10), c = rand_tensor({3, 4}, 11);
    require_close_grads({a, b}, [&] { return add(a, b); });
    require_close_grads({a, c}, [&] { return sub(a, c); });
    require_close_grads({a, b}, [&] { return mul(a, b); });
    require_close_grads({a, c}, [&] { return mul(a, c); });
  }
  SUBCASE("scale") {
    auto a = rand_tensor({5}, 12);
    require_close_grads({a}, [&] { return scale(a, -1.7F); });
  }
  SUBCASE("relu away from the kink") {
    Tensor a({6}, {-1.5F, -0.4F, 0.3F, 0.9F, 2.0F, -0.2F});
    require_close_grads({a}, [&] { return relu(a); });
  }
  SUBCASE("gelu") {
    auto a = rand_tensor({4, 5}, 13, 2.0F);
    require_close_grads({a}, [&] { return gelu(a); });
  }
  SUBCASE("softmax") {
    auto a = rand_tensor({3, 6}, 14);
    require_close_grads({a}, [&] { return softmax(a); });
  }
  SUBCASE("layernorm") {
    auto x = rand_tensor({4, 6}, 15), g = rand_tensor({6}, 16), b = rand_tensor({6}, 17);
    require_close_grads({x, g, b}, [&] { return layernorm(x, g, b); });
  }
  SUBCASE("sum, mean, mse") {
    auto a = rand_tensor({3, 4}, 18), b = rand_tensor({3, 4}, 19);
    require_close_grads({a}, [&] { return sum(a); });
    require_close_grads({a}, [&] { return mean(a); });
    require_close_grads({a, b}, [&] { return mse(a, b); });
  }
  SUBCASE("soft cross entropy, both sides") {
    auto s = rand_tensor({3, 4}, 20), t = rand_tensor({3, 4}, 21);
    require_close_grads({s, t}, [&] { return soft_cross_entropy(s, t); });
  }
  SUBCASE("cross entropy") {
    auto s = rand_tensor({4, 3}, 22);
    std::vector<int> labels{0, 2, 1, 2};
    require_close_grads({s}, [&] { return cross_entropy(s, labels); });
  }
  SUBCASE("reshape, embedding, heads, pooling") {
    auto x = rand_tensor({2, 6}, 23);
    require_close_grads({x}, [&] { return reshape(x, {3, 4}); });
    auto table = rand_tensor({5, 3}, 24);
    std::vector<int> ids{4, 0, 4, 2};
    require_close_grads({table}, [&] { return embedding(table, ids); });
    auto h = rand_tensor({6, 4}, 25);  // B=2, l=3, h=2, dk=2
    require_close_grads({h}, [&] { return split_heads(h, 2, 2); });
    auto m = rand_tensor({2, 2, 3, 2}, 26);
    require_close_grads({m}, [&] { return merge_heads(m); });
    require_close_grads({h}, [&] { return mean_pool(h, 2); });
  }
  SUBCASE("composite attention block") {
    auto x = rand_tensor({6, 4}, 27), wq = rand_tensor({4, 4}, 28, 0.5F),
         wk = rand_tensor({4, 4}, 29, 0.5F);
    require_close_grads({x, wq, wk}, [&] {
      auto q = split_heads(matmul(x, wq), 2, 2);
      auto k = split_heads(matmul(x, wk), 2, 2);
      auto p = softmax(scale(matmul(q, k, true), 0.7F));
      return merge_heads(matmul(p, q));
    });
  }
}

TEST_CASE("gradients accumulate across backward calls and over shared inputs") {
  Tensor a({2}, {1.0F, 2.0F}, true);
  sum(mul(a, a)).backward();
  auto g1 = a.grad();
  CHECK(g1[0] == doctest::Approx(2.0));
  sum(a).backward();
  auto g2 = a.grad();
  CHECK(g2[0] == doctest::Approx(3.0));
  CHECK(g2[1] == doctest::Approx(5.0));
  a.zero_grad();
  auto b = add(a, a);
  sum(add(b, a)).backward();  // diamond: a used three times
  CHECK(a.grad()[0] == doctest::Approx(3.0));
}

TEST_CASE("each node is replayed once in deep shared graphs") {
  Tensor x({1}, {1.0F}, true);
  Tensor y = x;
  for (int i = 0; i < 30; ++i) y = add(y, y);  // 2^30 paths, 30 nodes
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(std::pow(2.0, 30)));
  CHECK(topological_order(y).size() == 31);
}

TEST_CASE("NoGradGuard records nothing") {
  Tensor a({2}, {1, 2}, true);
  Tensor out;
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    out = mul(a, a);
  }
  CHECK(grad_enabled());
  CHECK(out.is_leaf());
  CHECK_FALSE(out.requires_grad());
}

TEST_CASE("custom_grad applies the override") {
  Tensor w({4}, {-0.5F, 0.25F, 2.0F, -3.0F}, true);
  CustomOp sign_ste(
      [](std::span<const Tensor> in) {
        std::vector<float> o;
        for (float v : in[0].data()) o.push_back(v >= 0 ? 1.0F : -1.0F);
        return o;
      },
      identity_grad(), "sign");
  auto y = sign_ste({w});
  CHECK(y.at(0) == -1.0F);
  CHECK(y.at(2) == 1.0F);
  sum(scale(y, 3.0F)).backward();
  for (float g : w.grad()) CHECK(g == 3.0F);
}

TEST_CASE("detach and clone copy storage") {
  Tensor a({2}, {1, 2}, true);
  auto d = a.detach();
  auto c = a.clone();
  d.mutable_data()[0] = 9;
  c.mutable_data()[1] = 9;
  CHECK(a.at(0) == 1.0F);
  CHECK(a.at(1) == 2.0F);
  CHECK_FALSE(d.requires_grad());
  CHECK(c.requires_grad());
}

TEST_CASE("softmax rows sum to one and survive large inputs") {
  Tensor x({2, 3}, {1000.0F, 1001.0F, 999.0F, -50.0F, 0.0F, 50.0F});
  auto p = softmax(x);
  for (int r = 0; r < 2; ++r) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += p.at(r * 3 + j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(std::isfinite(p.at(0)));
}

TEST_CASE("gelu matches the tanh formula") {
  for (float v : {-4.0F, -1.0F, -0.1F, 0.0F, 0.5F, 3.0F}) {
    const double ref =
        0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    CHECK(gelu(Tensor({1}, {v})).item() == doctest::Approx(ref).epsilon(1e-6));
  }
}

TEST_CASE("worked examples") {
  auto id = matmul(Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2, 2}, {2, 3, 4, 5}));
  CHECK(std::vector<float>(id.data().begin(), id.data().end()) == std::vector<float>{2, 3, 4, 5});
  CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11.0F);
  auto p = softmax(Tensor({3}, {0, 0, 0}));
  for (float v : p.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
  CHECK(mse(Tensor({2}, {1, 2}), Tensor({2}, {1, 2})).item() == 0.0F);

  // d sum(a b) / da[i][k] = sum_j b[k][j]
  auto a = rand_tensor({4, 3}, 40), b = rand_tensor({3, 5}, 41);
  a.set_requires_grad(true);
  sum(matmul(a, b)).backward();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double row = 0;
      for (std::size_t j = 0; j < 5; ++j) row += b.at(k * 5 + j);
      CHECK(a.grad()[i * 3 + k] == doctest::Approx(row).epsilon(1e-5));
    }
  CHECK(check_gradients({a, b}, [&] { return matmul(a, b); })[0].rel_error < 1e-3);
}

TEST_CASE("custom_grad with round forward passes gradients unchanged") {
  Tensor w({3}, {0.4F, 1.6F, -2.5F}, true);
  CustomOp round_ste(
      [](std::span<const Tensor> in) {
        std::vector<float> o;
        for (float v : in[0].data()) o.push_back(std::round(v));
        return o;
      },
      identity_grad(), "round");
  auto y = round_ste({w});
  CHECK(y.at(2) == -3.0F);
  sum(mul(y, Tensor({3}, {1.0F, 2.0F, 3.0F}))).backward();
  CHECK(w.grad() == std::vector<float>{1.0F, 2.0F, 3.0F});
}

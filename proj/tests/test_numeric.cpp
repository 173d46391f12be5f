#include <cmath>
#include <limits>

#include "doctest.h"
#include "simvos/attention.hpp"
#include "simvos/ops.hpp"
#include "simvos/optim.hpp"
#include "simvos/rng.hpp"

using namespace simvos;

namespace {

Tensor<float> make2(std::size_t r, std::size_t c, std::vector<float> v) {
  return Tensor<float>({r, c}, std::move(v));
}

}  // namespace

TEST_CASE("matmul basics") {
  const auto eye2 = make2(2, 2, {1, 0, 0, 1});
  const auto x = make2(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(exactly_equal(matmul(eye2, x), x));

  const auto z = Tensor<float>({2, 3});
  const auto any = make2(3, 4, {1, -2, 3, 0.5f, 4, 5, -6, 7, 8, 9, 0.25f, 1});
  const auto prod = matmul(z, any);
  CHECK(prod.dims() == Shape{2, 4});
  for (std::size_t i = 0; i < prod.size(); ++i) CHECK(prod[i] == 0.0f);

  const auto a = make2(2, 2, {1, 2, 3, 4});
  const auto b = make2(2, 2, {5, 6, 7, 8});
  const auto c = matmul(a, b);
  CHECK(c[0] == 19.0f);
  CHECK(c[1] == 22.0f);
  CHECK(c[2] == 43.0f);
  CHECK(c[3] == 50.0f);

  CHECK_THROWS_AS(matmul(x, a), ShapeError);
}

TEST_CASE("matmul identity associativity is exact") {
  Rng rng(7);
  Tensor<float> a({5, 5});
  Tensor<float> b({5, 3});
  rng.fill_uniform(a, -2.0, 2.0);
  rng.fill_uniform(b, -2.0, 2.0);
  Tensor<float> eye({5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye.at(i, i) = 1.0f;
  CHECK(exactly_equal(matmul(matmul(a, eye), b), matmul(a, b)));
}

TEST_CASE("matmul is deterministic across repeated calls") {
  Rng rng(11);
  Tensor<float> a({17, 23});
  Tensor<float> b({23, 9});
  rng.fill_uniform(a, -1.0, 1.0);
  rng.fill_uniform(b, -1.0, 1.0);
  CHECK(exactly_equal(matmul(a, b), matmul(a, b)));
}

TEST_CASE("matmul rejects non-finite results") {
  auto a = make2(1, 1, {std::numeric_limits<float>::quiet_NaN()});
  auto b = make2(1, 1, {1.0f});
  CHECK_THROWS_AS(matmul(a, b), NumericError);
}

TEST_CASE("softmax closed forms") {
  const auto u = softmax_over_axis(make2(1, 3, {0, 0, 0}), 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3).epsilon(1e-6));

  const float ninf = -std::numeric_limits<float>::infinity();
  const auto s = softmax_over_axis(make2(1, 2, {ninf, 0}), 1);
  CHECK(s[0] == 0.0f);
  CHECK(s[1] == 1.0f);

  const auto q = softmax_over_axis(make2(1, 2, {0, std::log(3.0f)}), 1);
  CHECK(q[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(q[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax properties over random tensors") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> x({6, 5});
    rng.fill_uniform(x, -8.0, 8.0);
    for (std::size_t axis : {std::size_t(0), std::size_t(1)}) {
      const auto y = softmax_over_axis(x, axis);
      const std::size_t slices = axis == 1 ? x.dim(0) : x.dim(1);
      const std::size_t len = axis == 1 ? x.dim(1) : x.dim(0);
      for (std::size_t s = 0; s < slices; ++s) {
        double sum = 0;
        for (std::size_t i = 0; i < len; ++i) {
          const float v = axis == 1 ? y.at(s, i) : y.at(i, s);
          CHECK(v >= 0.0f);
          CHECK(v <= 1.0f);
          sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("softmax error paths") {
  const float ninf = -std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(softmax_over_axis(make2(1, 2, {ninf, ninf}), 1), NumericError);
  CHECK_THROWS_AS(softmax_over_axis(make2(1, 2, {0, std::numeric_limits<float>::infinity()}), 1),
                  NumericError);
}

TEST_CASE("layer_norm closed forms") {
  Tensor<float> gamma = Tensor<float>::full({4}, 1.0f);
  Tensor<float> beta({4});

  const auto z = layer_norm(make2(1, 4, {2, 2, 2, 2}), gamma, beta);
  for (std::size_t i = 0; i < 4; ++i) CHECK(z[i] == 0.0f);

  // a row that already has zero mean and unit variance
  const auto nrm = layer_norm(make2(1, 4, {-1, 1, -1, 1}), gamma, beta);
  CHECK(nrm[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(nrm[1] == doctest::Approx(1.0).epsilon(1e-5));

  Tensor<float> g2 = Tensor<float>::full({2}, 1.0f);
  Tensor<float> b2({2});
  const auto r = layer_norm(make2(1, 2, {1, 3}), g2, b2);
  CHECK(r[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(r[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("gelu values") {
  const auto z = gelu(make2(1, 1, {0}));
  CHECK(z[0] == 0.0f);

  const auto big = gelu(make2(1, 1, {12.0f}));
  CHECK(big[0] == doctest::Approx(12.0).epsilon(1e-6));

  // exact-erf oracle
  const double exact = 0.5 * 1.0 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  const auto g1 = gelu(make2(1, 1, {1.0f}));
  CHECK(std::abs(g1[0] - exact) < 1e-3);
}

TEST_CASE("conv2d basics") {
  // 1x1 kernel of ones is the identity
  Tensor<float> x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<float> k1({1, 1, 1, 1}, {1});
  CHECK(exactly_equal(conv2d(x, k1, 1, 0), x));

  Tensor<float> zero_in({2, 4, 4});
  Tensor<float> k({3, 2, 3, 3});
  const auto out = conv2d(zero_in, k, 1, 1);
  CHECK(out.dims() == Shape{3, 4, 4});
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0f);

  Tensor<float> ones_in = Tensor<float>::full({1, 3, 3}, 1.0f);
  Tensor<float> ones_k = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  const auto nine = conv2d(ones_in, ones_k, 1, 0);
  CHECK(nine.dims() == Shape{1, 1, 1});
  CHECK(nine[0] == 9.0f);

  // non-integral output dims
  Tensor<float> x5({1, 5, 5});
  Tensor<float> k2({1, 1, 2, 2});
  CHECK_THROWS_AS(conv2d(x5, k2, 2, 0), ShapeError);
}

TEST_CASE("transposed_conv2d geometry and values") {
  Tensor<float> zeros({2, 4, 4});
  Tensor<float> k({2, 3, 4, 4});
  const auto z = transposed_conv2d(zeros, k, 2);
  CHECK(z.dims() == Shape{3, 8, 8});
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0f);

  // single input pixel, kernel of ones: a 2x2 patch of v within support
  Tensor<float> one({1, 1, 1}, {3.5f});
  Tensor<float> onesk = Tensor<float>::full({1, 1, 4, 4}, 1.0f);
  const auto patch = transposed_conv2d(one, onesk, 2);
  CHECK(patch.dims() == Shape{1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) CHECK(patch[i] == 3.5f);

  Tensor<float> badk({2, 3, 3, 3});
  CHECK_THROWS_AS(transposed_conv2d(zeros, badk, 2), ShapeError);
}

TEST_CASE("bilinear_resize") {
  Rng rng(5);
  Tensor<float> x({2, 3, 4});
  rng.fill_uniform(x, 0.0, 1.0);
  const auto same = bilinear_resize(x, 3, 4);
  CHECK(exactly_equal(same, x));

  Tensor<float> cst = Tensor<float>::full({1, 2, 2}, 0.7f);
  const auto c4 = bilinear_resize(cst, 4, 4);
  for (std::size_t i = 0; i < c4.size(); ++i) CHECK(c4[i] == doctest::Approx(0.7).epsilon(1e-6));

  Tensor<float> ramp({1, 2, 2}, {0, 1, 0, 1});
  const auto r = bilinear_resize(ramp, 4, 4);
  // columns interpolate monotonically 0 -> 1, identical in each row
  for (std::size_t row = 0; row < 4; ++row) {
    CHECK(r[row * 4 + 0] == 0.0f);
    CHECK(r[row * 4 + 3] == 1.0f);
    for (std::size_t col = 0; col + 1 < 4; ++col) {
      CHECK(r[row * 4 + col] <= r[row * 4 + col + 1]);
    }
  }
}

TEST_CASE("bootstrapped selection hand case") {
  // four pixels with per-pixel losses {0.1, 0.2, 0.3, 0.4}; top half -> 0.35
  // logits chosen so BCE(z, 1) equals the target losses
  std::vector<float> want = {0.1f, 0.2f, 0.3f, 0.4f};
  std::vector<float> logits(4);
  for (int i = 0; i < 4; ++i) {
    const double p = std::exp(-want[i]);
    logits[i] = static_cast<float>(std::log(p / (1 - p)));
  }
  auto z = constant(make2(1, 4, logits));
  Tensor<float> gt = Tensor<float>::full({1, 4}, 1.0f);
  auto loss = bootstrapped_ce(z, gt, 0.5);
  CHECK(loss->value[0] == doctest::Approx(0.35).epsilon(1e-5));
}

TEST_CASE("adamw") {
  SUBCASE("zero gradient and zero decay leaves params unchanged") {
    Param<float> p("p", make2(1, 3, {1, -2, 3}));
    p.grad();  // allocate zeros
    ParamRefs<float> ps = {&p};
    adamw_step(ps, {.lr = 0.1, .weight_decay = 0.0});
    CHECK(p.value()[0] == 1.0f);
    CHECK(p.value()[1] == -2.0f);
    CHECK(p.value()[2] == 3.0f);
  }

  SUBCASE("one step on p=1, g=1 decreases p") {
    Param<float> p("p", make2(1, 1, {1.0f}));
    p.grad()[0] = 1.0f;
    ParamRefs<float> ps = {&p};
    adamw_step(ps, {.lr = 0.1, .weight_decay = 0.0});
    CHECK(p.value()[0] < 1.0f);
  }

  SUBCASE("steps on a quadratic reduce the loss monotonically") {
    Param<float> p("p", make2(1, 2, {2.0f, -3.0f}));
    ParamRefs<float> ps = {&p};
    auto loss_value = [&]() {
      double l = 0;
      for (std::size_t i = 0; i < 2; ++i) l += 0.5 * p.value()[i] * p.value()[i];
      return l;
    };
    double prev = loss_value();
    for (int it = 0; it < 5; ++it) {
      zero_grads(ps);
      auto loss = scale(sum_all(mul(p.var, p.var)), 0.5f);
      backward(loss);
      adamw_step(ps, {.lr = 0.05, .weight_decay = 0.0});
      const double cur = loss_value();
      CHECK(cur < prev);
      prev = cur;
    }
  }
}

TEST_CASE("attention masked-dense and block-skip paths are identical") {
  Rng rng(23);
  const std::size_t n = 5, c = 8, heads = 2;
  for (int trial = 0; trial < 25; ++trial) {
    Tensor<float> qkv({3 * n, 3 * c});
    rng.fill_uniform(qkv, -2.0, 2.0);
    const auto policy = AttentionPolicy::within_frame({{0, n}, {n, 2 * n}, {2 * n, 3 * n}});
    Tensor<float> w_dense, w_block;
    const auto ctx_dense =
        attention_forward(qkv, heads, policy, AttnExec::MaskedDense, &w_dense);
    const auto ctx_block = attention_forward(qkv, heads, policy, AttnExec::BlockSkip, &w_block);
    CHECK(exactly_equal(ctx_dense, ctx_block));
    CHECK(exactly_equal(w_dense, w_block));
  }
}

TEST_CASE("attention rows sum to one over allowed positions and cross-frame weights are zero") {
  Rng rng(29);
  const std::size_t n = 4, c = 6, heads = 3, t = 3 * n;
  Tensor<float> qkv({t, 3 * c});
  rng.fill_uniform(qkv, -1.5, 1.5);
  const auto policy = AttentionPolicy::within_frame({{0, n}, {n, 2 * n}, {2 * n, t}});
  Tensor<float> w;
  attention_forward(qkv, heads, policy, AttnExec::MaskedDense, &w);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < t; ++j) {
        const float wij = w[(h * t + i) * t + j];
        if (!policy.allowed(i, j)) CHECK(wij == 0.0f);
        sum += wij;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

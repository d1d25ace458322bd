// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "msdetr/ops.hpp"
#include "msdetr/tensor.hpp"
#include "test_util.hpp"

using namespace msdetr;
using namespace msdetr::testutil;

TEST_CASE("conv2d: all-ones 3x3 against 3x3 kernel gives 9") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, k, Tensor(), 1, 0);
  CHECK(y.shape() == Shape4{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0).epsilon(1e-15));
}

TEST_CASE("conv2d: identity 1x1 kernel reproduces input") {
  auto g = rng(1);
  Tensor x = random_tensor({2, 1, 4, 5}, g);
  Tensor k = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor y = conv2d(x, k, Tensor(), 1, 0);
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d: matches six-nested-loop oracle") {
  auto g = rng(2);
  Tensor x = random_tensor({2, 3, 5, 5}, g);
  Tensor k = random_tensor({4, 3, 3, 3}, g);
  std::vector<double> bias{0.1, -0.2, 0.3, 0.0};
  Tensor b(Shape4::vec(4), bias);
  Tensor y = conv2d(x, k, b, 1, 1);
  Tensor ref = conv2d_naive(x, k, bias, 1, 1);
  CHECK(y.shape() == ref.shape());
  CHECK(max_rel_diff(ref.values(), y.values()) < 1e-12);
}

TEST_CASE("conv2d: oracle agreement over 50 random shape configurations") {
  auto g = rng(3);
  std::uniform_int_distribution<int64_t> ch(1, 5), sp(3, 9), kk(1, 3), st(1, 2), pp(0, 2);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t cin = ch(g), cout = ch(g), h = sp(g), w = sp(g);
    const int64_t ks = kk(g), stride = st(g), pad = pp(g);
    if (h + 2 * pad < ks || w + 2 * pad < ks) continue;
    Tensor x = random_tensor({2, cin, h, w}, g);
    Tensor k = random_tensor({cout, cin, ks, ks}, g);
    Tensor y = conv2d(x, k, Tensor(), stride, pad);
    Tensor ref = conv2d_naive(x, k, {}, stride, pad);
    REQUIRE(y.shape() == ref.shape());
    CHECK(max_rel_diff(ref.values(), y.values()) < 1e-12);
  }
}

TEST_CASE("conv2d: shape mismatch names the offending axes") {
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  Tensor k = Tensor::zeros({2, 4, 3, 3});
  CHECK_THROWS_AS(conv2d(x, k, Tensor(), 1, 1), DimError);
  try {
    conv2d(x, k, Tensor(), 1, 1);
  } catch (const DimError& e) {
    std::string msg = e.what();
    CHECK(msg.find("3") != std::string::npos);
    CHECK(msg.find("4") != std::string::npos);
  }
}

TEST_CASE("bilinear_sample: grid node, out of bounds, and midpoint") {
  // 2x2 map with values 1,2 / 3,4; pixel centers at normalized (0.25/0.75).
  Tensor f({1, 1, 2, 2}, {1, 2, 3, 4});
  auto v = bilinear_sample(f, 0.25, 0.25);
  CHECK(v[0] == doctest::Approx(1.0).epsilon(1e-15));
  auto far = bilinear_sample(f, -10.0, -10.0);
  CHECK(far[0] == 0.0);
  auto mid = bilinear_sample(f, 0.5, 0.5);
  CHECK(mid[0] == doctest::Approx(2.5).epsilon(1e-14));
}

TEST_CASE("bilinear_sample: continuity under tiny perturbation") {
  auto g = rng(4);
  Tensor f = random_tensor({1, 3, 6, 7}, g);
  std::uniform_real_distribution<double> u(0.1, 0.9);
  for (int i = 0; i < 20; ++i) {
    const double x = u(g), y = u(g);
    auto a = bilinear_sample(f, x, y);
    auto b = bilinear_sample(f, x + 1e-9, y - 1e-9);
    for (size_t c = 0; c < a.size(); ++c) CHECK(std::abs(a[c] - b[c]) <= 1e-6);
  }
}

TEST_CASE("softmax: symmetry, shift invariance, formula oracle") {
  Tensor equal(Shape4::vec(4), {3.0, 3.0, 3.0, 3.0});
  auto s = softmax_lastdim(equal).values();
  for (double v : s) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  Tensor a(Shape4::vec(2), {0.0, 0.0});
  Tensor b(Shape4::vec(2), {1000.0, 1000.0});
  CHECK(max_abs_diff(softmax_lastdim(a).values(), softmax_lastdim(b).values()) == 0.0);

  auto g = rng(5);
  Tensor r = random_tensor(Shape4::vec(8), g, -3.0, 3.0);
  auto out = softmax_lastdim(r).values();
  double denom = 0.0;
  for (double v : r.values()) denom += std::exp(v);
  double sum = 0.0;
  for (size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i] == doctest::Approx(std::exp(r.values()[i]) / denom).epsilon(1e-14));
    CHECK(out[i] > 0.0);
    sum += out[i];
  }
  CHECK(std::abs(sum - 1.0) < 1e-12);
}

TEST_CASE("global_avg_pool: constant, 2x2 fixture, mean oracle") {
  Tensor c = Tensor::full({2, 3, 4, 4}, 2.5);
  auto p = global_avg_pool(c).values();
  for (double v : p) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));

  Tensor f({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_avg_pool(f).item() == doctest::Approx(2.5).epsilon(1e-15));

  auto g = rng(6);
  Tensor r = random_tensor({2, 2, 3, 5}, g);
  auto got = global_avg_pool(r).values();
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t ch = 0; ch < 2; ++ch) {
      double acc = 0.0;
      for (int64_t h = 0; h < 3; ++h)
        for (int64_t w = 0; w < 5; ++w) acc += r.at(n, ch, h, w);
      CHECK(got[n * 2 + ch] == doctest::Approx(acc / 15.0).epsilon(1e-14));
    }

  CHECK_THROWS_AS(global_avg_pool(Tensor::zeros({1, 2, 0, 4})), DimError);
}

TEST_CASE("channel_shuffle: identity at groups=1, transpose order, involution") {
  auto g = rng(7);
  Tensor x = random_tensor({1, 4, 2, 2}, g);
  CHECK(max_abs_diff(channel_shuffle(x, 1), x) == 0.0);

  // channels tagged by value: channel c holds constant c
  std::vector<double> tagged;
  for (int c = 0; c < 4; ++c) tagged.insert(tagged.end(), {double(c), double(c)});
  Tensor t({1, 4, 1, 2}, tagged);
  auto out = channel_shuffle(t, 2);
  CHECK(out.at(0, 0, 0, 0) == 0.0);
  CHECK(out.at(0, 1, 0, 0) == 2.0);
  CHECK(out.at(0, 2, 0, 0) == 1.0);
  CHECK(out.at(0, 3, 0, 0) == 3.0);

  CHECK(max_abs_diff(channel_shuffle(channel_shuffle(x, 2), 2), x) == 0.0);
  CHECK_THROWS_AS(channel_shuffle(x, 3), DimError);
}

TEST_CASE("channel_shuffle: bijection on channel indices") {
  auto g = rng(8);
  for (int64_t groups : {2, 3, 6}) {
    Tensor x = random_tensor({2, 6, 3, 3}, g);
    auto y = channel_shuffle(x, groups);
    // invert: shuffle with complementary group count undoes the transpose
    auto back = channel_shuffle(y, 6 / groups);
    CHECK(max_abs_diff(back, x) == 0.0);
  }
}

TEST_CASE("grad_check: linear, sum of squares, constant") {
  auto g = rng(9);
  Tensor x = random_tensor({1, 2, 3, 3}, g);

  double err_lin = grad_check([](const Tensor& t) { return mul_scalar(sum_all(t), 3.0); }, x);
  CHECK(err_lin <= 1e-10);

  double err_sq = grad_check([](const Tensor& t) { return sum_all(mul(t, t)); }, x);
  CHECK(err_sq <= 1e-7);

  Tensor cst = Tensor::full({1, 1, 1, 1}, 7.0);
  Tensor leaf(x.shape(), x.values(), true);
  Tensor y = sum_all(mul_scalar(leaf, 0.0));
  backward(y);
  for (double v : leaf.grad()) CHECK(v == 0.0);
}

TEST_CASE("grad_check: every differentiable tensor op at random inputs") {
  auto g = rng(10);
  auto scalar_of = [](Tensor t) { return sum_all(t); };
  using Fn = std::function<Tensor(const Tensor&)>;
  auto weight = random_tensor({3, 2, 3, 3}, g);
  auto dw = random_tensor({2, 1, 3, 3}, g);
  std::vector<std::pair<const char*, Fn>> cases = {
      {"conv_input", [&](const Tensor& t) { return sum_all(mul(conv2d(t, weight, Tensor(), 1, 1),
                                                               conv2d(t, weight, Tensor(), 1, 1))); }},
      {"silu", [&](const Tensor& t) { return sum_all(mul(silu(t), silu(t))); }},
      {"sigmoid", [&](const Tensor& t) { return sum_all(sigmoid(t)); }},
      {"softmax", [&](const Tensor& t) {
         return sum_all(mul(softmax_lastdim(t.reshape(Shape4::mat(6, 6))),
                            softmax_lastdim(t.reshape(Shape4::mat(6, 6)))));
       }},
      {"gap", [&](const Tensor& t) { return sum_all(mul(global_avg_pool(t), global_avg_pool(t))); }},
      {"shuffle", [&](const Tensor& t) { return sum_all(mul(channel_shuffle(t, 2), t)); }},
      {"resize", [&](const Tensor& t) {
         auto r = bilinear_resize(t, 6, 12);
         return sum_all(mul(r, r));
       }},
      {"depthwise", [&](const Tensor& t) {
         auto r = depthwise_conv2d(t, dw, Tensor(), 1);
         return sum_all(mul(r, r));
       }},
  };
  for (auto& [name, fn] : cases) {
    for (int i = 0; i < 3; ++i) {
      Tensor x = random_tensor({1, 2, 3, 6}, g, -1.0, 1.0);
      INFO(name);
      CHECK(grad_check(fn, x) <= 1e-6);
    }
  }
}

TEST_CASE("conv2d: gradient w.r.t. kernel and bias") {
  auto g = rng(11);
  Tensor x = random_tensor({2, 2, 4, 4}, g);
  double err_k = grad_check(
      [&](const Tensor& k) {
        auto y = conv2d(x, k, Tensor(), 1, 1);
        return sum_all(mul(y, y));
      },
      random_tensor({3, 2, 3, 3}, g));
  CHECK(err_k <= 1e-6);
  Tensor kfix = random_tensor({3, 2, 3, 3}, g);
  double err_b = grad_check(
      [&](const Tensor& b) {
        auto y = conv2d(x, kfix, b, 2, 1);
        return sum_all(mul(y, y));
      },
      random_tensor(Shape4::vec(3), g));
  CHECK(err_b <= 1e-6);
}

TEST_CASE("autograd: matmul, linear, layernorm, elementwise backward") {
  auto g = rng(12);
  Tensor a = random_tensor(Shape4::mat(3, 4), g);
  Tensor b = random_tensor(Shape4::mat(4, 5), g);
  CHECK(grad_check([&](const Tensor& t) { return sum_all(mul(matmul(t, b), matmul(t, b))); }, a) <=
        1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum_all(mul(matmul(a, t), matmul(a, t))); }, b) <=
        1e-6);

  Tensor w = random_tensor(Shape4::mat(5, 4), g);
  Tensor bias = random_tensor(Shape4::vec(5), g);
  CHECK(grad_check([&](const Tensor& t) { return sum_all(mul(linear(t, w, bias), linear(t, w, bias))); },
                   a) <= 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum_all(mul(linear(a, t, bias), linear(a, t, bias))); },
                   w) <= 1e-6);

  Tensor gamma = random_tensor(Shape4::vec(4), g, 0.5, 1.5);
  Tensor beta = random_tensor(Shape4::vec(4), g);
  CHECK(grad_check(
            [&](const Tensor& t) {
              auto y = layernorm_lastdim(t, gamma, beta, 1e-5);
              return sum_all(mul(y, y));
            },
            a) <= 1e-5);

  Tensor c = random_tensor(Shape4::vec(6), g, 0.2, 2.0);
  CHECK(grad_check([&](const Tensor& t) { return sum_all(div(t, c)); }, random_tensor(Shape4::vec(6), g)) <=
        1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum_all(log_op(clamp_min(t, 1e-3))); }, c) <= 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum_all(pow_const(t, 2.0)); }, c) <= 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum_all(max_elem(t, c)); },
                   random_tensor(Shape4::vec(6), g, 0.2, 2.0)) <= 1e-6);
}

TEST_CASE("autograd: shared subexpression accumulates both paths") {
  Tensor x(Shape4::vec(2), {2.0, 3.0}, true);
  Tensor y = add(mul(x, x), x);  // d/dx = 2x + 1
  backward(sum_all(y));
  CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(x.grad()[1] == doctest::Approx(7.0).epsilon(1e-14));
}

TEST_CASE("tensor invariants: data length matches shape, finite outputs") {
  CHECK_THROWS_AS(Tensor({1, 1, 2, 2}, {1.0, 2.0}), DimError);
  auto g = rng(13);
  Tensor x = random_tensor({1, 2, 4, 4}, g);
  Tensor k = random_tensor({2, 2, 3, 3}, g);
  auto y = silu(conv2d(x, k, Tensor(), 1, 1));
  for (double v : y.values()) CHECK(std::isfinite(v));
}

TEST_CASE("bilinear_resize: dyadic upsample keeps shapes exact") {
  auto g = rng(14);
  Tensor x = random_tensor({1, 3, 4, 6}, g);
  auto up = bilinear_resize(x, 8, 12);
  CHECK(up.shape() == Shape4{1, 3, 8, 12});
  // constant map stays constant under resize
  auto c = bilinear_resize(Tensor::full({1, 2, 3, 3}, 1.25), 6, 6);
  for (double v : c.values()) CHECK(v == doctest::Approx(1.25).epsilon(1e-15));
}

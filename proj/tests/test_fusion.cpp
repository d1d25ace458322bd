// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "msdetr/fusion.hpp"
#include "test_util.hpp"

using namespace msdetr;
using namespace msdetr::testutil;

namespace {

MultiScaleFeatures pyramid(int64_t L, int64_t c, int64_t h0, std::mt19937_64& g, double lo = -1.0,
                           double hi = 1.0) {
  MultiScaleFeatures f;
  for (int64_t l = 0; l < L; ++l) f.levels.push_back(random_tensor({1, c, h0 >> l, h0 >> l}, g, lo, hi));
  return f;
}

void make_conv_identity(ConvBnAct<double>& c) {
  const int64_t C = c.bn.channels();
  if (c.w.shape().h == 3) {
    std::vector<double> w(static_cast<size_t>(C * C * 9), 0.0);
    for (int64_t i = 0; i < C; ++i) w[(i * C + i) * 9 + 4] = 1.0;
    c.w = Tensor({C, C, 3, 3}, w, true);
  } else {
    std::vector<double> w(static_cast<size_t>(C * C), 0.0);
    for (int64_t i = 0; i < C; ++i) w[i * C + i] = 1.0;
    c.w = Tensor({C, C, 1, 1}, w, true);
  }
  c.bn.gamma = Tensor::full(Shape4::vec(C), 1.0, true);
  c.bn.beta = Tensor::zeros(Shape4::vec(C), true);
  c.bn.running_mean.assign(C, 0.0);
  c.bn.running_var.assign(C, 1.0 - c.bn.eps);
  c.act = false;
}

}  // namespace

TEST_CASE("top_down: single level applies only the 1x1 projection") {
  auto g = rng(60);
  auto td = TopDown<double>::make(4, 1, g);
  MultiScaleFeatures f = pyramid(1, 4, 8, g);
  auto out = td.forward(f, false);
  auto expect = td.top.forward(f.levels[0], false);
  CHECK(max_abs_diff(out.levels[0], expect) == 0.0);
}

TEST_CASE("top_down: zero input stays zero") {
  auto g = rng(61);
  auto td = TopDown<double>::make(4, 3, g);
  MultiScaleFeatures f;
  for (int64_t l = 0; l < 3; ++l) f.levels.push_back(Tensor::zeros({1, 4, 8 >> l, 8 >> l}));
  auto out = td.forward(f, false);
  for (const auto& level : out.levels)
    for (double v : level.values()) CHECK(v == 0.0);
}

TEST_CASE("top_down: identity convs expose the upsample-add wiring") {
  auto g = rng(62);
  auto td = TopDown<double>::make(3, 2, g);
  make_conv_identity(td.top);
  make_conv_identity(td.fusers[0]);
  MultiScaleFeatures f = pyramid(2, 3, 8, g);
  auto out = td.forward(f, false);
  Tensor expect = add(f.levels[0], bilinear_resize(f.levels[1], 8, 8));
  CHECK(max_abs_diff(out.levels[0], expect) < 1e-12);
  CHECK(max_abs_diff(out.levels[1], f.levels[1]) < 1e-12);
}

TEST_CASE("top_down: non-dyadic pyramid raises dimension error") {
  auto g = rng(63);
  auto td = TopDown<double>::make(4, 2, g);
  MultiScaleFeatures f;
  f.levels = {random_tensor({1, 4, 8, 8}, g), random_tensor({1, 4, 5, 4}, g)};
  CHECK_THROWS_AS(td.forward(f, false), DimError);
}

TEST_CASE("bottom_up: single level passes through, zero stays zero") {
  auto g = rng(64);
  auto bu = BottomUp<double>::make(4, 1, g);
  MultiScaleFeatures f = pyramid(1, 4, 8, g);
  auto out = bu.forward(f, false);
  CHECK(max_abs_diff(out.levels[0], f.levels[0]) == 0.0);

  auto bu3 = BottomUp<double>::make(4, 3, g);
  MultiScaleFeatures z;
  for (int64_t l = 0; l < 3; ++l) z.levels.push_back(Tensor::zeros({1, 4, 8 >> l, 8 >> l}));
  auto zo = bu3.forward(z, false);
  for (const auto& level : zo.levels)
    for (double v : level.values()) CHECK(v == 0.0);
}

TEST_CASE("bottom_up: two-level composition oracle") {
  auto g = rng(65);
  auto bu = BottomUp<double>::make(3, 2, g);
  MultiScaleFeatures td = pyramid(2, 3, 8, g);
  auto out = bu.forward(td, false);
  Tensor down = bu.downs[0].forward(td.levels[0], false);
  Tensor expect = bu.fusers[0].forward(add(td.levels[1], down), false);
  CHECK(max_abs_diff(out.levels[1], expect) < 1e-12);
  CHECK(max_abs_diff(out.levels[0], td.levels[0]) == 0.0);
}

TEST_CASE("channel_attention: saturated gates pass or kill the signal") {
  auto g = rng(66);
  auto ca = ChannelAttention<double>::make(4, 2, g);
  Tensor x = random_tensor({1, 4, 3, 3}, g);

  ca.fc2_w = Tensor::zeros(Shape4::mat(4, 2), true);
  ca.fc2_b = Tensor::full(Shape4::vec(4), 60.0, true);
  CHECK(max_abs_diff(ca.forward(x), x) < 1e-12);

  ca.fc2_b = Tensor::full(Shape4::vec(4), -60.0, true);
  for (double v : ca.forward(x).values()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("channel_attention: matches step-by-step pipeline oracle") {
  auto g = rng(67);
  auto ca = ChannelAttention<double>::make(4, 2, g);
  ca.fc1_b = random_tensor(Shape4::vec(2), g);
  ca.fc2_b = random_tensor(Shape4::vec(4), g);
  Tensor x = random_tensor({1, 4, 2, 2}, g);

  // GAP -> FC -> ReLU -> FC -> sigmoid -> scale, all by hand
  std::vector<double> gap(4, 0.0);
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t i = 0; i < 4; ++i) gap[c] += x.values()[c * 4 + i] / 4.0;
  std::vector<double> h(2, 0.0);
  for (int64_t i = 0; i < 2; ++i) {
    h[i] = ca.fc1_b.values()[i];
    for (int64_t j = 0; j < 4; ++j) h[i] += ca.fc1_w.values()[i * 4 + j] * gap[j];
    h[i] = std::max(0.0, h[i]);
  }
  std::vector<double> gate(4, 0.0);
  for (int64_t i = 0; i < 4; ++i) {
    gate[i] = ca.fc2_b.values()[i];
    for (int64_t j = 0; j < 2; ++j) gate[i] += ca.fc2_w.values()[i * 2 + j] * h[j];
    gate[i] = 1.0 / (1.0 + std::exp(-gate[i]));
    CHECK(gate[i] > 0.0);
    CHECK(gate[i] < 1.0);
  }
  auto got = ca.forward(x);
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t i = 0; i < 4; ++i)
      CHECK(std::abs(got.values()[c * 4 + i] - x.values()[c * 4 + i] * gate[c]) < 1e-12);
}

TEST_CASE("channel_attention: zero weights give an exact 0.5 gate") {
  auto g = rng(68);
  auto ca = ChannelAttention<double>::make(4, 2, g);
  ca.fc1_w = Tensor::zeros(ca.fc1_w.shape(), true);
  ca.fc1_b = Tensor::zeros(ca.fc1_b.shape(), true);
  ca.fc2_w = Tensor::zeros(ca.fc2_w.shape(), true);
  ca.fc2_b = Tensor::zeros(ca.fc2_b.shape(), true);
  Tensor x = random_tensor({2, 4, 3, 3}, g);
  auto y = ca.forward(x);
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(0.5 * x.values()[i]).epsilon(1e-15));
}

TEST_CASE("channel_attention: indivisible reduction raises dimension error") {
  auto g = rng(69);
  auto ca = ChannelAttention<double>::make(4, 2, g);
  CHECK_THROWS_AS(channel_attention(ca, random_tensor({1, 4, 2, 2}, g), 3), DimError);
  CHECK_NOTHROW(channel_attention(ca, random_tensor({1, 4, 2, 2}, g), 2));
}

TEST_CASE("gsconv: zero input and zero biases give zero output") {
  auto g = rng(70);
  auto gs = GsConv<double>::make(4, 6, g);
  auto y = gs.forward(Tensor::zeros({1, 4, 5, 5}));
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("gsconv: channel count and spatial size contract") {
  auto g = rng(71);
  for (int64_t out : {2, 4, 8}) {
    auto gs = GsConv<double>::make(3, out, g);
    auto y = gs.forward(random_tensor({2, 3, 6, 7}, g));
    CHECK(y.shape() == Shape4{2, out, 6, 7});
  }
  CHECK_THROWS_AS(GsConv<double>::make(3, 5, g), DimError);
}

TEST_CASE("gsconv: identity depthwise kernels duplicate-and-shuffle") {
  auto g = rng(72);
  auto gs = GsConv<double>::make(4, 8, g);
  std::vector<double> dw(static_cast<size_t>(4 * 9), 0.0);
  for (int64_t c = 0; c < 4; ++c) dw[c * 9 + 4] = 1.0;
  gs.dw_w = Tensor({4, 1, 3, 3}, dw, true);
  gs.dw_b = Tensor::zeros(Shape4::vec(4), true);
  Tensor x = random_tensor({1, 4, 5, 5}, g);
  Tensor h = conv2d(x, gs.conv_w, gs.conv_b, 1, 0);
  Tensor expect = channel_shuffle(concat_channels(h, h), 2);
  CHECK(max_abs_diff(gs.forward(x), expect) < 1e-15);
}

TEST_CASE("gsconv: parameter count below a plain 3x3 convolution") {
  for (int64_t c : {4, 8, 16, 64, 256}) {
    CHECK(gsconv_param_count(c, c) < conv3x3_param_count(c, c));
  }
}

TEST_CASE("vovgscsp: empty chain reduces to the 1x1 projection of x") {
  auto g = rng(73);
  auto v = VovGscsp<double>::make(4, 0, g);
  Tensor x = random_tensor({1, 4, 3, 3}, g);
  Tensor expect = conv2d(x, v.proj_w, v.proj_b, 1, 0);
  CHECK(max_abs_diff(v.forward(x), expect) < 1e-15);
}

TEST_CASE("vovgscsp: shape contract and two-block pipeline oracle") {
  auto g = rng(74);
  auto v = VovGscsp<double>::make(4, 2, g);
  Tensor x = random_tensor({1, 4, 3, 3}, g);
  auto y = v.forward(x);
  CHECK(y.shape() == x.shape());

  Tensor x1 = slice_channels(x, 0, 2);
  Tensor x2 = slice_channels(x, 2, 4);
  x2 = v.chain[0].forward(x2);
  x2 = v.chain[1].forward(x2);
  Tensor expect = conv2d(concat_channels(x1, x2), v.proj_w, v.proj_b, 1, 0);
  CHECK(max_abs_diff(y, expect) < 1e-12);

  CHECK_THROWS_AS(VovGscsp<double>::make(5, 1, g), DimError);
}

TEST_CASE("fuse_neck: preserves shapes across L in {2,3,4}") {
  auto g = rng(75);
  for (int64_t L : {2, 3, 4}) {
    auto neck = FuseNeck<double>::make(4, L, 1, g);
    MultiScaleFeatures f = pyramid(L, 4, 16, g);
    auto out = neck.forward(f, false);
    REQUIRE(out.size() == L);
    for (int64_t l = 0; l < L; ++l) CHECK(out.levels[l].shape() == f.levels[l].shape());
  }
}

TEST_CASE("fuse_neck: zero input stays zero") {
  auto g = rng(76);
  auto neck = FuseNeck<double>::make(4, 3, 1, g);
  MultiScaleFeatures f;
  for (int64_t l = 0; l < 3; ++l) f.levels.push_back(Tensor::zeros({1, 4, 8 >> l, 8 >> l}));
  auto out = neck.forward(f, false);
  for (const auto& level : out.levels)
    for (double v : level.values()) CHECK(v == 0.0);
}

TEST_CASE("fuse_neck: with substitutions off it is exactly top_down then bottom_up") {
  auto g = rng(77);
  auto neck = FuseNeck<double>::make(4, 3, 1, g);
  neck.use_vov = false;
  neck.use_ca = false;
  MultiScaleFeatures f = pyramid(3, 4, 8, g);
  auto got = neck.forward(f, false);
  auto expect = neck.bu.forward(neck.td.forward(f, false), false);
  for (int64_t l = 0; l < 3; ++l) CHECK(max_abs_diff(got.levels[l], expect.levels[l]) < 1e-12);
}

TEST_CASE("fusion blocks pass gradient checks") {
  auto g = rng(78);
  auto gs = GsConv<double>::make(2, 4, g);
  CHECK(grad_check(
            [&](const Tensor& t) {
              auto y = gs.forward(t);
              return sum_all(mul(y, y));
            },
            random_tensor({1, 2, 4, 4}, g)) <= 1e-5);

  auto v = VovGscsp<double>::make(4, 2, g);
  CHECK(grad_check(
            [&](const Tensor& t) {
              auto y = v.forward(t);
              return sum_all(mul(y, y));
            },
            random_tensor({1, 4, 4, 4}, g)) <= 1e-5);

  auto ca = ChannelAttention<double>::make(4, 2, g);
  CHECK(grad_check(
            [&](const Tensor& t) {
              auto y = ca.forward(t);
              return sum_all(mul(y, y));
            },
            random_tensor({1, 4, 3, 3}, g)) <= 1e-5);

  auto neck = FuseNeck<double>::make(4, 2, 1, g);
  CHECK(grad_check(
            [&](const Tensor& t) {
              MultiScaleFeatures f;
              f.levels = {t, bilinear_resize(t, 2, 2)};
              auto out = neck.forward(f, false);
              Tensor acc = sum_all(mul(out.levels[0], out.levels[0]));
              return add(acc, sum_all(mul(out.levels[1], out.levels[1])));
            },
            random_tensor({1, 4, 4, 4}, g)) <= 1e-5);
}

TEST_CASE("pathway outputs keep the dyadic level sizes") {
  auto g = rng(79);
  auto neck = FuseNeck<double>::make(4, 3, 1, g);
  MultiScaleFeatures f = pyramid(3, 4, 32, g);
  auto out = neck.forward(f, false);
  for (int64_t l = 0; l < 3; ++l) {
    CHECK(out.levels[l].shape().h == 32 >> l);
    CHECK(out.levels[l].shape().w == 32 >> l);
  }
}

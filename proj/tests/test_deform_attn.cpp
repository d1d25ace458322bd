// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "msdetr/deform_attn.hpp"
#include "test_util.hpp"

using namespace msdetr;
using namespace msdetr::testutil;

namespace {

// Fully unrolled oracle for Eq-style multi-scale deformable attention:
// explicit matvecs for the heads, explicit per-head softmax over (l,k),
// value projection applied per pixel before zero-padded bilinear sampling.
std::vector<double> unrolled_oracle(const DeformAttnParams<double>& p,
                                    const std::vector<double>& zq, double rx, double ry,
                                    const MultiScaleFeatures& feats) {
  const int64_t M = p.m_heads, L = p.l_levels, K = p.k_points, d = p.d_model;
  const int64_t dv = d / M;
  auto matvec = [&](const Tensor& w, const Tensor& b, const std::vector<double>& v) {
    const int64_t rows = w.shape().h, cols = w.shape().w;
    std::vector<double> out(rows, 0.0);
    for (int64_t i = 0; i < rows; ++i) {
      double acc = b.defined() ? b.values()[i] : 0.0;
      for (int64_t j = 0; j < cols; ++j) acc += w.values()[i * cols + j] * v[j];
      out[i] = acc;
    }
    return out;
  };
  const auto offsets = matvec(p.offset_w, p.offset_b, zq);
  const auto scores = matvec(p.weight_w, p.weight_b, zq);

  // per-head softmax over the L*K block
  std::vector<double> weights(scores.size());
  for (int64_t m = 0; m < M; ++m) {
    double mx = -1e300;
    for (int64_t i = 0; i < L * K; ++i) mx = std::max(mx, scores[m * L * K + i]);
    double sum = 0.0;
    for (int64_t i = 0; i < L * K; ++i) {
      weights[m * L * K + i] = std::exp(scores[m * L * K + i] - mx);
      sum += weights[m * L * K + i];
    }
    for (int64_t i = 0; i < L * K; ++i) weights[m * L * K + i] /= sum;
  }

  // project each level pixelwise: v(pix) = value_w * x(pix) + value_b
  std::vector<Tensor> projected;
  for (const auto& level : feats.levels) {
    const Shape4 s = level.shape();
    std::vector<double> pv(static_cast<size_t>(s.numel()));
    for (int64_t yy = 0; yy < s.h; ++yy)
      for (int64_t xx = 0; xx < s.w; ++xx) {
        std::vector<double> pix(static_cast<size_t>(s.c));
        for (int64_t c = 0; c < s.c; ++c) pix[c] = level.at(0, c, yy, xx);
        auto proj = matvec(p.value_w, p.value_b, pix);
        for (int64_t c = 0; c < s.c; ++c) pv[(c * s.h + yy) * s.w + xx] = proj[c];
      }
    projected.emplace_back(s, std::move(pv));
  }

  std::vector<double> out(static_cast<size_t>(d), 0.0);
  for (int64_t m = 0; m < M; ++m) {
    std::vector<double> agg(static_cast<size_t>(dv), 0.0);
    for (int64_t l = 0; l < L; ++l)
      for (int64_t k = 0; k < K; ++k) {
        const int64_t slot = (m * L + l) * K + k;
        const double sx = rx + offsets[slot * 2 + 0];
        const double sy = ry + offsets[slot * 2 + 1];
        auto sampled = bilinear_sample(projected[l], sx, sy);
        for (int64_t j = 0; j < dv; ++j) agg[j] += weights[slot] * sampled[m * dv + j];
      }
    // out += W_m (columns m*dv..) * agg
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < dv; ++j) out[i] += p.out_w.values()[i * d + m * dv + j] * agg[j];
  }
  for (int64_t i = 0; i < d; ++i) out[i] += p.out_b.values()[i];
  return out;
}

DeformAttnParams<double> random_params(int64_t d, int64_t M, int64_t K, int64_t L,
                                       std::mt19937_64& g) {
  auto p = DeformAttnParams<double>::make(d, M, K, L, g);
  p.offset_w = Tensor::uniform(p.offset_w.shape(), g, -0.1, 0.1, true);
  p.offset_b = Tensor::uniform(p.offset_b.shape(), g, -0.2, 0.2, true);
  p.weight_w = Tensor::uniform(p.weight_w.shape(), g, -1.0, 1.0, true);
  p.weight_b = Tensor::uniform(p.weight_b.shape(), g, -0.5, 0.5, true);
  p.value_b = Tensor::uniform(p.value_b.shape(), g, -0.2, 0.2, true);
  p.out_b = Tensor::uniform(p.out_b.shape(), g, -0.2, 0.2, true);
  return p;
}

void set_identity_projections(DeformAttnParams<double>& p) {
  std::vector<double> eye(static_cast<size_t>(p.d_model * p.d_model), 0.0);
  for (int64_t i = 0; i < p.d_model; ++i) eye[i * p.d_model + i] = 1.0;
  p.value_w = Tensor(Shape4::mat(p.d_model, p.d_model), eye, true);
  p.out_w = Tensor(Shape4::mat(p.d_model, p.d_model), eye, true);
  p.value_b = Tensor::zeros(Shape4::vec(p.d_model), true);
  p.out_b = Tensor::zeros(Shape4::vec(p.d_model), true);
}

void zero_offset_head(DeformAttnParams<double>& p) {
  p.offset_w = Tensor::zeros(p.offset_w.shape(), true);
  p.offset_b = Tensor::zeros(p.offset_b.shape(), true);
}

MultiScaleFeatures random_pyramid(int64_t L, int64_t d, int64_t h0, std::mt19937_64& g) {
  MultiScaleFeatures f;
  for (int64_t l = 0; l < L; ++l) {
    const int64_t hl = std::max<int64_t>(1, h0 >> l);
    f.levels.push_back(random_tensor({1, d, hl, hl}, g));
  }
  return f;
}

}  // namespace

TEST_CASE("predict_offsets: zero head, bias grid, matmul oracle") {
  auto g = rng(40);
  auto p = DeformAttnParams<double>::make(8, 2, 2, 2, g);
  zero_offset_head(p);
  Tensor z = random_tensor(Shape4::vec(8), g);
  for (auto& o : predict_offsets(p, z)) {
    CHECK(o[0] == 0.0);
    CHECK(o[1] == 0.0);
  }

  // bias pattern independent of the query
  std::vector<double> pattern(2 * 2 * 2 * 2);
  for (size_t i = 0; i < pattern.size(); ++i) pattern[i] = 0.01 * static_cast<double>(i);
  p.offset_b = Tensor(Shape4::vec(16), pattern, true);
  auto o1 = predict_offsets(p, z);
  auto o2 = predict_offsets(p, random_tensor(Shape4::vec(8), g));
  for (size_t i = 0; i < o1.size(); ++i) {
    CHECK(o1[i][0] == o2[i][0]);
    CHECK(o1[i][0] == doctest::Approx(pattern[2 * i]).epsilon(1e-15));
  }

  auto pr = random_params(8, 2, 2, 2, g);
  Tensor zq = random_tensor(Shape4::vec(8), g);
  auto got = predict_offsets(pr, zq);
  for (size_t slot = 0; slot < got.size(); ++slot)
    for (int xy = 0; xy < 2; ++xy) {
      double acc = pr.offset_b.values()[slot * 2 + xy];
      for (int64_t j = 0; j < 8; ++j)
        acc += pr.offset_w.values()[(slot * 2 + xy) * 8 + j] * zq.values()[j];
      CHECK(std::abs(got[slot][xy] - acc) < 1e-12);
    }
}

TEST_CASE("predict_weights: uniform at zero scores, simplex per head, saturation") {
  auto g = rng(41);
  auto p = DeformAttnParams<double>::make(8, 2, 4, 3, g);
  Tensor z = random_tensor(Shape4::vec(8), g);
  auto w = predict_weights(p, z);  // zero weight head -> uniform
  for (double v : w) CHECK(v == doctest::Approx(1.0 / 12.0).epsilon(1e-14));

  auto pr = random_params(8, 2, 4, 3, g);
  for (int trial = 0; trial < 5; ++trial) {
    auto wr = predict_weights(pr, random_tensor(Shape4::vec(8), g));
    for (int64_t m = 0; m < 2; ++m) {
      double sum = 0.0;
      for (int64_t i = 0; i < 12; ++i) sum += wr[m * 12 + i];
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }

  // one score at +50 saturates its slot
  auto ps = DeformAttnParams<double>::make(4, 1, 2, 2, g);
  std::vector<double> bias(4, 0.0);
  bias[1] = 50.0;
  ps.weight_b = Tensor(Shape4::vec(4), bias, true);
  auto ws = predict_weights(ps, Tensor::zeros(Shape4::vec(4)));
  CHECK(ws[1] >= 1.0 - 1e-15);
}

TEST_CASE("deform_attn: single point identity reads the reference value") {
  auto g = rng(42);
  auto p = DeformAttnParams<double>::make(4, 1, 1, 1, g);
  set_identity_projections(p);
  zero_offset_head(p);
  Tensor feat = random_tensor({1, 4, 4, 4}, g);
  // reference at the center of pixel (1,2): normalized ((2+.5)/4, (1+.5)/4)
  auto out = deform_attn(p, Tensor::zeros(Shape4::vec(4)), 2.5 / 4.0, 1.5 / 4.0, feat);
  for (int64_t c = 0; c < 4; ++c) CHECK(out[c] == doctest::Approx(feat.at(0, c, 1, 2)).epsilon(1e-14));
}

TEST_CASE("deform_attn: convexity on constant maps") {
  auto g = rng(43);
  auto p = random_params(6, 2, 3, 1, g);
  set_identity_projections(p);
  // keep sampling interior: small offsets around a central ref
  p.offset_w = Tensor::zeros(p.offset_w.shape(), true);
  p.offset_b = Tensor::uniform(p.offset_b.shape(), g, -0.1, 0.1, true);
  Tensor feat = Tensor::full({1, 6, 8, 8}, 3.25);
  auto out = deform_attn(p, random_tensor(Shape4::vec(6), g), 0.5, 0.5, feat);
  for (double v : out) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("deform_attn: unrolled loop oracle at d=4, M=2, K=3, 5x5") {
  auto g = rng(44);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(4, 2, 3, 1, g);
    MultiScaleFeatures f;
    f.levels = {random_tensor({1, 4, 5, 5}, g)};
    std::vector<double> zq(4);
    for (auto& v : zq) v = std::uniform_real_distribution<double>(-1, 1)(g);
    const double rx = std::uniform_real_distribution<double>(0.0, 1.0)(g);
    const double ry = std::uniform_real_distribution<double>(0.0, 1.0)(g);
    auto got = deform_attn(p, Tensor(Shape4::vec(4), zq), rx, ry, f.levels[0]);
    auto expect = unrolled_oracle(p, zq, rx, ry, f);
    for (size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("ms_deform_attn: degenerate L=1 equals deform_attn") {
  auto g = rng(45);
  auto p = random_params(4, 2, 2, 1, g);
  MultiScaleFeatures f;
  f.levels = {random_tensor({1, 4, 6, 6}, g)};
  Tensor z = random_tensor(Shape4::vec(4), g);
  auto a = ms_deform_attn(p, z, 0.4, 0.6, f);
  auto b = deform_attn(p, z, 0.4, 0.6, f.levels[0]);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("ms_deform_attn: constant levels aggregate by per-level weight mass") {
  auto g = rng(46);
  const int64_t d = 4, M = 2, K = 2, L = 3;
  auto p = random_params(d, M, K, L, g);
  set_identity_projections(p);
  zero_offset_head(p);
  const double cl[3] = {1.0, 2.0, -0.5};
  MultiScaleFeatures f;
  for (int64_t l = 0; l < L; ++l) f.levels.push_back(Tensor::full({1, d, 4 >> (l > 0), 4 >> (l > 0)}, cl[l]));
  Tensor z = random_tensor(Shape4::vec(d), g);
  auto weights = predict_weights(p, z);
  auto out = ms_deform_attn(p, z, 0.5, 0.5, f);
  // per head m, channels of that head hold sum_l c_l * (sum_k A_mlk)
  const int64_t dv = d / M;
  for (int64_t m = 0; m < M; ++m) {
    double expect = 0.0;
    for (int64_t l = 0; l < L; ++l)
      for (int64_t k = 0; k < K; ++k) expect += cl[l] * weights[(m * L + l) * K + k];
    for (int64_t j = 0; j < dv; ++j)
      CHECK(out[m * dv + j] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("ms_deform_attn: unrolled loop oracle at d=4, M=2, K=2, L=3") {
  auto g = rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(4, 2, 2, 3, g);
    auto f = random_pyramid(3, 4, 8, g);
    std::vector<double> zq(4);
    for (auto& v : zq) v = std::uniform_real_distribution<double>(-1, 1)(g);
    const double rx = std::uniform_real_distribution<double>(0.0, 1.0)(g);
    const double ry = std::uniform_real_distribution<double>(0.0, 1.0)(g);
    auto got = ms_deform_attn(p, Tensor(Shape4::vec(4), zq), rx, ry, f);
    auto expect = unrolled_oracle(p, zq, rx, ry, f);
    for (size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - expect[i]) < 1e-12);
  }
}

TEST_CASE("ms_deform_attn: level count mismatch raises dimension error") {
  auto g = rng(48);
  auto p = random_params(4, 2, 2, 3, g);
  auto f = random_pyramid(2, 4, 8, g);
  CHECK_THROWS_AS(ms_deform_attn(p, Tensor::zeros(Shape4::vec(4)), 0.5, 0.5, f), DimError);
}

TEST_CASE("sampling is sparse: exactly M*L*K*4 reads per query") {
  auto g = rng(49);
  const int64_t M = 2, K = 3, L = 2;
  auto p = random_params(4, M, K, L, g);
  auto f = random_pyramid(L, 4, 16, g);
  sampling_stats::enable(true);
  sampling_stats::reset();
  (void)ms_deform_attn(p, random_tensor(Shape4::vec(4), g), 0.3, 0.7, f);
  CHECK(sampling_stats::reads() == static_cast<uint64_t>(M * L * K * 4));

  // independent of map size
  sampling_stats::reset();
  auto f2 = random_pyramid(L, 4, 64, g);
  (void)ms_deform_attn(p, random_tensor(Shape4::vec(4), g), 0.3, 0.7, f2);
  CHECK(sampling_stats::reads() == static_cast<uint64_t>(M * L * K * 4));
  sampling_stats::enable(false);
}

TEST_CASE("grid-node offsets match a dense weighted-sum oracle") {
  auto g = rng(50);
  const int64_t d = 4, M = 2, K = 2, L = 2;
  auto p = random_params(d, M, K, L, g);
  set_identity_projections(p);
  // snap every sampling point onto exact grid nodes of an 8x8 / 4x4 pyramid
  MultiScaleFeatures f = random_pyramid(L, d, 8, g);
  p.offset_w = Tensor::zeros(p.offset_w.shape(), true);
  std::vector<double> ob(static_cast<size_t>(2 * M * L * K));
  std::mt19937_64 gg(7);
  // choose integer pixel targets; ref will be (0.5, 0.5)
  std::vector<std::array<int64_t, 2>> targets;
  for (int64_t m = 0; m < M; ++m)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t k = 0; k < K; ++k) {
        const int64_t hl = f.levels[l].shape().h, wl = f.levels[l].shape().w;
        const int64_t txp = std::uniform_int_distribution<int64_t>(0, wl - 1)(gg);
        const int64_t typ = std::uniform_int_distribution<int64_t>(0, hl - 1)(gg);
        targets.push_back({txp, typ});
        const int64_t slot = (m * L + l) * K + k;
        ob[slot * 2 + 0] = (static_cast<double>(txp) + 0.5) / wl - 0.5;
        ob[slot * 2 + 1] = (static_cast<double>(typ) + 0.5) / hl - 0.5;
      }
  p.offset_b = Tensor(Shape4::vec(2 * M * L * K), ob, true);
  Tensor z = random_tensor(Shape4::vec(d), g);
  auto weights = predict_weights(p, z);
  auto out = ms_deform_attn(p, z, 0.5, 0.5, f);
  const int64_t dv = d / M;
  size_t t = 0;
  std::vector<double> expect(static_cast<size_t>(d), 0.0);
  for (int64_t m = 0; m < M; ++m)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t k = 0; k < K; ++k, ++t) {
        const int64_t slot = (m * L + l) * K + k;
        for (int64_t j = 0; j < dv; ++j)
          expect[m * dv + j] +=
              weights[slot] * f.levels[l].at(0, m * dv + j, targets[t][1], targets[t][0]);
      }
  for (int64_t i = 0; i < d; ++i) CHECK(std::abs(out[i] - expect[i]) < 1e-12);
}

TEST_CASE("ms_deform_attn: gradients w.r.t. query, offset head, and features") {
  auto g = rng(51);
  const int64_t d = 4, M = 2, K = 2, L = 2;
  auto scalar_loss = [&](DeformAttnParams<double>& p, const Tensor& q, const MultiScaleFeatures& f) {
    Tensor ref(Shape4::mat(1, 2), {0.45, 0.55});
    Tensor out = ms_deform_attn_rows(p, q.reshape(Shape4::mat(1, d)), ref, f, {0});
    return sum_all(mul(out, out));
  };

  for (int trial = 0; trial < 3; ++trial) {
    auto p = random_params(d, M, K, L, g);
    auto f = random_pyramid(L, d, 6, g);
    // w.r.t. query embedding
    CHECK(grad_check([&](const Tensor& t) { return scalar_loss(p, t, f); },
                     random_tensor(Shape4::vec(d), g)) <= 1e-5);
    // w.r.t. offset head weights
    Tensor q = random_tensor(Shape4::vec(d), g);
    CHECK(grad_check(
              [&](const Tensor& t) {
                auto pc = p;
                pc.offset_w = t;
                return scalar_loss(pc, q, f);
              },
              p.offset_w.detach()) <= 1e-5);
    // w.r.t. one feature level
    CHECK(grad_check(
              [&](const Tensor& t) {
                auto fc = f;
                fc.levels[0] = t;
                return scalar_loss(p, q, fc);
              },
              f.levels[0]) <= 1e-5);
  }
}

TEST_CASE("encoder_layer: zero attention and FFN reduce to layer-normalized input") {
  auto g = rng(52);
  auto layer = EncoderLayer::make(4, 2, 2, 2, 8, g);
  layer.attn.out_w = Tensor::zeros(Shape4::mat(4, 4), true);
  layer.attn.out_b = Tensor::zeros(Shape4::vec(4), true);
  layer.ffn_w1 = Tensor::zeros(layer.ffn_w1.shape(), true);
  layer.ffn_b1 = Tensor::zeros(layer.ffn_b1.shape(), true);
  layer.ffn_w2 = Tensor::zeros(layer.ffn_w2.shape(), true);
  layer.ffn_b2 = Tensor::zeros(layer.ffn_b2.shape(), true);

  MultiScaleFeatures f;
  f.levels = {random_tensor({1, 4, 4, 4}, g), random_tensor({1, 4, 2, 2}, g)};
  auto out = layer.forward(f);
  // exact: both residual branches vanish, leaving LN2(LN1(x));
  // LN of an already-normalized row differs from it only through eps
  for (size_t l = 0; l < f.levels.size(); ++l) {
    Tensor ln1 = layernorm_lastdim(nchw_to_rows(f.levels[l]), layer.ln1_g, layer.ln1_b, 1e-5);
    Tensor exact = rows_to_nchw(layernorm_lastdim(ln1, layer.ln2_g, layer.ln2_b, 1e-5),
                                f.levels[l].shape());
    CHECK(max_abs_diff(out.levels[l], exact) < 1e-12);
    CHECK(max_abs_diff(out.levels[l], rows_to_nchw(ln1, f.levels[l].shape())) < 1e-2);
  }
}

TEST_CASE("encoder_layer: shape preservation for L in {2,3,4}") {
  auto g = rng(53);
  for (int64_t L : {2, 3, 4}) {
    auto layer = EncoderLayer::make(8, 2, 2, L, 16, g);
    MultiScaleFeatures f = random_pyramid(L, 8, 16, g);
    auto out = layer.forward(f);
    REQUIRE(out.size() == L);
    for (int64_t l = 0; l < L; ++l) CHECK(out.levels[l].shape() == f.levels[l].shape());
  }
}

TEST_CASE("single-pixel levels: attention is a convex per-level mix") {
  auto g = rng(54);
  const int64_t d = 4, M = 2, K = 2, L = 3;
  auto p = random_params(d, M, K, L, g);
  set_identity_projections(p);
  zero_offset_head(p);
  MultiScaleFeatures f;
  const double cl[3] = {0.5, -1.0, 2.0};
  for (int64_t l = 0; l < L; ++l) f.levels.push_back(Tensor::full({1, d, 1, 1}, cl[l]));
  Tensor z = random_tensor(Shape4::vec(d), g);
  auto weights = predict_weights(p, z);
  auto out = ms_deform_attn(p, z, 0.5, 0.5, f);
  const int64_t dv = d / M;
  for (int64_t m = 0; m < M; ++m) {
    double expect = 0.0;
    for (int64_t l = 0; l < L; ++l)
      for (int64_t k = 0; k < K; ++k) expect += cl[l] * weights[(m * L + l) * K + k];
    for (int64_t j = 0; j < dv; ++j)
      CHECK(out[m * dv + j] == doctest::Approx(expect).epsilon(1e-12));
  }
}

// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/deform_attn.hpp"

#include <cmath>

namespace msdetr {

namespace {

constexpr double kPi = 3.14159265358979323846;

template <typename T>
TensorT<T> xavier_mat(int64_t rows, int64_t cols, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return TensorT<T>::uniform(Shape4::mat(rows, cols), rng, static_cast<T>(-a), static_cast<T>(a),
                             /*requires_grad=*/true);
}

}  // namespace

template <typename T>
DeformAttnParams<T> DeformAttnParams<T>::make(int64_t d, int64_t heads, int64_t points,
                                              int64_t levels, std::mt19937_64& rng) {
  check(heads >= 1 && d % heads == 0,
        "deform_attn: d_model " + std::to_string(d) + " not divisible by heads " +
            std::to_string(heads));
  DeformAttnParams<T> p;
  p.m_heads = heads;
  p.k_points = points;
  p.l_levels = levels;
  p.d_model = d;
  p.value_w = xavier_mat<T>(d, d, rng);
  p.value_b = TensorT<T>::zeros(Shape4::vec(d), true);
  p.out_w = xavier_mat<T>(d, d, rng);
  p.out_b = TensorT<T>::zeros(Shape4::vec(d), true);

  const int64_t mlk = heads * levels * points;
  p.offset_w = TensorT<T>::zeros(Shape4::mat(2 * mlk, d), true);
  std::vector<T> ob(static_cast<size_t>(2 * mlk));
  for (int64_t m = 0; m < heads; ++m)
    for (int64_t l = 0; l < levels; ++l)
      for (int64_t k = 0; k < points; ++k) {
        const double angle = 2.0 * kPi * (static_cast<double>(k) / points +
                                          static_cast<double>(m) / (heads * points));
        const double radius = 0.02 * std::pow(2.0, static_cast<double>(l));
        const int64_t idx = ((m * levels + l) * points + k) * 2;
        ob[idx + 0] = static_cast<T>(radius * std::cos(angle));
        ob[idx + 1] = static_cast<T>(radius * std::sin(angle));
      }
  p.offset_b = TensorT<T>(Shape4::vec(2 * mlk), std::move(ob), true);
  p.weight_w = TensorT<T>::zeros(Shape4::mat(mlk, d), true);
  p.weight_b = TensorT<T>::zeros(Shape4::vec(mlk), true);
  return p;
}

template <typename T>
TensorT<T> ms_deform_sample(const std::vector<TensorT<T>>& values, const TensorT<T>& loc,
                            const TensorT<T>& weights, int64_t m_heads,
                            const std::vector<int64_t>& row_item) {
  const int64_t L = static_cast<int64_t>(values.size());
  check(L >= 1, "ms_deform_sample: no value levels");
  const int64_t d = values[0].shape().c;
  check(d % m_heads == 0, "ms_deform_sample: channels not divisible by heads");
  const int64_t dv = d / m_heads;
  const int64_t N = loc.shape().h;
  const int64_t mlk = weights.shape().w;
  check(mlk % (m_heads * L) == 0, "ms_deform_sample: weight width " + std::to_string(mlk) +
                                      " not divisible by M*L");
  const int64_t K = mlk / (m_heads * L);
  check(loc.shape().w == 2 * mlk, "ms_deform_sample: loc width must be 2*M*L*K");
  check(static_cast<int64_t>(row_item.size()) == N, "ms_deform_sample: row_item size mismatch");
  for (const auto& v : values)
    check(v.shape().c == d, "ms_deform_sample: level channel width mismatch");

  struct LevelView {
    const T* data;
    int64_t h, w, c;
  };
  std::vector<LevelView> views;
  views.reserve(values.size());
  for (const auto& v : values)
    views.push_back({v.values().data(), v.shape().h, v.shape().w, v.shape().c});

  const auto& locv = loc.values();
  const auto& wv = weights.values();
  std::vector<T> out(static_cast<size_t>(N * d), T(0));

#pragma omp parallel for if (N > 64) schedule(static)
  for (int64_t r = 0; r < N; ++r) {
    const int64_t item = row_item[r];
    T* orow = out.data() + r * d;
    for (int64_t m = 0; m < m_heads; ++m) {
      for (int64_t l = 0; l < L; ++l) {
        const LevelView& lv = views[static_cast<size_t>(l)];
        const int64_t plane = lv.h * lv.w;
        const T* base = lv.data + (item * lv.c + m * dv) * plane;
        for (int64_t k = 0; k < K; ++k) {
          const int64_t slot = (m * L + l) * K + k;
          const T a = wv[r * mlk + slot];
          const T x = locv[r * 2 * mlk + slot * 2 + 0];
          const T y = locv[r * 2 * mlk + slot * 2 + 1];
          const T px = x * static_cast<T>(lv.w) - T(0.5);
          const T py = y * static_cast<T>(lv.h) - T(0.5);
          const int64_t x0 = static_cast<int64_t>(std::floor(px));
          const int64_t y0 = static_cast<int64_t>(std::floor(py));
          const T fx = px - static_cast<T>(x0);
          const T fy = py - static_cast<T>(y0);
          const bool in00 = y0 >= 0 && y0 < lv.h && x0 >= 0 && x0 < lv.w;
          const bool in01 = y0 >= 0 && y0 < lv.h && x0 + 1 >= 0 && x0 + 1 < lv.w;
          const bool in10 = y0 + 1 >= 0 && y0 + 1 < lv.h && x0 >= 0 && x0 < lv.w;
          const bool in11 = y0 + 1 >= 0 && y0 + 1 < lv.h && x0 + 1 >= 0 && x0 + 1 < lv.w;
          const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx;
          const T w10 = fy * (T(1) - fx), w11 = fy * fx;
          const int64_t o00 = y0 * lv.w + x0;
          for (int64_t j = 0; j < dv; ++j) {
            const T* pl = base + j * plane;
            T v = T(0);
            if (in00) v += w00 * pl[o00];
            if (in01) v += w01 * pl[o00 + 1];
            if (in10) v += w10 * pl[o00 + lv.w];
            if (in11) v += w11 * pl[o00 + lv.w + 1];
            orow[m * dv + j] += a * v;
          }
        }
      }
    }
  }
  if (sampling_stats::enabled())
    sampling_stats::record(static_cast<uint64_t>(N * m_heads * L * K * 4));

  const Shape4 os = Shape4::mat(N, d);
  bool tape = autograd::grad_enabled() && (loc.on_tape() || weights.on_tape());
  if (!tape && autograd::grad_enabled())
    for (const auto& v : values) tape = tape || v.on_tape();
  if (!tape) return TensorT<T>(os, std::move(out));

  std::vector<std::shared_ptr<autograd::Node<T>>> parents;
  std::vector<std::shared_ptr<const std::vector<T>>> vdata;
  std::vector<Shape4> vshapes;
  for (const auto& v : values) {
    parents.push_back(v.node());
    vdata.push_back(v.data());
    vshapes.push_back(v.shape());
  }
  parents.push_back(loc.node());
  parents.push_back(weights.node());
  auto dloc = loc.data();
  auto dw = weights.data();

  auto node = detail::make_node<T>(
      os.numel(), parents,
      [parents, vdata, vshapes, dloc, dw, row_item, m_heads, L, K, dv, d,
       mlk](const std::vector<T>& g) {
        const int64_t N = static_cast<int64_t>(row_item.size());
        auto ploc = parents[parents.size() - 2];
        auto pw = parents[parents.size() - 1];
        for (int64_t r = 0; r < N; ++r) {
          const int64_t item = row_item[r];
          const T* grow = g.data() + r * d;
          for (int64_t m = 0; m < m_heads; ++m) {
            for (int64_t l = 0; l < L; ++l) {
              const Shape4& vs = vshapes[static_cast<size_t>(l)];
              const int64_t plane = vs.h * vs.w;
              const T* base =
                  vdata[static_cast<size_t>(l)]->data() + (item * vs.c + m * dv) * plane;
              T* gvalue = parents[static_cast<size_t>(l)]
                              ? parents[static_cast<size_t>(l)]->grad_buf().data() +
                                    (item * vs.c + m * dv) * plane
                              : nullptr;
              for (int64_t k = 0; k < K; ++k) {
                const int64_t slot = (m * L + l) * K + k;
                const T a = (*dw)[r * mlk + slot];
                const T x = (*dloc)[r * 2 * mlk + slot * 2 + 0];
                const T y = (*dloc)[r * 2 * mlk + slot * 2 + 1];
                const T px = x * static_cast<T>(vs.w) - T(0.5);
                const T py = y * static_cast<T>(vs.h) - T(0.5);
                const int64_t x0 = static_cast<int64_t>(std::floor(px));
                const int64_t y0 = static_cast<int64_t>(std::floor(py));
                const T fx = px - static_cast<T>(x0);
                const T fy = py - static_cast<T>(y0);
                const bool in00 = y0 >= 0 && y0 < vs.h && x0 >= 0 && x0 < vs.w;
                const bool in01 = y0 >= 0 && y0 < vs.h && x0 + 1 >= 0 && x0 + 1 < vs.w;
                const bool in10 = y0 + 1 >= 0 && y0 + 1 < vs.h && x0 >= 0 && x0 < vs.w;
                const bool in11 = y0 + 1 >= 0 && y0 + 1 < vs.h && x0 + 1 >= 0 && x0 + 1 < vs.w;
                const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx;
                const T w10 = fy * (T(1) - fx), w11 = fy * fx;
                const int64_t o00 = y0 * vs.w + x0;
                T gweight = T(0);
                T gpx = T(0), gpy = T(0);
                for (int64_t j = 0; j < dv; ++j) {
                  const T* pl = base + j * plane;
                  const T gj = grow[m * dv + j];
                  const T ag = a * gj;
                  T v00 = T(0), v01 = T(0), v10 = T(0), v11 = T(0);
                  if (in00) v00 = pl[o00];
                  if (in01) v01 = pl[o00 + 1];
                  if (in10) v10 = pl[o00 + vs.w];
                  if (in11) v11 = pl[o00 + vs.w + 1];
                  gweight += gj * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11);
                  gpx += ag * ((v01 - v00) * (T(1) - fy) + (v11 - v10) * fy);
                  gpy += ag * ((v10 - v00) * (T(1) - fx) + (v11 - v01) * fx);
                  if (gvalue) {
                    T* gpl = gvalue + j * plane;
                    if (in00) gpl[o00] += ag * w00;
                    if (in01) gpl[o00 + 1] += ag * w01;
                    if (in10) gpl[o00 + vs.w] += ag * w10;
                    if (in11) gpl[o00 + vs.w + 1] += ag * w11;
                  }
                }
                if (pw) pw->grad_buf()[r * mlk + slot] += gweight;
                if (ploc) {
                  ploc->grad_buf()[r * 2 * mlk + slot * 2 + 0] += gpx * static_cast<T>(vs.w);
                  ploc->grad_buf()[r * 2 * mlk + slot * 2 + 1] += gpy * static_cast<T>(vs.h);
                }
              }
            }
          }
        }
      });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> ms_deform_attn_rows(DeformAttnParams<T>& p, const TensorT<T>& queries,
                               const TensorT<T>& ref_points, const MultiScaleFeaturesT<T>& feats,
                               const std::vector<int64_t>& row_item) {
  check(feats.size() == p.l_levels, "ms_deform_attn: level count " + std::to_string(feats.size()) +
                                        " != configured L " + std::to_string(p.l_levels));
  check(feats.channels() == p.d_model,
        "ms_deform_attn: feature channels " + std::to_string(feats.channels()) + " != d_model " +
            std::to_string(p.d_model));
  check(queries.shape().w == p.d_model, "ms_deform_attn: query width != d_model");

  TensorT<T> offsets = linear(queries, p.offset_w, p.offset_b);
  TensorT<T> loc = add_tiled_cols(offsets, ref_points, 2);
  TensorT<T> scores = linear(queries, p.weight_w, p.weight_b);
  TensorT<T> weights = softmax_groups(scores, p.l_levels * p.k_points);

  std::vector<TensorT<T>> projected;
  projected.reserve(feats.levels.size());
  const Shape4 wshape{p.d_model, p.d_model, 1, 1};
  for (const auto& level : feats.levels)
    projected.push_back(conv2d(level, p.value_w.reshape(wshape), p.value_b, 1, 0));

  TensorT<T> core = ms_deform_sample(projected, loc, weights, p.m_heads, row_item);
  return linear(core, p.out_w, p.out_b);
}

template <typename T>
std::vector<std::array<T, 2>> predict_offsets(const DeformAttnParams<T>& p, const TensorT<T>& z_q) {
  check(z_q.numel() == p.d_model, "predict_offsets: query width != d_model");
  autograd::NoGradGuard no_grad;
  TensorT<T> q = z_q.detach().reshape(Shape4::mat(1, p.d_model));
  auto flat = std::move(linear(q, p.offset_w, p.offset_b)).values();
  std::vector<std::array<T, 2>> out(flat.size() / 2);
  for (size_t i = 0; i < out.size(); ++i) out[i] = {flat[2 * i], flat[2 * i + 1]};
  return out;
}

template <typename T>
std::vector<T> predict_weights(const DeformAttnParams<T>& p, const TensorT<T>& z_q) {
  check(z_q.numel() == p.d_model, "predict_weights: query width != d_model");
  autograd::NoGradGuard no_grad;
  TensorT<T> q = z_q.detach().reshape(Shape4::mat(1, p.d_model));
  TensorT<T> scores = linear(q, p.weight_w, p.weight_b);
  return std::move(softmax_groups(scores, p.l_levels * p.k_points)).values();
}

template <typename T>
std::vector<T> ms_deform_attn(DeformAttnParams<T>& p, const TensorT<T>& z_q, T ref_x, T ref_y,
                              const MultiScaleFeaturesT<T>& levels) {
  TensorT<T> q = z_q.detach().reshape(Shape4::mat(1, p.d_model));
  TensorT<T> ref(Shape4::mat(1, 2), {ref_x, ref_y});
  TensorT<T> out = ms_deform_attn_rows(p, q, ref, levels, {0});
  for (T v : out.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw EvalError("ms_deform_attn: non-finite sample in output");
  return std::move(out).values();
}

template <typename T>
std::vector<T> deform_attn(DeformAttnParams<T>& p, const TensorT<T>& z_q, T ref_x, T ref_y,
                           const TensorT<T>& x_feat) {
  check(p.l_levels == 1, "deform_attn: single-scale call requires L = 1 configuration");
  MultiScaleFeaturesT<T> feats;
  feats.levels = {x_feat};
  return ms_deform_attn(p, z_q, ref_x, ref_y, feats);
}

template <typename T>
std::pair<TensorT<T>, std::vector<int64_t>> level_reference_points(
    const MultiScaleFeaturesT<T>& feats) {
  std::vector<T> refs;
  std::vector<int64_t> items;
  for (const auto& level : feats.levels) {
    const Shape4 s = level.shape();
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x) {
          refs.push_back((static_cast<T>(x) + T(0.5)) / static_cast<T>(s.w));
          refs.push_back((static_cast<T>(y) + T(0.5)) / static_cast<T>(s.h));
          items.push_back(n);
        }
  }
  const int64_t rows = static_cast<int64_t>(items.size());
  return {TensorT<T>(Shape4::mat(rows, 2), std::move(refs)), std::move(items)};
}

template <typename T>
EncoderLayerT<T> EncoderLayerT<T>::make(int64_t d, int64_t heads, int64_t points, int64_t levels,
                                        int64_t ffn_hidden, std::mt19937_64& rng) {
  EncoderLayerT<T> layer;
  layer.attn = DeformAttnParams<T>::make(d, heads, points, levels, rng);
  layer.ln1_g = TensorT<T>::full(Shape4::vec(d), T(1), true);
  layer.ln1_b = TensorT<T>::zeros(Shape4::vec(d), true);
  layer.ln2_g = TensorT<T>::full(Shape4::vec(d), T(1), true);
  layer.ln2_b = TensorT<T>::zeros(Shape4::vec(d), true);
  layer.ffn_w1 = xavier_mat<T>(ffn_hidden, d, rng);
  layer.ffn_b1 = TensorT<T>::zeros(Shape4::vec(ffn_hidden), true);
  layer.ffn_w2 = xavier_mat<T>(d, ffn_hidden, rng);
  layer.ffn_b2 = TensorT<T>::zeros(Shape4::vec(d), true);
  return layer;
}

template <typename T>
MultiScaleFeaturesT<T> EncoderLayerT<T>::forward(const MultiScaleFeaturesT<T>& in) {
  check(in.channels() == attn.d_model, "encoder_layer: feature width != d_model");
  std::vector<TensorT<T>> per_level;
  per_level.reserve(in.levels.size());
  for (const auto& level : in.levels) per_level.push_back(nchw_to_rows(level));
  TensorT<T> rows = concat_rows(per_level);
  auto [refs, row_item] = level_reference_points(in);

  TensorT<T> attn_out = ms_deform_attn_rows(attn, rows, refs, in, row_item);
  TensorT<T> y1 = layernorm_lastdim(add(rows, attn_out), ln1_g, ln1_b);
  TensorT<T> ffn = linear(silu(linear(y1, ffn_w1, ffn_b1)), ffn_w2, ffn_b2);
  TensorT<T> y2 = layernorm_lastdim(add(y1, ffn), ln2_g, ln2_b);

  MultiScaleFeaturesT<T> out;
  int64_t row0 = 0;
  for (const auto& level : in.levels) {
    const Shape4 s = level.shape();
    const int64_t block = s.n * s.h * s.w;
    out.levels.push_back(rows_to_nchw(slice_rows(y2, row0, row0 + block), s));
    row0 += block;
  }
  return out;
}

#define MSDETR_INSTANTIATE_DEFORM(T)                                                          \
  template struct MultiScaleFeaturesT<T>;                                                     \
  template struct DeformAttnParams<T>;                                                        \
  template struct EncoderLayerT<T>;                                                           \
  template std::vector<std::array<T, 2>> predict_offsets<T>(const DeformAttnParams<T>&,       \
                                                            const TensorT<T>&);               \
  template std::vector<T> predict_weights<T>(const DeformAttnParams<T>&, const TensorT<T>&);  \
  template std::vector<T> deform_attn<T>(DeformAttnParams<T>&, const TensorT<T>&, T, T,       \
                                         const TensorT<T>&);                                  \
  template std::vector<T> ms_deform_attn<T>(DeformAttnParams<T>&, const TensorT<T>&, T, T,    \
                                            const MultiScaleFeaturesT<T>&);                   \
  template TensorT<T> ms_deform_attn_rows<T>(DeformAttnParams<T>&, const TensorT<T>&,         \
                                             const TensorT<T>&, const MultiScaleFeaturesT<T>&, \
                                             const std::vector<int64_t>&);                    \
  template TensorT<T> ms_deform_sample<T>(const std::vector<TensorT<T>>&, const TensorT<T>&,  \
                                          const TensorT<T>&, int64_t,                         \
                                          const std::vector<int64_t>&);                       \
  template std::pair<TensorT<T>, std::vector<int64_t>> level_reference_points<T>(             \
      const MultiScaleFeaturesT<T>&);

MSDETR_INSTANTIATE_DEFORM(double)
MSDETR_INSTANTIATE_DEFORM(float)
#undef MSDETR_INSTANTIATE_DEFORM

}  // namespace msdetr

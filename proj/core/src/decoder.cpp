// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/decoder.hpp"

#include <cmath>

namespace msdetr {

namespace {

template <typename T>
TensorT<T> xavier_mat(int64_t rows, int64_t cols, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return TensorT<T>::uniform(Shape4::mat(rows, cols), rng, static_cast<T>(-a), static_cast<T>(a),
                             true);
}

}  // namespace

template <typename T>
QuerySetT<T> QuerySetT<T>::make(int64_t n_queries, int64_t d, std::mt19937_64& rng) {
  QuerySetT<T> q;
  // uniform grid over [0.1, 0.9]^2, stored in logit space
  const int64_t side = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(n_queries))));
  std::vector<T> logits(static_cast<size_t>(n_queries * 2));
  for (int64_t i = 0; i < n_queries; ++i) {
    const int64_t gy = i / side, gx = i % side;
    const double fx = side == 1 ? 0.5 : static_cast<double>(gx) / (side - 1);
    const double fy = side == 1 ? 0.5 : static_cast<double>(gy) / (side - 1);
    const double px = 0.1 + 0.8 * fx;
    const double py = 0.1 + 0.8 * fy;
    logits[i * 2 + 0] = static_cast<T>(std::log(px / (1.0 - px)));
    logits[i * 2 + 1] = static_cast<T>(std::log(py / (1.0 - py)));
  }
  q.ref_logits = TensorT<T>(Shape4::mat(n_queries, 2), std::move(logits), true);
  q.embeddings = TensorT<T>::randn(Shape4::mat(n_queries, d), rng, T(0.02), true);
  return q;
}

template <typename T>
SelfAttention<T> SelfAttention<T>::make(int64_t d, int64_t heads, std::mt19937_64& rng) {
  check(heads >= 1 && d % heads == 0,
        "self_attention: width " + std::to_string(d) + " not divisible by heads " +
            std::to_string(heads));
  SelfAttention<T> sa;
  sa.heads = heads;
  sa.wq = xavier_mat<T>(d, d, rng);
  sa.bq = TensorT<T>::zeros(Shape4::vec(d), true);
  sa.wk = xavier_mat<T>(d, d, rng);
  sa.bk = TensorT<T>::zeros(Shape4::vec(d), true);
  sa.wv = xavier_mat<T>(d, d, rng);
  sa.bv = TensorT<T>::zeros(Shape4::vec(d), true);
  sa.wo = xavier_mat<T>(d, d, rng);
  sa.bo = TensorT<T>::zeros(Shape4::vec(d), true);
  sa.ln_g = TensorT<T>::full(Shape4::vec(d), T(1), true);
  sa.ln_b = TensorT<T>::zeros(Shape4::vec(d), true);
  return sa;
}

template <typename T>
TensorT<T> SelfAttention<T>::forward(const TensorT<T>& rows, int64_t batch) const {
  const int64_t total = rows.shape().h;
  const int64_t d = rows.shape().w;
  check(batch >= 1 && total % batch == 0, "self_attention: rows not divisible by batch");
  const int64_t n = total / batch;
  const int64_t dv = d / heads;

  TensorT<T> q = linear(rows, wq, bq);
  TensorT<T> k = linear(rows, wk, bk);
  TensorT<T> v = linear(rows, wv, bv);

  const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dv)));
  std::vector<TensorT<T>> item_outs;
  item_outs.reserve(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    TensorT<T> qb = slice_rows(q, b * n, (b + 1) * n);
    TensorT<T> kb = slice_rows(k, b * n, (b + 1) * n);
    TensorT<T> vb = slice_rows(v, b * n, (b + 1) * n);
    TensorT<T> merged;
    for (int64_t h = 0; h < heads; ++h) {
      TensorT<T> qh = slice_cols(qb, h * dv, (h + 1) * dv);
      TensorT<T> kh = slice_cols(kb, h * dv, (h + 1) * dv);
      TensorT<T> vh = slice_cols(vb, h * dv, (h + 1) * dv);
      TensorT<T> scores = mul_scalar(matmul(qh, transpose_last2(kh)), scale);
      TensorT<T> probs = softmax_lastdim(scores);
      TensorT<T> oh = matmul(probs, vh);
      merged = h == 0 ? oh : concat_cols(merged, oh);
    }
    item_outs.push_back(merged);
  }
  TensorT<T> attn = batch == 1 ? item_outs[0] : concat_rows(item_outs);
  TensorT<T> out = linear(attn, wo, bo);
  return layernorm_lastdim(add(rows, out), ln_g, ln_b, T(1e-5));
}

template <typename T>
DecoderLayerT<T> DecoderLayerT<T>::make(int64_t d, int64_t heads, int64_t points, int64_t levels,
                                        int64_t ffn_hidden, std::mt19937_64& rng) {
  DecoderLayerT<T> layer;
  layer.self_attn = SelfAttention<T>::make(d, heads, rng);
  layer.cross = DeformAttnParams<T>::make(d, heads, points, levels, rng);
  layer.ln2_g = TensorT<T>::full(Shape4::vec(d), T(1), true);
  layer.ln2_b = TensorT<T>::zeros(Shape4::vec(d), true);
  layer.ffn_w1 = xavier_mat<T>(ffn_hidden, d, rng);
  layer.ffn_b1 = TensorT<T>::zeros(Shape4::vec(ffn_hidden), true);
  layer.ffn_w2 = xavier_mat<T>(d, ffn_hidden, rng);
  layer.ffn_b2 = TensorT<T>::zeros(Shape4::vec(d), true);
  layer.ln3_g = TensorT<T>::full(Shape4::vec(d), T(1), true);
  layer.ln3_b = TensorT<T>::zeros(Shape4::vec(d), true);
  return layer;
}

template <typename T>
TensorT<T> DecoderLayerT<T>::forward(const TensorT<T>& rows, const TensorT<T>& refs,
                                     const MultiScaleFeaturesT<T>& fused,
                                     const std::vector<int64_t>& row_item) {
  const int64_t batch = fused.batch();
  TensorT<T> q1 = self_attn.forward(rows, batch);
  TensorT<T> cross_out = ms_deform_attn_rows(cross, q1, refs, fused, row_item);
  TensorT<T> q2 = layernorm_lastdim(add(q1, cross_out), ln2_g, ln2_b, T(1e-5));
  TensorT<T> ffn = linear(silu(linear(q2, ffn_w1, ffn_b1)), ffn_w2, ffn_b2);
  return layernorm_lastdim(add(q2, ffn), ln3_g, ln3_b, T(1e-5));
}

template <typename T>
PredictHeads<T> PredictHeads<T>::make(int64_t d, int64_t foreground_classes,
                                      std::mt19937_64& rng) {
  PredictHeads<T> h;
  h.cls_w = xavier_mat<T>(foreground_classes + 1, d, rng);
  h.cls_b = TensorT<T>::zeros(Shape4::vec(foreground_classes + 1), true);
  h.box_w = xavier_mat<T>(4, d, rng);
  // centers start at 0.5; widths start small, near the object-size regime
  h.box_b = TensorT<T>(Shape4::vec(4), {T(0), T(0), T(-1.5), T(-1.5)}, true);
  return h;
}

template <typename T>
DetectionsT<T> PredictHeads<T>::forward(const TensorT<T>& rows) const {
  for (T v : rows.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw EvalError("predict_heads: refined queries are not finite");
  DetectionsT<T> det;
  det.class_logits = linear(rows, cls_w, cls_b);
  det.boxes = sigmoid(linear(rows, box_w, box_b));
  return det;
}

template <typename T>
DetectionsT<T> PredictHeads<T>::forward(const TensorT<T>& rows,
                                        const TensorT<T>& ref_logits) const {
  for (T v : rows.values())
    if (!std::isfinite(static_cast<double>(v)))
      throw EvalError("predict_heads: refined queries are not finite");
  check(ref_logits.shape().h == rows.shape().h && ref_logits.shape().w == 2,
        "predict_heads: ref logits must be (N,2)");
  DetectionsT<T> det;
  det.class_logits = linear(rows, cls_w, cls_b);
  TensorT<T> pad = concat_cols(ref_logits, TensorT<T>::zeros(ref_logits.shape()));
  det.boxes = sigmoid(add(linear(rows, box_w, box_b), pad));
  return det;
}

#define MSDETR_INSTANTIATE_DECODER(T)    \
  template struct QuerySetT<T>;          \
  template struct DetectionsT<T>;        \
  template struct SelfAttention<T>;      \
  template struct DecoderLayerT<T>;      \
  template struct PredictHeads<T>;

MSDETR_INSTANTIATE_DECODER(double)
MSDETR_INSTANTIATE_DECODER(float)
#undef MSDETR_INSTANTIATE_DECODER

}  // namespace msdetr

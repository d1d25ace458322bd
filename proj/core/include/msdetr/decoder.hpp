// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>

#include "msdetr/deform_attn.hpp"

namespace msdetr {

/// Learnable object queries: N_q embeddings of width d plus normalized
/// reference points. Reference points are stored as logits so the sigmoid
/// keeps them inside the unit square.
template <typename T>
struct QuerySetT {
  TensorT<T> embeddings;  // (1,1,Nq,d)
  TensorT<T> ref_logits;  // (1,1,Nq,2)

  static QuerySetT make(int64_t n_queries, int64_t d, std::mt19937_64& rng);
  TensorT<T> ref_points() const { return sigmoid(ref_logits); }
  int64_t count() const { return embeddings.shape().h; }
};

using QuerySet = QuerySetT<double>;

/// Per-query class logits (C foreground classes + background) and normalized
/// (cx, cy, w, h) boxes in [0,1].
template <typename T>
struct DetectionsT {
  TensorT<T> class_logits;  // (1,1,Nq,C+1)
  TensorT<T> boxes;         // (1,1,Nq,4)

  int64_t count() const { return class_logits.shape().h; }
  int64_t foreground_classes() const { return class_logits.shape().w - 1; }
};

using Detections = DetectionsT<double>;

/// Standard multi-head self-attention followed by residual layer norm.
template <typename T>
struct SelfAttention {
  int64_t heads = 1;
  TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<T> ln_g, ln_b;

  static SelfAttention make(int64_t d, int64_t heads, std::mt19937_64& rng);

  /// rows: (1,1,B*Nq,d); queries attend only within their own batch item.
  TensorT<T> forward(const TensorT<T>& rows, int64_t batch) const;
};

/// One decoder layer: self-attention, deformable cross-attention against the
/// fused pyramid, then a feed-forward block, each with residual + layer norm.
template <typename T>
struct DecoderLayerT {
  SelfAttention<T> self_attn;
  DeformAttnParams<T> cross;
  TensorT<T> ln2_g, ln2_b;
  TensorT<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  TensorT<T> ln3_g, ln3_b;

  static DecoderLayerT make(int64_t d, int64_t heads, int64_t points, int64_t levels,
                            int64_t ffn_hidden, std::mt19937_64& rng);

  TensorT<T> forward(const TensorT<T>& rows, const TensorT<T>& refs,
                     const MultiScaleFeaturesT<T>& fused, const std::vector<int64_t>& row_item);
};

using DecoderLayer = DecoderLayerT<double>;

/// Class and box prediction heads on refined query features. When reference
/// logits are supplied, the box branch predicts centers as residuals on the
/// reference point (sigmoid(linear + [ref_x, ref_y, 0, 0])); without them it
/// is the plain sigmoid(linear) form.
template <typename T>
struct PredictHeads {
  TensorT<T> cls_w, cls_b;  // (C+1, d)
  TensorT<T> box_w, box_b;  // (4, d)

  static PredictHeads make(int64_t d, int64_t foreground_classes, std::mt19937_64& rng);
  DetectionsT<T> forward(const TensorT<T>& rows) const;
  DetectionsT<T> forward(const TensorT<T>& rows, const TensorT<T>& ref_logits) const;
};

#define MSDETR_EXTERN_DECODER(T)          \
  extern template struct QuerySetT<T>;    \
  extern template struct DetectionsT<T>;  \
  extern template struct SelfAttention<T>; \
  extern template struct DecoderLayerT<T>; \
  extern template struct PredictHeads<T>;

MSDETR_EXTERN_DECODER(double)
MSDETR_EXTERN_DECODER(float)
#undef MSDETR_EXTERN_DECODER

}  // namespace msdetr

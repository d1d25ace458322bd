// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <random>

#include "msdetr/ops.hpp"
#include "msdetr/tensor.hpp"

namespace msdetr {

/// Ordered list of feature maps with dyadically decreasing spatial size and a
/// uniform channel width.
template <typename T>
struct MultiScaleFeaturesT {
  std::vector<TensorT<T>> levels;

  int64_t size() const { return static_cast<int64_t>(levels.size()); }
  int64_t channels() const { return levels.empty() ? 0 : levels[0].shape().c; }
  int64_t batch() const { return levels.empty() ? 0 : levels[0].shape().n; }
};

using MultiScaleFeatures = MultiScaleFeaturesT<double>;

/// Parameters of one (multi-scale) deformable attention operator. The value
/// and output projections stack the per-head maps: rows [m*d_v,(m+1)*d_v) of
/// `value_w` hold head m's d -> d_v value map, and the matching column block
/// of `out_w` holds head m's d_v -> d output map.
template <typename T>
struct DeformAttnParams {
  int64_t m_heads = 0;
  int64_t k_points = 0;
  int64_t l_levels = 0;
  int64_t d_model = 0;

  TensorT<T> value_w, value_b;    // (d,d), (d)
  TensorT<T> out_w, out_b;        // (d,d), (d)
  TensorT<T> offset_w, offset_b;  // (2MLK,d), (2MLK)
  TensorT<T> weight_w, weight_b;  // (MLK,d), (MLK)

  int64_t d_value() const { return d_model / m_heads; }

  /// Xavier projections; offset head starts at zero weights with a bias that
  /// rings the K points around the reference, wider rings on coarser levels;
  /// weight head starts at zero (uniform attention after softmax).
  static DeformAttnParams make(int64_t d, int64_t heads, int64_t points, int64_t levels,
                               std::mt19937_64& rng);
};

/// Offsets for all heads/levels/points from one query: the linear offset head
/// reshaped to [M][L][K] pairs, in normalized-coordinate units.
template <typename T>
std::vector<std::array<T, 2>> predict_offsets(const DeformAttnParams<T>& p, const TensorT<T>& z_q);

/// Attention weights [M][L][K]; per head the L*K scores pass through softmax,
/// so each head's weights sum to one across scales and points.
template <typename T>
std::vector<T> predict_weights(const DeformAttnParams<T>& p, const TensorT<T>& z_q);

/// Single-scale deformable attention for one query (L = 1 configuration).
template <typename T>
std::vector<T> deform_attn(DeformAttnParams<T>& p, const TensorT<T>& z_q, T ref_x, T ref_y,
                           const TensorT<T>& x_feat);

/// Multi-scale deformable attention for one query at its reference point.
template <typename T>
std::vector<T> ms_deform_attn(DeformAttnParams<T>& p, const TensorT<T>& z_q, T ref_x, T ref_y,
                              const MultiScaleFeaturesT<T>& levels);

/// Batched core used by encoder and decoder: queries are rows of (1,1,N,d),
/// ref_points rows of (1,1,N,2), and row_item maps each row to its batch item
/// in the level tensors. Everything participates in the tape.
template <typename T>
TensorT<T> ms_deform_attn_rows(DeformAttnParams<T>& p, const TensorT<T>& queries,
                               const TensorT<T>& ref_points, const MultiScaleFeaturesT<T>& feats,
                               const std::vector<int64_t>& row_item);

/// Fused sampling op: gathers bilinear samples of the already-projected
/// per-level values at `loc` and combines them with `weights`.
///   loc:     (1,1,N, M*L*K*2) absolute normalized (x,y)
///   weights: (1,1,N, M*L*K)   simplex per head
/// Head m reads channels [m*d_v,(m+1)*d_v) of each level.
template <typename T>
TensorT<T> ms_deform_sample(const std::vector<TensorT<T>>& values, const TensorT<T>& loc,
                            const TensorT<T>& weights, int64_t m_heads,
                            const std::vector<int64_t>& row_item);

/// One encoder layer: every spatial location of every level is a query at its
/// own normalized position; deformable attention and a feed-forward block are
/// applied with residuals and layer normalization.
template <typename T>
struct EncoderLayerT {
  DeformAttnParams<T> attn;
  TensorT<T> ln1_g, ln1_b, ln2_g, ln2_b;
  TensorT<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  static EncoderLayerT make(int64_t d, int64_t heads, int64_t points, int64_t levels,
                            int64_t ffn_hidden, std::mt19937_64& rng);

  MultiScaleFeaturesT<T> forward(const MultiScaleFeaturesT<T>& in);
};

using EncoderLayer = EncoderLayerT<double>;

/// Normalized center positions of every pixel of every level, level-major,
/// shaped (1,1,B*sum(H_l*W_l),2), plus the row->item map.
template <typename T>
std::pair<TensorT<T>, std::vector<int64_t>> level_reference_points(
    const MultiScaleFeaturesT<T>& feats);

#define MSDETR_EXTERN_DEFORM(T)                                                               \
  extern template struct MultiScaleFeaturesT<T>;                                              \
  extern template struct DeformAttnParams<T>;                                                 \
  extern template struct EncoderLayerT<T>;                                                    \
  extern template std::vector<std::array<T, 2>> predict_offsets<T>(const DeformAttnParams<T>&, \
                                                                   const TensorT<T>&);        \
  extern template std::vector<T> predict_weights<T>(const DeformAttnParams<T>&,               \
                                                    const TensorT<T>&);                       \
  extern template std::vector<T> deform_attn<T>(DeformAttnParams<T>&, const TensorT<T>&, T, T, \
                                                const TensorT<T>&);                           \
  extern template std::vector<T> ms_deform_attn<T>(DeformAttnParams<T>&, const TensorT<T>&, T, \
                                                   T, const MultiScaleFeaturesT<T>&);         \
  extern template TensorT<T> ms_deform_attn_rows<T>(DeformAttnParams<T>&, const TensorT<T>&,  \
                                                    const TensorT<T>&,                        \
                                                    const MultiScaleFeaturesT<T>&,            \
                                                    const std::vector<int64_t>&);             \
  extern template TensorT<T> ms_deform_sample<T>(const std::vector<TensorT<T>>&,              \
                                                 const TensorT<T>&, const TensorT<T>&,        \
                                                 int64_t, const std::vector<int64_t>&);       \
  extern template std::pair<TensorT<T>, std::vector<int64_t>> level_reference_points<T>(      \
      const MultiScaleFeaturesT<T>&);

MSDETR_EXTERN_DEFORM(double)
MSDETR_EXTERN_DEFORM(float)
#undef MSDETR_EXTERN_DEFORM

}  // namespace msdetr

// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>

#include "msdetr/batchnorm.hpp"
#include "msdetr/deform_attn.hpp"
#include "msdetr/ops.hpp"

namespace msdetr {

/// Convolution followed by batch normalization and (optionally) SiLU, the
/// Conv_{kxk} building block of the fusion pathways.
template <typename T>
struct ConvBnAct {
  TensorT<T> w;  // (out,in,k,k)
  BatchNorm<T> bn;
  int64_t stride = 1;
  int64_t padding = 0;
  bool act = true;

  static ConvBnAct make(int64_t in, int64_t out, int64_t k, int64_t stride, int64_t padding,
                        std::mt19937_64& rng, bool act = true);
  TensorT<T> forward(const TensorT<T>& x, bool training);
};

/// Squeeze-excitation style gate: x * sigmoid(FC2(ReLU(FC1(GAP(x))))).
template <typename T>
struct ChannelAttention {
  TensorT<T> fc1_w, fc1_b;  // (hidden, C)
  TensorT<T> fc2_w, fc2_b;  // (C, hidden)

  static ChannelAttention make(int64_t channels, int64_t hidden, std::mt19937_64& rng);
  TensorT<T> forward(const TensorT<T>& x) const;
};

/// Contract wrapper: channels must divide by `reduction`; the gate applies
/// with hidden width channels/reduction.
template <typename T>
TensorT<T> channel_attention(const ChannelAttention<T>& ca, const TensorT<T>& x, int64_t reduction);

/// Half-width 1x1 convolution, depth-wise 3x3 on that half, concatenated and
/// channel-shuffled with two groups.
template <typename T>
struct GsConv {
  TensorT<T> conv_w, conv_b;  // (out/2, in, 1, 1)
  TensorT<T> dw_w, dw_b;      // (out/2, 1, 3, 3)

  static GsConv make(int64_t in, int64_t out, std::mt19937_64& rng);
  int64_t out_channels() const { return conv_w.shape().n * 2; }
  TensorT<T> forward(const TensorT<T>& x) const;
};

/// Analytic parameter count of one GSConv versus a plain 3x3 convolution.
int64_t gsconv_param_count(int64_t in, int64_t out);
int64_t conv3x3_param_count(int64_t in, int64_t out);

/// Cross-stage-partial block: split channels in half, run one half through a
/// GSConv chain, re-merge through a 1x1 projection back to the input width.
template <typename T>
struct VovGscsp {
  std::vector<GsConv<T>> chain;  // width-preserving on C/2
  TensorT<T> proj_w, proj_b;     // (C, C, 1, 1)

  static VovGscsp make(int64_t channels, int64_t n_blocks, std::mt19937_64& rng);
  TensorT<T> forward(const TensorT<T>& x) const;
};

/// Top-down pathway: P_L = Conv1x1(F_L); P_l = Conv3x3(F_l + Upsample(P_{l+1})).
template <typename T>
struct TopDown {
  ConvBnAct<T> top;                  // 1x1 on the coarsest level
  std::vector<ConvBnAct<T>> fusers;  // 3x3, one per level below the top

  static TopDown make(int64_t channels, int64_t levels, std::mt19937_64& rng);
  MultiScaleFeaturesT<T> forward(const MultiScaleFeaturesT<T>& features, bool training);
};

/// Bottom-up pathway: P_1 stays; P_l = Conv3x3(P_l + Downsample(P_{l-1})),
/// Downsample being a strided 3x3 convolution.
template <typename T>
struct BottomUp {
  std::vector<ConvBnAct<T>> downs;   // strided 3x3, plain (no act)
  std::vector<ConvBnAct<T>> fusers;  // 3x3

  static BottomUp make(int64_t channels, int64_t levels, std::mt19937_64& rng);
  MultiScaleFeaturesT<T> forward(const MultiScaleFeaturesT<T>& td, bool training);
};

/// Bidirectional neck: bottom_up(top_down(x)) with the pathway 3x3 fusion
/// convs replaced by VoVGSCSP blocks and channel attention on each fused
/// level. Both substitutions are switchable for the ablation lattice.
template <typename T>
struct FuseNeck {
  TopDown<T> td;
  BottomUp<T> bu;
  std::vector<VovGscsp<T>> td_vov, bu_vov;
  std::vector<ChannelAttention<T>> td_ca, bu_ca;
  bool use_vov = true;
  bool use_ca = true;

  static FuseNeck make(int64_t channels, int64_t levels, int64_t vov_depth,
                       std::mt19937_64& rng);
  MultiScaleFeaturesT<T> forward(const MultiScaleFeaturesT<T>& encoded, bool training);
};

/// Verifies the dyadic pyramid invariant; throws DimError otherwise.
template <typename T>
void check_pyramid(const MultiScaleFeaturesT<T>& f);

#define MSDETR_EXTERN_FUSION(T)            \
  extern template struct ConvBnAct<T>;     \
  extern template struct ChannelAttention<T>; \
  extern template struct GsConv<T>;        \
  extern template struct VovGscsp<T>;      \
  extern template struct TopDown<T>;       \
  extern template struct BottomUp<T>;      \
  extern template struct FuseNeck<T>;      \
  extern template void check_pyramid<T>(const MultiScaleFeaturesT<T>&); \
  extern template TensorT<T> channel_attention<T>(const ChannelAttention<T>&, const TensorT<T>&, \
                                                  int64_t);

MSDETR_EXTERN_FUSION(double)
MSDETR_EXTERN_FUSION(float)
#undef MSDETR_EXTERN_FUSION

}  // namespace msdetr

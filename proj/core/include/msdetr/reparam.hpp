// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>

#include "msdetr/batchnorm.hpp"
#include "msdetr/ops.hpp"

namespace msdetr {

/// Re-parameterizable convolution block: parallel 3x3, 1x1 and (when the
/// in/out widths match at stride 1) identity branches, each with its own
/// normalization, summed and passed through SiLU. The three branches exist
/// only at training time; fuse() collapses them into one 3x3 convolution.
template <typename T>
struct RepBlock {
  TensorT<T> w3;  // (out,in,3,3)
  TensorT<T> w1;  // (out,in,1,1)
  bool has_identity = false;
  BatchNorm<T> bn3, bn1, bnid;
  int64_t stride = 1;

  int64_t in_channels() const { return w3.shape().c; }
  int64_t out_channels() const { return w3.shape().n; }

  /// Xavier-initialized block. The identity branch is active iff in == out
  /// and stride == 1.
  static RepBlock make(int64_t in, int64_t out, int64_t stride, std::mt19937_64& rng);
};

/// Single 3x3 convolution equivalent to a fused RepBlock.
template <typename T>
struct FusedBlock {
  TensorT<T> w;        // (out,in,3,3)
  std::vector<T> b;    // length out
  int64_t stride = 1;

  TensorT<T> forward(const TensorT<T>& x) const;
};

/// Three-branch forward: SiLU(BN3(conv3(x)) + BN1(conv1(x)) [+ BNid(x)]).
/// With update_stats the normalizations use batch statistics and refresh the
/// running estimates; otherwise the stored running statistics apply, which is
/// the form fuse() reproduces exactly.
template <typename T>
TensorT<T> rep_forward_train(RepBlock<T>& block, const TensorT<T>& x, bool update_stats = false);

/// Zero-pads a 1x1 kernel to 3x3 with the value at the center tap.
template <typename T>
TensorT<T> expand_1x1(const TensorT<T>& w1);

/// (C,C,3,3) kernel with 1 at the center of each diagonal slice; convolving
/// with it at padding 1, stride 1 is the identity map.
template <typename T>
TensorT<T> identity_kernel(int64_t channels);

/// Collapses the branches into a single 3x3 kernel and bias by folding each
/// branch's normalization and summing.
template <typename T>
FusedBlock<T> fuse(const RepBlock<T>& block);

/// Analytic FLOP counts for one forward pass over an in->out block at the
/// given output spatial size (multiply and add counted separately).
int64_t rep_flops_train(int64_t in, int64_t out, int64_t out_h, int64_t out_w, bool has_identity);
int64_t rep_flops_fused(int64_t in, int64_t out, int64_t out_h, int64_t out_w);

#define MSDETR_EXTERN_REPARAM(T)                                                               \
  extern template struct RepBlock<T>;                                                         \
  extern template struct FusedBlock<T>;                                                       \
  extern template TensorT<T> rep_forward_train<T>(RepBlock<T>&, const TensorT<T>&, bool);     \
  extern template TensorT<T> expand_1x1<T>(const TensorT<T>&);                                \
  extern template TensorT<T> identity_kernel<T>(int64_t);                                     \
  extern template FusedBlock<T> fuse<T>(const RepBlock<T>&);

MSDETR_EXTERN_REPARAM(double)
MSDETR_EXTERN_REPARAM(float)
#undef MSDETR_EXTERN_REPARAM

}  // namespace msdetr

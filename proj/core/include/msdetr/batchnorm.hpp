// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "msdetr/tensor.hpp"

namespace msdetr {

/// Per-channel normalization parameters as consumed by the folding algebra:
/// scale gamma, shift beta, running mean mu and running variance sigma2.
template <typename T>
struct BnParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> mu;
  std::vector<T> sigma2;
  T eps = T(1e-5);

  static BnParams identity(int64_t channels, T eps = T(1e-5)) {
    BnParams p;
    p.gamma.assign(static_cast<size_t>(channels), T(1));
    p.beta.assign(static_cast<size_t>(channels), T(0));
    p.mu.assign(static_cast<size_t>(channels), T(0));
    p.sigma2.assign(static_cast<size_t>(channels), T(1) - eps);
    p.eps = eps;
    return p;
  }
};

template <typename T>
struct FoldedConv {
  TensorT<T> kernel;
  std::vector<T> bias;
};

/// Absorbs normalization into convolution parameters:
///   kernel'[o,..] = gamma_o / sqrt(sigma2_o + eps) * kernel[o,..]
///   bias'_o      = beta_o - gamma_o*mu_o/sqrt(..) + gamma_o/sqrt(..)*bias_o
/// An empty bias is treated as zeros.
template <typename T>
FoldedConv<T> fold_bn(const TensorT<T>& kernel, const std::vector<T>& bias, const BnParams<T>& bn);

/// Learnable batch normalization layer with running statistics. Training mode
/// normalizes by batch statistics and refreshes the running estimates with
/// momentum; eval mode applies the running affine transform, which is the
/// form the folding algebra consumes.
template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(int64_t channels, T eps = T(1e-5), T momentum = T(0.1));

  TensorT<T> forward(const TensorT<T>& x, bool training);

  /// Snapshot of learned scale/shift plus running statistics.
  BnParams<T> params() const;

  int64_t channels() const { return gamma.numel(); }
  bool has_stats() const { return !running_mean.empty(); }
  void invalidate_stats() {
    running_mean.clear();
    running_var.clear();
  }

  TensorT<T> gamma;  // (1,1,1,C), leaf parameter
  TensorT<T> beta;   // (1,1,1,C), leaf parameter
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
};

#define MSDETR_EXTERN_BN(T)                      \
  extern template struct BnParams<T>;            \
  extern template class BatchNorm<T>;            \
  extern template FoldedConv<T> fold_bn<T>(const TensorT<T>&, const std::vector<T>&, \
                                           const BnParams<T>&);

MSDETR_EXTERN_BN(double)
MSDETR_EXTERN_BN(float)
#undef MSDETR_EXTERN_BN

}  // namespace msdetr

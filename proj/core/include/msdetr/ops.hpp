// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

#include "msdetr/tensor.hpp"

namespace msdetr {

/// 2-D cross-correlation. x:(N,Cin,H,W), kernel:(Cout,Cin,kh,kw), bias length
/// Cout or empty. Output spatial size floor((H + 2p - kh)/stride) + 1.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias,
                  int64_t stride = 1, int64_t padding = 0);

/// Per-channel 3x3 convolution. kernel:(C,1,kh,kw); stride 1.
template <typename T>
TensorT<T> depthwise_conv2d(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias,
                            int64_t padding = 1);

/// Mean over spatial dims -> (N,C,1,1).
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x);

/// Reshape channels to (groups, C/groups), transpose, flatten.
template <typename T>
TensorT<T> channel_shuffle(const TensorT<T>& x, int64_t groups);

/// Bilinear resize with the align-corners-false mapping; borders clamp.
template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int64_t out_h, int64_t out_w);

/// Samples one normalized point from a (1,C,H,W) map. Pixel coordinates are
/// (x*W - 0.5, y*H - 0.5); contributions outside the map are zero.
template <typename T>
std::vector<T> bilinear_sample(const TensorT<T>& feature, T x, T y);

/// Central-difference gradient verification for a scalar-valued op. Returns
/// max over coordinates of |analytic - numeric| / max(1, |analytic|).
double grad_check(const std::function<Tensor(const Tensor&)>& op, const Tensor& input,
                  double h = 1e-5);

namespace sampling_stats {
/// Instrumented count of bilinear corner reads in deformable sampling.
void reset();
uint64_t reads();
void enable(bool on);
bool enabled();
void record(uint64_t n);
}  // namespace sampling_stats

#define MSDETR_EXTERN_OPS(T)                                                                   \
  extern template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, \
                                       int64_t, int64_t);                                      \
  extern template TensorT<T> depthwise_conv2d<T>(const TensorT<T>&, const TensorT<T>&,         \
                                                 const TensorT<T>&, int64_t);                  \
  extern template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                            \
  extern template TensorT<T> channel_shuffle<T>(const TensorT<T>&, int64_t);                   \
  extern template TensorT<T> bilinear_resize<T>(const TensorT<T>&, int64_t, int64_t);          \
  extern template std::vector<T> bilinear_sample<T>(const TensorT<T>&, T, T);

MSDETR_EXTERN_OPS(double)
MSDETR_EXTERN_OPS(float)
#undef MSDETR_EXTERN_OPS

}  // namespace msdetr

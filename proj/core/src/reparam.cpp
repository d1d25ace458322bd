// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/reparam.hpp"

#include <cmath>

namespace msdetr {

namespace {

template <typename T>
TensorT<T> xavier_conv(int64_t out, int64_t in, int64_t k, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in * k * k);
  const double fan_out = static_cast<double>(out * k * k);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  return TensorT<T>::uniform({out, in, k, k}, rng, static_cast<T>(-a), static_cast<T>(a),
                             /*requires_grad=*/true);
}

}  // namespace

template <typename T>
RepBlock<T> RepBlock<T>::make(int64_t in, int64_t out, int64_t stride, std::mt19937_64& rng) {
  RepBlock<T> b;
  b.w3 = xavier_conv<T>(out, in, 3, rng);
  b.w1 = xavier_conv<T>(out, in, 1, rng);
  b.stride = stride;
  b.has_identity = (in == out && stride == 1);
  b.bn3 = BatchNorm<T>(out);
  b.bn1 = BatchNorm<T>(out);
  if (b.has_identity) b.bnid = BatchNorm<T>(out);
  return b;
}

template <typename T>
TensorT<T> rep_forward_train(RepBlock<T>& block, const TensorT<T>& x, bool update_stats) {
  check(x.shape().c == block.in_channels(),
        "rep_forward: input channels " + std::to_string(x.shape().c) + " != block in-channels " +
            std::to_string(block.in_channels()));
  TensorT<T> none;
  TensorT<T> b3 = block.bn3.forward(conv2d(x, block.w3, none, block.stride, 1), update_stats);
  TensorT<T> b1 = block.bn1.forward(conv2d(x, block.w1, none, block.stride, 0), update_stats);
  TensorT<T> sum = add(b3, b1);
  if (block.has_identity) sum = add(sum, block.bnid.forward(x, update_stats));
  return silu(sum);
}

template <typename T>
TensorT<T> expand_1x1(const TensorT<T>& w1) {
  const Shape4 s = w1.shape();
  check(s.h == 1 && s.w == 1, "expand_1x1: kernel spatial size must be 1x1, got " + s.str());
  std::vector<T> out(static_cast<size_t>(s.n * s.c * 9), T(0));
  const auto& wv = w1.values();
  for (int64_t i = 0; i < s.n * s.c; ++i) out[i * 9 + 4] = wv[i];
  return TensorT<T>({s.n, s.c, 3, 3}, std::move(out));
}

template <typename T>
TensorT<T> identity_kernel(int64_t channels) {
  std::vector<T> out(static_cast<size_t>(channels * channels * 9), T(0));
  for (int64_t c = 0; c < channels; ++c) out[(c * channels + c) * 9 + 4] = T(1);
  return TensorT<T>({channels, channels, 3, 3}, std::move(out));
}

template <typename T>
FusedBlock<T> fuse(const RepBlock<T>& block) {
  const std::vector<T> no_bias;
  FoldedConv<T> f3 = fold_bn(block.w3.detach(), no_bias, block.bn3.params());
  FoldedConv<T> f1 = fold_bn(expand_1x1(block.w1.detach()), no_bias, block.bn1.params());

  std::vector<T> w = f3.kernel.values();
  std::vector<T> b = f3.bias;
  const auto& w1v = f1.kernel.values();
  for (size_t i = 0; i < w.size(); ++i) w[i] += w1v[i];
  for (size_t o = 0; o < b.size(); ++o) b[o] += f1.bias[o];

  if (block.has_identity) {
    FoldedConv<T> fid =
        fold_bn(identity_kernel<T>(block.out_channels()), no_bias, block.bnid.params());
    const auto& widv = fid.kernel.values();
    for (size_t i = 0; i < w.size(); ++i) w[i] += widv[i];
    for (size_t o = 0; o < b.size(); ++o) b[o] += fid.bias[o];
  }

  FusedBlock<T> fused;
  fused.w = TensorT<T>(block.w3.shape(), std::move(w));
  fused.b = std::move(b);
  fused.stride = block.stride;
  return fused;
}

template <typename T>
TensorT<T> FusedBlock<T>::forward(const TensorT<T>& x) const {
  TensorT<T> bias(Shape4::vec(static_cast<int64_t>(b.size())), b);
  return silu(conv2d(x, w, bias, stride, 1));
}

int64_t rep_flops_train(int64_t in, int64_t out, int64_t out_h, int64_t out_w, bool has_identity) {
  const int64_t ohw = out_h * out_w;
  const int64_t conv3 = 2 * out * in * 9 * ohw;
  const int64_t conv1 = 2 * out * in * ohw;
  const int64_t bn = 2 * out * ohw;    // scale + shift per element
  const int64_t addb = out * ohw;      // branch sum
  const int64_t act = 4 * out * ohw;   // sigmoid + multiply, approximate
  int64_t total = conv3 + conv1 + 2 * bn + addb + act;
  if (has_identity) total += bn + addb;
  return total;
}

int64_t rep_flops_fused(int64_t in, int64_t out, int64_t out_h, int64_t out_w) {
  const int64_t ohw = out_h * out_w;
  return 2 * out * in * 9 * ohw + out * ohw + 4 * out * ohw;
}

#define MSDETR_INSTANTIATE_REPARAM(T)                                                          \
  template struct RepBlock<T>;                                                                 \
  template struct FusedBlock<T>;                                                               \
  template TensorT<T> rep_forward_train<T>(RepBlock<T>&, const TensorT<T>&, bool);             \
  template TensorT<T> expand_1x1<T>(const TensorT<T>&);                                        \
  template TensorT<T> identity_kernel<T>(int64_t);                                             \
  template FusedBlock<T> fuse<T>(const RepBlock<T>&);

MSDETR_INSTANTIATE_REPARAM(double)
MSDETR_INSTANTIATE_REPARAM(float)
#undef MSDETR_INSTANTIATE_REPARAM

}  // namespace msdetr

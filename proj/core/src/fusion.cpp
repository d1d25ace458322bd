// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/fusion.hpp"

#include <cmath>

namespace msdetr {

namespace {

template <typename T>
TensorT<T> xavier_conv(int64_t out, int64_t in, int64_t k, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in * k * k);
  const double fan_out = static_cast<double>(out * k * k);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  return TensorT<T>::uniform({out, in, k, k}, rng, static_cast<T>(-a), static_cast<T>(a), true);
}

template <typename T>
TensorT<T> xavier_mat(int64_t rows, int64_t cols, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return TensorT<T>::uniform(Shape4::mat(rows, cols), rng, static_cast<T>(-a), static_cast<T>(a),
                             true);
}

}  // namespace

template <typename T>
void check_pyramid(const MultiScaleFeaturesT<T>& f) {
  for (size_t l = 0; l + 1 < f.levels.size(); ++l) {
    const Shape4 a = f.levels[l].shape(), b = f.levels[l + 1].shape();
    check(a.h == 2 * b.h && a.w == 2 * b.w,
          "pyramid: levels " + std::to_string(l) + " and " + std::to_string(l + 1) +
              " are not dyadic: " + a.str() + " vs " + b.str());
    check(a.c == b.c, "pyramid: channel widths differ across levels");
  }
}

template <typename T>
ConvBnAct<T> ConvBnAct<T>::make(int64_t in, int64_t out, int64_t k, int64_t stride,
                                int64_t padding, std::mt19937_64& rng, bool act) {
  ConvBnAct<T> c;
  c.w = xavier_conv<T>(out, in, k, rng);
  c.bn = BatchNorm<T>(out);
  c.stride = stride;
  c.padding = padding;
  c.act = act;
  return c;
}

template <typename T>
TensorT<T> ConvBnAct<T>::forward(const TensorT<T>& x, bool training) {
  TensorT<T> y = bn.forward(conv2d(x, w, TensorT<T>(), stride, padding), training);
  return act ? silu(y) : y;
}

template <typename T>
ChannelAttention<T> ChannelAttention<T>::make(int64_t channels, int64_t hidden,
                                              std::mt19937_64& rng) {
  check(hidden >= 1, "channel_attention: hidden width must be >= 1");
  ChannelAttention<T> ca;
  ca.fc1_w = xavier_mat<T>(hidden, channels, rng);
  ca.fc1_b = TensorT<T>::zeros(Shape4::vec(hidden), true);
  ca.fc2_w = xavier_mat<T>(channels, hidden, rng);
  ca.fc2_b = TensorT<T>::zeros(Shape4::vec(channels), true);
  return ca;
}

template <typename T>
TensorT<T> ChannelAttention<T>::forward(const TensorT<T>& x) const {
  const Shape4 s = x.shape();
  TensorT<T> pooled = global_avg_pool(x).reshape(Shape4::mat(s.n, s.c));
  TensorT<T> gate = sigmoid(linear(relu(linear(pooled, fc1_w, fc1_b)), fc2_w, fc2_b));
  return mul_channel_gate(x, gate.reshape({s.n, s.c, 1, 1}));
}

template <typename T>
TensorT<T> channel_attention(const ChannelAttention<T>& ca, const TensorT<T>& x,
                             int64_t reduction) {
  check(reduction >= 1 && x.shape().c % reduction == 0,
        "channel_attention: channels " + std::to_string(x.shape().c) +
            " not divisible by reduction " + std::to_string(reduction));
  check(ca.fc1_w.shape().h == x.shape().c / reduction,
        "channel_attention: gate hidden width != channels/reduction");
  return ca.forward(x);
}

template <typename T>
GsConv<T> GsConv<T>::make(int64_t in, int64_t out, std::mt19937_64& rng) {
  check(out % 2 == 0, "gsconv: out_channels " + std::to_string(out) + " must be even");
  GsConv<T> gs;
  gs.conv_w = xavier_conv<T>(out / 2, in, 1, rng);
  gs.conv_b = TensorT<T>::zeros(Shape4::vec(out / 2), true);
  gs.dw_w = xavier_conv<T>(out / 2, 1, 3, rng);
  gs.dw_b = TensorT<T>::zeros(Shape4::vec(out / 2), true);
  return gs;
}

template <typename T>
TensorT<T> GsConv<T>::forward(const TensorT<T>& x) const {
  TensorT<T> h = conv2d(x, conv_w, conv_b, 1, 0);
  TensorT<T> d = depthwise_conv2d(h, dw_w, dw_b, 1);
  return channel_shuffle(concat_channels(h, d), 2);
}

int64_t gsconv_param_count(int64_t in, int64_t out) {
  const int64_t half = out / 2;
  return half * in + half    // 1x1 conv + bias
         + half * 9 + half;  // depthwise 3x3 + bias
}

int64_t conv3x3_param_count(int64_t in, int64_t out) { return out * in * 9 + out; }

template <typename T>
VovGscsp<T> VovGscsp<T>::make(int64_t channels, int64_t n_blocks, std::mt19937_64& rng) {
  check(channels % 2 == 0, "vovgscsp: channels " + std::to_string(channels) + " must be even");
  check(n_blocks >= 0, "vovgscsp: n_blocks must be non-negative");
  VovGscsp<T> v;
  const int64_t half = channels / 2;
  for (int64_t i = 0; i < n_blocks; ++i) v.chain.push_back(GsConv<T>::make(half, half, rng));
  v.proj_w = xavier_conv<T>(channels, channels, 1, rng);
  v.proj_b = TensorT<T>::zeros(Shape4::vec(channels), true);
  return v;
}

template <typename T>
TensorT<T> VovGscsp<T>::forward(const TensorT<T>& x) const {
  const int64_t c = x.shape().c;
  check(c % 2 == 0, "vovgscsp: input channels must be even, got " + std::to_string(c));
  TensorT<T> x1 = slice_channels(x, 0, c / 2);
  TensorT<T> x2 = slice_channels(x, c / 2, c);
  for (const auto& gs : chain) x2 = gs.forward(x2);
  return conv2d(concat_channels(x1, x2), proj_w, proj_b, 1, 0);
}

template <typename T>
TopDown<T> TopDown<T>::make(int64_t channels, int64_t levels, std::mt19937_64& rng) {
  TopDown<T> td;
  td.top = ConvBnAct<T>::make(channels, channels, 1, 1, 0, rng);
  for (int64_t l = 0; l + 1 < levels; ++l)
    td.fusers.push_back(ConvBnAct<T>::make(channels, channels, 3, 1, 1, rng));
  return td;
}

template <typename T>
MultiScaleFeaturesT<T> TopDown<T>::forward(const MultiScaleFeaturesT<T>& features, bool training) {
  check_pyramid(features);
  const int64_t L = features.size();
  check(L >= 1, "top_down: empty pyramid");
  std::vector<TensorT<T>> out(static_cast<size_t>(L));
  out[L - 1] = top.forward(features.levels[L - 1], training);
  for (int64_t l = L - 2; l >= 0; --l) {
    const Shape4 s = features.levels[l].shape();
    TensorT<T> up = bilinear_resize(out[l + 1], s.h, s.w);
    out[l] = fusers[l].forward(add(features.levels[l], up), training);
  }
  MultiScaleFeaturesT<T> r;
  r.levels = std::move(out);
  return r;
}

template <typename T>
BottomUp<T> BottomUp<T>::make(int64_t channels, int64_t levels, std::mt19937_64& rng) {
  BottomUp<T> bu;
  for (int64_t l = 1; l < levels; ++l) {
    bu.downs.push_back(ConvBnAct<T>::make(channels, channels, 3, 2, 1, rng, /*act=*/false));
    bu.fusers.push_back(ConvBnAct<T>::make(channels, channels, 3, 1, 1, rng));
  }
  return bu;
}

template <typename T>
MultiScaleFeaturesT<T> BottomUp<T>::forward(const MultiScaleFeaturesT<T>& td, bool training) {
  check_pyramid(td);
  const int64_t L = td.size();
  check(L >= 1, "bottom_up: empty pyramid");
  std::vector<TensorT<T>> out(static_cast<size_t>(L));
  out[0] = td.levels[0];
  for (int64_t l = 1; l < L; ++l) {
    TensorT<T> down = downs[l - 1].forward(out[l - 1], training);
    out[l] = fusers[l - 1].forward(add(td.levels[l], down), training);
  }
  MultiScaleFeaturesT<T> r;
  r.levels = std::move(out);
  return r;
}

template <typename T>
FuseNeck<T> FuseNeck<T>::make(int64_t channels, int64_t levels, int64_t vov_depth,
                              std::mt19937_64& rng) {
  FuseNeck<T> n;
  n.td = TopDown<T>::make(channels, levels, rng);
  n.bu = BottomUp<T>::make(channels, levels, rng);
  const int64_t hidden = std::max<int64_t>(1, channels / 16);
  for (int64_t l = 0; l + 1 < levels; ++l) {
    n.td_vov.push_back(VovGscsp<T>::make(channels, vov_depth, rng));
    n.td_ca.push_back(ChannelAttention<T>::make(channels, hidden, rng));
    n.bu_vov.push_back(VovGscsp<T>::make(channels, vov_depth, rng));
    n.bu_ca.push_back(ChannelAttention<T>::make(channels, hidden, rng));
  }
  return n;
}

template <typename T>
MultiScaleFeaturesT<T> FuseNeck<T>::forward(const MultiScaleFeaturesT<T>& encoded, bool training) {
  check_pyramid(encoded);
  const int64_t L = encoded.size();
  std::vector<TensorT<T>> tmp(static_cast<size_t>(L));
  tmp[L - 1] = td.top.forward(encoded.levels[L - 1], training);
  for (int64_t l = L - 2; l >= 0; --l) {
    const Shape4 s = encoded.levels[l].shape();
    TensorT<T> summed = add(encoded.levels[l], bilinear_resize(tmp[l + 1], s.h, s.w));
    TensorT<T> fused =
        use_vov ? td_vov[l].forward(summed) : td.fusers[l].forward(summed, training);
    tmp[l] = use_ca ? td_ca[l].forward(fused) : fused;
  }
  std::vector<TensorT<T>> out(static_cast<size_t>(L));
  out[0] = tmp[0];
  for (int64_t l = 1; l < L; ++l) {
    TensorT<T> down = bu.downs[l - 1].forward(out[l - 1], training);
    TensorT<T> summed = add(tmp[l], down);
    TensorT<T> fused =
        use_vov ? bu_vov[l - 1].forward(summed) : bu.fusers[l - 1].forward(summed, training);
    out[l] = use_ca ? bu_ca[l - 1].forward(fused) : fused;
  }
  MultiScaleFeaturesT<T> r;
  r.levels = std::move(out);
  return r;
}

#define MSDETR_INSTANTIATE_FUSION(T)                                                           \
  template struct ConvBnAct<T>;                                                                \
  template struct ChannelAttention<T>;                                                         \
  template struct GsConv<T>;                                                                   \
  template struct VovGscsp<T>;                                                                 \
  template struct TopDown<T>;                                                                  \
  template struct BottomUp<T>;                                                                 \
  template struct FuseNeck<T>;                                                                 \
  template void check_pyramid<T>(const MultiScaleFeaturesT<T>&);                               \
  template TensorT<T> channel_attention<T>(const ChannelAttention<T>&, const TensorT<T>&,      \
                                           int64_t);

MSDETR_INSTANTIATE_FUSION(double)
MSDETR_INSTANTIATE_FUSION(float)
#undef MSDETR_INSTANTIATE_FUSION

}  // namespace msdetr

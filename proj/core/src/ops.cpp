// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/ops.hpp"

#include <algorithm>
#include <cmath>

#include "msdetr/detail/gemm.hpp"

namespace msdetr {

namespace {

using detail::gemm_acc;
using detail::gemm_at_acc;
using detail::gemm_bt_acc;

template <typename T>
using Data = std::shared_ptr<const std::vector<T>>;

// col[(ci*kh + ki)*kw + kj][oh*OW + ow] = x[ci][oh*s - p + ki][ow*s - p + kj]
template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t OH, int64_t OW, T* col) {
  const int64_t ohw = OH * OW;
  for (int64_t ci = 0; ci < C; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((ci * kh + ki) * kw + kj) * ohw;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill(dst + oh * OW, dst + (oh + 1) * OW, T(0));
            continue;
          }
          const T* src = x + (ci * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            dst[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* x) {
  const int64_t ohw = OH * OW;
  for (int64_t ci = 0; ci < C; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((ci * kh + ki) * kw + kj) * ohw;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* dst = x + (ci * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += src[oh * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias,
                  int64_t stride, int64_t padding) {
  const Shape4 sx = x.shape(), sk = kernel.shape();
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(padding >= 0, "conv2d: padding must be >= 0");
  check(sx.c == sk.c, "conv2d: input channels (axis c=" + std::to_string(sx.c) +
                          ") != kernel in-channels (axis c=" + std::to_string(sk.c) + ")");
  const int64_t OH = (sx.h + 2 * padding - sk.h) / stride + 1;
  const int64_t OW = (sx.w + 2 * padding - sk.w) / stride + 1;
  check(OH >= 1 && OW >= 1, "conv2d: kernel " + sk.str() + " does not fit input " + sx.str() +
                                " at padding " + std::to_string(padding));
  const bool has_bias = bias.defined();
  if (has_bias)
    check(bias.numel() == sk.n, "conv2d: bias length " + std::to_string(bias.numel()) +
                                    " != out-channels " + std::to_string(sk.n));

  const int64_t B = sx.n, Cout = sk.n, ckk = sk.c * sk.h * sk.w, ohw = OH * OW;
  const Shape4 os{B, Cout, OH, OW};
  std::vector<T> out(static_cast<size_t>(os.numel()), T(0));
  {
    std::vector<T> col(static_cast<size_t>(ckk * ohw));
    for (int64_t n = 0; n < B; ++n) {
      im2col(x.values().data() + n * sx.c * sx.h * sx.w, sx.c, sx.h, sx.w, sk.h, sk.w, stride,
             padding, OH, OW, col.data());
      gemm_acc(kernel.values().data(), col.data(), out.data() + n * Cout * ohw, Cout, ckk, ohw);
    }
  }
  if (has_bias) {
    const auto& bv = bias.values();
    for (int64_t n = 0; n < B; ++n)
      for (int64_t o = 0; o < Cout; ++o) {
        T* dst = out.data() + (n * Cout + o) * ohw;
        const T bval = bv[o];
        for (int64_t i = 0; i < ohw; ++i) dst[i] += bval;
      }
  }

  bool tape = autograd::grad_enabled() &&
              (x.on_tape() || kernel.on_tape() || (has_bias && bias.on_tape()));
  if (!tape) return TensorT<T>(os, std::move(out));

  auto px = x.node();
  auto pk = kernel.node();
  auto pb = has_bias ? bias.node() : nullptr;
  Data<T> dx = x.data(), dk = kernel.data();
  auto node = detail::make_node<T>(
      os.numel(), {px, pk, pb},
      [px, pk, pb, dx, dk, sx, sk, stride, padding, OH, OW](const std::vector<T>& g) {
        const int64_t B = sx.n, Cout = sk.n, ckk = sk.c * sk.h * sk.w, ohw = OH * OW;
        std::vector<T> col(static_cast<size_t>(ckk * ohw));
        std::vector<T> dcol;
        if (px) dcol.assign(static_cast<size_t>(ckk * ohw), T(0));
        for (int64_t n = 0; n < B; ++n) {
          const T* gslice = g.data() + n * Cout * ohw;
          if (pk) {
            im2col(dx->data() + n * sx.c * sx.h * sx.w, sx.c, sx.h, sx.w, sk.h, sk.w, stride,
                   padding, OH, OW, col.data());
            gemm_bt_acc(gslice, col.data(), pk->grad_buf().data(), Cout, ohw, ckk);
          }
          if (px) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm_at_acc(dk->data(), gslice, dcol.data(), Cout, ckk, ohw);
            col2im_acc(dcol.data(), sx.c, sx.h, sx.w, sk.h, sk.w, stride, padding, OH, OW,
                       px->grad_buf().data() + n * sx.c * sx.h * sx.w);
          }
          if (pb) {
            auto& gb = pb->grad_buf();
            for (int64_t o = 0; o < Cout; ++o) {
              T acc = T(0);
              for (int64_t i = 0; i < ohw; ++i) acc += gslice[o * ohw + i];
              gb[o] += acc;
            }
          }
        }
      });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> depthwise_conv2d(const TensorT<T>& x, const TensorT<T>& kernel, const TensorT<T>& bias,
                            int64_t padding) {
  const Shape4 sx = x.shape(), sk = kernel.shape();
  check(sk.c == 1 && sk.n == sx.c,
        "depthwise_conv2d: kernel must be (C,1,kh,kw) with C=" + std::to_string(sx.c) +
            ", got " + sk.str());
  const int64_t OH = sx.h + 2 * padding - sk.h + 1;
  const int64_t OW = sx.w + 2 * padding - sk.w + 1;
  check(OH >= 1 && OW >= 1, "depthwise_conv2d: kernel does not fit input");
  const bool has_bias = bias.defined();
  if (has_bias) check(bias.numel() == sx.c, "depthwise_conv2d: bias length != channels");

  const Shape4 os{sx.n, sx.c, OH, OW};
  std::vector<T> out(static_cast<size_t>(os.numel()), T(0));
  const auto& xv = x.values();
  const auto& kv = kernel.values();
  const int64_t khw = sk.h * sk.w;
#pragma omp parallel for if (sx.n * sx.c > 4) schedule(static)
  for (int64_t nc = 0; nc < sx.n * sx.c; ++nc) {
    const int64_t c = nc % sx.c;
    const T* src = xv.data() + nc * sx.h * sx.w;
    const T* ker = kv.data() + c * khw;
    T* dst = out.data() + nc * OH * OW;
    const T bval = has_bias ? bias.values()[c] : T(0);
    for (int64_t oh = 0; oh < OH; ++oh)
      for (int64_t ow = 0; ow < OW; ++ow) {
        T acc = bval;
        for (int64_t ki = 0; ki < sk.h; ++ki) {
          const int64_t ih = oh - padding + ki;
          if (ih < 0 || ih >= sx.h) continue;
          for (int64_t kj = 0; kj < sk.w; ++kj) {
            const int64_t iw = ow - padding + kj;
            if (iw >= 0 && iw < sx.w) acc += src[ih * sx.w + iw] * ker[ki * sk.w + kj];
          }
        }
        dst[oh * OW + ow] = acc;
      }
  }

  bool tape = autograd::grad_enabled() &&
              (x.on_tape() || kernel.on_tape() || (has_bias && bias.on_tape()));
  if (!tape) return TensorT<T>(os, std::move(out));
  auto px = x.node();
  auto pk = kernel.node();
  auto pb = has_bias ? bias.node() : nullptr;
  Data<T> dx = x.data(), dk = kernel.data();
  auto node = detail::make_node<T>(
      os.numel(), {px, pk, pb},
      [px, pk, pb, dx, dk, sx, sk, padding, OH, OW](const std::vector<T>& g) {
        const int64_t khw = sk.h * sk.w;
        for (int64_t nc = 0; nc < sx.n * sx.c; ++nc) {
          const int64_t c = nc % sx.c;
          const T* src = dx->data() + nc * sx.h * sx.w;
          const T* ker = dk->data() + c * khw;
          const T* gslice = g.data() + nc * OH * OW;
          for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
              const T gv = gslice[oh * OW + ow];
              if (gv == T(0)) continue;
              for (int64_t ki = 0; ki < sk.h; ++ki) {
                const int64_t ih = oh - padding + ki;
                if (ih < 0 || ih >= sx.h) continue;
                for (int64_t kj = 0; kj < sk.w; ++kj) {
                  const int64_t iw = ow - padding + kj;
                  if (iw < 0 || iw >= sx.w) continue;
                  if (px) px->grad_buf()[nc * sx.h * sx.w + ih * sx.w + iw] +=
                      gv * ker[ki * sk.w + kj];
                  if (pk) pk->grad_buf()[c * khw + ki * sk.w + kj] += gv * src[ih * sx.w + iw];
                }
              }
              if (pb) pb->grad_buf()[c] += gv;
            }
        }
      });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  const Shape4 s = x.shape();
  check(s.h * s.w >= 1, "global_avg_pool: empty spatial extent in " + s.str());
  const int64_t hw = s.h * s.w;
  const auto& xv = x.values();
  std::vector<T> out(static_cast<size_t>(s.n * s.c));
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    T acc = T(0);
    for (int64_t i = 0; i < hw; ++i) acc += xv[nc * hw + i];
    out[nc] = acc / static_cast<T>(hw);
  }
  const Shape4 os{s.n, s.c, 1, 1};
  if (!detail::wants_tape<T>({&x})) return TensorT<T>(os, std::move(out));
  auto px = x.node();
  auto node = detail::make_node<T>(os.numel(), {px}, [px, s, hw](const std::vector<T>& g) {
    auto& gx = px->grad_buf();
    for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
      const T gv = g[nc] / static_cast<T>(hw);
      for (int64_t i = 0; i < hw; ++i) gx[nc * hw + i] += gv;
    }
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> channel_shuffle(const TensorT<T>& x, int64_t groups) {
  const Shape4 s = x.shape();
  check(groups >= 1 && s.c % groups == 0,
        "channel_shuffle: channels " + std::to_string(s.c) + " not divisible by groups " +
            std::to_string(groups));
  const int64_t per = s.c / groups;
  const int64_t hw = s.h * s.w;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  // input channel c = r*per + s' maps to output channel s'*groups + r
  std::vector<int64_t> perm(static_cast<size_t>(s.c));
  for (int64_t c = 0; c < s.c; ++c) perm[(c % per) * groups + c / per] = c;
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      std::copy(xv.begin() + (n * s.c + perm[c]) * hw, xv.begin() + (n * s.c + perm[c] + 1) * hw,
                out.begin() + (n * s.c + c) * hw);
  if (!detail::wants_tape<T>({&x})) return TensorT<T>(s, std::move(out));
  auto px = x.node();
  auto node = detail::make_node<T>(s.numel(), {px}, [px, s, hw, perm](const std::vector<T>& g) {
    auto& gx = px->grad_buf();
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t c = 0; c < s.c; ++c)
        for (int64_t i = 0; i < hw; ++i)
          gx[(n * s.c + perm[c]) * hw + i] += g[(n * s.c + c) * hw + i];
  });
  return TensorT<T>::make_with_node(s, std::move(out), node);
}

template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int64_t out_h, int64_t out_w) {
  const Shape4 s = x.shape();
  check(out_h >= 1 && out_w >= 1, "bilinear_resize: bad target size");
  struct Tap {
    int64_t lo, hi;
    T frac;
  };
  auto make_taps = [](int64_t in, int64_t out) {
    std::vector<Tap> taps(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      double lo = std::floor(src);
      T frac = static_cast<T>(src - lo);
      int64_t l = static_cast<int64_t>(lo);
      int64_t h = l + 1;
      l = std::clamp<int64_t>(l, 0, in - 1);
      h = std::clamp<int64_t>(h, 0, in - 1);
      taps[i] = {l, h, frac};
    }
    return taps;
  };
  const auto ty = make_taps(s.h, out_h);
  const auto tx = make_taps(s.w, out_w);
  const Shape4 os{s.n, s.c, out_h, out_w};
  const auto& xv = x.values();
  std::vector<T> out(static_cast<size_t>(os.numel()));
#pragma omp parallel for if (s.n * s.c > 4) schedule(static)
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = xv.data() + nc * s.h * s.w;
    T* dst = out.data() + nc * out_h * out_w;
    for (int64_t i = 0; i < out_h; ++i) {
      const Tap& a = ty[i];
      for (int64_t j = 0; j < out_w; ++j) {
        const Tap& b = tx[j];
        const T v00 = src[a.lo * s.w + b.lo], v01 = src[a.lo * s.w + b.hi];
        const T v10 = src[a.hi * s.w + b.lo], v11 = src[a.hi * s.w + b.hi];
        const T top = v00 + (v01 - v00) * b.frac;
        const T bot = v10 + (v11 - v10) * b.frac;
        dst[i * out_w + j] = top + (bot - top) * a.frac;
      }
    }
  }
  if (!detail::wants_tape<T>({&x})) return TensorT<T>(os, std::move(out));
  auto px = x.node();
  auto node = detail::make_node<T>(
      os.numel(), {px}, [px, s, out_h, out_w, ty, tx](const std::vector<T>& g) {
        auto& gx = px->grad_buf();
        for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
          T* dst = gx.data() + nc * s.h * s.w;
          const T* gsrc = g.data() + nc * out_h * out_w;
          for (int64_t i = 0; i < out_h; ++i) {
            const Tap& a = ty[i];
            for (int64_t j = 0; j < out_w; ++j) {
              const Tap& b = tx[j];
              const T gv = gsrc[i * out_w + j];
              dst[a.lo * s.w + b.lo] += gv * (T(1) - a.frac) * (T(1) - b.frac);
              dst[a.lo * s.w + b.hi] += gv * (T(1) - a.frac) * b.frac;
              dst[a.hi * s.w + b.lo] += gv * a.frac * (T(1) - b.frac);
              dst[a.hi * s.w + b.hi] += gv * a.frac * b.frac;
            }
          }
        }
      });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
std::vector<T> bilinear_sample(const TensorT<T>& feature, T x, T y) {
  const Shape4 s = feature.shape();
  check(s.n == 1, "bilinear_sample: expects batch 1, got " + s.str());
  const T px = x * static_cast<T>(s.w) - T(0.5);
  const T py = y * static_cast<T>(s.h) - T(0.5);
  const int64_t x0 = static_cast<int64_t>(std::floor(px));
  const int64_t y0 = static_cast<int64_t>(std::floor(py));
  const T fx = px - static_cast<T>(x0);
  const T fy = py - static_cast<T>(y0);
  const auto& fv = feature.values();
  std::vector<T> out(static_cast<size_t>(s.c), T(0));
  const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx;
  const T w10 = fy * (T(1) - fx), w11 = fy * fx;
  auto inside = [&](int64_t yy, int64_t xx) { return yy >= 0 && yy < s.h && xx >= 0 && xx < s.w; };
  for (int64_t c = 0; c < s.c; ++c) {
    const T* plane = fv.data() + c * s.h * s.w;
    T acc = T(0);
    if (inside(y0, x0)) acc += w00 * plane[y0 * s.w + x0];
    if (inside(y0, x0 + 1)) acc += w01 * plane[y0 * s.w + x0 + 1];
    if (inside(y0 + 1, x0)) acc += w10 * plane[(y0 + 1) * s.w + x0];
    if (inside(y0 + 1, x0 + 1)) acc += w11 * plane[(y0 + 1) * s.w + x0 + 1];
    out[static_cast<size_t>(c)] = acc;
  }
  return out;
}

double grad_check(const std::function<Tensor(const Tensor&)>& op, const Tensor& input, double h) {
  check(h > 0, "grad_check: step must be positive");
  Tensor leaf(input.shape(), input.values(), /*requires_grad=*/true);
  Tensor y = op(leaf);
  check(y.numel() == 1, "grad_check: op must be scalar-valued");
  if (!std::isfinite(y.item())) throw EvalError("grad_check: op produced non-finite output");
  std::vector<double> analytic(static_cast<size_t>(input.numel()), 0.0);
  if (y.on_tape()) {
    backward(y);
    analytic = leaf.grad();
  }

  double max_err = 0.0;
  std::vector<double> vals = input.values();
  autograd::NoGradGuard no_grad;
  for (size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + h;
    const double yp = op(Tensor(input.shape(), vals)).item();
    vals[i] = orig - h;
    const double ym = op(Tensor(input.shape(), vals)).item();
    vals[i] = orig;
    if (!std::isfinite(yp) || !std::isfinite(ym))
      throw EvalError("grad_check: op produced non-finite output under perturbation");
    const double numeric = (yp - ym) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

namespace sampling_stats {
namespace {
thread_local uint64_t g_reads = 0;
thread_local bool g_enabled = false;
}  // namespace
void reset() { g_reads = 0; }
uint64_t reads() { return g_reads; }
void enable(bool on) { g_enabled = on; }
void record(uint64_t n) {
  if (g_enabled) g_reads += n;
}
bool enabled() { return g_enabled; }
}  // namespace sampling_stats

#define MSDETR_INSTANTIATE_OPS(T)                                                              \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,       \
                                int64_t, int64_t);                                             \
  template TensorT<T> depthwise_conv2d<T>(const TensorT<T>&, const TensorT<T>&,                \
                                          const TensorT<T>&, int64_t);                         \
  template TensorT<T> global_avg_pool<T>(const TensorT<T>&);                                   \
  template TensorT<T> channel_shuffle<T>(const TensorT<T>&, int64_t);                          \
  template TensorT<T> bilinear_resize<T>(const TensorT<T>&, int64_t, int64_t);                 \
  template std::vector<T> bilinear_sample<T>(const TensorT<T>&, T, T);

MSDETR_INSTANTIATE_OPS(double)
MSDETR_INSTANTIATE_OPS(float)
#undef MSDETR_INSTANTIATE_OPS

}  // namespace msdetr

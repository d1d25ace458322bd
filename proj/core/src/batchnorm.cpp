// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/batchnorm.hpp"

#include <cmath>

namespace msdetr {

template <typename T>
FoldedConv<T> fold_bn(const TensorT<T>& kernel, const std::vector<T>& bias, const BnParams<T>& bn) {
  const Shape4 sk = kernel.shape();
  const size_t C = static_cast<size_t>(sk.n);
  check(bn.gamma.size() == C && bn.beta.size() == C && bn.mu.size() == C && bn.sigma2.size() == C,
        "fold_bn: BN channel count != kernel out-channels " + std::to_string(sk.n));
  check(bias.empty() || bias.size() == C, "fold_bn: bias length mismatch");

  std::vector<T> scale(C);
  for (size_t o = 0; o < C; ++o) {
    const T denom2 = bn.sigma2[o] + bn.eps;
    if (!(denom2 > T(0)))
      throw DomainError("fold_bn: sigma2 + eps must be positive at channel " + std::to_string(o));
    scale[o] = bn.gamma[o] / std::sqrt(denom2);
  }

  const auto& kv = kernel.values();
  std::vector<T> out(kv.size());
  const int64_t per = sk.c * sk.h * sk.w;
  for (size_t o = 0; o < C; ++o)
    for (int64_t i = 0; i < per; ++i)
      out[o * per + i] = scale[o] * kv[o * per + i];

  std::vector<T> fbias(C);
  for (size_t o = 0; o < C; ++o) {
    const T b0 = bias.empty() ? T(0) : bias[o];
    fbias[o] = bn.beta[o] - scale[o] * bn.mu[o] + scale[o] * b0;
  }
  return {TensorT<T>(sk, std::move(out)), std::move(fbias)};
}

template <typename T>
BatchNorm<T>::BatchNorm(int64_t channels, T eps_, T momentum_)
    : gamma(TensorT<T>::full(Shape4::vec(channels), T(1), /*requires_grad=*/true)),
      beta(TensorT<T>::zeros(Shape4::vec(channels), /*requires_grad=*/true)),
      running_mean(static_cast<size_t>(channels), T(0)),
      running_var(static_cast<size_t>(channels), T(1)),
      eps(eps_),
      momentum(momentum_) {}

namespace {

template <typename T>
using Data = std::shared_ptr<const std::vector<T>>;

// Shared affine+normalize core: y = gamma * (x - mean) * istd + beta, with the
// standard batch-statistics backward when `batch_stats` (mean/var then depend
// on x), and the plain affine backward otherwise.
template <typename T>
TensorT<T> bn_apply(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                    const std::vector<T>& mean, const std::vector<T>& var, T eps,
                    bool batch_stats) {
  const Shape4 s = x.shape();
  const int64_t C = s.c, hw = s.h * s.w, per = s.n * hw;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();

  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) (*istd)[c] = T(1) / std::sqrt(var[c] + eps);

  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const int64_t base = (n * C + c) * hw;
      const T m = mean[c], is = (*istd)[c], g = gv[c], b = bv[c];
      for (int64_t i = 0; i < hw; ++i) {
        const T xh = (xv[base + i] - m) * is;
        (*xhat)[base + i] = xh;
        out[base + i] = g * xh + b;
      }
    }

  bool tape = autograd::grad_enabled() && (x.on_tape() || gamma.on_tape() || beta.on_tape());
  if (!tape) return TensorT<T>(s, std::move(out));

  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  Data<T> dgamma = gamma.data();
  auto node = detail::make_node<T>(
      s.numel(), {px, pg, pb},
      [px, pg, pb, xhat, istd, dgamma, s, C, hw, per, batch_stats](const std::vector<T>& g) {
        for (int64_t c = 0; c < C; ++c) {
          T sum_g = T(0), sum_gx = T(0);
          for (int64_t n = 0; n < s.n; ++n) {
            const int64_t base = (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              sum_g += g[base + i];
              sum_gx += g[base + i] * (*xhat)[base + i];
            }
          }
          if (pg) pg->grad_buf()[c] += sum_gx;
          if (pb) pb->grad_buf()[c] += sum_g;
          if (px) {
            auto& gx = px->grad_buf();
            const T gam = (*dgamma)[c], is = (*istd)[c];
            if (batch_stats) {
              const T inv_n = T(1) / static_cast<T>(per);
              for (int64_t n = 0; n < s.n; ++n) {
                const int64_t base = (n * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i)
                  gx[base + i] += gam * is *
                                  (g[base + i] - sum_g * inv_n - (*xhat)[base + i] * sum_gx * inv_n);
              }
            } else {
              for (int64_t n = 0; n < s.n; ++n) {
                const int64_t base = (n * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) gx[base + i] += gam * is * g[base + i];
              }
            }
          }
        }
      });
  return TensorT<T>::make_with_node(s, std::move(out), node);
}

}  // namespace

template <typename T>
TensorT<T> BatchNorm<T>::forward(const TensorT<T>& x, bool training) {
  const Shape4 s = x.shape();
  check(s.c == channels(), "batchnorm: input channels " + std::to_string(s.c) +
                               " != layer channels " + std::to_string(channels()));
  if (training) {
    const int64_t hw = s.h * s.w, per = s.n * hw;
    std::vector<T> mean(static_cast<size_t>(s.c), T(0));
    std::vector<T> var(static_cast<size_t>(s.c), T(0));
    const auto& xv = x.values();
    for (int64_t c = 0; c < s.c; ++c) {
      T acc = T(0);
      for (int64_t n = 0; n < s.n; ++n) {
        const int64_t base = (n * s.c + c) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += xv[base + i];
      }
      mean[c] = acc / static_cast<T>(per);
      T vacc = T(0);
      for (int64_t n = 0; n < s.n; ++n) {
        const int64_t base = (n * s.c + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const T d = xv[base + i] - mean[c];
          vacc += d * d;
        }
      }
      var[c] = vacc / static_cast<T>(per);
    }
    if (!has_stats()) {
      running_mean.assign(static_cast<size_t>(s.c), T(0));
      running_var.assign(static_cast<size_t>(s.c), T(1));
    }
    for (int64_t c = 0; c < s.c; ++c) {
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[c];
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var[c];
    }
    return bn_apply(x, gamma, beta, mean, var, eps, /*batch_stats=*/true);
  }
  if (!has_stats()) throw StateError("batchnorm: running statistics are not populated");
  return bn_apply(x, gamma, beta, running_mean, running_var, eps, /*batch_stats=*/false);
}

template <typename T>
BnParams<T> BatchNorm<T>::params() const {
  if (!has_stats()) throw StateError("batchnorm: running statistics are not populated");
  BnParams<T> p;
  p.gamma = gamma.values();
  p.beta = beta.values();
  p.mu = running_mean;
  p.sigma2 = running_var;
  p.eps = eps;
  return p;
}

#define MSDETR_INSTANTIATE_BN(T)                                                               \
  template struct BnParams<T>;                                                                 \
  template class BatchNorm<T>;                                                                 \
  template FoldedConv<T> fold_bn<T>(const TensorT<T>&, const std::vector<T>&, const BnParams<T>&);

MSDETR_INSTANTIATE_BN(double)
MSDETR_INSTANTIATE_BN(float)
#undef MSDETR_INSTANTIATE_BN

}  // namespace msdetr

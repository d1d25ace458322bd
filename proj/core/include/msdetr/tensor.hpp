// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "msdetr/shape.hpp"

namespace msdetr {

namespace autograd {

/// One entry of the reverse-mode tape. Nodes form a DAG through `parents`;
/// `backprop` scatters this node's accumulated gradient into the parents.
template <typename T>
struct Node {
  int64_t size = 0;
  bool leaf = false;
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(const std::vector<T>&)> backprop;

  std::vector<T>& grad_buf() {
    if (grad.empty()) grad.assign(static_cast<size_t>(size), T(0));
    return grad;
  }
};

bool grad_enabled();
void set_grad_enabled(bool on);

/// Disables tape recording for the enclosing scope (eval-mode forward passes).
struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace autograd

/// Dense 4-D tensor in batch-channel-height-width layout. Values are
/// immutable after construction; operations return fresh tensors. Copies
/// share the underlying buffer. A tensor participates in the gradient tape
/// when it was created with `requires_grad` or derives from one that was.
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;
  TensorT(const Shape4& shape, std::vector<T> values, bool requires_grad = false)
      : shape_(shape), data_(std::make_shared<const std::vector<T>>(std::move(values))) {
    check(static_cast<int64_t>(data_->size()) == shape_.numel(),
          "tensor: data length " + std::to_string(data_->size()) +
              " does not match shape " + shape_.str());
    if (requires_grad) {
      node_ = std::make_shared<autograd::Node<T>>();
      node_->size = shape_.numel();
      node_->leaf = true;
    }
  }

  static TensorT zeros(const Shape4& s, bool requires_grad = false) {
    return TensorT(s, std::vector<T>(static_cast<size_t>(s.numel()), T(0)), requires_grad);
  }
  static TensorT full(const Shape4& s, T v, bool requires_grad = false) {
    return TensorT(s, std::vector<T>(static_cast<size_t>(s.numel()), v), requires_grad);
  }
  static TensorT scalar(T v) { return TensorT(Shape4::vec(1), {v}); }

  template <typename Rng>
  static TensorT randn(const Shape4& s, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> v(static_cast<size_t>(s.numel()));
    for (auto& x : v) x = static_cast<T>(dist(rng)) * stddev;
    return TensorT(s, std::move(v), requires_grad);
  }

  template <typename Rng>
  static TensorT uniform(const Shape4& s, Rng& rng, T lo, T hi, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    std::vector<T> v(static_cast<size_t>(s.numel()));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return TensorT(s, std::move(v), requires_grad);
  }

  const Shape4& shape() const { return shape_; }
  int64_t numel() const { return shape_.numel(); }
  bool defined() const { return data_ != nullptr; }

  const std::vector<T>& values() const& { return *data_; }
  std::vector<T> values() const&& { return *data_; }
  std::shared_ptr<const std::vector<T>> data() const { return data_; }

  T at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return (*data_)[static_cast<size_t>(((n * shape_.c + c) * shape_.h + h) * shape_.w + w)];
  }
  T item() const {
    check(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
    return (*data_)[0];
  }

  bool on_tape() const { return node_ != nullptr; }
  bool is_leaf() const { return node_ && node_->leaf; }
  const std::shared_ptr<autograd::Node<T>>& node() const { return node_; }

  /// Gradient accumulated by backward(); zeros if backward never reached it.
  const std::vector<T>& grad() const {
    check(node_ != nullptr, "grad: tensor is not on the tape");
    return node_->grad_buf();
  }
  void zero_grad() {
    if (node_) node_->grad.assign(static_cast<size_t>(node_->size), T(0));
  }

  /// Same values, detached from the tape.
  TensorT detach() const {
    TensorT t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  /// Same buffer viewed under a shape with equal element count.
  TensorT reshape(const Shape4& s) const;

  /// Internal: wraps an op result and attaches a tape node.
  static TensorT make_with_node(const Shape4& s, std::vector<T> values,
                                std::shared_ptr<autograd::Node<T>> node) {
    TensorT t(s, std::move(values), false);
    t.node_ = std::move(node);
    return t;
  }

 private:
  Shape4 shape_;
  std::shared_ptr<const std::vector<T>> data_;
  std::shared_ptr<autograd::Node<T>> node_;
};

using Tensor = TensorT<double>;

namespace detail {

/// Builds the tape node for an op with the given inputs, provided grad mode
/// is on and at least one input is on the tape. `backprop(gout)` must add the
/// chain-rule contribution into each non-null parent's grad_buf().
template <typename T>
std::shared_ptr<autograd::Node<T>> make_node(
    int64_t out_size, const std::vector<std::shared_ptr<autograd::Node<T>>>& parents,
    std::function<void(const std::vector<T>&)> backprop) {
  auto node = std::make_shared<autograd::Node<T>>();
  node->size = out_size;
  node->parents = parents;
  node->backprop = std::move(backprop);
  return node;
}

template <typename T>
bool wants_tape(std::initializer_list<const TensorT<T>*> inputs) {
  if (!autograd::grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t->on_tape()) return true;
  return false;
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar tensor. Each reachable leaf
/// node receives dLoss/dLeaf in its grad buffer. One backward per graph.
template <typename T>
void backward(const TensorT<T>& loss);

// ---- elementwise arithmetic ------------------------------------------------

template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> add_scalar(const TensorT<T>& a, T s);
template <typename T> TensorT<T> mul_scalar(const TensorT<T>& a, T s);
template <typename T> TensorT<T> neg(const TensorT<T>& a);

template <typename T> TensorT<T> relu(const TensorT<T>& a);
template <typename T> TensorT<T> sigmoid(const TensorT<T>& a);
template <typename T> TensorT<T> silu(const TensorT<T>& a);
template <typename T> TensorT<T> exp_op(const TensorT<T>& a);
template <typename T> TensorT<T> log_op(const TensorT<T>& a);
template <typename T> TensorT<T> abs_op(const TensorT<T>& a);
template <typename T> TensorT<T> pow_const(const TensorT<T>& a, T p);
template <typename T> TensorT<T> clamp_min(const TensorT<T>& a, T lo);
template <typename T> TensorT<T> min_elem(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> max_elem(const TensorT<T>& a, const TensorT<T>& b);

// ---- reductions ------------------------------------------------------------

template <typename T> TensorT<T> sum_all(const TensorT<T>& a);
template <typename T> TensorT<T> mean_all(const TensorT<T>& a);

// ---- structural ------------------------------------------------------------

/// Rows/cols refer to the last two axes of a (1,1,R,C) matrix tensor.
template <typename T> TensorT<T> slice_cols(const TensorT<T>& a, int64_t c0, int64_t c1);

/// out[r,0] = a[r, idx[r]]: one column picked per row.
template <typename T> TensorT<T> select_cols(const TensorT<T>& a, const std::vector<int64_t>& idx);
template <typename T> TensorT<T> slice_rows(const TensorT<T>& a, int64_t r0, int64_t r1);
template <typename T> TensorT<T> concat_cols(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts);
template <typename T> TensorT<T> gather_rows(const TensorT<T>& a, const std::vector<int64_t>& idx);
template <typename T> TensorT<T> transpose_last2(const TensorT<T>& a);
template <typename T> TensorT<T> slice_channels(const TensorT<T>& a, int64_t c0, int64_t c1);
template <typename T> TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b);

// ---- linear algebra --------------------------------------------------------

/// (1,1,m,k) x (1,1,k,n) -> (1,1,m,n).
template <typename T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

/// y = x * W^T + b with x:(1,1,N,in), W:(1,1,out,in), b:(1,1,1,out) or empty.
template <typename T> TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b);

// ---- row-wise normalizations -----------------------------------------------

/// Softmax over the last axis, shift-invariant; rows sum to one.
template <typename T> TensorT<T> softmax_lastdim(const TensorT<T>& a);

/// Softmax over contiguous groups of `group` entries along the last axis.
template <typename T> TensorT<T> softmax_groups(const TensorT<T>& a, int64_t group);

/// Layer normalization over the last axis with learnable gamma/beta (1,1,1,C).
template <typename T>
TensorT<T> layernorm_lastdim(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                             T eps = T(1e-5));

// ---- broadcast helpers -----------------------------------------------------

/// x:(N,C,H,W) + bias per channel (length C).
template <typename T> TensorT<T> add_channel_bias(const TensorT<T>& x, const TensorT<T>& bias);

/// x:(N,C,H,W) scaled by gate:(N,C,1,1), broadcast over spatial positions.
template <typename T> TensorT<T> mul_channel_gate(const TensorT<T>& x, const TensorT<T>& gate);

/// out[r, k*s+j] = a[r, k*s+j] + t[r, j]: tiles t across groups of s columns.
template <typename T> TensorT<T> add_tiled_cols(const TensorT<T>& a, const TensorT<T>& t, int64_t s);

/// (B,C,H,W) -> (1,1,B*H*W,C): one row per spatial location, item-major.
template <typename T> TensorT<T> nchw_to_rows(const TensorT<T>& x);

/// Inverse of nchw_to_rows for the given target shape.
template <typename T> TensorT<T> rows_to_nchw(const TensorT<T>& rows, const Shape4& target);

#define MSDETR_EXTERN_TENSOR(T)                     \
  extern template class TensorT<T>;                 \
  extern template void backward<T>(const TensorT<T>&);

MSDETR_EXTERN_TENSOR(double)
MSDETR_EXTERN_TENSOR(float)
#undef MSDETR_EXTERN_TENSOR

}  // namespace msdetr

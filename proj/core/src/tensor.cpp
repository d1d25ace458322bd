// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "msdetr/detail/gemm.hpp"

namespace msdetr {

namespace autograd {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

}  // namespace autograd

template <typename T>
TensorT<T> TensorT<T>::reshape(const Shape4& s) const {
  check(s.numel() == numel(), "reshape: " + shape_.str() + " -> " + s.str() + " changes numel");
  TensorT t;
  t.shape_ = s;
  t.data_ = data_;
  t.node_ = node_;
  return t;
}

template <typename T>
void backward(const TensorT<T>& loss) {
  check(loss.numel() == 1, "backward: loss must be scalar, got " + loss.shape().str());
  check(loss.on_tape(), "backward: loss is not on the tape");

  using NodeP = std::shared_ptr<autograd::Node<T>>;
  // Iterative postorder DFS to get a topological order.
  std::vector<NodeP> order;
  std::unordered_set<autograd::Node<T>*> visited;
  std::vector<std::pair<NodeP, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeP child = node->parents[next++];
      if (child && !visited.count(child.get())) {
        visited.insert(child.get());
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buf()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& node = *it;
    if (node->backprop) node->backprop(node->grad_buf());
  }
}

namespace {

using msdetr::detail::make_node;

template <typename T>
using Data = std::shared_ptr<const std::vector<T>>;

template <typename T>
TensorT<T> unary_op(const TensorT<T>& a, std::vector<T> out,
                    std::function<void(const std::vector<T>&, std::vector<T>&)> scatter) {
  const Shape4 s = a.shape();
  if (!detail::wants_tape<T>({&a})) return TensorT<T>(s, std::move(out));
  auto pa = a.node();
  auto node = make_node<T>(s.numel(), {pa},
                           [pa, scatter = std::move(scatter)](const std::vector<T>& g) {
                             scatter(g, pa->grad_buf());
                           });
  return TensorT<T>::make_with_node(s, std::move(out), node);
}

template <typename T>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, const Shape4& out_shape,
                     std::vector<T> out,
                     std::function<void(const std::vector<T>&, std::vector<T>*, std::vector<T>*)>
                         scatter) {
  if (!detail::wants_tape<T>({&a, &b})) return TensorT<T>(out_shape, std::move(out));
  auto pa = a.node();
  auto pb = b.node();
  auto node = make_node<T>(
      out_shape.numel(), {pa, pb},
      [pa, pb, scatter = std::move(scatter)](const std::vector<T>& g) {
        scatter(g, pa ? &pa->grad_buf() : nullptr, pb ? &pb->grad_buf() : nullptr);
      });
  return TensorT<T>::make_with_node(out_shape, std::move(out), node);
}

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  check(a.shape() == b.shape(),
        std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace

// ---- elementwise arithmetic ------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return binary_op<T>(a, b, a.shape(), std::move(out),
                      [](const std::vector<T>& g, std::vector<T>* ga, std::vector<T>* gb) {
                        if (ga)
                          for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                        if (gb)
                          for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
                      });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return binary_op<T>(a, b, a.shape(), std::move(out),
                      [](const std::vector<T>& g, std::vector<T>* ga, std::vector<T>* gb) {
                        if (ga)
                          for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                        if (gb)
                          for (size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                      });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Data<T> da = a.data(), db = b.data();
  return binary_op<T>(a, b, a.shape(), std::move(out),
                      [da, db](const std::vector<T>& g, std::vector<T>* ga, std::vector<T>* gb) {
                        if (ga)
                          for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (*db)[i];
                        if (gb)
                          for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * (*da)[i];
                      });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "div");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  Data<T> da = a.data(), db = b.data();
  return binary_op<T>(a, b, a.shape(), std::move(out),
                      [da, db](const std::vector<T>& g, std::vector<T>* ga, std::vector<T>* gb) {
                        if (ga)
                          for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / (*db)[i];
                        if (gb)
                          for (size_t i = 0; i < g.size(); ++i)
                            (*gb)[i] -= g[i] * (*da)[i] / ((*db)[i] * (*db)[i]);
                      });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
  return unary_op<T>(a, std::move(out), [](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  return unary_op<T>(a, std::move(out), [s](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  Data<T> da = a.data();
  return unary_op<T>(a, std::move(out), [da](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i)
      if ((*da)[i] > T(0)) ga[i] += g[i];
  });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-av[i]));
  auto sv = std::make_shared<std::vector<T>>(out);
  return unary_op<T>(a, std::move(out), [sv](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*sv)[i] * (T(1) - (*sv)[i]);
  });
}

template <typename T>
TensorT<T> silu(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  auto sv = std::make_shared<std::vector<T>>(av.size());
  for (size_t i = 0; i < av.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-av[i]));
    (*sv)[i] = s;
    out[i] = av[i] * s;
  }
  Data<T> da = a.data();
  return unary_op<T>(a, std::move(out), [da, sv](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i) {
      const T s = (*sv)[i];
      ga[i] += g[i] * (s + (*da)[i] * s * (T(1) - s));
    }
  });
}

template <typename T>
TensorT<T> exp_op(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  auto ov = std::make_shared<std::vector<T>>(out);
  return unary_op<T>(a, std::move(out), [ov](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*ov)[i];
  });
}

template <typename T>
TensorT<T> log_op(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::log(av[i]);
  Data<T> da = a.data();
  return unary_op<T>(a, std::move(out), [da](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*da)[i];
  });
}

template <typename T>
TensorT<T> abs_op(const TensorT<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::abs(av[i]);
  Data<T> da = a.data();
  return unary_op<T>(a, std::move(out), [da](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i) {
      const T x = (*da)[i];
      if (x > T(0))
        ga[i] += g[i];
      else if (x < T(0))
        ga[i] -= g[i];
    }
  });
}

template <typename T>
TensorT<T> pow_const(const TensorT<T>& a, T p) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::pow(av[i], p);
  Data<T> da = a.data();
  return unary_op<T>(a, std::move(out), [da, p](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * p * std::pow((*da)[i], p - T(1));
  });
}

template <typename T>
TensorT<T> clamp_min(const TensorT<T>& a, T lo) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] < lo ? lo : av[i];
  Data<T> da = a.data();
  return unary_op<T>(a, std::move(out), [da, lo](const std::vector<T>& g, std::vector<T>& ga) {
    for (size_t i = 0; i < g.size(); ++i)
      if ((*da)[i] >= lo) ga[i] += g[i];
  });
}

template <typename T>
TensorT<T> min_elem(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "min_elem");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] <= bv[i] ? av[i] : bv[i];
  Data<T> da = a.data(), db = b.data();
  return binary_op<T>(a, b, a.shape(), std::move(out),
                      [da, db](const std::vector<T>& g, std::vector<T>* ga, std::vector<T>* gb) {
                        for (size_t i = 0; i < g.size(); ++i) {
                          if ((*da)[i] <= (*db)[i]) {
                            if (ga) (*ga)[i] += g[i];
                          } else if (gb) {
                            (*gb)[i] += g[i];
                          }
                        }
                      });
}

template <typename T>
TensorT<T> max_elem(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "max_elem");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] >= bv[i] ? av[i] : bv[i];
  Data<T> da = a.data(), db = b.data();
  return binary_op<T>(a, b, a.shape(), std::move(out),
                      [da, db](const std::vector<T>& g, std::vector<T>* ga, std::vector<T>* gb) {
                        for (size_t i = 0; i < g.size(); ++i) {
                          if ((*da)[i] >= (*db)[i]) {
                            if (ga) (*ga)[i] += g[i];
                          } else if (gb) {
                            (*gb)[i] += g[i];
                          }
                        }
                      });
}

// ---- reductions ------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
  const auto& av = a.values();
  T acc = T(0);
  for (T v : av) acc += v;
  std::vector<T> out{acc};
  TensorT<T> plain(Shape4::vec(1), out);
  if (!detail::wants_tape<T>({&a})) return plain;
  auto pa = a.node();
  auto node = make_node<T>(1, {pa}, [pa](const std::vector<T>& g) {
    auto& ga = pa->grad_buf();
    for (auto& x : ga) x += g[0];
  });
  return TensorT<T>::make_with_node(Shape4::vec(1), std::move(out), node);
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---- structural ------------------------------------------------------------

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& a, int64_t c0, int64_t c1) {
  const Shape4 s = a.shape();
  check(c0 >= 0 && c1 <= s.w && c0 < c1, "slice_cols: bad range [" + std::to_string(c0) + "," +
                                             std::to_string(c1) + ") for " + s.str());
  const int64_t rows = s.n * s.c * s.h;
  const int64_t cols = c1 - c0;
  const auto& av = a.values();
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < cols; ++j) out[r * cols + j] = av[r * s.w + c0 + j];
  Shape4 os{s.n, s.c, s.h, cols};
  if (!detail::wants_tape<T>({&a})) return TensorT<T>(os, std::move(out));
  auto pa = a.node();
  const int64_t W = s.w;
  auto node = make_node<T>(os.numel(), {pa}, [pa, rows, cols, c0, W](const std::vector<T>& g) {
    auto& ga = pa->grad_buf();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < cols; ++j) ga[r * W + c0 + j] += g[r * cols + j];
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& a, int64_t r0, int64_t r1) {
  const Shape4 s = a.shape();
  check(s.n == 1 && s.c == 1, "slice_rows: expects (1,1,R,C), got " + s.str());
  check(r0 >= 0 && r1 <= s.h && r0 < r1, "slice_rows: bad range for " + s.str());
  const auto& av = a.values();
  const int64_t cols = s.w;
  std::vector<T> out(static_cast<size_t>((r1 - r0) * cols));
  std::copy(av.begin() + r0 * cols, av.begin() + r1 * cols, out.begin());
  Shape4 os = Shape4::mat(r1 - r0, cols);
  if (!detail::wants_tape<T>({&a})) return TensorT<T>(os, std::move(out));
  auto pa = a.node();
  auto node = make_node<T>(os.numel(), {pa}, [pa, r0, cols, n = r1 - r0](const std::vector<T>& g) {
    auto& ga = pa->grad_buf();
    for (int64_t i = 0; i < n * cols; ++i) ga[r0 * cols + i] += g[i];
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> concat_cols(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape4 sa = a.shape(), sb = b.shape();
  check(sa.n == sb.n && sa.c == sb.c && sa.h == sb.h,
        "concat_cols: leading dims differ, " + sa.str() + " vs " + sb.str());
  const int64_t rows = sa.n * sa.c * sa.h;
  const int64_t wa = sa.w, wb = sb.w;
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(static_cast<size_t>(rows * (wa + wb)));
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(av.begin() + r * wa, av.begin() + (r + 1) * wa, out.begin() + r * (wa + wb));
    std::copy(bv.begin() + r * wb, bv.begin() + (r + 1) * wb, out.begin() + r * (wa + wb) + wa);
  }
  Shape4 os{sa.n, sa.c, sa.h, wa + wb};
  return binary_op<T>(a, b, os, std::move(out),
                      [rows, wa, wb](const std::vector<T>& g, std::vector<T>* ga,
                                     std::vector<T>* gb) {
                        for (int64_t r = 0; r < rows; ++r) {
                          if (ga)
                            for (int64_t j = 0; j < wa; ++j)
                              (*ga)[r * wa + j] += g[r * (wa + wb) + j];
                          if (gb)
                            for (int64_t j = 0; j < wb; ++j)
                              (*gb)[r * wb + j] += g[r * (wa + wb) + wa + j];
                        }
                      });
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
  check(!parts.empty(), "concat_rows: no parts");
  const int64_t cols = parts[0].shape().w;
  int64_t rows = 0;
  for (const auto& p : parts) {
    check(p.shape().n == 1 && p.shape().c == 1 && p.shape().w == cols,
          "concat_rows: incompatible part " + p.shape().str());
    rows += p.shape().h;
  }
  std::vector<T> out;
  out.reserve(static_cast<size_t>(rows * cols));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());

  Shape4 os = Shape4::mat(rows, cols);
  bool tape = autograd::grad_enabled();
  bool any = false;
  if (tape)
    for (const auto& p : parts) any = any || p.on_tape();
  if (!tape || !any) return TensorT<T>(os, std::move(out));

  std::vector<std::shared_ptr<autograd::Node<T>>> parents;
  std::vector<int64_t> sizes;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    sizes.push_back(p.numel());
  }
  auto node = make_node<T>(os.numel(), parents, [parents, sizes](const std::vector<T>& g) {
    size_t off = 0;
    for (size_t i = 0; i < parents.size(); ++i) {
      if (parents[i]) {
        auto& gp = parents[i]->grad_buf();
        for (int64_t j = 0; j < sizes[i]; ++j) gp[j] += g[off + j];
      }
      off += static_cast<size_t>(sizes[i]);
    }
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> gather_rows(const TensorT<T>& a, const std::vector<int64_t>& idx) {
  const Shape4 s = a.shape();
  check(s.n == 1 && s.c == 1, "gather_rows: expects (1,1,R,C), got " + s.str());
  const int64_t cols = s.w;
  const auto& av = a.values();
  std::vector<T> out(idx.size() * static_cast<size_t>(cols));
  for (size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] >= 0 && idx[i] < s.h, "gather_rows: index out of range");
    std::copy(av.begin() + idx[i] * cols, av.begin() + (idx[i] + 1) * cols,
              out.begin() + static_cast<int64_t>(i) * cols);
  }
  Shape4 os = Shape4::mat(static_cast<int64_t>(idx.size()), cols);
  if (!detail::wants_tape<T>({&a})) return TensorT<T>(os, std::move(out));
  auto pa = a.node();
  auto node = make_node<T>(os.numel(), {pa}, [pa, idx, cols](const std::vector<T>& g) {
    auto& ga = pa->grad_buf();
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t j = 0; j < cols; ++j)
        ga[idx[i] * cols + j] += g[static_cast<int64_t>(i) * cols + j];
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& a) {
  const Shape4 s = a.shape();
  const int64_t planes = s.n * s.c;
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = av.data() + p * s.h * s.w;
    T* dst = out.data() + p * s.h * s.w;
    for (int64_t i = 0; i < s.h; ++i)
      for (int64_t j = 0; j < s.w; ++j) dst[j * s.h + i] = src[i * s.w + j];
  }
  Shape4 os{s.n, s.c, s.w, s.h};
  if (!detail::wants_tape<T>({&a})) return TensorT<T>(os, std::move(out));
  auto pa = a.node();
  auto node = make_node<T>(os.numel(), {pa}, [pa, s, planes](const std::vector<T>& g) {
    auto& ga = pa->grad_buf();
    for (int64_t p = 0; p < planes; ++p) {
      const T* gsrc = g.data() + p * s.h * s.w;
      T* gdst = ga.data() + p * s.h * s.w;
      for (int64_t i = 0; i < s.h; ++i)
        for (int64_t j = 0; j < s.w; ++j) gdst[i * s.w + j] += gsrc[j * s.h + i];
    }
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& a, int64_t c0, int64_t c1) {
  const Shape4 s = a.shape();
  check(c0 >= 0 && c1 <= s.c && c0 < c1, "slice_channels: bad range for " + s.str());
  const int64_t hw = s.h * s.w;
  const int64_t cs = c1 - c0;
  const auto& av = a.values();
  std::vector<T> out(static_cast<size_t>(s.n * cs * hw));
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < cs; ++c)
      std::copy(av.begin() + ((n * s.c + c0 + c) * hw), av.begin() + ((n * s.c + c0 + c + 1) * hw),
                out.begin() + ((n * cs + c) * hw));
  Shape4 os{s.n, cs, s.h, s.w};
  if (!detail::wants_tape<T>({&a})) return TensorT<T>(os, std::move(out));
  auto pa = a.node();
  auto node = make_node<T>(os.numel(), {pa}, [pa, s, c0, cs, hw](const std::vector<T>& g) {
    auto& ga = pa->grad_buf();
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t c = 0; c < cs; ++c)
        for (int64_t i = 0; i < hw; ++i)
          ga[(n * s.c + c0 + c) * hw + i] += g[(n * cs + c) * hw + i];
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape4 sa = a.shape(), sb = b.shape();
  check(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w,
        "concat_channels: incompatible " + sa.str() + " vs " + sb.str());
  const int64_t hw = sa.h * sa.w;
  const auto& av = a.values();
  const auto& bv = b.values();
  Shape4 os{sa.n, sa.c + sb.c, sa.h, sa.w};
  std::vector<T> out(static_cast<size_t>(os.numel()));
  for (int64_t n = 0; n < sa.n; ++n) {
    std::copy(av.begin() + n * sa.c * hw, av.begin() + (n + 1) * sa.c * hw,
              out.begin() + n * os.c * hw);
    std::copy(bv.begin() + n * sb.c * hw, bv.begin() + (n + 1) * sb.c * hw,
              out.begin() + n * os.c * hw + sa.c * hw);
  }
  return binary_op<T>(
      a, b, os, std::move(out),
      [sa, sb, hw, oc = os.c](const std::vector<T>& g, std::vector<T>* ga, std::vector<T>* gb) {
        for (int64_t n = 0; n < sa.n; ++n) {
          if (ga)
            for (int64_t i = 0; i < sa.c * hw; ++i) (*ga)[n * sa.c * hw + i] += g[n * oc * hw + i];
          if (gb)
            for (int64_t i = 0; i < sb.c * hw; ++i)
              (*gb)[n * sb.c * hw + i] += g[n * oc * hw + sa.c * hw + i];
        }
      });
}

// ---- linear algebra --------------------------------------------------------

using detail::gemm_acc;
using detail::gemm_at_acc;
using detail::gemm_bt_acc;

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape4 sa = a.shape(), sb = b.shape();
  check(sa.n == 1 && sa.c == 1 && sb.n == 1 && sb.c == 1,
        "matmul: expects (1,1,m,k) x (1,1,k,n)");
  check(sa.w == sb.h, "matmul: inner dims differ, " + sa.str() + " x " + sb.str());
  const int64_t M = sa.h, K = sa.w, N = sb.w;
  std::vector<T> out(static_cast<size_t>(M * N), T(0));
  gemm_acc(a.values().data(), b.values().data(), out.data(), M, K, N);
  Shape4 os = Shape4::mat(M, N);
  Data<T> da = a.data(), db = b.data();
  return binary_op<T>(a, b, os, std::move(out),
                      [da, db, M, K, N](const std::vector<T>& g, std::vector<T>* ga,
                                        std::vector<T>* gb) {
                        // dA = g * B^T ; dB = A^T * g
                        if (ga) gemm_bt_acc(g.data(), db->data(), ga->data(), M, N, K);
                        if (gb) gemm_at_acc(da->data(), g.data(), gb->data(), M, K, N);
                      });
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  const Shape4 sx = x.shape(), sw = w.shape();
  check(sx.n == 1 && sx.c == 1 && sw.n == 1 && sw.c == 1, "linear: expects matrix operands");
  check(sx.w == sw.w, "linear: input width " + std::to_string(sx.w) +
                          " != weight in-dim " + std::to_string(sw.w));
  const int64_t N = sx.h, In = sx.w, Out = sw.h;
  const bool has_bias = b.defined();
  if (has_bias)
    check(b.numel() == Out, "linear: bias length " + std::to_string(b.numel()) +
                                " != out-dim " + std::to_string(Out));
  std::vector<T> out(static_cast<size_t>(N * Out), T(0));
  gemm_bt_acc(x.values().data(), w.values().data(), out.data(), N, In, Out);
  if (has_bias) {
    const auto& bv = b.values();
    for (int64_t i = 0; i < N; ++i)
      for (int64_t j = 0; j < Out; ++j) out[i * Out + j] += bv[j];
  }
  Shape4 os = Shape4::mat(N, Out);

  bool tape = autograd::grad_enabled() && (x.on_tape() || w.on_tape() || (has_bias && b.on_tape()));
  if (!tape) return TensorT<T>(os, std::move(out));
  auto px = x.node();
  auto pw = w.node();
  auto pb = has_bias ? b.node() : nullptr;
  Data<T> dx = x.data(), dw = w.data();
  auto node = make_node<T>(
      os.numel(), {px, pw, pb}, [px, pw, pb, dx, dw, N, In, Out](const std::vector<T>& g) {
        if (px) gemm_acc(g.data(), dw->data(), px->grad_buf().data(), N, Out, In);
        if (pw) gemm_at_acc(g.data(), dx->data(), pw->grad_buf().data(), N, Out, In);
        if (pb) {
          auto& gb = pb->grad_buf();
          for (int64_t i = 0; i < N; ++i)
            for (int64_t j = 0; j < Out; ++j) gb[j] += g[i * Out + j];
        }
      });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

// ---- row-wise normalizations -----------------------------------------------

template <typename T>
TensorT<T> softmax_groups(const TensorT<T>& a, int64_t group) {
  const Shape4 s = a.shape();
  check(group >= 1 && s.w % group == 0,
        "softmax_groups: width " + std::to_string(s.w) + " not divisible by group " +
            std::to_string(group));
  const int64_t ngroups = a.numel() / group;
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (int64_t r = 0; r < ngroups; ++r) {
    const T* src = av.data() + r * group;
    T* dst = out.data() + r * group;
    T mx = src[0];
    for (int64_t j = 1; j < group; ++j) mx = std::max(mx, src[j]);
    T sum = T(0);
    for (int64_t j = 0; j < group; ++j) {
      dst[j] = std::exp(src[j] - mx);
      sum += dst[j];
    }
    const T inv = T(1) / sum;
    for (int64_t j = 0; j < group; ++j) dst[j] *= inv;
  }
  auto sv = std::make_shared<std::vector<T>>(out);
  return unary_op<T>(a, std::move(out),
                     [sv, ngroups, group](const std::vector<T>& g, std::vector<T>& ga) {
                       for (int64_t r = 0; r < ngroups; ++r) {
                         const T* sr = sv->data() + r * group;
                         const T* gr = g.data() + r * group;
                         T dot = T(0);
                         for (int64_t j = 0; j < group; ++j) dot += sr[j] * gr[j];
                         for (int64_t j = 0; j < group; ++j)
                           ga[r * group + j] += sr[j] * (gr[j] - dot);
                       }
                     });
}

template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& a) {
  return softmax_groups(a, a.shape().w);
}

template <typename T>
TensorT<T> layernorm_lastdim(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                             T eps) {
  const Shape4 s = x.shape();
  const int64_t C = s.w;
  check(gamma.numel() == C && beta.numel() == C, "layernorm: gamma/beta must have length " +
                                                     std::to_string(C));
  const int64_t rows = x.numel() / C;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * C;
    T mean = T(0);
    for (int64_t j = 0; j < C; ++j) mean += src[j];
    mean /= static_cast<T>(C);
    T var = T(0);
    for (int64_t j = 0; j < C; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= static_cast<T>(C);
    const T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    for (int64_t j = 0; j < C; ++j) {
      const T xh = (src[j] - mean) * istd;
      (*xhat)[r * C + j] = xh;
      out[r * C + j] = xh * gv[j] + bv[j];
    }
  }

  bool tape = autograd::grad_enabled() && (x.on_tape() || gamma.on_tape() || beta.on_tape());
  if (!tape) return TensorT<T>(s, std::move(out));
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  auto gvp = gamma.data();
  auto node = make_node<T>(
      s.numel(), {px, pg, pb},
      [px, pg, pb, xhat, inv_std, gvp, rows, C](const std::vector<T>& g) {
        for (int64_t r = 0; r < rows; ++r) {
          const T* xh = xhat->data() + r * C;
          const T* gr = g.data() + r * C;
          if (pg) {
            auto& gg = pg->grad_buf();
            for (int64_t j = 0; j < C; ++j) gg[j] += gr[j] * xh[j];
          }
          if (pb) {
            auto& gb = pb->grad_buf();
            for (int64_t j = 0; j < C; ++j) gb[j] += gr[j];
          }
          if (px) {
            auto& gx = px->grad_buf();
            // dL/dx = istd/C * (C*dy*gamma - sum(dy*gamma) - xhat*sum(dy*gamma*xhat))
            T sum_dyg = T(0), sum_dygx = T(0);
            for (int64_t j = 0; j < C; ++j) {
              const T dyg = gr[j] * (*gvp)[j];
              sum_dyg += dyg;
              sum_dygx += dyg * xh[j];
            }
            const T istd = (*inv_std)[r];
            for (int64_t j = 0; j < C; ++j) {
              const T dyg = gr[j] * (*gvp)[j];
              gx[r * C + j] +=
                  istd * (dyg - sum_dyg / static_cast<T>(C) - xh[j] * sum_dygx / static_cast<T>(C));
            }
          }
        }
      });
  return TensorT<T>::make_with_node(s, std::move(out), node);
}

// ---- broadcast helpers -----------------------------------------------------

template <typename T>
TensorT<T> add_channel_bias(const TensorT<T>& x, const TensorT<T>& bias) {
  const Shape4 s = x.shape();
  check(bias.numel() == s.c, "add_channel_bias: bias length " + std::to_string(bias.numel()) +
                                 " != channels " + std::to_string(s.c));
  const int64_t hw = s.h * s.w;
  const auto& xv = x.values();
  const auto& bv = bias.values();
  std::vector<T> out(xv.size());
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c) {
      const T b = bv[c];
      const int64_t base = (n * s.c + c) * hw;
      for (int64_t i = 0; i < hw; ++i) out[base + i] = xv[base + i] + b;
    }
  return binary_op<T>(x, bias, s, std::move(out),
                      [s, hw](const std::vector<T>& g, std::vector<T>* gx, std::vector<T>* gb) {
                        if (gx)
                          for (size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                        if (gb)
                          for (int64_t n = 0; n < s.n; ++n)
                            for (int64_t c = 0; c < s.c; ++c) {
                              const int64_t base = (n * s.c + c) * hw;
                              T acc = T(0);
                              for (int64_t i = 0; i < hw; ++i) acc += g[base + i];
                              (*gb)[c] += acc;
                            }
                      });
}

template <typename T>
TensorT<T> mul_channel_gate(const TensorT<T>& x, const TensorT<T>& gate) {
  const Shape4 s = x.shape();
  const Shape4 sg = gate.shape();
  check(sg.n == s.n && sg.c == s.c && sg.h == 1 && sg.w == 1,
        "mul_channel_gate: gate must be (N,C,1,1), got " + sg.str());
  const int64_t hw = s.h * s.w;
  const auto& xv = x.values();
  const auto& gv = gate.values();
  std::vector<T> out(xv.size());
  for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T g = gv[nc];
    for (int64_t i = 0; i < hw; ++i) out[nc * hw + i] = xv[nc * hw + i] * g;
  }
  Data<T> dx = x.data(), dg = gate.data();
  return binary_op<T>(x, gate, s, std::move(out),
                      [dx, dg, s, hw](const std::vector<T>& g, std::vector<T>* gx,
                                      std::vector<T>* ggate) {
                        for (int64_t nc = 0; nc < s.n * s.c; ++nc) {
                          if (gx) {
                            const T gv = (*dg)[nc];
                            for (int64_t i = 0; i < hw; ++i)
                              (*gx)[nc * hw + i] += g[nc * hw + i] * gv;
                          }
                          if (ggate) {
                            T acc = T(0);
                            for (int64_t i = 0; i < hw; ++i)
                              acc += g[nc * hw + i] * (*dx)[nc * hw + i];
                            (*ggate)[nc] += acc;
                          }
                        }
                      });
}

template <typename T>
TensorT<T> add_tiled_cols(const TensorT<T>& a, const TensorT<T>& t, int64_t s) {
  const Shape4 sa = a.shape(), st = t.shape();
  check(sa.n == 1 && sa.c == 1 && st.n == 1 && st.c == 1 && st.h == sa.h && st.w == s &&
            sa.w % s == 0,
        "add_tiled_cols: incompatible " + sa.str() + " + " + st.str());
  const int64_t rows = sa.h, reps = sa.w / s;
  const auto& av = a.values();
  const auto& tv = t.values();
  std::vector<T> out(av.size());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t k = 0; k < reps; ++k)
      for (int64_t j = 0; j < s; ++j)
        out[(r * reps + k) * s + j] = av[(r * reps + k) * s + j] + tv[r * s + j];
  return binary_op<T>(a, t, sa, std::move(out),
                      [rows, reps, s](const std::vector<T>& g, std::vector<T>* ga,
                                      std::vector<T>* gt) {
                        if (ga)
                          for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                        if (gt)
                          for (int64_t r = 0; r < rows; ++r)
                            for (int64_t k = 0; k < reps; ++k)
                              for (int64_t j = 0; j < s; ++j)
                                (*gt)[r * s + j] += g[(r * reps + k) * s + j];
                      });
}

template <typename T>
TensorT<T> select_cols(const TensorT<T>& a, const std::vector<int64_t>& idx) {
  const Shape4 s = a.shape();
  check(s.n == 1 && s.c == 1, "select_cols: expects (1,1,R,C), got " + s.str());
  check(static_cast<int64_t>(idx.size()) == s.h, "select_cols: index count != rows");
  const auto& av = a.values();
  std::vector<T> out(idx.size());
  for (size_t r = 0; r < idx.size(); ++r) {
    check(idx[r] >= 0 && idx[r] < s.w, "select_cols: index out of range");
    out[r] = av[static_cast<int64_t>(r) * s.w + idx[r]];
  }
  Shape4 os = Shape4::mat(s.h, 1);
  if (!detail::wants_tape<T>({&a})) return TensorT<T>(os, std::move(out));
  auto pa = a.node();
  auto node = make_node<T>(os.numel(), {pa}, [pa, idx, W = s.w](const std::vector<T>& g) {
    auto& ga = pa->grad_buf();
    for (size_t r = 0; r < idx.size(); ++r) ga[static_cast<int64_t>(r) * W + idx[r]] += g[r];
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> nchw_to_rows(const TensorT<T>& x) {
  const Shape4 s = x.shape();
  const int64_t hw = s.h * s.w;
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t i = 0; i < hw; ++i) out[(n * hw + i) * s.c + c] = xv[(n * s.c + c) * hw + i];
  Shape4 os = Shape4::mat(s.n * hw, s.c);
  if (!detail::wants_tape<T>({&x})) return TensorT<T>(os, std::move(out));
  auto px = x.node();
  auto node = make_node<T>(os.numel(), {px}, [px, s, hw](const std::vector<T>& g) {
    auto& gx = px->grad_buf();
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t c = 0; c < s.c; ++c)
        for (int64_t i = 0; i < hw; ++i) gx[(n * s.c + c) * hw + i] += g[(n * hw + i) * s.c + c];
  });
  return TensorT<T>::make_with_node(os, std::move(out), node);
}

template <typename T>
TensorT<T> rows_to_nchw(const TensorT<T>& rows, const Shape4& target) {
  const Shape4 s = rows.shape();
  const int64_t hw = target.h * target.w;
  check(s.n == 1 && s.c == 1 && s.h == target.n * hw && s.w == target.c,
        "rows_to_nchw: rows " + s.str() + " do not match target " + target.str());
  const auto& rv = rows.values();
  std::vector<T> out(rv.size());
  for (int64_t n = 0; n < target.n; ++n)
    for (int64_t c = 0; c < target.c; ++c)
      for (int64_t i = 0; i < hw; ++i)
        out[(n * target.c + c) * hw + i] = rv[(n * hw + i) * target.c + c];
  if (!detail::wants_tape<T>({&rows})) return TensorT<T>(target, std::move(out));
  auto pr = rows.node();
  auto node = make_node<T>(target.numel(), {pr}, [pr, target, hw](const std::vector<T>& g) {
    auto& gr = pr->grad_buf();
    for (int64_t n = 0; n < target.n; ++n)
      for (int64_t c = 0; c < target.c; ++c)
        for (int64_t i = 0; i < hw; ++i)
          gr[(n * hw + i) * target.c + c] += g[(n * target.c + c) * hw + i];
  });
  return TensorT<T>::make_with_node(target, std::move(out), node);
}

// ---- explicit instantiation --------------------------------------------------

#define MSDETR_INSTANTIATE(T)                                                                  \
  template class TensorT<T>;                                                                   \
  template void backward<T>(const TensorT<T>&);                                                \
  template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> div<T>(const TensorT<T>&, const TensorT<T>&);                            \
  template TensorT<T> add_scalar<T>(const TensorT<T>&, T);                                     \
  template TensorT<T> mul_scalar<T>(const TensorT<T>&, T);                                     \
  template TensorT<T> neg<T>(const TensorT<T>&);                                               \
  template TensorT<T> relu<T>(const TensorT<T>&);                                              \
  template TensorT<T> sigmoid<T>(const TensorT<T>&);                                           \
  template TensorT<T> silu<T>(const TensorT<T>&);                                              \
  template TensorT<T> exp_op<T>(const TensorT<T>&);                                            \
  template TensorT<T> log_op<T>(const TensorT<T>&);                                            \
  template TensorT<T> abs_op<T>(const TensorT<T>&);                                            \
  template TensorT<T> pow_const<T>(const TensorT<T>&, T);                                      \
  template TensorT<T> clamp_min<T>(const TensorT<T>&, T);                                      \
  template TensorT<T> min_elem<T>(const TensorT<T>&, const TensorT<T>&);                       \
  template TensorT<T> max_elem<T>(const TensorT<T>&, const TensorT<T>&);                       \
  template TensorT<T> sum_all<T>(const TensorT<T>&);                                           \
  template TensorT<T> mean_all<T>(const TensorT<T>&);                                          \
  template TensorT<T> slice_cols<T>(const TensorT<T>&, int64_t, int64_t);                      \
  template TensorT<T> slice_rows<T>(const TensorT<T>&, int64_t, int64_t);                      \
  template TensorT<T> concat_cols<T>(const TensorT<T>&, const TensorT<T>&);                    \
  template TensorT<T> concat_rows<T>(const std::vector<TensorT<T>>&);                          \
  template TensorT<T> gather_rows<T>(const TensorT<T>&, const std::vector<int64_t>&);          \
  template TensorT<T> transpose_last2<T>(const TensorT<T>&);                                   \
  template TensorT<T> slice_channels<T>(const TensorT<T>&, int64_t, int64_t);                  \
  template TensorT<T> concat_channels<T>(const TensorT<T>&, const TensorT<T>&);                \
  template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                         \
  template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);      \
  template TensorT<T> softmax_lastdim<T>(const TensorT<T>&);                                   \
  template TensorT<T> softmax_groups<T>(const TensorT<T>&, int64_t);                           \
  template TensorT<T> layernorm_lastdim<T>(const TensorT<T>&, const TensorT<T>&,               \
                                           const TensorT<T>&, T);                              \
  template TensorT<T> add_channel_bias<T>(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> mul_channel_gate<T>(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> add_tiled_cols<T>(const TensorT<T>&, const TensorT<T>&, int64_t);       \
  template TensorT<T> nchw_to_rows<T>(const TensorT<T>&);                                     \
  template TensorT<T> rows_to_nchw<T>(const TensorT<T>&, const Shape4&);                      \
  template TensorT<T> select_cols<T>(const TensorT<T>&, const std::vector<int64_t>&);

MSDETR_INSTANTIATE(double)
MSDETR_INSTANTIATE(float)
#undef MSDETR_INSTANTIATE

}  // namespace msdetr

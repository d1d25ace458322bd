// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace msdetr::detail {

// Row-major accumulating GEMM variants. Each output element is written by
// exactly one thread, so results are deterministic for any thread count.

/// C[m,n] += A[m,k] * B[k,n]
template <typename T>
inline void gemm_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
#pragma omp parallel for if (M * N * K > 131072) schedule(static)
  for (int64_t i = 0; i < M; ++i) {
    T* crow = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T(0)) continue;
      const T* brow = B + k * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

/// C[m,n] += A[m,k] * B[n,k]  (B transposed). B is re-laid-out once so the
/// inner loop is a unit-stride multiply-add, which vectorizes without
/// reassociation; small sizes use the direct dot-product form.
template <typename T>
inline void gemm_bt_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  if (M * N * K < 16384) {
    for (int64_t i = 0; i < M; ++i) {
      const T* arow = A + i * K;
      T* crow = C + i * N;
      for (int64_t j = 0; j < N; ++j) {
        const T* brow = B + j * K;
        T acc = T(0);
        for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
        crow[j] += acc;
      }
    }
    return;
  }
  std::vector<T> bt(static_cast<size_t>(K * N));
  for (int64_t j = 0; j < N; ++j)
    for (int64_t k = 0; k < K; ++k) bt[k * N + j] = B[j * K + k];
  gemm_acc(A, bt.data(), C, M, K, N);
}

/// C[k,n] += A[m,k] * B[m,n]  (A transposed)
template <typename T>
inline void gemm_at_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
#pragma omp parallel for if (M * N * K > 131072) schedule(static)
  for (int64_t k = 0; k < K; ++k) {
    T* crow = C + k * N;
    for (int64_t i = 0; i < M; ++i) {
      const T a = A[i * K + k];
      if (a == T(0)) continue;
      const T* brow = B + i * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace msdetr::detail

// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace msdetr {

/// Thrown when tensor shapes do not satisfy an operation's contract.
class DimError : public std::runtime_error {
 public:
  explicit DimError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown for invalid numeric domains (e.g. non-positive BN variance).
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown when a model configuration violates an invariant.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown when required runtime state is missing (e.g. BN statistics).
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown when an evaluation produces non-finite values.
class EvalError : public std::runtime_error {
 public:
  explicit EvalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense 4-D extent in batch-channel-height-width order.
struct Shape4 {
  int64_t n = 0;
  int64_t c = 0;
  int64_t h = 0;
  int64_t w = 0;

  constexpr Shape4() = default;
  constexpr Shape4(int64_t n_, int64_t c_, int64_t h_, int64_t w_) : n(n_), c(c_), h(h_), w(w_) {}

  /// Row-major matrix of r x c laid out as (1, 1, r, c).
  static constexpr Shape4 mat(int64_t rows, int64_t cols) { return {1, 1, rows, cols}; }
  /// Flat vector of k values laid out as (1, 1, 1, k).
  static constexpr Shape4 vec(int64_t k) { return {1, 1, 1, k}; }

  constexpr int64_t numel() const { return n * c * h * w; }
  constexpr bool operator==(const Shape4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  constexpr bool operator!=(const Shape4& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw DimError(msg);
}

}  // namespace msdetr

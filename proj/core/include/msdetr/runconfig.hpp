// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "msdetr/model.hpp"

namespace msdetr {

/// End-to-end run configuration: model shape, optimization, dataset size and
/// splits, and augmentation toggles. Mirrors the key=value config file
/// one-to-one; unknown keys are errors.
struct RunConfig {
  ModelConfig model;
  uint64_t seed = 7;
  int64_t epochs = 50;
  int64_t batch_size = 8;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int64_t warmup_steps = 100;
  int64_t images = 280;  // split by the ratios below
  int64_t image_size = 128;
  double train_ratio = 0.70;
  double val_ratio = 0.15;
  double test_ratio = 0.15;
  bool hflip = true;
  bool scale_jitter = true;
  int64_t min_instances = 1;
  int64_t max_instances = 5;
  double stop_at_map50 = 0.0;  // 0 disables early stopping

  void validate() const;
  int64_t train_count() const;
  int64_t val_count() const;
  int64_t test_count() const;

  /// Strict parser for `key = value` lines ('#' comments). Unknown keys and
  /// malformed values throw ConfigError with the line quoted.
  static RunConfig parse(const std::string& text);
  static RunConfig parse_file(const std::string& path);
  std::string to_text() const;
};

/// The five renderable defect categories, index order fixed.
const std::vector<std::string>& class_names();

}  // namespace msdetr

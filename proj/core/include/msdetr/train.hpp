// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>

#include "msdetr/dataset.hpp"
#include "msdetr/metrics.hpp"

namespace msdetr {

/// Adaptive moment estimation with decoupled weight decay and a linear
/// warmup followed by cosine annealing to zero.
class AdamW {
 public:
  AdamW(std::vector<ParamRef<double>> params, double lr_peak, double weight_decay,
        int64_t warmup_steps, int64_t total_steps);

  double lr_at(int64_t step) const;
  double current_lr() const { return lr_at(step_); }
  int64_t steps_taken() const { return step_; }

  /// Reads accumulated gradients and writes updated parameter tensors.
  void step();

 private:
  std::vector<ParamRef<double>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_peak_, weight_decay_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t warmup_steps_, total_steps_;
  int64_t step_ = 0;
};

struct EpochLog {
  int64_t epoch = 0;
  double loss = 0.0, cls = 0.0, l1 = 0.0, giou = 0.0;
  double lr = 0.0;
  double val_map50 = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int64_t best_epoch = -1;
  double best_map50 = 0.0;
  bool diverged = false;
  std::string message;
};

/// Runs detections over a dataset in eval mode and converts them to
/// evaluation records in the 640-unit pixel frame used for size buckets.
std::vector<EvalRecord> evaluate(Model& model, const Dataset& data, int64_t batch_size);

MetricsReport eval_metrics(Model& model, const Dataset& data, int64_t batch_size);

/// Mean composite loss over a dataset in eval mode (no parameter updates).
double dataset_loss(Model& model, const Dataset& data, int64_t batch_size);

/// Full training loop: seeded shuffling and augmentation, Hungarian-matched
/// composite loss, per-epoch validation mAP@0.5, best-val checkpointing to
/// `ckpt_path` and a rolling last-good copy at `ckpt_path + ".last"`.
/// Non-finite loss aborts with the diagnostic in the result.
TrainResult train_model(Model& model, const RunConfig& rc, const DatasetSplits& data,
                        const std::string& ckpt_path, std::ostream& log);

}  // namespace msdetr

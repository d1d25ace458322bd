// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>

#include "msdetr/matching.hpp"

namespace msdetr {

/// One scored detection in pixel-unit corner coordinates.
struct PredInstance {
  Box box;  // xyxy, pixels
  double score = 0.0;
  int64_t cls = 0;
};

/// One ground-truth instance in pixel-unit corner coordinates.
struct GtInstance {
  Box box;  // xyxy, pixels
  int64_t cls = 0;
};

/// Per-image predictions and ground truth for evaluation.
struct EvalRecord {
  std::vector<PredInstance> preds;
  std::vector<GtInstance> gts;
};

/// Intersection-over-union of corner boxes; zero-union pairs give 0.
double iou(const Box& a, const Box& b);

/// 101-point interpolated average precision for one class at one IoU
/// threshold, greedy highest-score-first matching. Ground truth with pixel
/// area outside [area_lo, area_hi) is ignored, as are detections matched to
/// it; unmatched detections outside the range are ignored rather than FPs.
/// Returns NaN when the class has no in-range ground truth.
double average_precision(const std::vector<EvalRecord>& records, int64_t cls, double iou_thresh,
                         double area_lo = 0.0, double area_hi = 1e30);

struct MetricsReport {
  double map50 = 0.0;
  double map5095 = 0.0;
  double ap_small = 0.0;
  double ap_medium = 0.0;
  double ap_large = 0.0;
  std::map<std::string, double> per_class_ap50;
  std::vector<std::string> warnings;

  std::string to_json() const;
  std::string to_table() const;
};

/// Means over classes and the 10 IoU thresholds 0.5:0.05:0.95, plus the
/// COCO size buckets at 32^2 and 96^2 pixels.
MetricsReport map_range(const std::vector<EvalRecord>& records,
                        const std::vector<std::string>& class_names);

}  // namespace msdetr

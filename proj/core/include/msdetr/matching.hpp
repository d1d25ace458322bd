// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>

#include "msdetr/decoder.hpp"
#include "msdetr/tensor.hpp"

namespace msdetr {

using Box = std::array<double, 4>;

/// Ground-truth instances: normalized (cx,cy,w,h) boxes and class indices.
struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int64_t> labels;

  int64_t count() const { return static_cast<int64_t>(boxes.size()); }
};

/// One-to-one query/ground-truth pairing, injective in both coordinates.
struct Assignment {
  std::vector<std::pair<int64_t, int64_t>> pairs;  // (query index, gt index)
};

/// (cx,cy,w,h) -> (x1,y1,x2,y2). Throws DomainError on negative extent.
Box box_cxcywh_to_xyxy(const Box& b);
Box box_xyxy_to_cxcywh(const Box& b);

/// Generalized IoU on corner boxes, range (-1, 1]. Zero-area conventions:
/// zero-area boxes have IoU 0, coincident zero-area pairs give GIoU 0.
double giou(const Box& a, const Box& b);
double iou_xyxy(const Box& a, const Box& b);

/// -alpha (1-p_t)^gamma log(p_t) with p_t clamped at 1e-12 before the log.
double focal_loss(const std::vector<double>& probs, int64_t target, double alpha = 0.25,
                  double gamma = 2.0);

/// Sum of absolute coordinate differences.
double l1_loss(const Box& a, const Box& b);

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

/// cost[q][g] = cls_w * (-p_q(class_g)) + l1_w * L1 + giou_w * (1 - GIoU),
/// probabilities by softmax over the C+1 logits.
std::vector<std::vector<double>> match_cost(const Detections& det, const GroundTruth& gt,
                                            const LossWeights& w = {});

/// Optimal min-cost assignment of min(rows, cols) pairs (Jonker-Volgenant
/// shortest augmenting paths, not greedy).
Assignment hungarian(const std::vector<std::vector<double>>& cost);

struct LossBreakdown {
  Tensor total;  // scalar, on the tape when the detections are
  double cls = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
};

/// Composite objective: matched queries take focal loss on their class plus
/// both box losses, unmatched queries take focal loss on background. Box
/// terms average over matched pairs, the class term over all queries.
LossBreakdown total_loss(const Detections& det, const GroundTruth& gt, const Assignment& as,
                         const LossWeights& w = {}, double alpha = 0.25, double gamma = 2.0);

/// Tape-differentiable focal loss over logit rows; returns (N,1) losses.
Tensor focal_loss_rows(const Tensor& logits, const std::vector<int64_t>& targets,
                       double alpha = 0.25, double gamma = 2.0);

/// Tape-differentiable GIoU of (cx,cy,w,h) prediction rows against fixed
/// ground-truth rows; returns (P,1) GIoU values.
Tensor giou_rows(const Tensor& pred_cxcywh, const Tensor& gt_cxcywh);

}  // namespace msdetr

// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msdetr {

Box box_cxcywh_to_xyxy(const Box& b) {
  if (b[2] < 0.0 || b[3] < 0.0)
    throw DomainError("box_convert: negative extent (w=" + std::to_string(b[2]) +
                      ", h=" + std::to_string(b[3]) + ")");
  return {b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0};
}

Box box_xyxy_to_cxcywh(const Box& b) {
  return {(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]};
}

double iou_xyxy(const Box& a, const Box& b) {
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double area_a = (a[2] - a[0]) * (a[3] - a[1]);
  const double area_b = (b[2] - b[0]) * (b[3] - b[1]);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double giou(const Box& a_in, const Box& b_in) {
  // canonical operand order keeps giou(a,b) == giou(b,a) bit-exact even
  // under FMA contraction
  const bool swap = b_in < a_in;
  const Box& a = swap ? b_in : a_in;
  const Box& b = swap ? a_in : b_in;
  check(a[0] <= a[2] && a[1] <= a[3] && b[0] <= b[2] && b[1] <= b[3],
        "giou: corners must be ordered");
  const double iou = iou_xyxy(a, b);
  const double hw = std::max(a[2], b[2]) - std::min(a[0], b[0]);
  const double hh = std::max(a[3], b[3]) - std::min(a[1], b[1]);
  const double hull = hw * hh;
  if (hull <= 0.0) return iou;  // coincident degenerate boxes
  const double area_a = (a[2] - a[0]) * (a[3] - a[1]);
  const double area_b = (b[2] - b[0]) * (b[3] - b[1]);
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double uni = area_a + area_b - inter;
  return iou - (hull - uni) / hull;
}

double focal_loss(const std::vector<double>& probs, int64_t target, double alpha, double gamma) {
  check(target >= 0 && target < static_cast<int64_t>(probs.size()),
        "focal_loss: target out of range");
  const double pt = std::max(probs[static_cast<size_t>(target)], 1e-12);
  return -alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
}

double l1_loss(const Box& a, const Box& b) {
  double acc = 0.0;
  for (int i = 0; i < 4; ++i) acc += std::abs(a[i] - b[i]);
  return acc;
}

std::vector<std::vector<double>> match_cost(const Detections& det, const GroundTruth& gt,
                                            const LossWeights& w) {
  check(gt.count() >= 1, "match_cost: at least one ground-truth instance required");
  const int64_t nq = det.count();
  const int64_t classes = det.class_logits.shape().w;
  const auto& logits = det.class_logits.values();
  const auto& boxes = det.boxes.values();

  std::vector<std::vector<double>> cost(static_cast<size_t>(nq),
                                        std::vector<double>(static_cast<size_t>(gt.count())));
  for (int64_t q = 0; q < nq; ++q) {
    // softmax of this query's logits
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < classes; ++c) mx = std::max(mx, logits[q * classes + c]);
    std::vector<double> p(static_cast<size_t>(classes));
    double sum = 0.0;
    for (int64_t c = 0; c < classes; ++c) {
      p[c] = std::exp(logits[q * classes + c] - mx);
      sum += p[c];
    }
    for (auto& v : p) v /= sum;

    const Box pb{boxes[q * 4 + 0], boxes[q * 4 + 1], boxes[q * 4 + 2], boxes[q * 4 + 3]};
    const Box pxy = box_cxcywh_to_xyxy(pb);
    for (int64_t j = 0; j < gt.count(); ++j) {
      const Box gxy = box_cxcywh_to_xyxy(gt.boxes[j]);
      cost[q][j] = w.cls * (-p[static_cast<size_t>(gt.labels[j])]) +
                   w.l1 * l1_loss(pb, gt.boxes[j]) + w.giou * (1.0 - giou(pxy, gxy));
    }
  }
  return cost;
}

Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  Assignment out;
  if (cost.empty() || cost[0].empty()) return out;
  const int64_t rows = static_cast<int64_t>(cost.size());
  const int64_t cols = static_cast<int64_t>(cost[0].size());
  for (const auto& row : cost) {
    check(static_cast<int64_t>(row.size()) == cols, "hungarian: ragged cost matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw DomainError("hungarian: non-finite cost entry");
  }

  // Jonker-Volgenant shortest augmenting paths; requires n <= m.
  const bool transposed = rows > cols;
  const int64_t n = transposed ? cols : rows;
  const int64_t m = transposed ? rows : cols;
  auto at = [&](int64_t i, int64_t j) -> double {
    return transposed ? cost[static_cast<size_t>(j)][static_cast<size_t>(i)]
                      : cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
  };

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n + 1), 0.0), v(static_cast<size_t>(m + 1), 0.0);
  std::vector<int64_t> p(static_cast<size_t>(m + 1), 0), way(static_cast<size_t>(m + 1), 0);
  for (int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m + 1), inf);
    std::vector<char> used(static_cast<size_t>(m + 1), 0);
    do {
      used[j0] = 1;
      const int64_t i0 = p[j0];
      double delta = inf;
      int64_t j1 = -1;
      for (int64_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int64_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  for (int64_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const int64_t i = p[j] - 1;
    if (transposed)
      out.pairs.emplace_back(j - 1, i);
    else
      out.pairs.emplace_back(i, j - 1);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

Tensor focal_loss_rows(const Tensor& logits, const std::vector<int64_t>& targets, double alpha,
                       double gamma) {
  check(static_cast<int64_t>(targets.size()) == logits.shape().h,
        "focal_loss_rows: target count != rows");
  Tensor p = softmax_lastdim(logits);
  Tensor pt = clamp_min(select_cols(p, targets), 1e-12);
  Tensor mod = pow_const(sub(Tensor::full(pt.shape(), 1.0), pt), gamma);
  return mul_scalar(mul(mod, log_op(pt)), -alpha);
}

Tensor giou_rows(const Tensor& pred_cxcywh, const Tensor& gt_cxcywh) {
  check(pred_cxcywh.shape().w == 4 && gt_cxcywh.shape() == pred_cxcywh.shape(),
        "giou_rows: expects matching (P,4) boxes");
  auto corners = [](const Tensor& b) {
    Tensor cx = slice_cols(b, 0, 1), cy = slice_cols(b, 1, 2);
    Tensor w = slice_cols(b, 2, 3), h = slice_cols(b, 3, 4);
    Tensor hw = mul_scalar(w, 0.5), hh = mul_scalar(h, 0.5);
    return std::array<Tensor, 4>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
  };
  auto [ax1, ay1, ax2, ay2] = corners(pred_cxcywh);
  auto [bx1, by1, bx2, by2] = corners(gt_cxcywh);

  Tensor iw = relu(sub(min_elem(ax2, bx2), max_elem(ax1, bx1)));
  Tensor ih = relu(sub(min_elem(ay2, by2), max_elem(ay1, by1)));
  Tensor inter = mul(iw, ih);
  Tensor area_a = mul(sub(ax2, ax1), sub(ay2, ay1));
  Tensor area_b = mul(sub(bx2, bx1), sub(by2, by1));
  Tensor uni = sub(add(area_a, area_b), inter);
  Tensor iou = div(inter, clamp_min(uni, 1e-12));

  Tensor hull = mul(sub(max_elem(ax2, bx2), min_elem(ax1, bx1)),
                    sub(max_elem(ay2, by2), min_elem(ay1, by1)));
  return sub(iou, div(sub(hull, uni), clamp_min(hull, 1e-12)));
}

LossBreakdown total_loss(const Detections& det, const GroundTruth& gt, const Assignment& as,
                         const LossWeights& w, double alpha, double gamma) {
  const int64_t nq = det.count();
  const int64_t background = det.foreground_classes();
  std::vector<int64_t> targets(static_cast<size_t>(nq), background);
  std::vector<int64_t> matched_q;
  std::vector<double> matched_gt;
  for (const auto& [q, j] : as.pairs) {
    check(q >= 0 && q < nq && j >= 0 && j < gt.count(), "total_loss: assignment out of range");
    targets[static_cast<size_t>(q)] = gt.labels[static_cast<size_t>(j)];
    matched_q.push_back(q);
    for (int c = 0; c < 4; ++c) matched_gt.push_back(gt.boxes[static_cast<size_t>(j)][c]);
  }

  Tensor cls = mean_all(focal_loss_rows(det.class_logits, targets, alpha, gamma));

  Tensor l1_term = Tensor::scalar(0.0);
  Tensor giou_term = Tensor::scalar(0.0);
  const int64_t pairs = static_cast<int64_t>(matched_q.size());
  if (pairs > 0) {
    Tensor pred = gather_rows(det.boxes, matched_q);
    Tensor gtb(Shape4::mat(pairs, 4), matched_gt);
    l1_term = mul_scalar(sum_all(abs_op(sub(pred, gtb))), 1.0 / static_cast<double>(pairs));
    Tensor g = giou_rows(pred, gtb);
    giou_term = mean_all(sub(Tensor::full(g.shape(), 1.0), g));
  }

  LossBreakdown out;
  out.cls = cls.item();
  out.l1 = l1_term.item();
  out.giou = giou_term.item();
  out.total = add(add(mul_scalar(cls, w.cls), mul_scalar(l1_term, w.l1)),
                  mul_scalar(giou_term, w.giou));
  return out;
}

}  // namespace msdetr

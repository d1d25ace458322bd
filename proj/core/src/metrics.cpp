// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace msdetr {

double iou(const Box& a, const Box& b) { return iou_xyxy(a, b); }

namespace {

double box_area(const Box& b) { return std::max(0.0, b[2] - b[0]) * std::max(0.0, b[3] - b[1]); }

struct FlatPred {
  double score;
  int64_t image;
  int64_t index;  // within image, for deterministic tie-breaking
};

}  // namespace

double average_precision(const std::vector<EvalRecord>& records, int64_t cls, double iou_thresh,
                         double area_lo, double area_hi) {
  // collect and sort detections of this class, highest score first
  std::vector<FlatPred> dets;
  int64_t n_gt = 0;
  for (size_t img = 0; img < records.size(); ++img) {
    for (size_t i = 0; i < records[img].preds.size(); ++i)
      if (records[img].preds[i].cls == cls)
        dets.push_back({records[img].preds[i].score, static_cast<int64_t>(img),
                        static_cast<int64_t>(i)});
    for (const auto& gt : records[img].gts) {
      const double area = box_area(gt.box);
      if (gt.cls == cls && area >= area_lo && area < area_hi) ++n_gt;
    }
  }
  if (n_gt == 0) return std::nan("");
  std::sort(dets.begin(), dets.end(), [](const FlatPred& a, const FlatPred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });

  std::vector<std::vector<char>> gt_used(records.size());
  for (size_t img = 0; img < records.size(); ++img)
    gt_used[img].assign(records[img].gts.size(), 0);

  std::vector<double> precision, recall;
  int64_t tp = 0, fp = 0;
  for (const auto& det : dets) {
    const auto& rec = records[static_cast<size_t>(det.image)];
    const auto& pred = rec.preds[static_cast<size_t>(det.index)];
    // best unmatched gt of this class, in-range preferred over ignored
    int64_t best_j = -1, best_ignored_j = -1;
    double best_iou = iou_thresh, best_ignored_iou = iou_thresh;
    for (size_t j = 0; j < rec.gts.size(); ++j) {
      if (rec.gts[j].cls != cls || gt_used[det.image][j]) continue;
      const double ov = iou(pred.box, rec.gts[j].box);
      const double area = box_area(rec.gts[j].box);
      const bool in_range = area >= area_lo && area < area_hi;
      if (in_range) {
        if (ov >= best_iou) {
          best_iou = ov;
          best_j = static_cast<int64_t>(j);
        }
      } else if (ov >= best_ignored_iou) {
        best_ignored_iou = ov;
        best_ignored_j = static_cast<int64_t>(j);
      }
    }
    if (best_j >= 0) {
      gt_used[det.image][static_cast<size_t>(best_j)] = 1;
      ++tp;
    } else if (best_ignored_j >= 0) {
      gt_used[det.image][static_cast<size_t>(best_ignored_j)] = 1;
      continue;  // matched an out-of-range gt: ignored
    } else {
      const double pred_area = box_area(pred.box);
      if (!(pred_area >= area_lo && pred_area < area_hi)) continue;  // ignored
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }

  // 101-point interpolation: AP = mean over r in {0, 0.01, .., 1} of
  // max precision at recall >= r
  double ap = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double rr = static_cast<double>(r) / 100.0;
    double best = 0.0;
    for (size_t k = 0; k < precision.size(); ++k)
      if (recall[k] >= rr - 1e-12) best = std::max(best, precision[k]);
    ap += best;
  }
  return ap / 101.0;
}

MetricsReport map_range(const std::vector<EvalRecord>& records,
                        const std::vector<std::string>& class_names) {
  MetricsReport rep;
  const int64_t n_classes = static_cast<int64_t>(class_names.size());
  const double s32 = 32.0 * 32.0, s96 = 96.0 * 96.0;

  auto mean_over_classes = [&](double thresh, double lo, double hi, bool warn) {
    double acc = 0.0;
    int64_t counted = 0;
    for (int64_t c = 0; c < n_classes; ++c) {
      const double ap = average_precision(records, c, thresh, lo, hi);
      if (std::isnan(ap)) {
        if (warn)
          rep.warnings.push_back("class '" + class_names[static_cast<size_t>(c)] +
                                 "' has no ground truth in range; excluded from the mean");
        continue;
      }
      acc += ap;
      ++counted;
    }
    return counted > 0 ? acc / static_cast<double>(counted) : 0.0;
  };

  rep.map50 = mean_over_classes(0.5, 0.0, 1e30, /*warn=*/true);
  double acc5095 = 0.0, acc_s = 0.0, acc_m = 0.0, acc_l = 0.0;
  for (int t = 0; t < 10; ++t) {
    const double thresh = 0.5 + 0.05 * t;
    acc5095 += mean_over_classes(thresh, 0.0, 1e30, false);
    acc_s += mean_over_classes(thresh, 0.0, s32, false);
    acc_m += mean_over_classes(thresh, s32, s96, false);
    acc_l += mean_over_classes(thresh, s96, 1e30, false);
  }
  rep.map5095 = acc5095 / 10.0;
  rep.ap_small = acc_s / 10.0;
  rep.ap_medium = acc_m / 10.0;
  rep.ap_large = acc_l / 10.0;

  for (int64_t c = 0; c < n_classes; ++c) {
    const double ap = average_precision(records, c, 0.5);
    rep.per_class_ap50[class_names[static_cast<size_t>(c)]] = std::isnan(ap) ? -1.0 : ap;
  }
  return rep;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["map50"] = map50;
  j["map5095"] = map5095;
  j["ap_s"] = ap_small;
  j["ap_m"] = ap_medium;
  j["ap_l"] = ap_large;
  nlohmann::json per;
  for (const auto& [name, ap] : per_class_ap50) per[name] = ap;
  j["per_class"] = per;
  return j.dump(2);
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(18) << "metric" << "value\n";
  os << std::setw(18) << "mAP@0.5" << map50 << "\n";
  os << std::setw(18) << "mAP@0.5:0.95" << map5095 << "\n";
  os << std::setw(18) << "AP_S" << ap_small << "\n";
  os << std::setw(18) << "AP_M" << ap_medium << "\n";
  os << std::setw(18) << "AP_L" << ap_large << "\n";
  for (const auto& [name, ap] : per_class_ap50)
    os << std::setw(18) << ("AP50[" + name + "]") << ap << "\n";
  return os.str();
}

}  // namespace msdetr

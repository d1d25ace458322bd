// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "msdetr/checkpoint.hpp"

namespace msdetr {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kEvalFrame = 640.0;  // pixel frame for metric size buckets
}  // namespace

AdamW::AdamW(std::vector<ParamRef<double>> params, double lr_peak, double weight_decay,
             int64_t warmup_steps, int64_t total_steps)
    : params_(std::move(params)),
      lr_peak_(lr_peak),
      weight_decay_(weight_decay),
      warmup_steps_(std::max<int64_t>(1, warmup_steps)),
      total_steps_(std::max<int64_t>(2, total_steps)) {
  for (auto& p : params_) {
    m_.emplace_back(p.tensor->numel(), 0.0);
    v_.emplace_back(p.tensor->numel(), 0.0);
  }
}

double AdamW::lr_at(int64_t step) const {
  if (step < warmup_steps_)
    return lr_peak_ * static_cast<double>(step) / static_cast<double>(warmup_steps_);
  const double span = static_cast<double>(std::max<int64_t>(1, total_steps_ - warmup_steps_));
  const double t = static_cast<double>(step - warmup_steps_) / span;
  return lr_peak_ * 0.5 * (1.0 + std::cos(kPi * std::min(1.0, t)));
}

void AdamW::step() {
  const double lr = lr_at(step_);
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (size_t i = 0; i < params_.size(); ++i) {
    TensorT<double>& t = *params_[i].tensor;
    const auto& g = t.grad();
    std::vector<double> next = t.values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < next.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      next[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * next[j]);
    }
    t = TensorT<double>(t.shape(), std::move(next), /*requires_grad=*/true);
  }
}

namespace {

Tensor stack_images(const std::vector<Tensor>& images) {
  const Shape4 s = images[0].shape();
  std::vector<double> data;
  data.reserve(images.size() * static_cast<size_t>(s.numel()));
  for (const auto& img : images) data.insert(data.end(), img.values().begin(), img.values().end());
  return Tensor({static_cast<int64_t>(images.size()), s.c, s.h, s.w}, std::move(data));
}

Detections slice_item(const Detections& det, int64_t item, int64_t queries) {
  Detections out;
  out.class_logits = slice_rows(det.class_logits, item * queries, (item + 1) * queries);
  out.boxes = slice_rows(det.boxes, item * queries, (item + 1) * queries);
  return out;
}

// converts one item's detections into scored pixel-frame predictions
void detections_to_preds(const Detections& det, int64_t classes, EvalRecord& rec) {
  const int64_t nq = det.count();
  const auto& logits = det.class_logits.values();
  const auto& boxes = det.boxes.values();
  const int64_t width = classes + 1;
  for (int64_t q = 0; q < nq; ++q) {
    double mx = logits[q * width];
    for (int64_t c = 1; c < width; ++c) mx = std::max(mx, logits[q * width + c]);
    double denom = 0.0;
    for (int64_t c = 0; c < width; ++c) denom += std::exp(logits[q * width + c] - mx);
    int64_t best = 0;
    double best_p = -1.0;
    for (int64_t c = 0; c < classes; ++c) {
      const double p = std::exp(logits[q * width + c] - mx) / denom;
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    const Box cxcywh{boxes[q * 4 + 0], boxes[q * 4 + 1], boxes[q * 4 + 2], boxes[q * 4 + 3]};
    Box xy = box_cxcywh_to_xyxy(cxcywh);
    for (auto& v : xy) v *= kEvalFrame;
    rec.preds.push_back({xy, best_p, best});
  }
}

}  // namespace

std::vector<EvalRecord> evaluate(Model& model, const Dataset& data, int64_t batch_size) {
  autograd::NoGradGuard no_grad;
  std::vector<EvalRecord> records(data.scenes.size());
  const int64_t n = static_cast<int64_t>(data.scenes.size());
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min(n, start + batch_size);
    std::vector<Tensor> images;
    for (int64_t i = start; i < stop; ++i) images.push_back(data.scenes[i].image);
    Detections det = model.forward(stack_images(images), /*training=*/false);
    for (int64_t i = start; i < stop; ++i) {
      EvalRecord& rec = records[i];
      detections_to_preds(slice_item(det, i - start, model.cfg.queries), model.cfg.classes, rec);
      for (const auto& inst : data.scenes[i].instances) {
        Box xy = box_cxcywh_to_xyxy(inst.box);
        for (auto& v : xy) v *= kEvalFrame;
        rec.gts.push_back({xy, inst.cls});
      }
    }
  }
  return records;
}

MetricsReport eval_metrics(Model& model, const Dataset& data, int64_t batch_size) {
  return map_range(evaluate(model, data, batch_size), class_names());
}

double dataset_loss(Model& model, const Dataset& data, int64_t batch_size) {
  autograd::NoGradGuard no_grad;
  double total = 0.0;
  int64_t count = 0;
  const int64_t n = static_cast<int64_t>(data.scenes.size());
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t stop = std::min(n, start + batch_size);
    std::vector<Tensor> images;
    for (int64_t i = start; i < stop; ++i) images.push_back(data.scenes[i].image);
    Detections det = model.forward(stack_images(images), /*training=*/false);
    for (int64_t i = start; i < stop; ++i) {
      Detections item = slice_item(det, i - start, model.cfg.queries);
      GroundTruth gt = scene_gt(data.scenes[i]);
      Assignment as;
      if (gt.count() > 0) as = hungarian(match_cost(item, gt));
      total += total_loss(item, gt, as).total.item();
      ++count;
    }
  }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

TrainResult train_model(Model& model, const RunConfig& rc, const DatasetSplits& data,
                        const std::string& ckpt_path, std::ostream& log) {
  TrainResult result;
  const int64_t n_train = static_cast<int64_t>(data.train.scenes.size());
  check(n_train > 0, "train: empty training split");
  const int64_t steps_per_epoch = (n_train + rc.batch_size - 1) / rc.batch_size;
  AdamW opt(model.params(), rc.lr, rc.weight_decay, rc.warmup_steps,
            steps_per_epoch * rc.epochs);

  std::mt19937_64 shuffle_rng(rc.seed ^ 0x9e3779b97f4a7c15ull);
  std::mt19937_64 aug_rng(rc.seed ^ 0xc2b2ae3d27d4eb4full);

  const std::string last_path = ckpt_path + ".last";
  save_checkpoint(last_path, model);

  std::vector<int64_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 1; epoch <= rc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double ep_loss = 0.0, ep_cls = 0.0, ep_l1 = 0.0, ep_giou = 0.0;
    int64_t ep_items = 0;

    for (int64_t start = 0; start < n_train; start += rc.batch_size) {
      const int64_t stop = std::min(n_train, start + rc.batch_size);
      std::vector<Tensor> images;
      std::vector<GroundTruth> gts;
      for (int64_t k = start; k < stop; ++k) {
        auto [img, gt] = apply_augment(data.train.scenes[order[k]], rc.hflip, rc.scale_jitter,
                                       aug_rng);
        images.push_back(std::move(img));
        gts.push_back(std::move(gt));
      }
      const int64_t batch = stop - start;

      Tensor batch_image = stack_images(images);
      std::vector<Detections> layer_dets;
      if (model.cfg.aux_loss) {
        layer_dets = model.forward_all_layers(batch_image, /*training=*/true);
      } else {
        layer_dets.push_back(model.forward(batch_image, /*training=*/true));
      }

      Tensor loss_acc = Tensor::scalar(0.0);
      double batch_cls = 0.0, batch_l1 = 0.0, batch_giou = 0.0, batch_total = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        for (size_t layer = 0; layer < layer_dets.size(); ++layer) {
          Detections item = slice_item(layer_dets[layer], b, model.cfg.queries);
          Assignment as;
          if (gts[b].count() > 0) as = hungarian(match_cost(item, gts[b]));
          LossBreakdown lb = total_loss(item, gts[b], as);
          loss_acc = add(loss_acc, lb.total);
          if (layer + 1 == layer_dets.size()) {
            batch_cls += lb.cls;
            batch_l1 += lb.l1;
            batch_giou += lb.giou;
            batch_total += lb.total.item();
          }
        }
      }
      const double denom = static_cast<double>(batch * static_cast<int64_t>(layer_dets.size()));
      Tensor loss = mul_scalar(loss_acc, 1.0 / denom);

      if (!std::isfinite(loss.item())) {
        result.diverged = true;
        result.message = "loss diverged (non-finite) at epoch " + std::to_string(epoch) +
                         "; last-good checkpoint: " + last_path;
        log << result.message << "\n";
        return result;
      }
      backward(loss);
      opt.step();

      ep_loss += batch_total;
      ep_cls += batch_cls;
      ep_l1 += batch_l1;
      ep_giou += batch_giou;
      ep_items += batch;
    }

    EpochLog el;
    el.epoch = epoch;
    el.loss = ep_loss / static_cast<double>(ep_items);
    el.cls = ep_cls / static_cast<double>(ep_items);
    el.l1 = ep_l1 / static_cast<double>(ep_items);
    el.giou = ep_giou / static_cast<double>(ep_items);
    el.lr = opt.current_lr();
    el.val_map50 = data.val.scenes.empty()
                       ? 0.0
                       : eval_metrics(model, data.val, rc.batch_size).map50;
    result.log.push_back(el);

    log << "epoch " << std::setw(3) << epoch << "  loss " << std::fixed << std::setprecision(4)
        << el.loss << "  (cls " << el.cls << "  l1 " << el.l1 << "  giou " << el.giou << ")  lr "
        << std::setprecision(6) << el.lr << "  val mAP@0.5 " << std::setprecision(4)
        << el.val_map50 << "\n"
        << std::flush;

    save_checkpoint(last_path, model);
    if (result.best_epoch < 0 || el.val_map50 > result.best_map50) {
      result.best_epoch = epoch;
      result.best_map50 = el.val_map50;
      save_checkpoint(ckpt_path, model);
    }
    if (rc.stop_at_map50 > 0.0 && el.val_map50 >= rc.stop_at_map50) {
      log << "reached target val mAP@0.5 >= " << rc.stop_at_map50 << " at epoch " << epoch
          << ", stopping\n";
      break;
    }
  }
  return result;
}

}  // namespace msdetr

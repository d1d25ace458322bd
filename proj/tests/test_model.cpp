// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <set>

#include "msdetr/model.hpp"
#include "test_util.hpp"

using namespace msdetr;
using namespace msdetr::testutil;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.levels = 2;
  c.d_model = 8;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.heads = 2;
  c.points = 2;
  c.queries = 4;
  c.classes = 3;
  c.backbone_widths = {4, 8, 8};
  c.backbone_blocks = {1, 1};
  c.ffn_mult = 2;
  c.vov_depth = 1;
  return c;
}

}  // namespace

TEST_CASE("build: baseline (all toggles off) and full model run forward") {
  for (bool toggles : {false, true}) {
    ModelConfig cfg = tiny_config();
    cfg.rep = cfg.da = cfg.csff = toggles;
    auto model = build<double>(cfg);
    autograd::NoGradGuard no_grad;
    auto g = rng(130);
    auto det = model.forward(random_tensor({1, 3, 16, 16}, g, 0.0, 1.0));
    CHECK(det.class_logits.shape() == Shape4::mat(4, 4));
    CHECK(det.boxes.shape() == Shape4::mat(4, 4));
    for (double v : det.class_logits.values()) CHECK(std::isfinite(v));
    for (double v : det.boxes.values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("build: config errors name the offending field") {
  ModelConfig cfg = tiny_config();
  cfg.heads = 3;  // 8 % 3 != 0
  try {
    build<double>(cfg);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("heads") != std::string::npos);
  }
  cfg = tiny_config();
  cfg.backbone_widths = {4, 8};
  CHECK_THROWS_AS(build<double>(cfg), ConfigError);
}

TEST_CASE("forward: indivisible input size raises a dimension error naming 2^(L+1)") {
  auto model = build<double>(tiny_config());
  auto g = rng(131);
  autograd::NoGradGuard no_grad;
  try {
    model.forward(random_tensor({1, 3, 18, 16}, g));
    FAIL("expected DimError");
  } catch (const DimError& e) {
    CHECK(std::string(e.what()).find("divisible") != std::string::npos);
    CHECK(std::string(e.what()).find("8") != std::string::npos);  // 2^(2+1)
  }
}

TEST_CASE("forward: deterministic for fixed weights and input") {
  auto model = build<double>(tiny_config());
  auto g = rng(132);
  Tensor x = random_tensor({1, 3, 16, 16}, g, 0.0, 1.0);
  autograd::NoGradGuard no_grad;
  auto a = model.forward(x);
  auto b = model.forward(x);
  for (size_t i = 0; i < a.class_logits.values().size(); ++i)
    CHECK(a.class_logits.values()[i] == b.class_logits.values()[i]);
  for (size_t i = 0; i < a.boxes.values().size(); ++i)
    CHECK(a.boxes.values()[i] == b.boxes.values()[i]);
}

TEST_CASE("forward: zero image on a fresh tiny model stays finite") {
  auto model = build<double>(tiny_config());
  autograd::NoGradGuard no_grad;
  auto det = model.forward(Tensor::zeros({1, 3, 16, 16}));
  for (double v : det.class_logits.values()) CHECK(std::isfinite(v));
  for (double v : det.boxes.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("forward: a batch of two equals two single passes stacked") {
  auto model = build<double>(tiny_config());
  auto g = rng(133);
  Tensor a = random_tensor({1, 3, 16, 16}, g, 0.0, 1.0);
  Tensor b = random_tensor({1, 3, 16, 16}, g, 0.0, 1.0);
  std::vector<double> stacked = a.values();
  stacked.insert(stacked.end(), b.values().begin(), b.values().end());
  Tensor both({2, 3, 16, 16}, stacked);

  autograd::NoGradGuard no_grad;
  auto da = model.forward(a);
  auto db = model.forward(b);
  auto dd = model.forward(both);
  const int64_t nq = model.cfg.queries, nc = model.cfg.classes + 1;
  for (int64_t q = 0; q < nq; ++q)
    for (int64_t c = 0; c < nc; ++c) {
      CHECK(std::abs(dd.class_logits.at(0, 0, q, c) - da.class_logits.at(0, 0, q, c)) < 1e-12);
      CHECK(std::abs(dd.class_logits.at(0, 0, nq + q, c) - db.class_logits.at(0, 0, q, c)) <
            1e-12);
    }
}

TEST_CASE("fuse_model: no-op without rep blocks, exact equivalence with them") {
  ModelConfig cfg = tiny_config();
  cfg.rep = false;
  auto plain = build<double>(cfg);
  auto fused_plain = fuse_model(plain);
  auto g = rng(134);
  Tensor x = random_tensor({1, 3, 16, 16}, g, 0.0, 1.0);
  autograd::NoGradGuard no_grad;
  auto d1 = plain.forward(x);
  auto d2 = fused_plain.forward(x);
  CHECK(max_abs_diff(d1.class_logits, d2.class_logits) == 0.0);

  cfg.rep = true;
  cfg.backbone_blocks = {2, 2};  // include stride-1 identity blocks
  auto model = build<double>(cfg);
  auto fused = fuse_model(model);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor xr = random_tensor({1, 3, 16, 16}, g, 0.0, 1.0);
    auto du = model.forward(xr);
    auto df = fused.forward(xr);
    worst = std::max(worst, max_abs_diff(du.class_logits, df.class_logits));
    worst = std::max(worst, max_abs_diff(du.boxes, df.boxes));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("fuse_model: fused FLOPs strictly below unfused") {
  ModelConfig cfg = tiny_config();
  cfg.backbone_blocks = {2, 2};
  auto model = build<double>(cfg);
  auto fused = fuse_model(model);
  CHECK(fused.flops(64, 64) < model.flops(64, 64));
}

TEST_CASE("fuse_model: missing BN statistics raise a state error") {
  auto model = build<double>(tiny_config());
  model.stages[0][0].rep.bn3.invalidate_stats();
  CHECK_THROWS_AS(fuse_model(model), StateError);
}

TEST_CASE("fuse_model: parameter count shrinks while outputs agree") {
  ModelConfig cfg = tiny_config();
  cfg.backbone_blocks = {2, 1};
  auto model = build<double>(cfg);
  auto fused = fuse_model(model);
  // the fused blocks no longer expose their three-branch parameters
  int64_t fused_backbone = 0, train_backbone = 0;
  for (auto& stage : fused.stages)
    for (auto& b : stage)
      if (b.use_fused) fused_backbone += b.fused.w.numel() + static_cast<int64_t>(b.fused.b.size());
  for (auto& stage : model.stages)
    for (auto& b : stage)
      if (b.is_rep) {
        train_backbone += b.rep.w3.numel() + b.rep.w1.numel();
        train_backbone += 4 * b.rep.bn3.channels() * 2;
        if (b.rep.has_identity) train_backbone += 4 * b.rep.bnid.channels();
      }
  CHECK(fused_backbone < train_backbone);
}

TEST_CASE("ablation lattice: all 8 toggle combinations build, run, and backprop") {
  auto g = rng(135);
  for (int mask = 0; mask < 8; ++mask) {
    ModelConfig cfg = tiny_config();
    cfg.rep = mask & 1;
    cfg.da = mask & 2;
    cfg.csff = mask & 4;
    auto model = build<double>(cfg);
    Tensor x = random_tensor({1, 3, 16, 16}, g, 0.0, 1.0);
    auto det = model.forward(x, /*training=*/true);
    Tensor loss = add(sum_all(mul(det.class_logits, det.class_logits)),
                      sum_all(mul(det.boxes, det.boxes)));
    backward(loss);
    auto params = model.params();
    CHECK(params.size() > 0);
    // at least the heads receive gradient
    double norm = 0.0;
    for (double v : model.heads.cls_w.grad()) norm += std::abs(v);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("params: names are unique and tensors are live") {
  auto model = build<double>(tiny_config());
  auto params = model.params();
  std::set<std::string> names;
  for (auto& ref : params) {
    CHECK(names.insert(ref.name).second);
    CHECK(ref.tensor->defined());
    CHECK(ref.tensor->on_tape());
  }
  auto buffers = model.buffers();
  for (auto& ref : buffers) CHECK(!ref.buffer->empty());
}

TEST_CASE("full-scale configuration instantiates and completes a 640x640 forward") {
  auto cfg = ModelConfig::full_scale();
  CHECK(cfg.d_model == 256);
  CHECK(cfg.queries == 300);
  CHECK(cfg.heads == 8);
  CHECK(cfg.points == 4);
  CHECK(cfg.levels == 4);
  auto model = build<double>(cfg);
  autograd::NoGradGuard no_grad;
  auto g = rng(136);
  auto det = model.forward(random_tensor({1, 3, 640, 640}, g, 0.0, 1.0));
  CHECK(det.class_logits.shape() == Shape4::mat(300, 6));
  CHECK(det.boxes.shape() == Shape4::mat(300, 4));
  for (double v : det.boxes.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

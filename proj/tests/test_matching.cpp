// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "msdetr/matching.hpp"
#include "test_util.hpp"

using namespace msdetr;
using namespace msdetr::testutil;

namespace {

double brute_force_min_cost(const std::vector<std::vector<double>>& cost) {
  const int64_t n = static_cast<int64_t>(cost.size());
  const int64_t m = static_cast<int64_t>(cost[0].size());
  if (n <= m) {
    std::vector<int64_t> cols(m);
    std::iota(cols.begin(), cols.end(), 0);
    double best = 1e300;
    do {
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) acc += cost[i][cols[i]];
      best = std::min(best, acc);
    } while (std::next_permutation(cols.begin(), cols.end()));
    return best;
  }
  std::vector<int64_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  double best = 1e300;
  do {
    double acc = 0.0;
    for (int64_t j = 0; j < m; ++j) acc += cost[rows[j]][j];
    best = std::min(best, acc);
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

double assigned_cost(const std::vector<std::vector<double>>& cost, const Assignment& as) {
  double acc = 0.0;
  for (auto& [i, j] : as.pairs) acc += cost[i][j];
  return acc;
}

Detections make_detections(const Tensor& logits, const Tensor& boxes) {
  Detections d;
  d.class_logits = logits;
  d.boxes = boxes;
  return d;
}

}  // namespace

TEST_CASE("box_convert: unit box, degenerate point, inverse round trip") {
  Box b{0.5, 0.5, 1.0, 1.0};
  Box xy = box_cxcywh_to_xyxy(b);
  CHECK(xy == Box{0.0, 0.0, 1.0, 1.0});

  Box point = box_cxcywh_to_xyxy({0.5, 0.5, 0.0, 0.0});
  CHECK(point == Box{0.5, 0.5, 0.5, 0.5});

  auto g = rng(100);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    Box c{u(g), u(g), u(g), u(g)};
    Box back = box_xyxy_to_cxcywh(box_cxcywh_to_xyxy(c));
    for (int k = 0; k < 4; ++k) CHECK(std::abs(back[k] - c[k]) < 1e-15);
  }

  CHECK_THROWS_AS(box_cxcywh_to_xyxy({0.5, 0.5, -0.1, 0.2}), DomainError);
}

TEST_CASE("giou: identical, gap, and touching fixtures") {
  Box a{0.0, 0.0, 1.0, 1.0};
  CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-15));

  // hull area 3, union 2, IoU 0 -> GIoU = -(3-2)/3 = -1/3
  Box far{2.0, 0.0, 3.0, 1.0};
  CHECK(giou(a, far) == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));

  Box touch{1.0, 0.0, 2.0, 1.0};
  CHECK(giou(a, touch) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("giou: bounded by IoU, symmetric, in (-1, 1]") {
  auto g = rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 10000; ++i) {
    const double ax = u(g), ay = u(g), bx = u(g), by = u(g);
    Box a{ax, ay, ax + u(g), ay + u(g)};
    Box b{bx, by, bx + u(g), by + u(g)};
    const double gi = giou(a, b);
    const double io = iou_xyxy(a, b);
    CHECK(gi <= io + 1e-12);
    CHECK(gi > -1.0);
    CHECK(gi <= 1.0);
    CHECK(giou(b, a) == gi);
  }
}

TEST_CASE("giou equals IoU exactly when the hull equals the union") {
  // nested boxes: hull = outer box = union
  Box outer{0.0, 0.0, 1.0, 1.0};
  Box inner{0.25, 0.25, 0.75, 0.75};
  CHECK(giou(outer, inner) == doctest::Approx(iou_xyxy(outer, inner)).epsilon(1e-15));

  // coincident zero-area boxes: defined as 0
  Box pt{0.3, 0.3, 0.3, 0.3};
  CHECK(giou(pt, pt) == 0.0);
}

TEST_CASE("focal loss: degenerate gamma, perfect prediction, fixed value") {
  std::vector<double> p{0.2, 0.5, 0.3};
  CHECK(focal_loss(p, 1, 1.0, 0.0) == doctest::Approx(-std::log(0.5)).epsilon(1e-14));
  CHECK(focal_loss({0.0, 1.0}, 1, 0.25, 2.0) == 0.0);
  // 0.25 * (1-0.5)^2 * -log(0.5) = 0.25 * 0.25 * log 2
  CHECK(focal_loss({0.5, 0.5}, 0, 0.25, 2.0) ==
        doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("focal loss: strictly decreasing in p_t") {
  double prev = 1e300;
  for (double pt = 0.05; pt < 1.0; pt += 0.05) {
    const double v = focal_loss({1.0 - pt, pt}, 1, 0.25, 2.0);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("l1 loss: fixtures and oracle") {
  Box a{0.1, 0.2, 0.3, 0.4};
  CHECK(l1_loss(a, a) == 0.0);
  Box b{0.2, 0.3, 0.4, 0.5};
  CHECK(l1_loss(a, b) == doctest::Approx(0.4).epsilon(1e-15));

  auto g = rng(102);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    Box x{u(g), u(g), u(g), u(g)}, y{u(g), u(g), u(g), u(g)};
    double expect = 0.0;
    for (int k = 0; k < 4; ++k) expect += std::abs(x[k] - y[k]);
    CHECK(l1_loss(x, y) == expect);
  }
}

TEST_CASE("match_cost: perfect prediction costs exactly -2") {
  // one query whose class-0 probability saturates to 1 and box matches gt
  Tensor logits(Shape4::mat(1, 3), {80.0, -80.0, -80.0});
  Tensor boxes(Shape4::mat(1, 4), {0.5, 0.5, 0.2, 0.2});
  GroundTruth gt;
  gt.boxes = {{0.5, 0.5, 0.2, 0.2}};
  gt.labels = {0};
  auto cost = match_cost(make_detections(logits, boxes), gt);
  CHECK(cost.size() == 1);
  CHECK(cost[0][0] == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("match_cost: uniform class predictions vary only through box terms") {
  auto g = rng(103);
  Tensor logits = Tensor::zeros(Shape4::mat(3, 4));
  Tensor boxes = Tensor::uniform(Shape4::mat(3, 4), g, 0.3, 0.7);
  GroundTruth gt;
  gt.boxes = {{0.4, 0.4, 0.2, 0.2}, {0.6, 0.6, 0.2, 0.2}};
  gt.labels = {0, 2};
  auto cost = match_cost(make_detections(logits, boxes), gt);
  CHECK(cost.size() == 3);
  CHECK(cost[0].size() == 2);
  for (int64_t q = 0; q < 3; ++q) {
    const Box pb{boxes.at(0, 0, q, 0), boxes.at(0, 0, q, 1), boxes.at(0, 0, q, 2),
                 boxes.at(0, 0, q, 3)};
    for (int64_t j = 0; j < 2; ++j) {
      const double class_term = 2.0 * (-0.25);
      const double box_terms = 5.0 * l1_loss(pb, gt.boxes[j]) +
                               2.0 * (1.0 - giou(box_cxcywh_to_xyxy(pb),
                                                 box_cxcywh_to_xyxy(gt.boxes[j])));
      CHECK(cost[q][j] == doctest::Approx(class_term + box_terms).epsilon(1e-12));
    }
  }
}

TEST_CASE("hungarian: singletons and the obvious 2x2 optimum") {
  auto one = hungarian({{3.5}});
  REQUIRE(one.pairs.size() == 1);
  CHECK(one.pairs[0] == std::pair<int64_t, int64_t>{0, 0});

  auto two = hungarian({{1.0, 10.0}, {10.0, 1.0}});
  REQUIRE(two.pairs.size() == 2);
  CHECK(two.pairs[0] == std::pair<int64_t, int64_t>{0, 0});
  CHECK(two.pairs[1] == std::pair<int64_t, int64_t>{1, 1});

  CHECK(hungarian({}).pairs.empty());
}

TEST_CASE("hungarian: optimal on random 7x7 matrices against 7! enumeration") {
  auto g = rng(104);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> cost(7, std::vector<double>(7));
    for (auto& row : cost)
      for (auto& v : row) v = u(g);
    auto as = hungarian(cost);
    REQUIRE(as.pairs.size() == 7);
    CHECK(assigned_cost(cost, as) == doctest::Approx(brute_force_min_cost(cost)).epsilon(1e-12));
  }
}

TEST_CASE("hungarian: rectangular matrices assign min(n,m) pairs optimally") {
  auto g = rng(105);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (auto [n, m] : {std::pair<int, int>{8, 3}, {3, 8}, {5, 5}, {1, 6}, {6, 1}}) {
    std::vector<std::vector<double>> cost(n, std::vector<double>(m));
    for (auto& row : cost)
      for (auto& v : row) v = u(g);
    auto as = hungarian(cost);
    REQUIRE(static_cast<int>(as.pairs.size()) == std::min(n, m));
    // injectivity in both coordinates
    std::vector<int64_t> qs, js;
    for (auto& [q, j] : as.pairs) {
      qs.push_back(q);
      js.push_back(j);
    }
    std::sort(qs.begin(), qs.end());
    std::sort(js.begin(), js.end());
    CHECK(std::adjacent_find(qs.begin(), qs.end()) == qs.end());
    CHECK(std::adjacent_find(js.begin(), js.end()) == js.end());
    CHECK(assigned_cost(cost, as) == doctest::Approx(brute_force_min_cost(cost)).epsilon(1e-12));
  }
}

TEST_CASE("total_loss: perfect predictions vanish") {
  Tensor logits(Shape4::mat(2, 3), {80.0, -80.0, -80.0, -80.0, -80.0, 80.0});
  Tensor boxes(Shape4::mat(2, 4), {0.3, 0.3, 0.2, 0.2, 0.7, 0.7, 0.1, 0.1});
  GroundTruth gt;
  gt.boxes = {{0.3, 0.3, 0.2, 0.2}};
  gt.labels = {0};
  Assignment as;
  as.pairs = {{0, 0}};  // query 1 is unmatched and saturated on background
  auto loss = total_loss(make_detections(logits, boxes), gt, as);
  CHECK(loss.cls == 0.0);
  CHECK(loss.l1 == 0.0);
  CHECK(loss.giou == 0.0);
  CHECK(loss.total.item() == 0.0);
}

TEST_CASE("total_loss: weights echo (2.0, 5.0, 2.0) and the -1/3 giou fixture") {
  LossWeights w;
  CHECK(w.cls == 2.0);
  CHECK(w.l1 == 5.0);
  CHECK(w.giou == 2.0);

  // pred box (0,0,1,1) as cxcywh; gt (2,0,3,1): giou = -1/3 so term = 2*(4/3)
  Tensor logits(Shape4::mat(1, 2), {80.0, -80.0});
  Tensor boxes(Shape4::mat(1, 4), {0.5, 0.5, 1.0, 1.0});
  GroundTruth gt;
  gt.boxes = {{2.5, 0.5, 1.0, 1.0}};
  gt.labels = {0};
  Assignment as;
  as.pairs = {{0, 0}};
  auto loss = total_loss(make_detections(logits, boxes), gt, as);
  CHECK(loss.giou == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  CHECK(loss.cls == 0.0);
  const double expected_total = 2.0 * loss.cls + 5.0 * loss.l1 + 2.0 * (4.0 / 3.0);
  CHECK(loss.total.item() == doctest::Approx(expected_total).epsilon(1e-12));
  CHECK(2.0 * (1.0 - (-1.0 / 3.0)) == doctest::Approx(8.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("total_loss is non-negative and giou term below 2") {
  auto g = rng(106);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor(Shape4::mat(6, 4), g, -3.0, 3.0);
    Tensor boxes = Tensor::uniform(Shape4::mat(6, 4), g, 0.1, 0.9);
    GroundTruth gt;
    gt.boxes = {{0.4, 0.4, 0.3, 0.3}, {0.6, 0.5, 0.2, 0.4}};
    gt.labels = {1, 2};
    auto as = hungarian(match_cost(make_detections(logits, boxes), gt));
    auto loss = total_loss(make_detections(logits, boxes), gt, as);
    CHECK(loss.total.item() >= 0.0);
    CHECK(loss.giou < 2.0);
    CHECK(loss.giou >= 0.0);
  }
}

TEST_CASE("giou_rows agrees with the scalar giou and passes grad_check") {
  auto g = rng(107);
  std::uniform_real_distribution<double> u(0.15, 0.85);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor pred(Shape4::mat(1, 4), {u(g), u(g), 0.3 * u(g) + 0.05, 0.3 * u(g) + 0.05});
    Tensor gtb(Shape4::mat(1, 4), {u(g), u(g), 0.3 * u(g) + 0.05, 0.3 * u(g) + 0.05});
    const Box pb{pred.values()[0], pred.values()[1], pred.values()[2], pred.values()[3]};
    const Box gb{gtb.values()[0], gtb.values()[1], gtb.values()[2], gtb.values()[3]};
    const double expect = giou(box_cxcywh_to_xyxy(pb), box_cxcywh_to_xyxy(gb));
    CHECK(giou_rows(pred, gtb).item() == doctest::Approx(expect).epsilon(1e-12));

    CHECK(grad_check([&](const Tensor& t) { return sum_all(giou_rows(t, gtb)); }, pred) <= 1e-5);
  }
}

TEST_CASE("focal_loss_rows matches the scalar form and passes grad_check") {
  auto g = rng(108);
  Tensor logits = random_tensor(Shape4::mat(4, 3), g, -2.0, 2.0);
  std::vector<int64_t> targets{0, 2, 1, 2};
  Tensor losses = focal_loss_rows(logits, targets);
  for (int64_t r = 0; r < 4; ++r) {
    std::vector<double> p(3);
    double mx = std::max({logits.at(0, 0, r, 0), logits.at(0, 0, r, 1), logits.at(0, 0, r, 2)});
    double sum = 0.0;
    for (int c = 0; c < 3; ++c) {
      p[c] = std::exp(logits.at(0, 0, r, c) - mx);
      sum += p[c];
    }
    for (auto& v : p) v /= sum;
    CHECK(losses.at(0, 0, r, 0) == doctest::Approx(focal_loss(p, targets[r])).epsilon(1e-12));
  }
  CHECK(grad_check([&](const Tensor& t) { return sum_all(focal_loss_rows(t, targets)); },
                   logits) <= 1e-5);
}

TEST_CASE("total_loss gradient flows to logits and boxes") {
  auto g = rng(109);
  Tensor logits = random_tensor(Shape4::mat(3, 3), g, -1.0, 1.0, true);
  Tensor boxes = sigmoid(random_tensor(Shape4::mat(3, 4), g, -1.0, 1.0, true));
  GroundTruth gt;
  gt.boxes = {{0.5, 0.5, 0.3, 0.3}};
  gt.labels = {1};
  Assignment as;
  as.pairs = {{1, 0}};
  Detections det;
  det.class_logits = logits;
  det.boxes = boxes;
  auto loss = total_loss(det, gt, as);
  backward(loss.total);
  double norm = 0.0;
  for (double v : logits.grad()) norm += std::abs(v);
  CHECK(norm > 0.0);
}

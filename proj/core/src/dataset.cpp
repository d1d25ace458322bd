// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "msdetr/ops.hpp"

namespace msdetr {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Painter {
  int64_t h, w;
  std::vector<double>* rgb;  // 3 planes, h*w each
  int64_t xmin = 1 << 30, ymin = 1 << 30, xmax = -1, ymax = -1;

  void blend(int64_t x, int64_t y, double r, double g, double b, double alpha) {
    if (x < 0 || x >= w || y < 0 || y >= h || alpha <= 0.0) return;
    double* img = rgb->data();
    const int64_t i = y * w + x;
    img[i] = img[i] * (1 - alpha) + r * alpha;
    img[h * w + i] = img[h * w + i] * (1 - alpha) + g * alpha;
    img[2 * h * w + i] = img[2 * h * w + i] * (1 - alpha) + b * alpha;
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  bool painted() const { return xmax >= xmin && ymax >= ymin; }
};

void paint_disc(Painter& p, double cx, double cy, double radius, double r, double g, double b,
                double alpha) {
  for (int64_t y = static_cast<int64_t>(cy - radius - 1); y <= cy + radius + 1; ++y)
    for (int64_t x = static_cast<int64_t>(cx - radius - 1); x <= cx + radius + 1; ++x) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      if (d2 <= radius * radius) p.blend(x, y, r, g, b, alpha);
    }
}

void paint_segment(Painter& p, double x0, double y0, double x1, double y1, double thick, double r,
                   double g, double b) {
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int64_t steps = std::max<int64_t>(2, static_cast<int64_t>(len * 2.0));
  for (int64_t s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    paint_disc(p, x0 + t * (x1 - x0), y0 + t * (y1 - y0), thick * 0.5 + 0.3, r, g, b, 1.0);
  }
}

// class renderers return false when nothing was painted (retry placement)
bool render_crack(Painter& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = 10 + u(rng) * (p.w - 20);
  double y = 10 + u(rng) * (p.h - 20);
  // jagged polyline at a diagonal-ish heading so the box has real extent
  double theta = (0.25 + 0.5 * u(rng)) * kPi / 2 + (u(rng) < 0.5 ? 0.0 : kPi / 2);
  const int segs = 4 + static_cast<int>(u(rng) * 3);
  const double shade = 0.08 + 0.06 * u(rng);
  for (int s = 0; s < segs; ++s) {
    const double len = 6 + u(rng) * 7;
    const double nx = std::clamp(x + std::cos(theta) * len, 1.0, p.w - 2.0);
    const double ny = std::clamp(y + std::sin(theta) * len, 1.0, p.h - 2.0);
    paint_segment(p, x, y, nx, ny, 1.4, shade, shade * 0.9, shade * 0.85);
    x = nx;
    y = ny;
    theta += (u(rng) - 0.5) * 1.0;
  }
  return p.painted();
}

bool render_corrosion(Painter& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r0 = 7 + u(rng) * 8;
  const double cx = r0 + 2 + u(rng) * (p.w - 2 * r0 - 4);
  const double cy = r0 + 2 + u(rng) * (p.h - 2 * r0 - 4);
  const double ph1 = u(rng) * 2 * kPi, ph2 = u(rng) * 2 * kPi;
  const double a1 = 0.25 * u(rng), a2 = 0.2 * u(rng);
  for (int64_t y = static_cast<int64_t>(cy - 2 * r0); y <= cy + 2 * r0; ++y)
    for (int64_t x = static_cast<int64_t>(cx - 2 * r0); x <= cx + 2 * r0; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double d = std::hypot(dx, dy);
      const double phi = std::atan2(dy, dx);
      const double edge = r0 * (1.0 + a1 * std::sin(3 * phi + ph1) + a2 * std::sin(5 * phi + ph2));
      if (d <= edge)
        p.blend(x, y, 0.42 + 0.06 * std::sin(x * 0.7 + y), 0.25 + 0.04 * std::sin(y * 0.9),
                0.13, 0.9);
    }
  return p.painted();
}

bool render_decarburization(Painter& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double ax = 10 + u(rng) * 9, ay = 10 + u(rng) * 9;
  const double cx = ax + 2 + u(rng) * (p.w - 2 * ax - 4);
  const double cy = ay + 2 + u(rng) * (p.h - 2 * ay - 4);
  for (int64_t y = static_cast<int64_t>(cy - ay); y <= cy + ay; ++y)
    for (int64_t x = static_cast<int64_t>(cx - ax); x <= cx + ax; ++x) {
      const double dn = ((x - cx) / ax) * ((x - cx) / ax) + ((y - cy) / ay) * ((y - cy) / ay);
      if (dn <= 1.0) {
        const double alpha = 0.45 * (1.0 - dn);
        if (alpha > 0.045) p.blend(x, y, 0.72, 0.74, 0.80, alpha);
      }
    }
  return p.painted();
}

bool render_scratch(Painter& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double len = 16 + u(rng) * 24;
  // diagonal band keeps both box extents a few pixels wide
  const double theta = (0.15 + 0.2 * u(rng)) * kPi + (u(rng) < 0.5 ? 0.0 : kPi / 2);
  const double cx = len / 2 + 2 + u(rng) * (p.w - len - 4);
  const double cy = len / 2 + 2 + u(rng) * (p.h - len - 4);
  const double dx = std::cos(theta) * len / 2, dy = std::sin(theta) * len / 2;
  paint_segment(p, cx - dx, cy - dy, cx + dx, cy + dy, 1.1, 0.88, 0.88, 0.92);
  return p.painted();
}

bool render_pit(Painter& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = 4.0 + u(rng) * 3.5;
  const double cx = r + 2 + u(rng) * (p.w - 2 * r - 4);
  const double cy = r + 2 + u(rng) * (p.h - 2 * r - 4);
  paint_disc(p, cx, cy, r, 0.05, 0.05, 0.06, 1.0);
  return p.painted();
}

std::vector<double> render_background(int64_t h, int64_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // coarse value-noise grid, bilinearly upsampled
  const int64_t gh = 5, gw = 5;
  std::vector<double> grid(static_cast<size_t>(gh * gw));
  for (auto& v : grid) v = (u(rng) - 0.5) * 0.12;
  const double base = 0.42 + 0.10 * u(rng);
  const double tint[3] = {(u(rng) - 0.5) * 0.02, (u(rng) - 0.5) * 0.02, (u(rng) - 0.5) * 0.02};

  std::vector<double> img(static_cast<size_t>(3 * h * w));
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double gy = static_cast<double>(y) / (h - 1) * (gh - 1);
      const double gx = static_cast<double>(x) / (w - 1) * (gw - 1);
      const int64_t y0 = std::min<int64_t>(gh - 2, static_cast<int64_t>(gy));
      const int64_t x0 = std::min<int64_t>(gw - 2, static_cast<int64_t>(gx));
      const double fy = gy - y0, fx = gx - x0;
      const double n = grid[y0 * gw + x0] * (1 - fy) * (1 - fx) +
                       grid[y0 * gw + x0 + 1] * (1 - fy) * fx +
                       grid[(y0 + 1) * gw + x0] * fy * (1 - fx) +
                       grid[(y0 + 1) * gw + x0 + 1] * fy * fx;
      const double speck = (u(rng) - 0.5) * 0.05;
      const double v = std::clamp(base + n + speck, 0.05, 0.95);
      img[y * w + x] = std::clamp(v + tint[0], 0.0, 1.0);
      img[h * w + y * w + x] = std::clamp(v + tint[1], 0.0, 1.0);
      img[2 * h * w + y * w + x] = std::clamp(v * 0.98 + tint[2], 0.0, 1.0);
    }
  return img;
}

SyntheticScene render_scene(int64_t h, int64_t w, uint64_t seed,
                            const std::vector<int64_t>& classes) {
  std::mt19937_64 rng(seed);
  std::vector<double> img = render_background(h, w, rng);

  SyntheticScene scene;
  for (int64_t cls : classes) {
    Painter p{h, w, &img};
    bool ok = false;
    for (int attempt = 0; attempt < 8 && !ok; ++attempt) {
      p = Painter{h, w, &img};
      switch (cls) {
        case 0: ok = render_crack(p, rng); break;
        case 1: ok = render_corrosion(p, rng); break;
        case 2: ok = render_decarburization(p, rng); break;
        case 3: ok = render_scratch(p, rng); break;
        default: ok = render_pit(p, rng); break;
      }
    }
    if (!ok) continue;
    SceneInstance inst;
    inst.cls = cls;
    inst.pixel_bounds = {p.xmin, p.ymin, p.xmax, p.ymax};
    const double bw = static_cast<double>(p.xmax - p.xmin + 1);
    const double bh = static_cast<double>(p.ymax - p.ymin + 1);
    inst.box = {(p.xmin + bw / 2.0) / static_cast<double>(w),
                (p.ymin + bh / 2.0) / static_cast<double>(h), bw / static_cast<double>(w),
                bh / static_cast<double>(h)};
    scene.instances.push_back(inst);
  }
  scene.image = Tensor({1, 3, h, w}, std::move(img));
  return scene;
}

}  // namespace

DatasetSplits gen_dataset(const RunConfig& rc) {
  rc.validate();
  std::mt19937_64 master(rc.seed);
  std::uniform_int_distribution<int64_t> count_dist(rc.min_instances, rc.max_instances);

  // reshuffled blocks of all five classes keep the histogram near uniform
  std::vector<int64_t> class_pool;
  auto refill = [&]() {
    std::vector<int64_t> block{0, 1, 2, 3, 4};
    std::shuffle(block.begin(), block.end(), master);
    class_pool.insert(class_pool.end(), block.begin(), block.end());
  };

  DatasetSplits splits;
  size_t cursor = 0;
  for (int64_t i = 0; i < rc.images; ++i) {
    const int64_t n = count_dist(master);
    std::vector<int64_t> classes;
    for (int64_t k = 0; k < n; ++k) {
      if (cursor >= class_pool.size()) refill();
      classes.push_back(class_pool[cursor++]);
    }
    const uint64_t scene_seed = master();
    SyntheticScene scene = render_scene(rc.image_size, rc.image_size, scene_seed, classes);
    if (i < rc.train_count())
      splits.train.scenes.push_back(std::move(scene));
    else if (i < rc.train_count() + rc.val_count())
      splits.val.scenes.push_back(std::move(scene));
    else
      splits.test.scenes.push_back(std::move(scene));
  }
  return splits;
}

void save_dataset(const std::string& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  std::ofstream ann(dir + "/annotations.jsonl");
  if (!ann) throw EvalError("dataset: cannot write " + dir + "/annotations.jsonl");
  for (size_t i = 0; i < d.scenes.size(); ++i) {
    const auto& scene = d.scenes[i];
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    const Shape4 s = scene.image.shape();
    std::ofstream img(dir + "/" + name, std::ios::binary);
    if (!img) throw EvalError("dataset: cannot write " + dir + "/" + name);
    img << "P6\n" << s.w << " " << s.h << "\n255\n";
    const auto& v = scene.image.values();
    std::vector<unsigned char> row(static_cast<size_t>(3 * s.w));
    for (int64_t y = 0; y < s.h; ++y) {
      for (int64_t x = 0; x < s.w; ++x)
        for (int64_t c = 0; c < 3; ++c)
          row[x * 3 + c] = static_cast<unsigned char>(
              std::lround(std::clamp(v[(c * s.h + y) * s.w + x], 0.0, 1.0) * 255.0));
      img.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }

    nlohmann::json j;
    j["id"] = i;
    j["file"] = name;
    nlohmann::json instances = nlohmann::json::array();
    for (const auto& inst : scene.instances) {
      nlohmann::json ji;
      ji["cls"] = inst.cls;
      ji["box"] = {inst.box[0], inst.box[1], inst.box[2], inst.box[3]};
      instances.push_back(ji);
    }
    j["instances"] = instances;
    ann << j.dump() << "\n";
  }
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream ann(dir + "/annotations.jsonl");
  if (!ann) throw EvalError("dataset: cannot open " + dir + "/annotations.jsonl");
  Dataset d;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    SyntheticScene scene;
    const std::string file = dir + "/" + j.at("file").get<std::string>();
    std::ifstream img(file, std::ios::binary);
    if (!img) throw EvalError("dataset: cannot open " + file);
    std::string magic;
    int64_t w = 0, h = 0, maxval = 0;
    img >> magic >> w >> h >> maxval;
    check(magic == "P6" && maxval == 255, "dataset: unsupported PPM header in " + file);
    img.get();  // single whitespace after header
    std::vector<unsigned char> raw(static_cast<size_t>(3 * w * h));
    img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!img) throw EvalError("dataset: truncated image " + file);
    std::vector<double> v(static_cast<size_t>(3 * h * w));
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        for (int64_t c = 0; c < 3; ++c)
          v[(c * h + y) * w + x] = static_cast<double>(raw[(y * w + x) * 3 + c]) / 255.0;
    scene.image = Tensor({1, 3, h, w}, std::move(v));
    for (const auto& ji : j.at("instances")) {
      SceneInstance inst;
      inst.cls = ji.at("cls");
      const auto bx = ji.at("box").get<std::vector<double>>();
      inst.box = {bx[0], bx[1], bx[2], bx[3]};
      scene.instances.push_back(inst);
    }
    d.scenes.push_back(std::move(scene));
  }
  return d;
}

GroundTruth scene_gt(const SyntheticScene& s) {
  GroundTruth gt;
  for (const auto& inst : s.instances) {
    gt.boxes.push_back(inst.box);
    gt.labels.push_back(inst.cls);
  }
  return gt;
}

std::pair<Tensor, GroundTruth> apply_augment(const SyntheticScene& s, bool hflip,
                                             bool scale_jitter, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor image = s.image;
  GroundTruth gt = scene_gt(s);
  const Shape4 shape = image.shape();

  if (hflip && u(rng) < 0.5) {
    const auto& v = image.values();
    std::vector<double> flipped(v.size());
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < shape.h; ++y)
        for (int64_t x = 0; x < shape.w; ++x)
          flipped[(c * shape.h + y) * shape.w + x] =
              v[(c * shape.h + y) * shape.w + (shape.w - 1 - x)];
    image = Tensor(shape, std::move(flipped));
    for (auto& b : gt.boxes) b[0] = 1.0 - b[0];
  }

  if (scale_jitter) {
    const double factor = 0.8 + 0.4 * u(rng);
    const int64_t sh = std::max<int64_t>(8, std::llround(shape.h * factor));
    const int64_t sw = std::max<int64_t>(8, std::llround(shape.w * factor));
    Tensor resized = bilinear_resize(image, sh, sw);
    std::vector<double> canvas(static_cast<size_t>(3 * shape.h * shape.w), 0.5);
    const int64_t oy = (shape.h - sh) / 2;  // negative when zoomed in
    const int64_t ox = (shape.w - sw) / 2;
    const auto& rv = resized.values();
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < sh; ++y) {
        const int64_t ty = y + oy;
        if (ty < 0 || ty >= shape.h) continue;
        for (int64_t x = 0; x < sw; ++x) {
          const int64_t tx = x + ox;
          if (tx < 0 || tx >= shape.w) continue;
          canvas[(c * shape.h + ty) * shape.w + tx] = rv[(c * sh + y) * sw + x];
        }
      }
    GroundTruth moved;
    for (size_t i = 0; i < gt.boxes.size(); ++i) {
      const Box& b = gt.boxes[i];
      // normalized -> jittered pixels -> shifted -> normalized
      const double cx = (b[0] * sw + ox) / shape.w;
      const double cy = (b[1] * sh + oy) / shape.h;
      const double w = b[2] * sw / shape.w;
      const double h = b[3] * sh / shape.h;
      const double x1 = std::clamp(cx - w / 2, 0.0, 1.0), x2 = std::clamp(cx + w / 2, 0.0, 1.0);
      const double y1 = std::clamp(cy - h / 2, 0.0, 1.0), y2 = std::clamp(cy + h / 2, 0.0, 1.0);
      if ((x2 - x1) * shape.w < 2.0 || (y2 - y1) * shape.h < 2.0) continue;
      moved.boxes.push_back({(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1});
      moved.labels.push_back(gt.labels[i]);
    }
    // commit image and boxes together; keep the unjittered pair when every
    // instance would be cropped away
    if (!moved.boxes.empty()) {
      image = Tensor(shape, std::move(canvas));
      gt = std::move(moved);
    }
  }
  return {image, gt};
}

}  // namespace msdetr

// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "msdetr/matching.hpp"
#include "msdetr/runconfig.hpp"

namespace msdetr {

/// One synthetic instance: class index, normalized (cx,cy,w,h) box, and the
/// painted pixel bounds (xmin,ymin,xmax,ymax inclusive) it was derived from.
struct SceneInstance {
  int64_t cls = 0;
  Box box{};
  std::array<int64_t, 4> pixel_bounds{};
};

/// Textured background plus 1..8 rendered defect primitives: jagged dark
/// cracks, irregular rust blotches, low-contrast bright patches, straight
/// scratches, and small dark pits.
struct SyntheticScene {
  Tensor image;  // (1,3,H,W) in [0,1]
  std::vector<SceneInstance> instances;
};

struct Dataset {
  std::vector<SyntheticScene> scenes;
};

struct DatasetSplits {
  Dataset train, val, test;
};

/// Deterministic per seed; classes are drawn from reshuffled blocks of all
/// five categories so the histogram stays near uniform.
DatasetSplits gen_dataset(const RunConfig& rc);

/// One directory per split: 8-bit binary PPM images plus annotations.jsonl.
void save_dataset(const std::string& dir, const Dataset& d);
Dataset load_dataset(const std::string& dir);

GroundTruth scene_gt(const SyntheticScene& s);

/// Horizontal flip (p=0.5) and scale jitter in [0.8, 1.2] with center
/// crop/pad back to the original size. Boxes follow the transform; fully
/// cropped-out instances are dropped.
std::pair<Tensor, GroundTruth> apply_augment(const SyntheticScene& s, bool hflip,
                                             bool scale_jitter, std::mt19937_64& rng);

}  // namespace msdetr

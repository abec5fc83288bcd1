#pragma once

#include <string>
#include <vector>

#include "moedet/geometry.hpp"

namespace moedet {

struct AnchorShape {
  double w = 0.0;
  double h = 0.0;
};

struct AnchorLevel {
  double stride = 0.0;
  std::vector<AnchorShape> anchors;
};

// Shared anchor configuration; identical for every expert of one mixture.
struct AnchorConfig {
  std::vector<AnchorLevel> levels;
  int class_count = 1;
  int image_height = 0;
  int image_width = 0;

  int grid_height(std::size_t level) const;
  int grid_width(std::size_t level) const;
};

// Throws ConfigError when strides are not strictly increasing, a level has no
// anchors, or a stride does not divide the image size exactly.
void validate(const AnchorConfig& cfg);

// Dense per-level grid of raw (pre-activation) values, layout [A, H, W, 5+C]
// row-major. Held as double in memory; stored as f32 on disk.
struct LevelGrid {
  int anchors = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  static LevelGrid zeros(int a, int h, int w, int c);

  double& at(int a, int y, int x, int c) {
    return data[static_cast<std::size_t>(((a * height + y) * width + x)) * channels + c];
  }
  double at(int a, int y, int x, int c) const {
    return data[static_cast<std::size_t>(((a * height + y) * width + x)) * channels + c];
  }
};

// Raw output of one expert for one image: one grid per anchor level.
struct RawPredictionTensor {
  std::string image_id;
  std::string expert_id;
  std::vector<LevelGrid> levels;
};

double sigmoid(double t);

struct DecodedCell {
  Box box;
  double objectness = 0.0;
  std::vector<double> class_scores;
};

// Maps one level's raw grid to image-space boxes and probabilities. For cell
// (cx, cy) and anchor (aw, ah):
//   bx = (2*sigmoid(tx) - 0.5 + cx) * stride
//   by = (2*sigmoid(ty) - 0.5 + cy) * stride
//   bw = (2*sigmoid(tw))^2 * aw,  bh = (2*sigmoid(th))^2 * ah
// and the box is clipped to the image. Output order: (cy, cx, anchor).
// Throws FormatError naming the level and axis on shape mismatch.
std::vector<DecodedCell> decode_level(const LevelGrid& raw, const AnchorConfig& cfg,
                                      std::size_t level_index);

// Decodes every level; per anchor box the final score is
// objectness * max_k class_score[k] with class_id = argmax_k. Emits detections
// with score >= conf_threshold sorted by descending score, ties broken by
// (level, cy, cx, anchor) ascending.
std::vector<Detection> decode_all(const RawPredictionTensor& raw, const AnchorConfig& cfg,
                                  double conf_threshold);

}  // namespace moedet

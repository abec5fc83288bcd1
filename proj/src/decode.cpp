#include "moedet/decode.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "moedet/errors.hpp"

namespace moedet {

int AnchorConfig::grid_height(std::size_t level) const {
  return static_cast<int>(image_height / levels[level].stride);
}

int AnchorConfig::grid_width(std::size_t level) const {
  return static_cast<int>(image_width / levels[level].stride);
}

void validate(const AnchorConfig& cfg) {
  if (cfg.levels.empty()) throw ConfigError("anchor config: no levels");
  if (cfg.class_count < 1) throw ConfigError("anchor config: class_count must be >= 1");
  if (cfg.image_height <= 0 || cfg.image_width <= 0)
    throw ConfigError("anchor config: image size must be positive");
  double prev_stride = 0.0;
  for (std::size_t i = 0; i < cfg.levels.size(); ++i) {
    const AnchorLevel& lvl = cfg.levels[i];
    if (lvl.stride <= prev_stride)
      throw ConfigError("anchor config: strides must be strictly increasing at level " +
                        std::to_string(i));
    prev_stride = lvl.stride;
    if (lvl.anchors.empty())
      throw ConfigError("anchor config: level " + std::to_string(i) + " has no anchors");
    const double gh = cfg.image_height / lvl.stride;
    const double gw = cfg.image_width / lvl.stride;
    if (gh != std::floor(gh) || gw != std::floor(gw))
      throw ConfigError("anchor config: stride of level " + std::to_string(i) +
                        " does not divide the image size exactly");
  }
}

LevelGrid LevelGrid::zeros(int a, int h, int w, int c) {
  LevelGrid g;
  g.anchors = a;
  g.height = h;
  g.width = w;
  g.channels = c;
  g.data.assign(static_cast<std::size_t>(a) * h * w * c, 0.0);
  return g;
}

double sigmoid(double t) {
  if (t >= 0.0) {
    return 1.0 / (1.0 + std::exp(-t));
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

namespace {

void check_level_shape(const LevelGrid& raw, const AnchorConfig& cfg, std::size_t li) {
  const std::string where = "decode: level " + std::to_string(li);
  const int expected_a = static_cast<int>(cfg.levels[li].anchors.size());
  if (raw.anchors != expected_a)
    throw FormatError(where + ": anchor axis is " + std::to_string(raw.anchors) +
                      ", expected " + std::to_string(expected_a));
  if (raw.height != cfg.grid_height(li))
    throw FormatError(where + ": height axis is " + std::to_string(raw.height) +
                      ", expected " + std::to_string(cfg.grid_height(li)));
  if (raw.width != cfg.grid_width(li))
    throw FormatError(where + ": width axis is " + std::to_string(raw.width) +
                      ", expected " + std::to_string(cfg.grid_width(li)));
  if (raw.channels != 5 + cfg.class_count)
    throw FormatError(where + ": channel axis is " + std::to_string(raw.channels) +
                      ", expected " + std::to_string(5 + cfg.class_count));
  const std::size_t expected_size =
      static_cast<std::size_t>(raw.anchors) * raw.height * raw.width * raw.channels;
  if (raw.data.size() != expected_size)
    throw FormatError(where + ": payload has " + std::to_string(raw.data.size()) +
                      " values, expected " + std::to_string(expected_size));
}

}  // namespace

std::vector<DecodedCell> decode_level(const LevelGrid& raw, const AnchorConfig& cfg,
                                      std::size_t level_index) {
  check_level_shape(raw, cfg, level_index);
  const AnchorLevel& lvl = cfg.levels[level_index];
  const double stride = lvl.stride;
  const int C = cfg.class_count;
  std::vector<DecodedCell> out;
  out.reserve(static_cast<std::size_t>(raw.anchors) * raw.height * raw.width);
  for (int cy = 0; cy < raw.height; ++cy) {
    for (int cx = 0; cx < raw.width; ++cx) {
      for (int a = 0; a < raw.anchors; ++a) {
        const double bx = (2.0 * sigmoid(raw.at(a, cy, cx, 0)) - 0.5 + cx) * stride;
        const double by = (2.0 * sigmoid(raw.at(a, cy, cx, 1)) - 0.5 + cy) * stride;
        const double sw = 2.0 * sigmoid(raw.at(a, cy, cx, 2));
        const double sh = 2.0 * sigmoid(raw.at(a, cy, cx, 3));
        const double bw = sw * sw * lvl.anchors[a].w;
        const double bh = sh * sh * lvl.anchors[a].h;
        DecodedCell cell;
        cell.box.x1 = std::clamp(bx - bw / 2.0, 0.0, static_cast<double>(cfg.image_width));
        cell.box.y1 = std::clamp(by - bh / 2.0, 0.0, static_cast<double>(cfg.image_height));
        cell.box.x2 = std::clamp(bx + bw / 2.0, 0.0, static_cast<double>(cfg.image_width));
        cell.box.y2 = std::clamp(by + bh / 2.0, 0.0, static_cast<double>(cfg.image_height));
        cell.objectness = sigmoid(raw.at(a, cy, cx, 4));
        cell.class_scores.resize(C);
        for (int k = 0; k < C; ++k) cell.class_scores[k] = sigmoid(raw.at(a, cy, cx, 5 + k));
        out.push_back(std::move(cell));
      }
    }
  }
  return out;
}

std::vector<Detection> decode_all(const RawPredictionTensor& raw, const AnchorConfig& cfg,
                                  double conf_threshold) {
  validate(cfg);
  if (raw.levels.size() != cfg.levels.size())
    throw FormatError("decode: tensor has " + std::to_string(raw.levels.size()) +
                      " levels, anchor config has " + std::to_string(cfg.levels.size()));
  std::vector<Detection> dets;
  for (std::size_t li = 0; li < raw.levels.size(); ++li) {
    // Generation order (level, cy, cx, anchor) is the tie-break key, so a
    // stable sort on score alone preserves it.
    const std::vector<DecodedCell> cells = decode_level(raw.levels[li], cfg, li);
    for (const DecodedCell& cell : cells) {
      int best_class = 0;
      double best = cell.class_scores[0];
      for (std::size_t k = 1; k < cell.class_scores.size(); ++k) {
        if (cell.class_scores[k] > best) {
          best = cell.class_scores[k];
          best_class = static_cast<int>(k);
        }
      }
      const double score = cell.objectness * best;
      if (score >= conf_threshold) {
        Detection d;
        d.image_id = raw.image_id;
        d.class_id = best_class;
        d.score = score;
        d.box = cell.box;
        d.source = raw.expert_id;
        dets.push_back(std::move(d));
      }
    }
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return dets;
}

}  // namespace moedet

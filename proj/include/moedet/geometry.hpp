#pragma once

#include <string>

namespace moedet {

// Axis-aligned box in image pixels. Invariant: x1 <= x2, y1 <= y2, all finite.
// Zero-area boxes are allowed.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
};

// One decoded detection: the unit of fusion, evaluation, and analysis.
// `source` names the expert that produced it; empty when unknown.
struct Detection {
  std::string image_id;
  int class_id = 0;
  double score = 0.0;
  Box box;
  std::string source;
};

bool box_valid(const Box& b);

double area(const Box& b);

// Intersection over union. Returns 0 when the union is empty (two zero-area
// boxes) so downstream suppression stays total.
double iou(const Box& a, const Box& b);

}  // namespace moedet

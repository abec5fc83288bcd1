#pragma once

#include <map>
#include <string>
#include <vector>

#include "moedet/geometry.hpp"

namespace moedet {

struct GroundTruth {
  std::string image_id;
  int class_id = 0;
  Box box;
};

struct EvalConfig {
  double conf_threshold = 0.001;
  double iou_match = 0.5;
};

struct ClassAp {
  int class_id = 0;
  double ap = 0.0;
  int gt_count = 0;
  int det_count = 0;
};

struct SubsetEval {
  std::string name;
  double map50 = 0.0;
  std::vector<ClassAp> per_class;  // classes with >= 1 ground truth only
  int gt_count = 0;
  int det_count = 0;
  int image_count = 0;
};

struct EvalReport {
  SubsetEval overall;
  std::vector<SubsetEval> subsets;  // present subsets only, sorted by name
  std::vector<std::string> warnings;
  double iou_match = 0.5;
  double conf_threshold = 0.001;
};

// Average precision for one class: detections sorted by descending score (ties
// by input order), greedy-matched to the unmatched same-image ground truth
// with highest IoU >= iou_match, then all-points interpolation (area under the
// precision envelope). Returns 0 when the class has ground truth but no match
// is possible; callers must exclude classes with zero ground truth.
double match_and_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                    int class_id, double iou_match);

// Applies the confidence threshold, computes per-class AP overall and per
// subset, and aggregates mAP50 over classes with ground truth. Detections on
// images absent from both the subset map and the ground truth are dropped
// with a warning.
EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                    const std::map<std::string, std::string>& subsets, const EvalConfig& cfg);

}  // namespace moedet

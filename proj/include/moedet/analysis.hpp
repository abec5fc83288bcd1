#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "moedet/gate.hpp"
#include "moedet/geometry.hpp"

namespace moedet {

inline constexpr int kRoutingHistogramBins = 20;

struct ExpertWeightStats {
  double mean = 0.0;
  double stddev = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
  double q25 = 0.0;
  double q50 = 0.0;
  double q75 = 0.0;
  std::array<int, kRoutingHistogramBins> histogram{};  // fixed-width bins over [0,1]
};

struct SubsetRouting {
  std::string name;
  int count = 0;
  std::vector<ExpertWeightStats> experts;
};

struct RoutingSummary {
  int expert_count = 0;
  std::vector<SubsetRouting> subsets;  // present subsets plus "all", sorted by name
};

// Per-subset distribution of predicted gate weights. Spatial/classwise outputs
// contribute their mean weight vector; images without a subset label are
// grouped under "undefined"; empty subsets are absent.
RoutingSummary routing_summary(const std::vector<std::pair<std::string, GateOutput>>& outputs,
                               const std::map<std::string, std::string>& subsets);

struct DisagreementCounts {
  int full_agreement = 0;
  int label_disagreement = 0;
  int only_expert_a = 0;
  int only_expert_b = 0;
};

// Object-level comparison of two experts' post-processed detections for one
// image: greedy class-agnostic bipartite matching by descending IoU among
// pairs with IoU >= match_iou. Matched pairs with equal class count as full
// agreement, differing class as label disagreement; unmatched detections fall
// to the owning expert's exclusive bucket.
DisagreementCounts disagreement(const std::vector<Detection>& dets_a,
                                const std::vector<Detection>& dets_b, double match_iou);

// Groups whole-dataset detection lists by image and matches each image.
std::map<std::string, DisagreementCounts> disagreement_by_image(
    const std::vector<Detection>& dets_a, const std::vector<Detection>& dets_b,
    double match_iou);

struct SubsetDisagreement {
  std::string name;
  int image_count = 0;
  double full_agreement = 0.0;  // averages per image
  double label_disagreement = 0.0;
  double only_expert_a = 0.0;
  double only_expert_b = 0.0;
};

struct DisagreementReport {
  double match_iou = 0.5;
  std::vector<SubsetDisagreement> subsets;  // present subsets plus "all"
};

// Per-subset per-image averages of each category. The per-subset denominator
// is every image the subset map assigns to it (plus detection-bearing images
// missing from the map, grouped under "undefined").
DisagreementReport disagreement_report(const std::map<std::string, DisagreementCounts>& by_image,
                                       const std::map<std::string, std::string>& subsets,
                                       double match_iou);

}  // namespace moedet

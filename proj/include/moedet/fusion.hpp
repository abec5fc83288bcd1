#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moedet/geometry.hpp"

namespace moedet {

enum class FusionMethod { nms, softnms, wbf, nmw };

FusionMethod parse_fusion_method(const std::string& name);
std::string fusion_method_name(FusionMethod m);

struct FusionConfig {
  FusionMethod method = FusionMethod::nmw;
  double iou_threshold = 0.6;
  double softnms_sigma = 0.5;
  double softnms_score_floor = 0.3;
  // Per-expert mAP used to pre-weight confidence scores; scores are scaled by
  // weight / max(weight) so the best model is left unchanged.
  std::optional<std::map<std::string, double>> model_map_weights;
};

// Throws ConfigError when a detection's source is missing from the map.
std::vector<Detection> map_reweight(const std::vector<Detection>& dets,
                                    const std::map<std::string, double>& weights);

// Class-wise greedy suppression. All methods treat (image_id, class_id) groups
// independently; output is sorted by descending score, ties by input index.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

// Gaussian decay exp(-iou^2 / sigma) of same-class overlaps against each
// selected box; detections whose score falls below score_floor are dropped.
std::vector<Detection> soft_nms(const std::vector<Detection>& dets, double sigma,
                                double score_floor);

// Clusters by IoU against the running fused box; fused coordinates are the
// score-weighted member average and the fused score is
// mean(member scores) * min(N_models, model_count) / model_count.
std::vector<Detection> wbf(const std::vector<Detection>& dets, double iou_threshold,
                           int model_count);

// Clusters around the most confident unassigned box; members are weighted by
// score * IoU(member, seed) and the fused score is the seed score.
std::vector<Detection> nmw(const std::vector<Detection>& dets, double iou_threshold);

// Applies optional mAP re-weighting, concatenates the experts' detections in
// order, and dispatches to the configured method. For WBF the model count is
// the number of expert lists.
std::vector<Detection> fuse(const std::vector<std::vector<Detection>>& dets_per_expert,
                            const FusionConfig& cfg);

}  // namespace moedet

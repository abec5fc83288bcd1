#include "moedet/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "moedet/errors.hpp"

namespace moedet {

FusionMethod parse_fusion_method(const std::string& name) {
  if (name == "nms") return FusionMethod::nms;
  if (name == "softnms") return FusionMethod::softnms;
  if (name == "wbf") return FusionMethod::wbf;
  if (name == "nmw") return FusionMethod::nmw;
  throw ConfigError("unknown fusion method: " + name);
}

std::string fusion_method_name(FusionMethod m) {
  switch (m) {
    case FusionMethod::nms: return "nms";
    case FusionMethod::softnms: return "softnms";
    case FusionMethod::wbf: return "wbf";
    case FusionMethod::nmw: return "nmw";
  }
  return "?";
}

std::vector<Detection> map_reweight(const std::vector<Detection>& dets,
                                    const std::map<std::string, double>& weights) {
  if (weights.empty()) throw ConfigError("map_reweight: empty weight map");
  double max_w = 0.0;
  for (const auto& [id, w] : weights) {
    if (w <= 0.0) throw ConfigError("map_reweight: weight for '" + id + "' must be > 0");
    max_w = std::max(max_w, w);
  }
  std::vector<Detection> out = dets;
  for (Detection& d : out) {
    const auto it = weights.find(d.source);
    if (it == weights.end())
      throw ConfigError("map_reweight: no weight for expert '" + d.source + "'");
    d.score = std::clamp(d.score * (it->second / max_w), 0.0, 1.0);
  }
  return out;
}

namespace {

// An emitted detection plus the input index used for deterministic tie-breaks.
struct Emitted {
  Detection det;
  std::size_t order;
};

// Suppression never crosses images or classes.
using GroupKey = std::pair<std::string, int>;

std::map<GroupKey, std::vector<std::size_t>> group_dets(const std::vector<Detection>& dets) {
  std::map<GroupKey, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < dets.size(); ++i)
    groups[{dets[i].image_id, dets[i].class_id}].push_back(i);
  return groups;
}

std::vector<Detection> finish(std::vector<Emitted>&& emitted) {
  std::stable_sort(emitted.begin(), emitted.end(), [](const Emitted& a, const Emitted& b) {
    if (a.det.score != b.det.score) return a.det.score > b.det.score;
    return a.order < b.order;
  });
  std::vector<Detection> out;
  out.reserve(emitted.size());
  for (Emitted& e : emitted) out.push_back(std::move(e.det));
  return out;
}

}  // namespace

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<Emitted> emitted;
  for (auto& [key, idx] : group_dets(dets)) {
    std::vector<std::size_t> remaining = idx;  // kept in input order
    while (!remaining.empty()) {
      std::size_t best_pos = 0;
      for (std::size_t p = 1; p < remaining.size(); ++p)
        if (dets[remaining[p]].score > dets[remaining[best_pos]].score) best_pos = p;
      const std::size_t best = remaining[best_pos];
      emitted.push_back({dets[best], best});
      std::vector<std::size_t> kept;
      for (std::size_t r : remaining)
        if (r != best && iou(dets[r].box, dets[best].box) <= iou_threshold) kept.push_back(r);
      remaining = std::move(kept);
    }
  }
  return finish(std::move(emitted));
}

std::vector<Detection> soft_nms(const std::vector<Detection>& dets, double sigma,
                                double score_floor) {
  if (sigma <= 0.0) throw ConfigError("soft_nms: sigma must be > 0");
  std::vector<Emitted> emitted;
  for (auto& [key, idx] : group_dets(dets)) {
    std::vector<std::pair<std::size_t, double>> remaining;  // (index, current score)
    for (std::size_t i : idx) remaining.push_back({i, dets[i].score});
    while (!remaining.empty()) {
      std::size_t best_pos = 0;
      for (std::size_t p = 1; p < remaining.size(); ++p)
        if (remaining[p].second > remaining[best_pos].second) best_pos = p;
      const auto [best, best_score] = remaining[best_pos];
      Detection d = dets[best];
      d.score = best_score;
      emitted.push_back({std::move(d), best});
      std::vector<std::pair<std::size_t, double>> kept;
      for (std::size_t p = 0; p < remaining.size(); ++p) {
        if (p == best_pos) continue;
        const double ov = iou(dets[remaining[p].first].box, dets[best].box);
        const double decayed = remaining[p].second * std::exp(-(ov * ov) / sigma);
        if (decayed >= score_floor) kept.push_back({remaining[p].first, decayed});
      }
      remaining = std::move(kept);
    }
  }
  return finish(std::move(emitted));
}

std::vector<Detection> wbf(const std::vector<Detection>& dets, double iou_threshold,
                           int model_count) {
  if (model_count < 1) throw ConfigError("wbf: model count must be >= 1");
  struct Cluster {
    Box fused;
    double sum_s = 0.0, sum_sx1 = 0.0, sum_sy1 = 0.0, sum_sx2 = 0.0, sum_sy2 = 0.0;
    double score_sum = 0.0;
    int members = 0;
    std::set<std::string> sources;
    std::size_t first_index = 0;
  };
  std::vector<Emitted> emitted;
  for (auto& [key, idx] : group_dets(dets)) {
    std::vector<std::size_t> order = idx;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
      return a < b;
    });
    std::vector<Cluster> clusters;
    for (std::size_t i : order) {
      Cluster* target = nullptr;
      for (Cluster& c : clusters) {
        if (iou(c.fused, dets[i].box) > iou_threshold) {
          target = &c;
          break;
        }
      }
      if (target == nullptr) {
        clusters.emplace_back();
        target = &clusters.back();
        target->first_index = i;
      }
      const Detection& d = dets[i];
      target->sum_s += d.score;
      target->sum_sx1 += d.score * d.box.x1;
      target->sum_sy1 += d.score * d.box.y1;
      target->sum_sx2 += d.score * d.box.x2;
      target->sum_sy2 += d.score * d.box.y2;
      target->score_sum += d.score;
      target->members += 1;
      target->sources.insert(d.source);
      target->fused = Box{target->sum_sx1 / target->sum_s, target->sum_sy1 / target->sum_s,
                          target->sum_sx2 / target->sum_s, target->sum_sy2 / target->sum_s};
    }
    for (const Cluster& c : clusters) {
      Detection d;
      d.image_id = key.first;
      d.class_id = key.second;
      d.box = c.fused;
      const int n_models = std::min<int>(static_cast<int>(c.sources.size()), model_count);
      d.score = (c.score_sum / c.members) * (static_cast<double>(n_models) / model_count);
      emitted.push_back({std::move(d), c.first_index});
    }
  }
  return finish(std::move(emitted));
}

std::vector<Detection> nmw(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<Emitted> emitted;
  for (auto& [key, idx] : group_dets(dets)) {
    std::vector<std::size_t> remaining = idx;
    while (!remaining.empty()) {
      std::size_t best_pos = 0;
      for (std::size_t p = 1; p < remaining.size(); ++p)
        if (dets[remaining[p]].score > dets[remaining[best_pos]].score) best_pos = p;
      const std::size_t seed = remaining[best_pos];
      double sum_u = 0.0, sx1 = 0.0, sy1 = 0.0, sx2 = 0.0, sy2 = 0.0;
      std::vector<std::size_t> kept;
      for (std::size_t r : remaining) {
        const double ov = r == seed ? 1.0 : iou(dets[r].box, dets[seed].box);
        if (r == seed || ov > iou_threshold) {
          const double u = dets[r].score * ov;
          sum_u += u;
          sx1 += u * dets[r].box.x1;
          sy1 += u * dets[r].box.y1;
          sx2 += u * dets[r].box.x2;
          sy2 += u * dets[r].box.y2;
        } else {
          kept.push_back(r);
        }
      }
      Detection d;
      d.image_id = key.first;
      d.class_id = key.second;
      d.score = dets[seed].score;
      d.box = Box{sx1 / sum_u, sy1 / sum_u, sx2 / sum_u, sy2 / sum_u};
      emitted.push_back({std::move(d), seed});
      remaining = std::move(kept);
    }
  }
  return finish(std::move(emitted));
}

std::vector<Detection> fuse(const std::vector<std::vector<Detection>>& dets_per_expert,
                            const FusionConfig& cfg) {
  if (dets_per_expert.empty()) throw ConfigError("fuse: no expert detection lists");
  std::vector<Detection> all;
  for (const auto& expert_dets : dets_per_expert)
    all.insert(all.end(), expert_dets.begin(), expert_dets.end());
  if (cfg.model_map_weights.has_value()) all = map_reweight(all, *cfg.model_map_weights);
  switch (cfg.method) {
    case FusionMethod::nms: return nms(all, cfg.iou_threshold);
    case FusionMethod::softnms: return soft_nms(all, cfg.softnms_sigma, cfg.softnms_score_floor);
    case FusionMethod::wbf:
      return wbf(all, cfg.iou_threshold, static_cast<int>(dets_per_expert.size()));
    case FusionMethod::nmw: return nmw(all, cfg.iou_threshold);
  }
  throw ConfigError("fuse: unknown method");
}

}  // namespace moedet

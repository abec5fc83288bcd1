#include "moedet/eval.hpp"

#include <algorithm>
#include <set>

namespace moedet {

double match_and_ap(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                    int class_id, double iou_match) {
  std::vector<std::size_t> gt_idx;
  for (std::size_t i = 0; i < gts.size(); ++i)
    if (gts[i].class_id == class_id) gt_idx.push_back(i);
  const std::size_t n_gt = gt_idx.size();
  if (n_gt == 0) return 0.0;

  std::vector<std::size_t> det_idx;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].class_id == class_id) det_idx.push_back(i);
  std::stable_sort(det_idx.begin(), det_idx.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });

  std::vector<bool> matched(gts.size(), false);
  std::vector<bool> is_tp(det_idx.size(), false);
  for (std::size_t k = 0; k < det_idx.size(); ++k) {
    const Detection& d = dets[det_idx[k]];
    double best_iou = 0.0;
    std::size_t best_gt = gts.size();
    for (std::size_t gi : gt_idx) {
      if (matched[gi] || gts[gi].image_id != d.image_id) continue;
      const double ov = iou(d.box, gts[gi].box);
      if (ov > best_iou) {
        best_iou = ov;
        best_gt = gi;
      }
    }
    if (best_gt < gts.size() && best_iou >= iou_match) {
      matched[best_gt] = true;
      is_tp[k] = true;
    }
  }

  // Precision/recall points, then the area under the precision envelope.
  std::vector<double> recall(det_idx.size()), precision(det_idx.size());
  int tp = 0;
  for (std::size_t k = 0; k < det_idx.size(); ++k) {
    if (is_tp[k]) ++tp;
    recall[k] = static_cast<double>(tp) / static_cast<double>(n_gt);
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  double ap = 0.0;
  double envelope = 0.0;
  // The envelope is the running max of precision from the right.
  for (std::size_t k = det_idx.size(); k > 0;) {
    --k;
    envelope = std::max(envelope, precision[k]);
    const double lower = k == 0 ? 0.0 : recall[k - 1];
    ap += (recall[k] - lower) * envelope;
  }
  return ap;
}

namespace {

SubsetEval eval_subset(const std::string& name, const std::vector<Detection>& dets,
                       const std::vector<GroundTruth>& gts, double iou_match,
                       int image_count) {
  SubsetEval s;
  s.name = name;
  s.gt_count = static_cast<int>(gts.size());
  s.det_count = static_cast<int>(dets.size());
  s.image_count = image_count;
  std::set<int> classes;
  for (const GroundTruth& g : gts) classes.insert(g.class_id);
  double sum = 0.0;
  for (int c : classes) {
    ClassAp entry;
    entry.class_id = c;
    entry.ap = match_and_ap(dets, gts, c, iou_match);
    for (const GroundTruth& g : gts)
      if (g.class_id == c) ++entry.gt_count;
    for (const Detection& d : dets)
      if (d.class_id == c) ++entry.det_count;
    sum += entry.ap;
    s.per_class.push_back(entry);
  }
  s.map50 = classes.empty() ? 0.0 : sum / static_cast<double>(classes.size());
  return s;
}

}  // namespace

EvalReport evaluate(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                    const std::map<std::string, std::string>& subsets, const EvalConfig& cfg) {
  EvalReport report;
  report.iou_match = cfg.iou_match;
  report.conf_threshold = cfg.conf_threshold;

  // Known images: everything in the subset map or carrying ground truth.
  std::set<std::string> known;
  for (const auto& [id, label] : subsets) known.insert(id);
  for (const GroundTruth& g : gts) known.insert(g.image_id);

  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    if (d.score < cfg.conf_threshold) continue;
    if (known.count(d.image_id) == 0) {
      report.warnings.push_back("detection references unknown image '" + d.image_id +
                                "'; ignored");
      continue;
    }
    kept.push_back(d);
  }

  auto subset_of = [&](const std::string& image_id) -> std::string {
    const auto it = subsets.find(image_id);
    return it == subsets.end() ? std::string("undefined") : it->second;
  };

  std::set<std::string> subset_names;
  std::map<std::string, int> subset_images;
  for (const std::string& id : known) {
    const std::string label = subset_of(id);
    subset_names.insert(label);
    subset_images[label] += 1;
  }

  report.overall = eval_subset("all", kept, gts, cfg.iou_match, static_cast<int>(known.size()));

  for (const std::string& name : subset_names) {
    std::vector<Detection> sub_dets;
    for (const Detection& d : kept)
      if (subset_of(d.image_id) == name) sub_dets.push_back(d);
    std::vector<GroundTruth> sub_gts;
    for (const GroundTruth& g : gts)
      if (subset_of(g.image_id) == name) sub_gts.push_back(g);
    report.subsets.push_back(
        eval_subset(name, sub_dets, sub_gts, cfg.iou_match, subset_images[name]));
  }
  return report;
}

}  // namespace moedet

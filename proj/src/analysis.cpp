#include "moedet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "moedet/errors.hpp"

namespace moedet {

namespace {

// Linear-interpolation quantile over sorted data.
double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  if (sorted.size() == 1) return sorted[0];
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

ExpertWeightStats stats_of(std::vector<double> values) {
  ExpertWeightStats s;
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / n;
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / n);
  std::sort(values.begin(), values.end());
  s.min = values.front();
  s.max = values.back();
  s.q25 = quantile(values, 0.25);
  s.q50 = quantile(values, 0.50);
  s.q75 = quantile(values, 0.75);
  for (double v : values) {
    int bin = static_cast<int>(v * kRoutingHistogramBins);
    bin = std::clamp(bin, 0, kRoutingHistogramBins - 1);
    s.histogram[bin] += 1;
  }
  return s;
}

}  // namespace

RoutingSummary routing_summary(const std::vector<std::pair<std::string, GateOutput>>& outputs,
                               const std::map<std::string, std::string>& subsets) {
  RoutingSummary summary;
  if (outputs.empty()) return summary;
  const int n = outputs.front().second.expert_count;
  summary.expert_count = n;

  // subset -> per-expert weight samples
  std::map<std::string, std::vector<std::vector<double>>> groups;
  auto group_for = [&](const std::string& name) -> std::vector<std::vector<double>>& {
    auto it = groups.find(name);
    if (it == groups.end()) it = groups.emplace(name, std::vector<std::vector<double>>(n)).first;
    return it->second;
  };
  for (const auto& [image_id, out] : outputs) {
    if (out.expert_count != n)
      throw ConfigError("routing_summary: inconsistent expert counts across outputs");
    const std::vector<double> w = out.mean_weights();
    const auto it = subsets.find(image_id);
    const std::string label = it == subsets.end() ? std::string("undefined") : it->second;
    auto& slot = group_for(label);
    auto& all = group_for("all");
    for (int i = 0; i < n; ++i) {
      slot[i].push_back(w[i]);
      all[i].push_back(w[i]);
    }
  }

  for (auto& [name, samples] : groups) {
    SubsetRouting sub;
    sub.name = name;
    sub.count = static_cast<int>(samples[0].size());
    for (int i = 0; i < n; ++i) sub.experts.push_back(stats_of(samples[i]));
    summary.subsets.push_back(std::move(sub));
  }
  return summary;
}

DisagreementCounts disagreement(const std::vector<Detection>& dets_a,
                                const std::vector<Detection>& dets_b, double match_iou) {
  struct Pair {
    double iou;
    std::size_t a, b;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < dets_a.size(); ++i) {
    for (std::size_t j = 0; j < dets_b.size(); ++j) {
      const double ov = iou(dets_a[i].box, dets_b[j].box);
      if (ov >= match_iou) pairs.push_back({ov, i, j});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& p, const Pair& q) {
    if (p.iou != q.iou) return p.iou > q.iou;
    if (p.a != q.a) return p.a < q.a;
    return p.b < q.b;
  });
  std::vector<bool> used_a(dets_a.size(), false), used_b(dets_b.size(), false);
  DisagreementCounts counts;
  for (const Pair& p : pairs) {
    if (used_a[p.a] || used_b[p.b]) continue;
    used_a[p.a] = true;
    used_b[p.b] = true;
    if (dets_a[p.a].class_id == dets_b[p.b].class_id)
      counts.full_agreement += 1;
    else
      counts.label_disagreement += 1;
  }
  for (std::size_t i = 0; i < dets_a.size(); ++i)
    if (!used_a[i]) counts.only_expert_a += 1;
  for (std::size_t j = 0; j < dets_b.size(); ++j)
    if (!used_b[j]) counts.only_expert_b += 1;
  return counts;
}

std::map<std::string, DisagreementCounts> disagreement_by_image(
    const std::vector<Detection>& dets_a, const std::vector<Detection>& dets_b,
    double match_iou) {
  std::set<std::string> images;
  std::map<std::string, std::vector<Detection>> by_a, by_b;
  for (const Detection& d : dets_a) {
    by_a[d.image_id].push_back(d);
    images.insert(d.image_id);
  }
  for (const Detection& d : dets_b) {
    by_b[d.image_id].push_back(d);
    images.insert(d.image_id);
  }
  std::map<std::string, DisagreementCounts> out;
  for (const std::string& id : images) out[id] = disagreement(by_a[id], by_b[id], match_iou);
  return out;
}

DisagreementReport disagreement_report(const std::map<std::string, DisagreementCounts>& by_image,
                                       const std::map<std::string, std::string>& subsets,
                                       double match_iou) {
  DisagreementReport report;
  report.match_iou = match_iou;

  auto subset_of = [&](const std::string& image_id) -> std::string {
    const auto it = subsets.find(image_id);
    return it == subsets.end() ? std::string("undefined") : it->second;
  };

  // Image universe: the subset map plus any detection-bearing stragglers.
  std::map<std::string, std::vector<std::string>> members;
  for (const auto& [id, label] : subsets) members[label].push_back(id);
  for (const auto& [id, counts] : by_image)
    if (subsets.count(id) == 0) members["undefined"].push_back(id);

  std::vector<std::string> all_images;
  for (const auto& [label, ids] : members)
    all_images.insert(all_images.end(), ids.begin(), ids.end());
  members["all"] = std::move(all_images);

  for (const auto& [label, ids] : members) {
    if (ids.empty()) continue;
    SubsetDisagreement sub;
    sub.name = label;
    sub.image_count = static_cast<int>(ids.size());
    for (const std::string& id : ids) {
      const auto it = by_image.find(id);
      if (it == by_image.end()) continue;
      sub.full_agreement += it->second.full_agreement;
      sub.label_disagreement += it->second.label_disagreement;
      sub.only_expert_a += it->second.only_expert_a;
      sub.only_expert_b += it->second.only_expert_b;
    }
    const double n = static_cast<double>(sub.image_count);
    sub.full_agreement /= n;
    sub.label_disagreement /= n;
    sub.only_expert_a /= n;
    sub.only_expert_b /= n;
    report.subsets.push_back(std::move(sub));
  }
  return report;
}

}  // namespace moedet

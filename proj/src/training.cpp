#include "moedet/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "gate_forward.hpp"
#include "moedet/errors.hpp"
#include "moedet/rng.hpp"

namespace moedet {

namespace {

constexpr double kLogEps = 1e-12;  // inside every logarithm

double safe_log(double x) { return std::log(x + kLogEps); }

}  // namespace

LossMode parse_loss_mode(const std::string& name) {
  if (name == "detection") return LossMode::detection;
  if (name == "domain_ce") return LossMode::domain_ce;
  throw ConfigError("unknown loss mode: " + name);
}

std::string loss_mode_name(LossMode m) {
  return m == LossMode::detection ? "detection" : "domain_ce";
}

Balancing parse_balancing(const std::string& name) {
  if (name == "none") return Balancing::none;
  if (name == "importance") return Balancing::importance;
  if (name == "kl") return Balancing::kl;
  if (name == "batch_entropy") return Balancing::batch_entropy;
  if (name == "sample_entropy") return Balancing::sample_entropy;
  throw ConfigError("unknown balancing loss: " + name);
}

std::string balancing_name(Balancing b) {
  switch (b) {
    case Balancing::none: return "none";
    case Balancing::importance: return "importance";
    case Balancing::kl: return "kl";
    case Balancing::batch_entropy: return "batch_entropy";
    case Balancing::sample_entropy: return "sample_entropy";
  }
  return "?";
}

std::vector<double> importance(const std::vector<GateOutput>& batch_outputs) {
  if (batch_outputs.empty()) throw std::invalid_argument("importance: empty batch");
  const int n = batch_outputs.front().expert_count;
  std::vector<double> total(n, 0.0);
  for (const GateOutput& out : batch_outputs) {
    const std::vector<double> w = out.mean_weights();
    for (int i = 0; i < n; ++i) total[i] += w[i];
  }
  return total;
}

double importance_loss(const std::vector<double>& importance_vec) {
  const double n = static_cast<double>(importance_vec.size());
  double sum = 0.0;
  for (double v : importance_vec) sum += v;
  if (sum <= 0.0) throw std::invalid_argument("importance_loss: all-zero importance");
  const double mean = sum / n;
  double var = 0.0;
  for (double v : importance_vec) var += (v - mean) * (v - mean);
  var /= n;
  return var / (mean * mean);
}

double kl_uniform_loss(const std::vector<double>& importance_vec) {
  const double n = static_cast<double>(importance_vec.size());
  double sum = 0.0;
  for (double v : importance_vec) sum += v;
  if (sum <= 0.0) throw std::invalid_argument("kl_uniform_loss: all-zero importance");
  double loss = 0.0;
  for (double v : importance_vec) {
    const double p = v / sum;
    loss += p * std::log((p + kLogEps) * n);
  }
  return loss;
}

double batch_entropy_loss(const std::vector<double>& importance_vec) {
  const double n = static_cast<double>(importance_vec.size());
  double sum = 0.0;
  for (double v : importance_vec) sum += v;
  if (sum <= 0.0) throw std::invalid_argument("batch_entropy_loss: all-zero importance");
  double neg_entropy = 0.0;
  for (double v : importance_vec) {
    const double p = v / sum;
    neg_entropy += p * safe_log(p);
  }
  return std::log(n) + neg_entropy;
}

double samplewise_entropy_loss(const std::vector<GateOutput>& batch_outputs) {
  if (batch_outputs.empty())
    throw std::invalid_argument("samplewise_entropy_loss: empty batch");
  double total = 0.0;
  for (const GateOutput& out : batch_outputs) {
    const std::vector<double> w = out.mean_weights();
    double neg_entropy = 0.0;
    for (double v : w) neg_entropy += v * safe_log(v);
    total += std::log(static_cast<double>(w.size())) + neg_entropy;
  }
  return total / static_cast<double>(batch_outputs.size());
}

double domain_ce_loss(const std::vector<GateOutput>& batch_outputs,
                      const std::vector<int>& domain_labels) {
  if (batch_outputs.empty()) throw std::invalid_argument("domain_ce_loss: empty batch");
  if (batch_outputs.size() != domain_labels.size())
    throw std::invalid_argument("domain_ce_loss: label count mismatch");
  double total = 0.0;
  for (std::size_t s = 0; s < batch_outputs.size(); ++s) {
    const std::vector<double> w = batch_outputs[s].mean_weights();
    const int label = domain_labels[s];
    if (label < 0 || label >= static_cast<int>(w.size()))
      throw ConfigError("domain_ce_loss: label " + std::to_string(label) + " out of range");
    total += -safe_log(w[label]);
  }
  return total / static_cast<double>(batch_outputs.size());
}

double total_loss(double task, double balancing, double lambda) {
  return task + lambda * balancing;
}

// ---------------------------------------------------------------------------
// Detection loss: forward and backward share the assignment and decode logic.

namespace {

struct SlotRef {
  std::size_t gt = 0;  // index into gts
  int level = 0;
  int anchor = 0;
  int cy = 0;
  int cx = 0;
};

// Ground truth is assigned to the (level, anchor) whose anchor box, centered
// on the ground-truth center, has best IoU with it; the cell is the one
// containing the center at that level.
std::vector<SlotRef> assign_anchors(const std::vector<GroundTruth>& gts,
                                    const AnchorConfig& cfg) {
  std::vector<SlotRef> out;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const GroundTruth& gt = gts[g];
    if (gt.class_id < 0 || gt.class_id >= cfg.class_count)
      throw ConfigError("detection_loss: ground-truth class " + std::to_string(gt.class_id) +
                        " outside [0, " + std::to_string(cfg.class_count) + ")");
    if (!box_valid(gt.box) || gt.box.x1 < 0.0 || gt.box.y1 < 0.0 ||
        gt.box.x2 > cfg.image_width || gt.box.y2 > cfg.image_height)
      throw ConfigError("detection_loss: ground-truth box outside image for '" +
                        gt.image_id + "'");
    const double cx = (gt.box.x1 + gt.box.x2) / 2.0;
    const double cy = (gt.box.y1 + gt.box.y2) / 2.0;
    SlotRef best;
    double best_iou = -1.0;
    for (std::size_t li = 0; li < cfg.levels.size(); ++li) {
      for (std::size_t a = 0; a < cfg.levels[li].anchors.size(); ++a) {
        const AnchorShape& an = cfg.levels[li].anchors[a];
        const Box anchor_box{cx - an.w / 2.0, cy - an.h / 2.0, cx + an.w / 2.0,
                             cy + an.h / 2.0};
        const double ov = iou(anchor_box, gt.box);
        if (ov > best_iou) {
          best_iou = ov;
          best = SlotRef{g, static_cast<int>(li), static_cast<int>(a), 0, 0};
        }
      }
    }
    const double stride = cfg.levels[best.level].stride;
    best.cx = std::clamp(static_cast<int>(cx / stride), 0, cfg.grid_width(best.level) - 1);
    best.cy = std::clamp(static_cast<int>(cy / stride), 0, cfg.grid_height(best.level) - 1);
    out.push_back(best);
  }
  return out;
}

struct SlotDecode {
  Box box;  // clipped
  // Partials of the clipped corners with respect to the raw channels.
  double dx1_dtx = 0, dx1_dtw = 0, dx2_dtx = 0, dx2_dtw = 0;
  double dy1_dty = 0, dy1_dth = 0, dy2_dty = 0, dy2_dth = 0;
};

SlotDecode decode_slot(const LevelGrid& grid, const AnchorConfig& cfg, int level, int anchor,
                       int cy, int cx) {
  const double stride = cfg.levels[level].stride;
  const AnchorShape& an = cfg.levels[level].anchors[anchor];
  const double tx = grid.at(anchor, cy, cx, 0);
  const double ty = grid.at(anchor, cy, cx, 1);
  const double tw = grid.at(anchor, cy, cx, 2);
  const double th = grid.at(anchor, cy, cx, 3);
  const double sx = sigmoid(tx), sy = sigmoid(ty), sw = sigmoid(tw), sh = sigmoid(th);
  const double bx = (2.0 * sx - 0.5 + cx) * stride;
  const double by = (2.0 * sy - 0.5 + cy) * stride;
  const double bw = 4.0 * sw * sw * an.w;
  const double bh = 4.0 * sh * sh * an.h;
  const double dbx_dtx = 2.0 * sx * (1.0 - sx) * stride;
  const double dby_dty = 2.0 * sy * (1.0 - sy) * stride;
  const double dbw_dtw = 8.0 * sw * sw * (1.0 - sw) * an.w;
  const double dbh_dth = 8.0 * sh * sh * (1.0 - sh) * an.h;

  const double W = cfg.image_width, H = cfg.image_height;
  const double x1 = bx - bw / 2.0, x2 = bx + bw / 2.0;
  const double y1 = by - bh / 2.0, y2 = by + bh / 2.0;
  SlotDecode d;
  d.box = Box{std::clamp(x1, 0.0, W), std::clamp(y1, 0.0, H), std::clamp(x2, 0.0, W),
              std::clamp(y2, 0.0, H)};
  const double gx1 = (x1 > 0.0 && x1 < W) ? 1.0 : 0.0;
  const double gx2 = (x2 > 0.0 && x2 < W) ? 1.0 : 0.0;
  const double gy1 = (y1 > 0.0 && y1 < H) ? 1.0 : 0.0;
  const double gy2 = (y2 > 0.0 && y2 < H) ? 1.0 : 0.0;
  d.dx1_dtx = gx1 * dbx_dtx;
  d.dx1_dtw = gx1 * (-dbw_dtw / 2.0);
  d.dx2_dtx = gx2 * dbx_dtx;
  d.dx2_dtw = gx2 * (dbw_dtw / 2.0);
  d.dy1_dty = gy1 * dby_dty;
  d.dy1_dth = gy1 * (-dbh_dth / 2.0);
  d.dy2_dty = gy2 * dby_dty;
  d.dy2_dth = gy2 * (dbh_dth / 2.0);
  return d;
}

// d(iou)/d(corners of a) against fixed box b; zero when disjoint.
std::array<double, 4> iou_grad(const Box& a, const Box& b) {
  std::array<double, 4> grad{0.0, 0.0, 0.0, 0.0};
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return grad;
  const double inter = iw * ih;
  const double area_a = area(a);
  const double uni = area_a + area(b) - inter;
  if (uni <= 0.0) return grad;

  const double di_dax1 = (a.x1 > b.x1) ? -ih : 0.0;
  const double di_dax2 = (a.x2 < b.x2) ? ih : 0.0;
  const double di_day1 = (a.y1 > b.y1) ? -iw : 0.0;
  const double di_day2 = (a.y2 < b.y2) ? iw : 0.0;
  const double da_dax1 = -(a.y2 - a.y1);
  const double da_dax2 = a.y2 - a.y1;
  const double da_day1 = -(a.x2 - a.x1);
  const double da_day2 = a.x2 - a.x1;
  const auto d = [&](double di, double da) {
    const double du = da - di;
    return (di * uni - inter * du) / (uni * uni);
  };
  grad[0] = d(di_dax1, da_dax1);
  grad[1] = d(di_day1, da_day1);
  grad[2] = d(di_dax2, da_dax2);
  grad[3] = d(di_day2, da_day2);
  return grad;
}

double bce(double p, double y) {
  return -(y * safe_log(p) + (1.0 - y) * safe_log(1.0 - p));
}

// d(bce(sigmoid(t), y))/dt.
double bce_logit_grad(double t, double y) {
  const double p = sigmoid(t);
  const double dbce_dp = -y / (p + kLogEps) + (1.0 - y) / (1.0 - p + kLogEps);
  return dbce_dp * p * (1.0 - p);
}

// Per-expert detection loss; when `d_tensor` is non-null, accumulates the
// gradient with respect to that expert's (weighted) raw tensor.
double detection_loss_expert(const RawPredictionTensor& weighted,
                             const std::vector<GroundTruth>& gts,
                             const std::vector<SlotRef>& assignments, const AnchorConfig& cfg,
                             RawPredictionTensor* d_tensor) {
  const int C = cfg.class_count;
  std::size_t total_slots = 0;
  for (const LevelGrid& lvl : weighted.levels)
    total_slots += static_cast<std::size_t>(lvl.anchors) * lvl.height * lvl.width;

  // Objectness targets: 1 on assigned slots.
  std::vector<std::vector<char>> positive(weighted.levels.size());
  for (std::size_t li = 0; li < weighted.levels.size(); ++li)
    positive[li].assign(static_cast<std::size_t>(weighted.levels[li].anchors) *
                            weighted.levels[li].height * weighted.levels[li].width,
                        0);
  auto slot_offset = [&](const SlotRef& s) {
    const LevelGrid& lvl = weighted.levels[s.level];
    return static_cast<std::size_t>((s.anchor * lvl.height + s.cy) * lvl.width + s.cx);
  };
  for (const SlotRef& s : assignments) positive[s.level][slot_offset(s)] = 1;

  const double n_gt = static_cast<double>(assignments.size());
  double box_term = 0.0, cls_term = 0.0;
  for (const SlotRef& s : assignments) {
    const LevelGrid& lvl = weighted.levels[s.level];
    const SlotDecode dec = decode_slot(lvl, cfg, s.level, s.anchor, s.cy, s.cx);
    const GroundTruth& gt = gts[s.gt];
    box_term += 1.0 - iou(dec.box, gt.box);
    for (int k = 0; k < C; ++k) {
      const double y = gt.class_id == k ? 1.0 : 0.0;
      cls_term += bce(sigmoid(lvl.at(s.anchor, s.cy, s.cx, 5 + k)), y) / C;
    }
    if (d_tensor != nullptr) {
      LevelGrid& dl = d_tensor->levels[s.level];
      const std::array<double, 4> gi = iou_grad(dec.box, gt.box);
      const double f = -1.0 / n_gt;  // d(1 - iou)/d(corner), averaged
      dl.at(s.anchor, s.cy, s.cx, 0) += f * (gi[0] * dec.dx1_dtx + gi[2] * dec.dx2_dtx);
      dl.at(s.anchor, s.cy, s.cx, 1) += f * (gi[1] * dec.dy1_dty + gi[3] * dec.dy2_dty);
      dl.at(s.anchor, s.cy, s.cx, 2) += f * (gi[0] * dec.dx1_dtw + gi[2] * dec.dx2_dtw);
      dl.at(s.anchor, s.cy, s.cx, 3) += f * (gi[1] * dec.dy1_dth + gi[3] * dec.dy2_dth);
      for (int k = 0; k < C; ++k) {
        const double y = gt.class_id == k ? 1.0 : 0.0;
        dl.at(s.anchor, s.cy, s.cx, 5 + k) +=
            bce_logit_grad(lvl.at(s.anchor, s.cy, s.cx, 5 + k), y) / (C * n_gt);
      }
    }
  }

  double obj_term = 0.0;
  for (std::size_t li = 0; li < weighted.levels.size(); ++li) {
    const LevelGrid& lvl = weighted.levels[li];
    std::size_t flat = 0;
    for (int a = 0; a < lvl.anchors; ++a) {
      for (int y = 0; y < lvl.height; ++y) {
        for (int x = 0; x < lvl.width; ++x, ++flat) {
          const double target = positive[li][flat] ? 1.0 : 0.0;
          obj_term += bce(sigmoid(lvl.at(a, y, x, 4)), target);
          if (d_tensor != nullptr)
            d_tensor->levels[li].at(a, y, x, 4) +=
                bce_logit_grad(lvl.at(a, y, x, 4), target) / static_cast<double>(total_slots);
        }
      }
    }
  }

  const double box_mean = assignments.empty() ? 0.0 : box_term / n_gt;
  const double cls_mean = assignments.empty() ? 0.0 : cls_term / n_gt;
  const double obj_mean = obj_term / static_cast<double>(total_slots);
  return box_mean + obj_mean + cls_mean;
}

RawPredictionTensor zero_like(const RawPredictionTensor& t) {
  RawPredictionTensor z = t;
  for (LevelGrid& lvl : z.levels) std::fill(lvl.data.begin(), lvl.data.end(), 0.0);
  return z;
}

}  // namespace

double detection_loss(const std::vector<RawPredictionTensor>& weighted_raws,
                      const std::vector<GroundTruth>& gts, const AnchorConfig& cfg) {
  if (weighted_raws.empty()) throw std::invalid_argument("detection_loss: no expert tensors");
  validate(cfg);
  const std::vector<SlotRef> assignments = assign_anchors(gts, cfg);
  double sum = 0.0;
  for (const RawPredictionTensor& t : weighted_raws)
    sum += detection_loss_expert(t, gts, assignments, cfg, nullptr);
  return sum / static_cast<double>(weighted_raws.size());
}

// ---------------------------------------------------------------------------
// Batch objective and analytic gradient.

namespace {

GateOutput zero_output_like(const GateOutput& out) {
  GateOutput z = out;
  std::fill(z.single.begin(), z.single.end(), 0.0);
  std::fill(z.spatial.begin(), z.spatial.end(), 0.0);
  std::fill(z.classwise.begin(), z.classwise.end(), 0.0);
  return z;
}

// Adds `scale * d/d(mean weights)` to a mode-shaped output gradient; the mean
// over cells/heads distributes uniformly.
void add_mean_weight_grad(GateOutput& d_out, const std::vector<double>& d_mean, double scale) {
  const int n = d_out.expert_count;
  switch (d_out.mode) {
    case GateMode::single:
      for (int i = 0; i < n; ++i) d_out.single[i] += scale * d_mean[i];
      break;
    case GateMode::spatial: {
      const int cells = d_out.grid_h * d_out.grid_w;
      const double f = scale / cells;
      for (int c = 0; c < cells; ++c)
        for (int i = 0; i < n; ++i)
          d_out.spatial[static_cast<std::size_t>(c) * n + i] += f * d_mean[i];
      break;
    }
    case GateMode::classwise: {
      const int heads = d_out.class_count + 1;
      const double f = scale / heads;
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < n; ++i)
          d_out.classwise[static_cast<std::size_t>(h) * n + i] += f * d_mean[i];
      break;
    }
  }
}

// d(balancing loss)/d(importance vector).
std::vector<double> balancing_importance_grad(Balancing b, const std::vector<double>& I) {
  const int n = static_cast<int>(I.size());
  std::vector<double> grad(n, 0.0);
  double S = 0.0;
  for (double v : I) S += v;
  switch (b) {
    case Balancing::importance: {
      const double mean = S / n;
      double var = 0.0;
      for (double v : I) var += (v - mean) * (v - mean);
      var /= n;
      for (int j = 0; j < n; ++j)
        grad[j] = 2.0 * (I[j] - mean) / (n * mean * mean) -
                  2.0 * var / (mean * mean * mean * n);
      break;
    }
    case Balancing::kl:
    case Balancing::batch_entropy: {
      // L = sum_i p_i (ln(p_i + eps) + ln n), p = I / S.
      std::vector<double> gp(n);
      double mix = 0.0;
      const double ln_n = std::log(static_cast<double>(n));
      for (int i = 0; i < n; ++i) {
        const double p = I[i] / S;
        gp[i] = safe_log(p) + ln_n + p / (p + kLogEps);
        mix += p * gp[i];
      }
      for (int j = 0; j < n; ++j) grad[j] = (gp[j] - mix) / S;
      break;
    }
    case Balancing::none:
    case Balancing::sample_entropy: break;
  }
  return grad;
}

struct BatchContext {
  std::vector<const FeatureMap*> features;
  std::vector<GateOutput> outputs;
  std::vector<std::vector<double>> mean_w;
  detail::BatchTrace trace;
};

void forward_batch(const GateParams& params, const std::vector<const TrainSample*>& batch,
                   BatchContext& ctx) {
  if (batch.empty()) throw ConfigError("training: empty batch");
  ctx.features.clear();
  for (const TrainSample* s : batch) ctx.features.push_back(&s->features);
  detail::gate_forward_batch(params, ctx.features, /*training=*/true, ctx.trace);
  ctx.outputs.clear();
  ctx.mean_w.clear();
  for (const detail::SampleTrace& t : ctx.trace.samples) {
    ctx.outputs.push_back(t.output);
    ctx.mean_w.push_back(t.output.mean_weights());
  }
}

// Task loss plus (optionally) per-sample output gradients.
double task_loss_and_grad(const GateParams& params,
                          const std::vector<const TrainSample*>& batch, const TrainConfig& cfg,
                          const AnchorConfig* anchors, const BatchContext& ctx,
                          std::vector<GateOutput>* d_outputs) {
  const std::size_t B = batch.size();
  if (cfg.loss_mode == LossMode::domain_ce) {
    std::vector<int> labels;
    for (const TrainSample* s : batch) labels.push_back(s->domain_label);
    const double loss = domain_ce_loss(ctx.outputs, labels);
    if (d_outputs != nullptr) {
      for (std::size_t s = 0; s < B; ++s) {
        std::vector<double> d_mean(params.expert_count, 0.0);
        d_mean[labels[s]] =
            -1.0 / ((ctx.mean_w[s][labels[s]] + kLogEps) * static_cast<double>(B));
        add_mean_weight_grad((*d_outputs)[s], d_mean, 1.0);
      }
    }
    return loss;
  }

  // Detection loss through the weighted tensors.
  if (anchors == nullptr)
    throw ConfigError("training: detection loss requires an anchor configuration");
  double total = 0.0;
  for (std::size_t s = 0; s < B; ++s) {
    const TrainSample& sample = *batch[s];
    if (static_cast<int>(sample.raws.size()) != params.expert_count)
      throw ConfigError("training: sample '" + sample.image_id + "' has " +
                        std::to_string(sample.raws.size()) + " raw tensors for " +
                        std::to_string(params.expert_count) + " experts");
    const std::vector<RawPredictionTensor> weighted =
        apply_expert_weights(sample.raws, ctx.outputs[s], *anchors);
    const std::vector<SlotRef> assignments = assign_anchors(sample.gts, *anchors);
    const double inv_experts = 1.0 / static_cast<double>(weighted.size());
    double sample_loss = 0.0;
    for (std::size_t e = 0; e < weighted.size(); ++e) {
      if (d_outputs == nullptr) {
        sample_loss += detection_loss_expert(weighted[e], sample.gts, assignments, *anchors,
                                             nullptr);
        continue;
      }
      RawPredictionTensor d_tensor = zero_like(weighted[e]);
      sample_loss +=
          detection_loss_expert(weighted[e], sample.gts, assignments, *anchors, &d_tensor);
      // Chain rule through y~ = w * y: contract dL/dy~ with the raw tensor.
      const double scale = inv_experts / static_cast<double>(B);
      GateOutput& d_out = (*d_outputs)[s];
      const RawPredictionTensor& raw = sample.raws[e];
      switch (ctx.outputs[s].mode) {
        case GateMode::single: {
          double acc = 0.0;
          for (std::size_t li = 0; li < raw.levels.size(); ++li)
            for (std::size_t k = 0; k < raw.levels[li].data.size(); ++k)
              acc += d_tensor.levels[li].data[k] * raw.levels[li].data[k];
          d_out.single[e] += scale * acc;
          break;
        }
        case GateMode::spatial: {
          for (std::size_t li = 0; li < raw.levels.size(); ++li) {
            const LevelGrid& lvl = raw.levels[li];
            std::vector<double> cell_grad(static_cast<std::size_t>(lvl.height) * lvl.width,
                                          0.0);
            for (int a = 0; a < lvl.anchors; ++a)
              for (int y = 0; y < lvl.height; ++y)
                for (int x = 0; x < lvl.width; ++x)
                  for (int c = 0; c < lvl.channels; ++c)
                    cell_grad[static_cast<std::size_t>(y) * lvl.width + x] +=
                        d_tensor.levels[li].at(a, y, x, c) * lvl.at(a, y, x, c);
            // Expand to per-cell vectors over experts (only expert e nonzero),
            // then pull back through the resampling.
            std::vector<double> d_resampled(
                static_cast<std::size_t>(lvl.height) * lvl.width * params.expert_count, 0.0);
            for (std::size_t c = 0; c < cell_grad.size(); ++c)
              d_resampled[c * params.expert_count + e] = cell_grad[c];
            const std::vector<double> d_grid = detail::bilinear_resample_adjoint(
                d_resampled, lvl.height, lvl.width, params.expert_count,
                ctx.outputs[s].grid_h, ctx.outputs[s].grid_w);
            for (std::size_t k = 0; k < d_grid.size(); ++k)
              d_out.spatial[k] += scale * d_grid[k];
          }
          break;
        }
        case GateMode::classwise: {
          const int shared = ctx.outputs[s].class_count;
          double shared_acc = 0.0;
          std::vector<double> class_acc(ctx.outputs[s].class_count, 0.0);
          for (std::size_t li = 0; li < raw.levels.size(); ++li) {
            const LevelGrid& lvl = raw.levels[li];
            for (int a = 0; a < lvl.anchors; ++a) {
              for (int y = 0; y < lvl.height; ++y) {
                for (int x = 0; x < lvl.width; ++x) {
                  for (int c = 0; c < 5; ++c)
                    shared_acc += d_tensor.levels[li].at(a, y, x, c) * lvl.at(a, y, x, c);
                  for (int k = 0; k < ctx.outputs[s].class_count; ++k)
                    class_acc[k] +=
                        d_tensor.levels[li].at(a, y, x, 5 + k) * lvl.at(a, y, x, 5 + k);
                }
              }
            }
          }
          d_out.classwise_at(shared, static_cast<int>(e)) += scale * shared_acc;
          for (int k = 0; k < ctx.outputs[s].class_count; ++k)
            d_out.classwise_at(k, static_cast<int>(e)) += scale * class_acc[k];
          break;
        }
      }
    }
    total += sample_loss * inv_experts;
  }
  return total / static_cast<double>(B);
}

double balancing_loss_and_grad(const TrainConfig& cfg, const BatchContext& ctx,
                               std::vector<double>& importance_out,
                               std::vector<GateOutput>* d_outputs, double lambda) {
  const std::size_t B = ctx.outputs.size();
  const int n = ctx.outputs.front().expert_count;
  importance_out.assign(n, 0.0);
  for (const std::vector<double>& w : ctx.mean_w)
    for (int i = 0; i < n; ++i) importance_out[i] += w[i];

  double loss = 0.0;
  switch (cfg.balancing) {
    case Balancing::none: return 0.0;
    case Balancing::importance: loss = importance_loss(importance_out); break;
    case Balancing::kl: loss = kl_uniform_loss(importance_out); break;
    case Balancing::batch_entropy: loss = batch_entropy_loss(importance_out); break;
    case Balancing::sample_entropy: loss = samplewise_entropy_loss(ctx.outputs); break;
  }
  if (d_outputs == nullptr || lambda == 0.0) return loss;

  if (cfg.balancing == Balancing::sample_entropy) {
    for (std::size_t s = 0; s < B; ++s) {
      std::vector<double> d_mean(n);
      for (int i = 0; i < n; ++i) {
        const double w = ctx.mean_w[s][i];
        d_mean[i] = (safe_log(w) + w / (w + kLogEps)) / static_cast<double>(B);
      }
      add_mean_weight_grad((*d_outputs)[s], d_mean, lambda);
    }
  } else {
    const std::vector<double> d_importance =
        balancing_importance_grad(cfg.balancing, importance_out);
    for (std::size_t s = 0; s < B; ++s)
      add_mean_weight_grad((*d_outputs)[s], d_importance, lambda);
  }
  return loss;
}

BatchLoss batch_losses(const GateParams& params, const std::vector<const TrainSample*>& batch,
                       const TrainConfig& cfg, const AnchorConfig* anchors, BatchContext& ctx,
                       std::vector<GateOutput>* d_outputs) {
  forward_batch(params, batch, ctx);
  if (d_outputs != nullptr) {
    d_outputs->clear();
    for (const GateOutput& out : ctx.outputs) d_outputs->push_back(zero_output_like(out));
  }
  BatchLoss result;
  result.task = task_loss_and_grad(params, batch, cfg, anchors, ctx, d_outputs);
  result.balancing =
      balancing_loss_and_grad(cfg, ctx, result.importance, d_outputs, cfg.lambda);
  result.total = total_loss(result.task, result.balancing, cfg.lambda);
  return result;
}

}  // namespace

BatchLoss batch_loss(const GateParams& params, const std::vector<const TrainSample*>& batch,
                     const TrainConfig& cfg, const AnchorConfig* anchors) {
  BatchContext ctx;
  return batch_losses(params, batch, cfg, anchors, ctx, nullptr);
}

BatchLoss gate_gradient(const GateParams& params, const std::vector<const TrainSample*>& batch,
                        const TrainConfig& cfg, const AnchorConfig* anchors, GateParams& grad) {
  BatchContext ctx;
  std::vector<GateOutput> d_outputs;
  const BatchLoss result = batch_losses(params, batch, cfg, anchors, ctx, &d_outputs);
  detail::gate_backward_batch(params, ctx.features, ctx.trace, d_outputs, grad);
  return result;
}

TrainResult train_gate(const GateParams& init, const std::vector<TrainSample>& dataset,
                       const TrainConfig& cfg, const AnchorConfig* anchors) {
  if (dataset.empty()) throw ConfigError("train_gate: empty dataset");
  if (cfg.batch_size < 1 || cfg.epochs < 1)
    throw ConfigError("train_gate: batch_size and epochs must be >= 1");

  TrainResult result;
  result.params = init;
  GateParams velocity = zeros_like(init);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double lambda = cfg.lambda;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.lambda = lambda;
    metrics.importance.assign(init.expert_count, 0.0);
    double task_sum = 0.0, bal_sum = 0.0;
    std::size_t seen = 0;
    int batch_index = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const TrainSample*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&dataset[order[k]]);

      TrainConfig step_cfg = cfg;
      step_cfg.lambda = lambda;
      GateParams grad = zeros_like(result.params);
      BatchContext ctx;
      std::vector<GateOutput> d_outputs;
      const BatchLoss bl = batch_losses(result.params, batch, step_cfg, anchors, ctx, &d_outputs);
      if (!std::isfinite(bl.total))
        throw std::runtime_error("train_gate: non-finite loss at epoch " +
                                 std::to_string(epoch) + " batch " +
                                 std::to_string(batch_index));
      detail::gate_backward_batch(result.params, ctx.features, ctx.trace, d_outputs, grad);

      // SGD with momentum: v = mu v + g, p -= lr v.
      std::vector<std::vector<double>*> pv, vv, gv;
      visit_params(result.params, [&](std::vector<double>& v) { pv.push_back(&v); });
      visit_params(velocity, [&](std::vector<double>& v) { vv.push_back(&v); });
      visit_params(grad, [&](std::vector<double>& v) { gv.push_back(&v); });
      for (std::size_t t = 0; t < pv.size(); ++t) {
        for (std::size_t k = 0; k < pv[t]->size(); ++k) {
          (*vv[t])[k] = cfg.momentum * (*vv[t])[k] + (*gv[t])[k];
          (*pv[t])[k] -= cfg.learning_rate * (*vv[t])[k];
        }
      }

      // Batch-norm running statistics, momentum 0.1.
      if (result.params.arch == GateArch::conv2_fc2) {
        const double m = GateParams::kBnMomentum;
        for (int c = 0; c < result.params.bn1.channels; ++c) {
          result.params.bn1.running_mean[c] =
              (1.0 - m) * result.params.bn1.running_mean[c] + m * ctx.trace.bn1.mean[c];
          result.params.bn1.running_var[c] =
              (1.0 - m) * result.params.bn1.running_var[c] + m * ctx.trace.bn1.var[c];
        }
        for (int c = 0; c < result.params.bn2.channels; ++c) {
          result.params.bn2.running_mean[c] =
              (1.0 - m) * result.params.bn2.running_mean[c] + m * ctx.trace.bn2.mean[c];
          result.params.bn2.running_var[c] =
              (1.0 - m) * result.params.bn2.running_var[c] + m * ctx.trace.bn2.var[c];
        }
      }

      const std::size_t batch_n = end - start;
      task_sum += bl.task * static_cast<double>(batch_n);
      bal_sum += bl.balancing * static_cast<double>(batch_n);
      seen += batch_n;
      for (int i = 0; i < init.expert_count; ++i) metrics.importance[i] += bl.importance[i];
    }

    metrics.task_loss = task_sum / static_cast<double>(seen);
    metrics.balancing_loss = bal_sum / static_cast<double>(seen);
    result.epochs.push_back(std::move(metrics));
    lambda *= cfg.lambda_decay;
  }
  return result;
}

}  // namespace moedet

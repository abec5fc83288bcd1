#include "moedet/gate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gate_forward.hpp"
#include "moedet/errors.hpp"
#include "moedet/rng.hpp"

namespace moedet {

Volume Volume::zeros(int c, int h, int w) {
  Volume v;
  v.channels = c;
  v.height = h;
  v.width = w;
  v.data.assign(static_cast<std::size_t>(c) * h * w, 0.0);
  return v;
}

GateArch parse_gate_arch(const std::string& name) {
  if (name == "fc1") return GateArch::fc1;
  if (name == "fc2") return GateArch::fc2;
  if (name == "conv_fc2") return GateArch::conv_fc2;
  if (name == "conv2_fc2") return GateArch::conv2_fc2;
  throw ConfigError("unknown gate architecture: " + name);
}

std::string gate_arch_name(GateArch a) {
  switch (a) {
    case GateArch::fc1: return "fc1";
    case GateArch::fc2: return "fc2";
    case GateArch::conv_fc2: return "conv_fc2";
    case GateArch::conv2_fc2: return "conv2_fc2";
  }
  return "?";
}

GateMode parse_gate_mode(const std::string& name) {
  if (name == "single") return GateMode::single;
  if (name == "spatial") return GateMode::spatial;
  if (name == "classwise") return GateMode::classwise;
  throw ConfigError("unknown gate mode: " + name);
}

std::string gate_mode_name(GateMode m) {
  switch (m) {
    case GateMode::single: return "single";
    case GateMode::spatial: return "spatial";
    case GateMode::classwise: return "classwise";
  }
  return "?";
}

namespace {

void xavier_fill(std::vector<double>& w, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : w) v = rng.uniform(-limit, limit);
}

DenseLayer make_dense(int out_dim, int in_dim, Rng& rng) {
  DenseLayer l;
  l.out_dim = out_dim;
  l.in_dim = in_dim;
  l.w.assign(static_cast<std::size_t>(out_dim) * in_dim, 0.0);
  l.b.assign(out_dim, 0.0);
  xavier_fill(l.w, in_dim, out_dim, rng);
  return l;
}

ConvLayer make_conv(int out_c, int in_c, int kernel, Rng& rng) {
  ConvLayer l;
  l.out_c = out_c;
  l.in_c = in_c;
  l.kernel = kernel;
  l.w.assign(static_cast<std::size_t>(out_c) * in_c * kernel * kernel, 0.0);
  l.b.assign(out_c, 0.0);
  xavier_fill(l.w, in_c * kernel * kernel, out_c * kernel * kernel, rng);
  return l;
}

BatchNormLayer make_bn(int channels) {
  BatchNormLayer l;
  l.channels = channels;
  l.gamma.assign(channels, 1.0);
  l.beta.assign(channels, 0.0);
  l.running_mean.assign(channels, 0.0);
  l.running_var.assign(channels, 1.0);
  return l;
}

}  // namespace

GateParams init_gate_params(GateArch arch, GateMode mode, int expert_count, int in_channels,
                            int conv_channels, int hidden_dim, int class_count,
                            std::uint64_t seed) {
  if (expert_count < 2) throw ConfigError("gate: expert_count must be >= 2");
  if (in_channels < 1) throw ConfigError("gate: in_channels must be >= 1");
  if (mode == GateMode::classwise && class_count < 1)
    throw ConfigError("gate: classwise mode requires class_count");
  Rng rng(seed);
  GateParams p;
  p.arch = arch;
  p.mode = mode;
  p.expert_count = expert_count;
  p.class_count = mode == GateMode::classwise ? class_count : 0;
  p.in_channels = in_channels;
  p.hidden_dim = hidden_dim;
  const bool has_conv = arch == GateArch::conv_fc2 || arch == GateArch::conv2_fc2;
  p.conv_channels = has_conv ? conv_channels : 0;
  if (has_conv) {
    if (conv_channels < 1) throw ConfigError("gate: conv_channels must be >= 1");
    p.conv1 = make_conv(conv_channels, in_channels, 1, rng);
  }
  if (arch == GateArch::conv2_fc2) {
    p.bn1 = make_bn(conv_channels);
    p.conv2 = make_conv(conv_channels, conv_channels, 3, rng);
    p.bn2 = make_bn(conv_channels);
  }
  const int trunk_dim = has_conv ? conv_channels : in_channels;
  const int head_count = mode == GateMode::classwise ? class_count + 1 : 1;
  for (int h = 0; h < head_count; ++h) {
    GateHead head;
    if (arch == GateArch::fc1) {
      head.out = make_dense(expert_count, trunk_dim, rng);
    } else {
      if (hidden_dim < 1) throw ConfigError("gate: hidden_dim must be >= 1");
      head.hidden = make_dense(hidden_dim, trunk_dim, rng);
      head.out = make_dense(expert_count, hidden_dim, rng);
    }
    p.heads.push_back(std::move(head));
  }
  return p;
}

GateParams zeros_like(const GateParams& p) {
  GateParams z = p;
  visit_params(z, [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); });
  // Running statistics are state, not gradients.
  std::fill(z.bn1.running_mean.begin(), z.bn1.running_mean.end(), 0.0);
  std::fill(z.bn1.running_var.begin(), z.bn1.running_var.end(), 0.0);
  std::fill(z.bn2.running_mean.begin(), z.bn2.running_mean.end(), 0.0);
  std::fill(z.bn2.running_var.begin(), z.bn2.running_var.end(), 0.0);
  return z;
}

std::vector<double> GateOutput::mean_weights() const {
  switch (mode) {
    case GateMode::single: return single;
    case GateMode::spatial: {
      std::vector<double> m(expert_count, 0.0);
      const int cells = grid_h * grid_w;
      for (int c = 0; c < cells; ++c)
        for (int i = 0; i < expert_count; ++i)
          m[i] += spatial[static_cast<std::size_t>(c) * expert_count + i];
      for (double& v : m) v /= cells;
      return m;
    }
    case GateMode::classwise: {
      std::vector<double> m(expert_count, 0.0);
      const int heads = class_count + 1;
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < expert_count; ++i) m[i] += classwise_at(h, i);
      for (double& v : m) v /= heads;
      return m;
    }
  }
  return {};
}

std::vector<double> softmax(const std::vector<double>& logits) {
  std::vector<double> out(logits.size());
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

GateOutput gate_forward(const GateParams& params, const FeatureMap& features, bool training) {
  detail::BatchTrace trace;
  detail::gate_forward_batch(params, {&features}, training, trace);
  return std::move(trace.samples[0].output);
}

GateOutput fixed_weight_output(const std::vector<double>& weights, int expert_count) {
  if (static_cast<int>(weights.size()) != expert_count)
    throw ConfigError("fixed_weight_output: got " + std::to_string(weights.size()) +
                      " weights for " + std::to_string(expert_count) + " experts");
  GateOutput out;
  out.mode = GateMode::single;
  out.expert_count = expert_count;
  out.single = weights;
  return out;
}

std::vector<double> bilinear_resample(const std::vector<double>& grid, int grid_h, int grid_w,
                                      int vec_dim, int target_h, int target_w) {
  std::vector<double> out(static_cast<std::size_t>(target_h) * target_w * vec_dim, 0.0);
  for (int oy = 0; oy < target_h; ++oy) {
    const double sy = (oy + 0.5) * static_cast<double>(grid_h) / target_h - 0.5;
    const int y0 = static_cast<int>(std::floor(sy));
    const double fy = sy - y0;
    const int y0c = std::clamp(y0, 0, grid_h - 1);
    const int y1c = std::clamp(y0 + 1, 0, grid_h - 1);
    for (int ox = 0; ox < target_w; ++ox) {
      const double sx = (ox + 0.5) * static_cast<double>(grid_w) / target_w - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const double fx = sx - x0;
      const int x0c = std::clamp(x0, 0, grid_w - 1);
      const int x1c = std::clamp(x0 + 1, 0, grid_w - 1);
      double* dst = &out[static_cast<std::size_t>((oy * target_w + ox)) * vec_dim];
      const double w00 = (1.0 - fy) * (1.0 - fx);
      const double w01 = (1.0 - fy) * fx;
      const double w10 = fy * (1.0 - fx);
      const double w11 = fy * fx;
      for (int d = 0; d < vec_dim; ++d) {
        dst[d] = w00 * grid[static_cast<std::size_t>((y0c * grid_w + x0c)) * vec_dim + d] +
                 w01 * grid[static_cast<std::size_t>((y0c * grid_w + x1c)) * vec_dim + d] +
                 w10 * grid[static_cast<std::size_t>((y1c * grid_w + x0c)) * vec_dim + d] +
                 w11 * grid[static_cast<std::size_t>((y1c * grid_w + x1c)) * vec_dim + d];
      }
    }
  }
  return out;
}

std::vector<RawPredictionTensor> apply_expert_weights(
    const std::vector<RawPredictionTensor>& raws, const GateOutput& out,
    const AnchorConfig& cfg) {
  if (static_cast<int>(raws.size()) != out.expert_count)
    throw ConfigError("apply_expert_weights: " + std::to_string(raws.size()) +
                      " tensors for " + std::to_string(out.expert_count) + " expert weights");
  std::vector<RawPredictionTensor> weighted = raws;
  switch (out.mode) {
    case GateMode::single: {
      for (std::size_t i = 0; i < weighted.size(); ++i) {
        const double w = out.single[i];
        for (LevelGrid& lvl : weighted[i].levels)
          for (double& v : lvl.data) v *= w;
      }
      break;
    }
    case GateMode::spatial: {
      for (std::size_t i = 0; i < weighted.size(); ++i) {
        for (LevelGrid& lvl : weighted[i].levels) {
          const std::vector<double> w = bilinear_resample(
              out.spatial, out.grid_h, out.grid_w, out.expert_count, lvl.height, lvl.width);
          for (int y = 0; y < lvl.height; ++y) {
            for (int x = 0; x < lvl.width; ++x) {
              const double wi =
                  w[static_cast<std::size_t>((y * lvl.width + x)) * out.expert_count + i];
              for (int a = 0; a < lvl.anchors; ++a)
                for (int c = 0; c < lvl.channels; ++c) lvl.at(a, y, x, c) *= wi;
            }
          }
        }
      }
      break;
    }
    case GateMode::classwise: {
      if (out.class_count != cfg.class_count)
        throw ConfigError("apply_expert_weights: gate has " + std::to_string(out.class_count) +
                          " class heads, anchor config has " +
                          std::to_string(cfg.class_count) + " classes");
      const int shared = out.class_count;  // shared head is the last row
      for (std::size_t i = 0; i < weighted.size(); ++i) {
        const double w_shared = out.classwise_at(shared, static_cast<int>(i));
        for (LevelGrid& lvl : weighted[i].levels) {
          for (int a = 0; a < lvl.anchors; ++a) {
            for (int y = 0; y < lvl.height; ++y) {
              for (int x = 0; x < lvl.width; ++x) {
                for (int c = 0; c < 5; ++c) lvl.at(a, y, x, c) *= w_shared;
                for (int k = 0; k < out.class_count; ++k)
                  lvl.at(a, y, x, 5 + k) *= out.classwise_at(k, static_cast<int>(i));
              }
            }
          }
        }
      }
      break;
    }
  }
  return weighted;
}

}  // namespace moedet

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moedet/decode.hpp"

namespace moedet {

// Dense [C, H, W] volume, row-major.
struct Volume {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  static Volume zeros(int c, int h, int w);

  double& at(int c, int y, int x) {
    return data[static_cast<std::size_t>((c * height + y)) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[static_cast<std::size_t>((c * height + y)) * width + x];
  }
};

// Concatenated expert feature maps, the gate input. `expert_ids` lists the
// experts whose equal channel shares compose `data.channels`; `provenance`
// names the extraction layer (e.g. "backbone-last").
struct FeatureMap {
  std::string image_id;
  std::string provenance;
  std::vector<std::string> expert_ids;
  Volume data;
};

enum class GateArch { fc1, fc2, conv_fc2, conv2_fc2 };
enum class GateMode { single, spatial, classwise };

GateArch parse_gate_arch(const std::string& name);
std::string gate_arch_name(GateArch a);
GateMode parse_gate_mode(const std::string& name);
std::string gate_mode_name(GateMode m);

// Row-major weight matrix [out_dim, in_dim] plus bias.
struct DenseLayer {
  int out_dim = 0;
  int in_dim = 0;
  std::vector<double> w;
  std::vector<double> b;
};

// Square kernel [out_c, in_c, k, k] plus bias; stride 1, zero padding k/2.
struct ConvLayer {
  int out_c = 0;
  int in_c = 0;
  int kernel = 1;
  std::vector<double> w;
  std::vector<double> b;
};

struct BatchNormLayer {
  int channels = 0;
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

// One softmax head: optional hidden FC + ReLU, then the output FC.
// fc1 has no hidden layer (hidden.out_dim == 0).
struct GateHead {
  DenseLayer hidden;
  DenseLayer out;
};

// The gating network G. Heads: one for single/spatial mode; class_count + 1
// for classwise mode with the shared coordinates/objectness head last.
struct GateParams {
  GateArch arch = GateArch::conv_fc2;
  GateMode mode = GateMode::single;
  int expert_count = 2;
  int class_count = 0;
  int in_channels = 0;
  int conv_channels = 0;
  int hidden_dim = 512;
  std::vector<std::string> expert_ids;
  ConvLayer conv1;
  ConvLayer conv2;
  BatchNormLayer bn1;
  BatchNormLayer bn2;
  std::vector<GateHead> heads;

  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;
};

// Allocates consistently shaped parameters, Xavier-uniform weights and zero
// biases, deterministic per seed. class_count is only used in classwise mode.
GateParams init_gate_params(GateArch arch, GateMode mode, int expert_count, int in_channels,
                            int conv_channels, int hidden_dim, int class_count,
                            std::uint64_t seed);

GateParams zeros_like(const GateParams& p);

// Enumerates the trainable parameter vectors (conv/FC weights and biases,
// batch-norm scale/shift; running statistics excluded).
template <typename Fn>
void visit_params(GateParams& p, Fn&& fn) {
  if (p.arch == GateArch::conv_fc2 || p.arch == GateArch::conv2_fc2) {
    fn(p.conv1.w);
    fn(p.conv1.b);
  }
  if (p.arch == GateArch::conv2_fc2) {
    fn(p.bn1.gamma);
    fn(p.bn1.beta);
    fn(p.conv2.w);
    fn(p.conv2.b);
    fn(p.bn2.gamma);
    fn(p.bn2.beta);
  }
  for (GateHead& h : p.heads) {
    if (h.hidden.out_dim > 0) {
      fn(h.hidden.w);
      fn(h.hidden.b);
    }
    fn(h.out.w);
    fn(h.out.b);
  }
}

// Per-image expert weights predicted by the gate. Exactly one of the payloads
// is populated, matching `mode`.
struct GateOutput {
  GateMode mode = GateMode::single;
  int expert_count = 0;
  std::vector<double> single;  // [n]
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> spatial;  // [H, W, n] row-major
  int class_count = 0;
  std::vector<double> classwise;  // [class_count + 1, n], shared row last

  double& spatial_at(int y, int x, int i) {
    return spatial[static_cast<std::size_t>((y * grid_w + x)) * expert_count + i];
  }
  double spatial_at(int y, int x, int i) const {
    return spatial[static_cast<std::size_t>((y * grid_w + x)) * expert_count + i];
  }
  double& classwise_at(int head, int i) {
    return classwise[static_cast<std::size_t>(head) * expert_count + i];
  }
  double classwise_at(int head, int i) const {
    return classwise[static_cast<std::size_t>(head) * expert_count + i];
  }

  // Mean weight vector over cells (spatial) or heads (classwise); identity for
  // single mode. Used by routing summaries and batch-level balancing.
  std::vector<double> mean_weights() const;
};

// Numerically stable (max-subtracted) softmax.
std::vector<double> softmax(const std::vector<double>& logits);

// Evaluates the gate on one image. In training mode batch-norm uses the
// statistics of this single sample; inference mode uses running statistics.
GateOutput gate_forward(const GateParams& params, const FeatureMap& features, bool training);

// Constant output ignoring any input; supports the fixed-weight ablations.
// The weights need not lie on the simplex.
GateOutput fixed_weight_output(const std::vector<double>& weights, int expert_count);

// Resamples an [H, W, n] grid with the align-corners-false convention and
// edge clamping; every output row is a convex combination of input rows.
std::vector<double> bilinear_resample(const std::vector<double>& grid, int grid_h, int grid_w,
                                      int vec_dim, int target_h, int target_w);

// Scales raw expert outputs by the gate weights (one tensor per expert, in
// gate expert order):
//  - single: every channel of expert i is multiplied by w[i];
//  - spatial: the gate grid is bilinearly resampled to each level and applied
//    per cell;
//  - classwise: class-score channel k uses the class-k head, the box and
//    objectness channels use the shared head.
std::vector<RawPredictionTensor> apply_expert_weights(
    const std::vector<RawPredictionTensor>& raws, const GateOutput& out, const AnchorConfig& cfg);

}  // namespace moedet

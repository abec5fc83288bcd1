#pragma once

// Batched gate forward/backward shared by gate.cpp and training.cpp. Training
// requires joint batch-norm statistics over the whole batch, so the batch is
// the unit of evaluation here; inference wraps a batch of one.

#include <vector>

#include "moedet/gate.hpp"

namespace moedet::detail {

struct BnBatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // population variance over (sample, y, x)
};

struct SampleTrace {
  Volume conv1_pre;  // conv output before BN/ReLU
  Volume bn1_norm;   // normalized values x-hat
  Volume act1;       // post-ReLU
  Volume conv2_pre;
  Volume bn2_norm;
  Volume act2;
  std::vector<double> pooled;                  // [C_t], pooled modes only
  std::vector<std::vector<double>> hidden_pre; // [head][cell * hidden_dim]
  std::vector<std::vector<double>> hidden_act;
  std::vector<std::vector<double>> logits;     // [head][cell * n]
  GateOutput output;
};

struct BatchTrace {
  BnBatchStats bn1;
  BnBatchStats bn2;
  std::vector<SampleTrace> samples;
};

// Number of head applications per sample: H*W for spatial mode, else 1.
int cell_count(const GateParams& params, const FeatureMap& features);

void gate_forward_batch(const GateParams& params, const std::vector<const FeatureMap*>& batch,
                        bool training, BatchTrace& trace);

// Accumulates dLoss/dParams into `grad` given dLoss/dOutput per sample.
// Precondition: `trace` came from a training-mode forward of the same batch.
void gate_backward_batch(const GateParams& params, const std::vector<const FeatureMap*>& batch,
                         const BatchTrace& trace, const std::vector<GateOutput>& d_outputs,
                         GateParams& grad);

// Adjoint of bilinear_resample: scatters a gradient over the resampled grid
// back to source-grid cells with the same interpolation weights.
std::vector<double> bilinear_resample_adjoint(const std::vector<double>& d_resampled,
                                              int target_h, int target_w, int vec_dim,
                                              int grid_h, int grid_w);

}  // namespace moedet::detail

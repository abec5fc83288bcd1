#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moedet/eval.hpp"
#include "moedet/gate.hpp"

namespace moedet {

enum class LossMode { detection, domain_ce };
enum class Balancing { none, importance, kl, batch_entropy, sample_entropy };

LossMode parse_loss_mode(const std::string& name);
std::string loss_mode_name(LossMode m);
Balancing parse_balancing(const std::string& name);
std::string balancing_name(Balancing b);

struct TrainConfig {
  LossMode loss_mode = LossMode::detection;
  Balancing balancing = Balancing::sample_entropy;
  double lambda = 0.1;
  double lambda_decay = 1.0;  // per-epoch multiplicative factor
  double learning_rate = 0.01;
  double momentum = 0.9;
  int epochs = 30;
  int batch_size = 16;
  std::uint64_t seed = 1;
};

// One training sample: gate input features plus whatever the loss needs.
// `raws` are the frozen experts' raw tensors in gate expert order (needed for
// the detection loss); `domain_label` indexes the in-domain expert.
struct TrainSample {
  std::string image_id;
  FeatureMap features;
  std::vector<RawPredictionTensor> raws;
  std::vector<GroundTruth> gts;
  int domain_label = -1;
};

// Per-expert sum of (mean) gate weights over a batch. Spatial and classwise
// outputs contribute their mean over cells/heads.
std::vector<double> importance(const std::vector<GateOutput>& batch_outputs);

// Squared coefficient of variation Var(I)/Mean(I)^2, population variance.
double importance_loss(const std::vector<double>& importance_vec);

// KL divergence of the normalized importance distribution from uniform.
double kl_uniform_loss(const std::vector<double>& importance_vec);

// ln(n) - H(p) of the normalized importance distribution; equals the KL loss.
double batch_entropy_loss(const std::vector<double>& importance_vec);

// Mean over samples of ln(n) - H(w); zero iff every sample is uniform.
double samplewise_entropy_loss(const std::vector<GateOutput>& batch_outputs);

// Mean over the batch of -ln(w[label] + eps).
double domain_ce_loss(const std::vector<GateOutput>& batch_outputs,
                      const std::vector<int>& domain_labels);

// Simplified single-stage surrogate: per expert tensor, an IoU box term on
// center-assigned anchors, BCE objectness over all anchors, and BCE class
// scores on assigned anchors (mean over classes), averaged over experts.
double detection_loss(const std::vector<RawPredictionTensor>& weighted_raws,
                      const std::vector<GroundTruth>& gts, const AnchorConfig& cfg);

double total_loss(double task, double balancing, double lambda);

struct BatchLoss {
  double task = 0.0;
  double balancing = 0.0;
  double total = 0.0;
  std::vector<double> importance;
};

// Forward-only batch objective; the finite-difference target.
BatchLoss batch_loss(const GateParams& params, const std::vector<const TrainSample*>& batch,
                     const TrainConfig& cfg, const AnchorConfig* anchors);

// Analytic gradient of the batch objective with respect to every trainable
// parameter, accumulated into `grad` (same layout as the params).
BatchLoss gate_gradient(const GateParams& params, const std::vector<const TrainSample*>& batch,
                        const TrainConfig& cfg, const AnchorConfig* anchors, GateParams& grad);

struct EpochMetrics {
  int epoch = 0;
  double task_loss = 0.0;
  double balancing_loss = 0.0;
  double lambda = 0.0;
  std::vector<double> importance;
};

struct TrainResult {
  GateParams params;
  std::vector<EpochMetrics> epochs;
};

// SGD with momentum over seed-shuffled batches; deterministic for a fixed
// seed. Experts stay frozen: samples are read-only throughout. Throws on
// non-finite loss, naming the batch.
TrainResult train_gate(const GateParams& init, const std::vector<TrainSample>& dataset,
                       const TrainConfig& cfg, const AnchorConfig* anchors);

}  // namespace moedet

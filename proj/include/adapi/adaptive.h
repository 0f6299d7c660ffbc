#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapi/data.h"
#include "adapi/masks.h"
#include "adapi/nn.h"

namespace adapi::train {

using nn::RealTensor;

double softplus(double m);
double logistic(double m);
// Straight-through estimator: the forward pass uses the hard indicator, the
// backward pass differentiates softplus, so dm = upstream * logistic(m).
double ste_backward(double m, double upstream);

// Trainable real-valued masks, one per weight layer and per ReLU layer.
struct SoftMasks {
  std::vector<RealTensor> weight;
  std::vector<RealTensor> feature;

  // Weight masks start at |W|; feature masks at 0.01 plus U[0, 0.001) noise.
  static SoftMasks init(const nn::Model& model, Prg& rng);
};

struct RegularizerResult {
  double value = 0;
  std::vector<RealTensor> grad;  // per tensor, d value / d soft
};

// Mean of the hard mask bits over all tensors together (the realized
// density); the gradient is logistic(m) / total size under the STE.
RegularizerResult sparsity_regularizer(std::span<const masks::BinaryMask> hard, std::span<const RealTensor> soft);
// Fully relaxed variant: mean of softplus(m), exact gradient.
RegularizerResult relaxed_regularizer(std::span<const RealTensor> soft);

struct KdConfig {
  bool enabled = true;
  double alpha_kl = 1.0;
  double alpha_at = 1000.0;
  double temperature = 4.0;
  // Layers whose outputs are compared by the attention term. Unset selects
  // every ReLU layer with a spatial [C, H, W] output; an empty list disables
  // the term.
  std::optional<std::vector<size_t>> attention_layers;

  std::vector<size_t> resolved_layers(const nn::ModelSpec& spec) const;

  static KdConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct LossGrad {
  double value = 0;
  RealTensor grad;  // with respect to the student tensor
};

// T^2 * KL(softmax(t/T) || softmax(s/T)), averaged over the batch.
LossGrad kl_distillation(const RealTensor& student_logits, const RealTensor& teacher_logits, double temperature);
// Mean over batch and positions of the squared difference between
// L2-normalized attention maps. Maps sum squared activations over channels
// for [N, C, H, W] inputs and square elementwise for [N, F] inputs.
LossGrad attention_transfer(const RealTensor& student, const RealTensor& teacher);

struct TripleLossBreakdown {
  double task = 0;
  double weight_reg = 0;  // lambda * R(h(M_w))
  double relu_reg = 0;    // mu * R(h(M_r))
  double kd_kl = 0;       // alpha_kl * KL term
  double kd_at = 0;       // alpha_at * attention term
  double total() const { return task + weight_reg + relu_reg + kd_kl + kd_at; }
  TripleLossBreakdown& operator+=(const TripleLossBreakdown& o);
  TripleLossBreakdown scaled(double s) const;
  nlohmann::json to_json() const;
};

enum class MaskMode { Hard, Relaxed };
enum class FreezeMode { FreezeCore, RetrainAll };

std::string to_string(FreezeMode mode);
FreezeMode freeze_mode_from(const std::string& name);

struct PhaseConfig {
  size_t epochs = 0;
  size_t batch_size = 32;
  nn::OptimizerConfig optimizer;

  static PhaseConfig from_json(const nlohmann::json& j, const PhaseConfig& defaults);
  nlohmann::json to_json() const;
};

struct AdaptiveConfig {
  double lambda = 1.0;
  double mu = 1.0;
  KdConfig kd;
  PhaseConfig soft_phase = default_soft_phase();
  PhaseConfig sequential = default_sequential();
  FreezeMode freeze_mode = FreezeMode::FreezeCore;
  masks::ThresholdScope scope = masks::ThresholdScope::PerTensor;
  masks::DensitySchedule schedule = masks::DensitySchedule::standard();

  static PhaseConfig default_soft_phase();   // AdamW 1e-3, wd 1e-4
  static PhaseConfig default_sequential();   // SGD 0.01, momentum 0.9, cosine
  static AdaptiveConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct ObjectiveResult {
  TripleLossBreakdown loss;
  nn::Gradients grads;                  // weight and bias gradients
  std::vector<RealTensor> soft_weight;  // d total / d soft weight masks
  std::vector<RealTensor> soft_feature; // d total / d soft feature masks
  std::vector<int> predictions;
};

// The soft-mask objective on one batch: task loss, lambda/mu regularizers
// and distillation against `teacher` (when given and enabled). Hard mode
// thresholds the soft masks at `level`; relaxed mode uses softplus(m) as the
// mask in both the forward pass and the regularizers.
ObjectiveResult soft_objective(const nn::Model& model, const SoftMasks& soft, const RealTensor& x,
                               const std::vector<int>& y, const nn::Model* teacher, const AdaptiveConfig& cfg,
                               MaskMode mode, const masks::DensityLevel& level);

// Task loss plus distillation with fixed binary masks.
ObjectiveResult masked_objective(const nn::Model& model, const nn::MaskSet& masks, const RealTensor& x,
                                 const std::vector<int>& y, const nn::Model* teacher, const KdConfig& kd);

struct PhaseLog {
  std::string phase;  // soft | level name
  size_t epoch = 0;
  TripleLossBreakdown loss;
  double train_accuracy = 0;
};

// Optimizes weights and soft masks with masks thresholded at the sparsest
// level, recomputing thresholds on every batch.
std::vector<PhaseLog> optimize_soft_phase(nn::Model& model, SoftMasks& soft, const nn::Dataset& train,
                                          const nn::Model* teacher, const AdaptiveConfig& cfg, Prg& rng);

// Called after each level finishes, with the level index.
using LevelHook = std::function<void(size_t level, const nn::Model& model)>;

// Trains each level of a nested family in ascending density. Freeze-core
// only updates weights that first appear at the current level (biases train
// at the first level only); retrain-all updates every active weight.
std::vector<PhaseLog> sequential_train(nn::Model& model, const masks::MaskFamily& family, const nn::Dataset& train,
                                       const nn::Model* teacher, const AdaptiveConfig& cfg, Prg& rng,
                                       const LevelHook& hook = {});

struct LevelMetrics {
  std::string level;
  double weight_density = 0;
  double relu_density = 0;
  double realized_weight_density = 0;
  double realized_relu_density = 0;
  double accuracy = 0;
  double macs = 0;
  double relus = 0;
};

// One weight set plus nested masks.
struct ModelBundle {
  nn::Model model;
  masks::MaskFamily family;
  std::vector<LevelMetrics> metrics;
  nlohmann::json provenance;
};

std::vector<LevelMetrics> evaluate_levels(const nn::Model& model, const masks::MaskFamily& family,
                                          const nn::Dataset& test);

struct AdaptiveResult {
  ModelBundle bundle;
  std::vector<PhaseLog> logs;
};

// Soft phase from `init` (usually the teacher), mask family, sequential phase.
AdaptiveResult train_adaptive(const nn::Model& init, const nn::Dataset& train, const nn::Dataset& test,
                              const nn::Model* teacher, const AdaptiveConfig& cfg, Prg& rng);

// Dedicated model for one level: the same pipeline with a one-level schedule.
AdaptiveResult train_single(const nn::Model& init, const masks::DensityLevel& level, const nn::Dataset& train,
                            const nn::Dataset& test, const nn::Model* teacher, const AdaptiveConfig& cfg, Prg& rng);

// Directory layout: manifest.json, weights.ckpt, masks.bin, metrics.csv.
void save_bundle(const ModelBundle& bundle, const std::string& dir);
ModelBundle load_bundle(const std::string& dir);
std::string metrics_csv(const std::vector<LevelMetrics>& metrics);

}  // namespace adapi::train

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapi/linalg.h"
#include "adapi/prg.h"
#include "adapi/tensor.h"

namespace adapi::nn {

using RealTensor = Tensor<double>;

enum class LayerKind { Conv, Linear, Relu, AvgPool, Flatten };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from(const std::string& name);

// Shapes are per sample; batched tensors prepend a leading N.
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  ConvGeometry conv;          // Conv
  size_t in_features = 0;     // Linear
  size_t out_features = 0;    // Linear
  size_t pool = 0;            // AvgPool window and stride
  Shape in_shape;
  Shape out_shape;

  bool has_weights() const { return kind == LayerKind::Conv || kind == LayerKind::Linear; }
  // Conv: [OC, IC, K, K]. Linear: [in, out], so y = x W + b.
  Shape weight_shape() const;
  Shape bias_shape() const;
  // Dense multiply-accumulate count: conv K^2 FO^2 IC OC, linear in*out.
  uint64_t macs() const;
  bool operator==(const LayerSpec&) const = default;
};

struct ModelSpec {
  Shape input_shape;
  size_t classes = 0;
  std::vector<LayerSpec> layers;

  // Builds the layer list with shape inference from a JSON array such as
  // [{"type":"conv","out_channels":8,"kernel":3,"pad":1},{"type":"relu"}, ...].
  static ModelSpec build(Shape input_shape, size_t classes, const nlohmann::json& layers);
  static ModelSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // Hex SHA-256 of the canonical JSON form.
  std::string digest() const;

  std::vector<size_t> weight_layers() const;
  std::vector<size_t> relu_layers() const;
  bool operator==(const ModelSpec&) const = default;
};

struct LayerParams {
  RealTensor weight;
  RealTensor bias;
};

class Model {
 public:
  Model() = default;
  explicit Model(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  // One entry per layer; empty tensors for parameter-free layers.
  std::vector<LayerParams>& params() { return params_; }
  const std::vector<LayerParams>& params() const { return params_; }
  LayerParams& layer(size_t i) { return params_.at(i); }
  const LayerParams& layer(size_t i) const { return params_.at(i); }

  // He-normal weights, zero biases.
  void init(Prg& rng);
  uint64_t weight_count() const;

 private:
  ModelSpec spec_;
  std::vector<LayerParams> params_;
};

// Real-valued masks. `weight[k]` belongs to the k-th weight layer and has its
// weight shape; `feature[k]` belongs to the k-th ReLU layer and has its
// per-sample output shape. An empty list, or an empty tensor, means all ones.
struct MaskSet {
  std::vector<RealTensor> weight;
  std::vector<RealTensor> feature;

  static MaskSet ones(const ModelSpec& spec);
  void validate(const ModelSpec& spec) const;
};

struct ForwardCache {
  std::vector<RealTensor> activations;        // activations[i] is the input of layer i; back() is the output
  std::vector<RealTensor> effective_weights;  // W (.) M per layer
  std::vector<RealTensor> weight_masks;       // per layer, empty when unmasked
  std::vector<RealTensor> feature_masks;      // per layer, empty when unmasked
  size_t batch = 0;

  const RealTensor& output_of(size_t layer) const { return activations.at(layer + 1); }
};

// Batched forward pass with optional masks. ReLU layers compute
// X = relu(Z) (.) M + Z (.) (1 - M); weight layers use W (.) M.
RealTensor forward(const Model& model, const RealTensor& x, const MaskSet* masks = nullptr,
                   ForwardCache* cache = nullptr);

struct Gradients {
  std::vector<LayerParams> params;         // d/dW and d/db, already multiplied by the weight mask
  std::vector<RealTensor> weight_masks;    // d/dM_w per weight layer
  std::vector<RealTensor> feature_masks;   // d/dM_r per ReLU layer, summed over the batch
  RealTensor input;
};

// `output_grads`, when given, adds extra upstream gradient at the output of
// layer i (entries may be empty).
Gradients backward(const Model& model, const ForwardCache& cache, const RealTensor& dlogits,
                   const std::vector<RealTensor>* output_grads = nullptr);

struct LossResult {
  double loss = 0;
  RealTensor grad;
};

// Mean softmax cross-entropy; grad = (softmax - onehot) / N.
LossResult cross_entropy(const RealTensor& logits, const std::vector<int>& labels);

std::vector<int> argmax_rows(const RealTensor& logits);

struct LayerCount {
  size_t layer = 0;
  LayerKind kind = LayerKind::Relu;
  double macs = 0;
  double relus = 0;
};

struct CountSummary {
  std::vector<LayerCount> layers;
  double macs = 0;
  double relus = 0;
};

// With masks, conv MACs = FO^2 * kept weights, linear MACs = kept weights and
// ReLUs = kept feature positions.
CountSummary count_macs_relus(const ModelSpec& spec, const MaskSet* masks = nullptr);

struct OptimizerConfig {
  std::string kind = "adamw";  // adamw | sgd
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  bool cosine = false;

  static OptimizerConfig from_json(const nlohmann::json& j, const OptimizerConfig& defaults);
  nlohmann::json to_json() const;
};

// AdamW (decoupled decay) or SGD with momentum, over registered tensors. A
// tensor may carry a per-element trainable flag; untrainable entries are
// never touched, decay included.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, size_t total_steps);

  void add(RealTensor& param, double weight_decay, std::vector<uint8_t> trainable = {});
  // One gradient per registered tensor, in registration order.
  void step(const std::vector<const RealTensor*>& grads);
  double current_lr() const;
  size_t steps_taken() const { return step_; }

 private:
  struct Slot {
    RealTensor* param;
    double decay;
    std::vector<uint8_t> trainable;
    std::vector<double> m, v;
  };
  OptimizerConfig config_;
  size_t total_steps_;
  size_t step_ = 0;
  std::vector<Slot> slots_;
};

struct Dataset;

struct EpochLog {
  size_t epoch = 0;
  double loss = 0;
  double train_accuracy = 0;
};

struct TeacherConfig {
  size_t epochs = 30;
  size_t batch_size = 32;
  OptimizerConfig optimizer;
};

// Plain cross-entropy training of the unmasked model.
std::vector<EpochLog> train_teacher(Model& model, const Dataset& train, const TeacherConfig& config, Prg& rng);

RealTensor predict(const Model& model, const RealTensor& x, const MaskSet* masks = nullptr, size_t chunk = 256);
double accuracy(const Model& model, const Dataset& data, const MaskSet* masks = nullptr);

// Checkpoint: magic, JSON header (spec, tensor table), little-endian doubles.
void save_checkpoint(const Model& model, const std::string& path, const nlohmann::json& extra = {});
Model load_checkpoint(const std::string& path, nlohmann::json* extra = nullptr);

}  // namespace adapi::nn

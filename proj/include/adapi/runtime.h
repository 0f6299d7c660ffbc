#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapi/adaptive.h"
#include "adapi/masks.h"
#include "adapi/mpc.h"
#include "adapi/nn.h"
#include "adapi/ot.h"
#include "adapi/transport.h"

namespace adapi::runtime {

using share::ArithmeticShare;
using share::RingTensor;

// Party 0 is the edge server, party 1 the client that owns the input.
constexpr int kServer = 0;
constexpr int kClient = 1;
std::string role_name(int party);

enum class Comparison { SignBit, Ot };
std::string to_string(Comparison c);
Comparison comparison_from(const std::string& name);

// What one party installs: public architecture, level and masks, plus its
// additive half of encode(W (.) M) and of the biases. Both halves are zero
// at pruned weight positions.
struct SharePackage {
  int party = kServer;
  nn::ModelSpec spec;
  masks::DensityLevel level;
  masks::LevelMasks masks;
  int frac_bits = 16;
  std::vector<RingTensor> weights;  // per layer, empty for parameter-free layers
  std::vector<RingTensor> biases;

  ring::FixedPointCodec codec() const { return ring::FixedPointCodec(frac_bits); }
  // SHA-256 over the public metadata only; equal for the two halves.
  std::string metadata_digest() const;
};

void save_package(const SharePackage& pkg, const std::string& path);
SharePackage load_package(const std::string& path);

// Throws ConfigError for a level absent from the bundle.
std::pair<SharePackage, SharePackage> deploy(const train::ModelBundle& bundle, const std::string& level,
                                             uint64_t seed, ring::FixedPointCodec codec = ring::FixedPointCodec(16));

// Layer protocols over batched shares [N, ...]. Products are truncated
// once, then the bias shares are added.
ArithmeticShare secure_conv(mpc::Context& ctx, const ConvGeometry& g, const ArithmeticShare& x,
                            const RingTensor& weight, const RingTensor& bias, const masks::BinaryMask* support);
ArithmeticShare secure_linear(mpc::Context& ctx, const ArithmeticShare& x, const RingTensor& weight,
                              const RingTensor& bias, const masks::BinaryMask* support);
ArithmeticShare secure_avgpool(mpc::Context& ctx, const ArithmeticShare& x, size_t pool);
// Mask-1 positions of every sample run one batched comparison; mask-0
// positions keep their shares and cost nothing. `ot` is required in OT mode.
ArithmeticShare secure_masked_relu(mpc::Context& ctx, const ArithmeticShare& x, const masks::BinaryMask& mask,
                                   Comparison mode, mpc::OtSession* ot);

struct LayerTranscript {
  std::string name;  // "L<i>" for model layers; handshake, ot-setup, input, output, batch
  std::string kind;  // conv | linear | relu | avgpool | flatten | session
  net::TagCounters counters;
  std::map<std::string, net::TagCounters> categories;  // e.g. conv-exchange, relu-ot, relu-signbit
  double seconds = 0;
};

struct InferenceTranscript {
  int party = kServer;
  std::string comparison;
  std::string level;
  size_t samples = 0;
  std::vector<LayerTranscript> layers;
  net::TagCounters totals;  // equals the sum over layers
  double seconds = 0;

  // Payload bytes, both directions, of all ReLU layers.
  uint64_t relu_payload_bytes() const;
  uint64_t total_bytes() const { return totals.sent_bytes + totals.received_bytes; }
  // Appends another run's layers and totals.
  void merge(const InferenceTranscript& other);
  nlohmann::json to_json() const;
};

struct RuntimeOptions {
  Comparison comparison = Comparison::SignBit;
  uint64_t dealer_seed = 1;
  uint64_t party_seed = 2;
  // Keep this party's share of every layer output, for offline checking.
  bool keep_layer_shares = false;
  const ring::OtGroup* ot_group = &ring::OtGroup::paper_width();
};

struct InferenceResult {
  ArithmeticShare logits;
  nn::RealTensor revealed;  // decoded logits at the client, empty at the server
  InferenceTranscript transcript;
  std::vector<ArithmeticShare> layer_outputs;
};

// One party's end of a session. The first call to infer() or serve()
// performs the digest handshake (and OT setup in OT mode); both appear in
// that call's transcript.
class SecureSession {
 public:
  SecureSession(net::Channel& channel, SharePackage package, RuntimeOptions options = {});

  int party() const { return package_.party; }
  const SharePackage& package() const { return package_; }
  mpc::Context& context() { return ctx_; }

  // Client: shares `input` [N, ...], runs the model, receives the logits.
  InferenceResult infer(const nn::RealTensor& input);
  // Server: runs one batch announced by the client; nullopt once the client
  // calls finish().
  std::optional<InferenceResult> serve();
  // Client: tells the server no more batches follow.
  void finish();

 private:
  void handshake(InferenceTranscript& t);
  InferenceResult run(const nn::RealTensor* input, size_t samples, InferenceTranscript transcript);

  net::Channel* channel_;
  SharePackage package_;
  RuntimeOptions options_;
  mpc::Context ctx_;
  std::optional<mpc::OtSession> ot_;
  bool ready_ = false;
};

// Plaintext ring model of the secure pipeline: the same fixed-point
// encoding, one exact truncation per product, exact ReLU.
RingTensor fixed_point_layer(const nn::LayerSpec& layer, const RingTensor& weight, const RingTensor& bias,
                             const masks::BinaryMask* feature_mask, const RingTensor& x,
                             const ring::FixedPointCodec& codec);
// Output of every layer; `weights` and `biases` are the reconstructed
// package tensors.
std::vector<RingTensor> fixed_point_forward(const nn::ModelSpec& spec, const std::vector<RingTensor>& weights,
                                            const std::vector<RingTensor>& biases, const masks::LevelMasks& masks,
                                            const RingTensor& input, const ring::FixedPointCodec& codec);

// Allowed |secure - reference| in LSBs when a layer is re-run in plaintext
// on the secure layer input: one for layers ending in a share truncation,
// zero otherwise.
int64_t layer_tolerance_lsb(nn::LayerKind kind);
// Error of the secure pipeline against fixed_point_forward after each layer,
// per element and in LSBs, when every truncation may be off by one LSB and
// errors propagate through |W|.
std::vector<nn::RealTensor> propagated_error_bound(const nn::ModelSpec& spec, const std::vector<RingTensor>& weights,
                                                   const masks::LevelMasks& masks, const ring::FixedPointCodec& codec);

RingTensor reconstruct_tensor(const RingTensor& a, const RingTensor& b);

struct PairResult {
  InferenceResult server;
  InferenceResult client;
};

// Runs both parties over `channels` (party 0 first), feeding `input` in
// batches of `batch_size` within one session. Per-batch results are
// concatenated along the sample axis and transcripts merged.
PairResult simulate_pair(net::Channel& server_channel, net::Channel& client_channel, const SharePackage& server,
                         const SharePackage& client, const nn::RealTensor& input, size_t batch_size,
                         const RuntimeOptions& options = {});
// simulate_pair over a fresh in-process channel pair.
PairResult simulate_local(const SharePackage& server, const SharePackage& client, const nn::RealTensor& input,
                          size_t batch_size, const RuntimeOptions& options = {});

// One side of a multi-batch session; the client returns its results, the
// server returns an empty `revealed` tensor.
InferenceResult run_server(net::Channel& channel, const SharePackage& pkg, const RuntimeOptions& options);
InferenceResult run_client(net::Channel& channel, const SharePackage& pkg, const nn::RealTensor& input,
                           size_t batch_size, const RuntimeOptions& options);

}  // namespace adapi::runtime

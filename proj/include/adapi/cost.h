#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapi/adaptive.h"
#include "adapi/masks.h"
#include "adapi/nn.h"

namespace adapi::runtime {
struct InferenceTranscript;
}

namespace adapi::cost {

struct DeviceProfile {
  double parallelism = 4;      // data units loaded and stored per cycle
  double freq_hz = 2e8;
  double bandwidth_bps = 1e9;  // bytes per second
  double setup_seconds = 1e-4; // per connection build
  double power_watts = 9.1;

  void validate() const;  // every field positive
  static DeviceProfile from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

enum class CostKind { Conv, Relu };

struct LayerCost {
  CostKind kind = CostKind::Conv;
  double cmp_seconds = 0;
  double comm_seconds = 0;  // all communication rounds, setup included
  double bytes = 0;
  double latency() const { return cmp_seconds + comm_seconds; }
};

struct ConvShape {
  size_t kernel = 1;
  size_t in_channels = 1;
  size_t out_channels = 1;
  size_t out_size = 1;  // FO, square outputs
  size_t in_size = 1;   // FI, square inputs
  double density = 1;   // weight density D in (0, 1]
};

// cmp = 3 K^2 FO^2 IC OC D / (PP freq); each of the two exchanges costs
// T_bc + 32 FI^2 IC / (8 Rt_bw); bytes = 2 * 4 * FI^2 * IC.
LayerCost conv_latency(const ConvShape& c, const DeviceProfile& p);

// Per-element OT-flow constants, in bits.
struct ReluConstants {
  static constexpr double kCmpSecond = 32.0 * 17;
  static constexpr double kCmpThird = 32.0 * (17 + 64);
  static constexpr double kCmpFourth = 32.0 * 64 + 1;
  static constexpr double kCmpPerElement = kCmpSecond + kCmpThird + kCmpFourth;  // 5185
  static constexpr int kRounds = 4;
};

// Bytes exchanged by a ReLU layer of n comparisons: the session word plus
// the choice, cipher and status words of every element, taken from the
// protocol's own transcript sizes.
double relu_bytes(double n);
double relu_element_bytes();  // 324
double relu_session_bytes();  // 4

// cmp = 5185 n / (PP freq); comm = 4 T_bc + 8 * relu_bytes(n) / (8 Rt_bw).
LayerCost relu_latency(double n, const DeviceProfile& p);

// Conv latency excluding connection setup, in units of the per-element
// ReLU latency (also without setup), plus the ReLU count.
double normalized_relu(const std::vector<ConvShape>& convs, double relus, const DeviceProfile& p);
double normalized_relu(const nn::ModelSpec& spec, const nn::MaskSet* masks, const DeviceProfile& p);
// MACs per ReLU equivalent implied by the profile: per-element ReLU latency
// over per-MAC conv latency.
double implied_macs_per_relu(const DeviceProfile& p);

// Conv layers of a model at the weight densities of `masks`; linear layers
// count as 1x1 convolutions over a 1x1 map.
std::vector<ConvShape> conv_shapes(const nn::ModelSpec& spec, const nn::MaskSet* masks);

struct Calibration {
  double slope_bytes_per_relu = 0;
  double offset_bytes = 0;
  std::string group;

  static Calibration from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

enum class VolumeMode { FirstPrinciples, Calibrated };

// Bytes per inference: ReLU layers plus conv exchanges (first principles),
// or slope * ReLUs + offset (calibrated).
double comm_volume_bytes(const nn::ModelSpec& spec, const nn::MaskSet* masks, VolumeMode mode,
                         const Calibration* calibration = nullptr);

double energy_joules(double latency_seconds, const DeviceProfile& p);

// Published per-level measurements used as calibration targets.
struct VolumeRow {
  std::string group;  // architecture/dataset, e.g. resnet18-cifar100
  std::string level;
  double relu_density = 0;
  double relus_k = 0;
  double comm_mb = 0;  // 1 MB = 1e6 bytes
};
struct LatencyRow {
  std::string group;
  std::string level;
  double macs_m = 0;
  double relus_k = 0;
  double normalized_relu_k = 0;
  double latency_s = 0;
  double energy_j = 0;
};
const std::vector<VolumeRow>& reference_volume_rows();
const std::vector<LatencyRow>& reference_latency_rows();

// Least squares with one slope shared by all groups and an offset per group.
struct VolumeFit {
  double slope_bytes_per_relu = 0;
  std::vector<Calibration> groups;
  double max_relative_error = 0;

  const Calibration& group(const std::string& name) const;
};
VolumeFit fit_volume(const std::vector<VolumeRow>& rows);

// MACs / (normalized - ReLUs) per row.
std::vector<double> implied_factors(const std::vector<LatencyRow>& rows);

struct CostRow {
  std::string level;
  double weight_density = 0;
  double relu_density = 0;
  double macs = 0;
  double relus = 0;
  double normalized_relu = 0;
  double conv_latency_s = 0;
  double relu_latency_s = 0;
  double latency_s = 0;
  double comm_mb = 0;             // first principles
  std::optional<double> calibrated_comm_mb;
  double energy_j = 0;
  double accuracy = -1;           // from bundle metrics when known
};

// Measured against modeled bytes of one simulated level.
struct Reconciliation {
  std::string level;
  std::string comparison;
  size_t samples = 0;
  // OT mode: relu-ot payload; sign-bit mode: every ReLU-layer payload. Both
  // directions, one party's view.
  double measured_relu_element_bytes = 0;
  double measured_relu_layer_bytes = 0;    // all ReLU-layer payload
  double modeled_relu_element_bytes = 0;   // samples * 324 * masked ReLUs
  double measured_total_bytes = 0;         // frames, both directions
  double modeled_total_bytes = 0;          // samples * first-principles volume
  double relu_deviation() const;
  double total_deviation() const;
};

struct CostReport {
  std::string model_digest;
  DeviceProfile profile;
  std::vector<CostRow> rows;  // ascending density
  std::vector<Reconciliation> reconciliation;
  double implied_macs_per_relu = 0;

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

CostReport cost_report(const nn::ModelSpec& spec, const masks::MaskFamily& family, const DeviceProfile& p,
                       const Calibration* calibration = nullptr,
                       const std::vector<train::LevelMetrics>* metrics = nullptr);
Reconciliation reconcile(const nn::ModelSpec& spec, const masks::LevelMasks& level,
                         const runtime::InferenceTranscript& transcript);

}  // namespace adapi::cost

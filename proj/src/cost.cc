#include "adapi/cost.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "adapi/ot.h"
#include "adapi/runtime.h"

namespace adapi::cost {

namespace {

double get_positive(const nlohmann::json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number()) throw ConfigError(std::string("device profile: '") + key + "' must be a number");
  return j.at(key).get<double>();
}

double masked_relus(const nn::ModelSpec& spec, const nn::MaskSet* masks) {
  return nn::count_macs_relus(spec, masks).relus;
}

std::string fmt(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

double rel_dev(double measured, double modeled) {
  if (modeled == 0) return measured == 0 ? 0 : INFINITY;
  return (measured - modeled) / modeled;
}

}  // namespace

void DeviceProfile::validate() const {
  for (double v : {parallelism, freq_hz, bandwidth_bps, setup_seconds, power_watts}) {
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError("device profile fields must be positive and finite");
  }
}

DeviceProfile DeviceProfile::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("device profile must be an object");
  static const std::vector<std::string> known = {"parallelism", "freq_hz", "bandwidth_bps", "setup_seconds",
                                                 "power_watts"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigError("device profile: unknown field '" + k + "'");
    }
  }
  DeviceProfile p;
  p.parallelism = get_positive(j, "parallelism", p.parallelism);
  p.freq_hz = get_positive(j, "freq_hz", p.freq_hz);
  p.bandwidth_bps = get_positive(j, "bandwidth_bps", p.bandwidth_bps);
  p.setup_seconds = get_positive(j, "setup_seconds", p.setup_seconds);
  p.power_watts = get_positive(j, "power_watts", p.power_watts);
  p.validate();
  return p;
}

nlohmann::json DeviceProfile::to_json() const {
  return {{"parallelism", parallelism},
          {"freq_hz", freq_hz},
          {"bandwidth_bps", bandwidth_bps},
          {"setup_seconds", setup_seconds},
          {"power_watts", power_watts}};
}

LayerCost conv_latency(const ConvShape& c, const DeviceProfile& p) {
  const double k2 = static_cast<double>(c.kernel * c.kernel);
  const double fo2 = static_cast<double>(c.out_size * c.out_size);
  const double fi2 = static_cast<double>(c.in_size * c.in_size);
  const double ic = static_cast<double>(c.in_channels), oc = static_cast<double>(c.out_channels);
  LayerCost out;
  out.kind = CostKind::Conv;
  out.cmp_seconds = 3 * k2 * fo2 * ic * oc * c.density / (p.parallelism * p.freq_hz);
  const double one_way = p.setup_seconds + 32 * fi2 * ic / (p.bandwidth_bps * 8);
  out.comm_seconds = 2 * one_way;
  out.bytes = 2 * 4 * fi2 * ic;
  return out;
}

double relu_element_bytes() {
  return static_cast<double>(mpc::ot_transcript_bytes(1).per_session_total() - mpc::ot_transcript_bytes(0).setup);
}

double relu_session_bytes() { return static_cast<double>(mpc::ot_transcript_bytes(0).setup); }

double relu_bytes(double n) { return relu_session_bytes() + relu_element_bytes() * n; }

LayerCost relu_latency(double n, const DeviceProfile& p) {
  LayerCost out;
  out.kind = CostKind::Relu;
  out.cmp_seconds = ReluConstants::kCmpPerElement * n / (p.parallelism * p.freq_hz);
  out.comm_seconds = ReluConstants::kRounds * p.setup_seconds + 8 * relu_bytes(n) / (p.bandwidth_bps * 8);
  out.bytes = relu_bytes(n);
  return out;
}

double implied_macs_per_relu(const DeviceProfile& p) {
  const double per_relu = ReluConstants::kCmpPerElement / (p.parallelism * p.freq_hz) +
                          relu_element_bytes() / p.bandwidth_bps;
  const double per_mac = 3 / (p.parallelism * p.freq_hz);
  return per_relu / per_mac;
}

double normalized_relu(const std::vector<ConvShape>& convs, double relus, const DeviceProfile& p) {
  const double per_relu = ReluConstants::kCmpPerElement / (p.parallelism * p.freq_hz) +
                          relu_element_bytes() / p.bandwidth_bps;
  double conv_seconds = 0;
  for (const auto& c : convs) {
    const LayerCost l = conv_latency(c, p);
    conv_seconds += l.cmp_seconds + l.comm_seconds - 2 * p.setup_seconds;
  }
  return relus + conv_seconds / per_relu;
}

std::vector<ConvShape> conv_shapes(const nn::ModelSpec& spec, const nn::MaskSet* masks) {
  std::vector<ConvShape> out;
  size_t k = 0;
  for (const auto& L : spec.layers) {
    if (!L.has_weights()) continue;
    double density = 1;
    if (masks && k < masks->weight.size() && !masks->weight[k].empty()) {
      double kept = 0;
      for (double v : masks->weight[k].vec()) kept += v;
      density = kept / static_cast<double>(masks->weight[k].numel());
    }
    ++k;
    ConvShape c;
    c.density = density;
    if (L.kind == nn::LayerKind::Conv) {
      const auto& g = L.conv;
      ADAPI_ENFORCE(g.in_height == g.in_width && g.out_height() == g.out_width(), ShapeError,
                    "cost model expects square feature maps");
      c.kernel = g.kernel;
      c.in_channels = g.in_channels;
      c.out_channels = g.out_channels;
      c.in_size = g.in_height;
      c.out_size = g.out_height();
    } else {
      c.in_channels = L.in_features;
      c.out_channels = L.out_features;
    }
    out.push_back(c);
  }
  return out;
}

double normalized_relu(const nn::ModelSpec& spec, const nn::MaskSet* masks, const DeviceProfile& p) {
  return normalized_relu(conv_shapes(spec, masks), masked_relus(spec, masks), p);
}

Calibration Calibration::from_json(const nlohmann::json& j) {
  try {
    Calibration c;
    c.slope_bytes_per_relu = j.at("slope_bytes_per_relu").get<double>();
    c.offset_bytes = j.at("offset_bytes").get<double>();
    c.group = j.value("group", std::string());
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("calibration: ") + e.what());
  }
}

nlohmann::json Calibration::to_json() const {
  return {{"slope_bytes_per_relu", slope_bytes_per_relu}, {"offset_bytes", offset_bytes}, {"group", group}};
}

double comm_volume_bytes(const nn::ModelSpec& spec, const nn::MaskSet* masks, VolumeMode mode,
                         const Calibration* calibration) {
  if (mode == VolumeMode::Calibrated) {
    ADAPI_ENFORCE(calibration != nullptr, ConfigError, "calibrated volume needs slope and offset");
    return calibration->slope_bytes_per_relu * masked_relus(spec, masks) + calibration->offset_bytes;
  }
  const auto counts = nn::count_macs_relus(spec, masks);
  double bytes = 0;
  for (const auto& l : counts.layers) {
    if (l.kind == nn::LayerKind::Relu) bytes += relu_bytes(l.relus);
  }
  const DeviceProfile unit;
  for (const auto& c : conv_shapes(spec, masks)) bytes += conv_latency(c, unit).bytes;
  return bytes;
}

double energy_joules(double latency_seconds, const DeviceProfile& p) { return p.power_watts * latency_seconds; }

const std::vector<VolumeRow>& reference_volume_rows() {
  static const std::vector<VolumeRow> rows = {
      {"resnet18-cifar100", "L1", 0.40, 196.61, 58.83},    {"resnet18-cifar100", "L2", 0.20, 98.30, 34.51},
      {"resnet18-cifar100", "L3", 0.10, 49.15, 22.33},     {"resnet18-cifar100", "L4", 0.05, 24.58, 16.26},
      {"resnet18-tinyimagenet", "L1", 0.40, 786.43, 235.31}, {"resnet18-tinyimagenet", "L2", 0.20, 393.22, 138.00},
      {"resnet18-tinyimagenet", "L3", 0.10, 196.61, 89.35},  {"resnet18-tinyimagenet", "L4", 0.05, 98.30, 65.02},
      {"wrn22-8-cifar100", "L1", 0.40, 543.95, 154.18},    {"wrn22-8-cifar100", "L2", 0.20, 271.97, 86.86},
      {"wrn22-8-cifar100", "L3", 0.10, 135.99, 53.21},     {"wrn22-8-cifar100", "L4", 0.05, 67.99, 36.38},
      {"wrn22-8-tinyimagenet", "L1", 0.40, 2175.80, 616.66}, {"wrn22-8-tinyimagenet", "L2", 0.20, 1087.90, 347.43},
      {"wrn22-8-tinyimagenet", "L3", 0.10, 543.95, 212.80},  {"wrn22-8-tinyimagenet", "L4", 0.05, 271.97, 145.48},
  };
  return rows;
}

const std::vector<LatencyRow>& reference_latency_rows() {
  static const std::vector<LatencyRow> rows = {
      {"resnet18-cifar100", "L1", 285.3, 196.61, 220.54, 0.56, 5.1},
      {"resnet18-cifar100", "L2", 167.0, 98.30, 112.32, 0.33, 3.0},
      {"resnet18-cifar100", "L3", 92.1, 49.15, 56.83, 0.22, 2.0},
      {"resnet18-cifar100", "L4", 52.9, 24.58, 29.01, 0.16, 1.4},
      {"wrn22-8-cifar100", "L1", 1042.0, 543.95, 581.9, 1.41, 12.7},
      {"wrn22-8-cifar100", "L2", 549.7, 271.97, 292.0, 0.80, 7.2},
      {"wrn22-8-cifar100", "L3", 287.2, 135.99, 146.4, 0.50, 4.5},
      {"wrn22-8-cifar100", "L4", 152.5, 67.99, 73.54, 0.35, 3.1},
  };
  return rows;
}

const Calibration& VolumeFit::group(const std::string& name) const {
  for (const auto& g : groups) {
    if (g.group == name) return g;
  }
  throw ConfigError("no calibration for group '" + name + "'");
}

VolumeFit fit_volume(const std::vector<VolumeRow>& rows) {
  ADAPI_ENFORCE(!rows.empty(), ConfigError, "volume fit needs rows");
  std::map<std::string, std::vector<const VolumeRow*>> by_group;
  for (const auto& r : rows) by_group[r.group].push_back(&r);
  // With per-group offsets the shared slope is the pooled within-group
  // regression slope.
  double sxy = 0, sxx = 0;
  for (const auto& [name, rs] : by_group) {
    double mx = 0, my = 0;
    for (const auto* r : rs) {
      mx += r->relus_k * 1e3;
      my += r->comm_mb * 1e6;
    }
    mx /= static_cast<double>(rs.size());
    my /= static_cast<double>(rs.size());
    for (const auto* r : rs) {
      const double dx = r->relus_k * 1e3 - mx;
      sxy += dx * (r->comm_mb * 1e6 - my);
      sxx += dx * dx;
    }
  }
  ADAPI_ENFORCE(sxx > 0, ConfigError, "volume fit needs distinct ReLU counts within a group");
  VolumeFit fit;
  fit.slope_bytes_per_relu = sxy / sxx;
  for (const auto& [name, rs] : by_group) {
    double mx = 0, my = 0;
    for (const auto* r : rs) {
      mx += r->relus_k * 1e3;
      my += r->comm_mb * 1e6;
    }
    const double n = static_cast<double>(rs.size());
    fit.groups.push_back({fit.slope_bytes_per_relu, my / n - fit.slope_bytes_per_relu * mx / n, name});
  }
  for (const auto& r : rows) {
    const auto& c = fit.group(r.group);
    const double pred = c.slope_bytes_per_relu * r.relus_k * 1e3 + c.offset_bytes;
    fit.max_relative_error = std::max(fit.max_relative_error, std::abs(pred - r.comm_mb * 1e6) / (r.comm_mb * 1e6));
  }
  return fit;
}

std::vector<double> implied_factors(const std::vector<LatencyRow>& rows) {
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(r.macs_m * 1e6 / ((r.normalized_relu_k - r.relus_k) * 1e3));
  return out;
}

double Reconciliation::relu_deviation() const { return rel_dev(measured_relu_element_bytes, modeled_relu_element_bytes); }
double Reconciliation::total_deviation() const { return rel_dev(measured_total_bytes, modeled_total_bytes); }

CostReport cost_report(const nn::ModelSpec& spec, const masks::MaskFamily& family, const DeviceProfile& p,
                       const Calibration* calibration, const std::vector<train::LevelMetrics>* metrics) {
  p.validate();
  CostReport rep;
  rep.model_digest = spec.digest();
  rep.profile = p;
  rep.implied_macs_per_relu = implied_macs_per_relu(p);
  for (size_t li = 0; li < family.levels.size(); ++li) {
    const auto& lv = family.schedule.levels.at(li);
    const nn::MaskSet ms = family.mask_set(li);
    const auto counts = nn::count_macs_relus(spec, &ms);
    CostRow row;
    row.level = lv.name;
    row.weight_density = lv.weight_density;
    row.relu_density = lv.relu_density;
    row.macs = counts.macs;
    row.relus = counts.relus;
    row.normalized_relu = normalized_relu(spec, &ms, p);
    for (const auto& c : conv_shapes(spec, &ms)) row.conv_latency_s += conv_latency(c, p).latency();
    for (const auto& l : counts.layers) {
      if (l.kind == nn::LayerKind::Relu) row.relu_latency_s += relu_latency(l.relus, p).latency();
    }
    row.latency_s = row.conv_latency_s + row.relu_latency_s;
    row.comm_mb = comm_volume_bytes(spec, &ms, VolumeMode::FirstPrinciples) / 1e6;
    if (calibration) row.calibrated_comm_mb = comm_volume_bytes(spec, &ms, VolumeMode::Calibrated, calibration) / 1e6;
    row.energy_j = energy_joules(row.latency_s, p);
    if (metrics) {
      for (const auto& m : *metrics) {
        if (m.level == lv.name) row.accuracy = m.accuracy;
      }
    }
    rep.rows.push_back(row);
  }
  return rep;
}

Reconciliation reconcile(const nn::ModelSpec& spec, const masks::LevelMasks& level,
                         const runtime::InferenceTranscript& t) {
  Reconciliation r;
  r.level = t.level;
  r.comparison = t.comparison;
  r.samples = t.samples;
  const bool ot = t.comparison == runtime::to_string(runtime::Comparison::Ot);
  for (const auto& l : t.layers) {
    if (l.kind != "relu") continue;
    const double layer = static_cast<double>(l.counters.sent_payload + l.counters.received_payload);
    r.measured_relu_layer_bytes += layer;
    if (!ot) {
      r.measured_relu_element_bytes += layer;
    } else if (auto it = l.categories.find("relu-ot"); it != l.categories.end()) {
      r.measured_relu_element_bytes += static_cast<double>(it->second.sent_payload + it->second.received_payload);
    }
  }
  double pop = 0;
  for (const auto& m : level.feature) pop += static_cast<double>(m.popcount());
  r.modeled_relu_element_bytes = static_cast<double>(t.samples) * relu_element_bytes() * pop;
  r.measured_total_bytes = static_cast<double>(t.total_bytes());
  nn::MaskSet ms;
  for (const auto& m : level.weight) ms.weight.push_back(m.to_real());
  for (const auto& m : level.feature) ms.feature.push_back(m.to_real());
  r.modeled_total_bytes = static_cast<double>(t.samples) * comm_volume_bytes(spec, &ms, VolumeMode::FirstPrinciples);
  return r;
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "level,weight_density,relu_density,macs,relus,normalized_relu,conv_latency_s,relu_latency_s,latency_s,"
        "comm_mb,calibrated_comm_mb,energy_j,accuracy";
  const bool recon = !reconciliation.empty();
  if (recon) os << ",measured_relu_bytes,modeled_relu_bytes,relu_deviation,measured_total_bytes,modeled_total_bytes,total_deviation";
  os << "\n";
  for (const auto& r : rows) {
    os << r.level << ',' << fmt(r.weight_density) << ',' << fmt(r.relu_density) << ',' << fmt(r.macs, 12) << ','
       << fmt(r.relus, 12) << ',' << fmt(r.normalized_relu, 10) << ',' << fmt(r.conv_latency_s) << ','
       << fmt(r.relu_latency_s) << ',' << fmt(r.latency_s) << ',' << fmt(r.comm_mb) << ','
       << (r.calibrated_comm_mb ? fmt(*r.calibrated_comm_mb) : "") << ',' << fmt(r.energy_j) << ','
       << (r.accuracy >= 0 ? fmt(r.accuracy) : "");
    if (recon) {
      const Reconciliation* m = nullptr;
      for (const auto& c : reconciliation) {
        if (c.level == r.level) m = &c;
      }
      if (m) {
        os << ',' << fmt(m->measured_relu_element_bytes, 15) << ',' << fmt(m->modeled_relu_element_bytes, 15) << ','
           << fmt(m->relu_deviation()) << ',' << fmt(m->measured_total_bytes, 15) << ','
           << fmt(m->modeled_total_bytes, 15) << ',' << fmt(m->total_deviation());
      } else {
        os << ",,,,,,";
      }
    }
    os << "\n";
  }
  return os.str();
}

nlohmann::json CostReport::to_json() const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = {{"level", r.level},
                        {"weight_density", r.weight_density},
                        {"relu_density", r.relu_density},
                        {"macs", r.macs},
                        {"relus", r.relus},
                        {"normalized_relu", r.normalized_relu},
                        {"conv_latency_s", r.conv_latency_s},
                        {"relu_latency_s", r.relu_latency_s},
                        {"latency_s", r.latency_s},
                        {"comm_mb", r.comm_mb},
                        {"calibrated_comm_mb", r.calibrated_comm_mb ? nlohmann::json(*r.calibrated_comm_mb) : nlohmann::json()},
                        {"energy_j", r.energy_j},
                        {"accuracy", r.accuracy >= 0 ? nlohmann::json(r.accuracy) : nlohmann::json()}};
    rs.push_back(j);
  }
  nlohmann::json rec = nlohmann::json::array();
  for (const auto& c : reconciliation) {
    auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
    rec.push_back({{"level", c.level},
                   {"comparison", c.comparison},
                   {"samples", c.samples},
                   {"measured_relu_element_bytes", c.measured_relu_element_bytes},
                   {"measured_relu_layer_bytes", c.measured_relu_layer_bytes},
                   {"modeled_relu_element_bytes", c.modeled_relu_element_bytes},
                   {"relu_deviation", finite_or_null(c.relu_deviation())},
                   {"measured_total_bytes", c.measured_total_bytes},
                   {"modeled_total_bytes", c.modeled_total_bytes},
                   {"total_deviation", finite_or_null(c.total_deviation())}});
  }
  return {{"format", 1},
          {"model_digest", model_digest},
          {"profile", profile.to_json()},
          {"implied_macs_per_relu", implied_macs_per_relu},
          {"rows", rs},
          {"reconciliation", rec}};
}

}  // namespace adapi::cost

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "adapi/config.h"
#include "adapi/container.h"
#include "adapi/cost.h"
#include "adapi/runtime.h"
#include "adapi/transport.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace adapi;

namespace {

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kTraining = 3,
  kProtocol = 4,
  kTransport = 5,
  kFormat = 6,
};

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return kConfig;
  if (dynamic_cast<const TrainingError*>(&e)) return kTraining;
  if (dynamic_cast<const ProtocolError*>(&e) || dynamic_cast<const EncodingOverflow*>(&e)) return kProtocol;
  if (dynamic_cast<const TransportError*>(&e)) return kTransport;
  if (dynamic_cast<const FormatError*>(&e)) return kFormat;
  return kOther;
}

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string ensure_dir(const std::string& dir) {
  fs::create_directories(dir);
  return dir;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// Everything needed to rerun a command: its name, its flags and the fully
// defaulted configuration.
void write_snapshot(const std::string& path, const std::string& command, const json& options,
                    const config::ExperimentConfig* cfg) {
  json j = {{"command", command}, {"options", options}};
  if (cfg) j["config"] = cfg->to_json();
  if (const char* s = std::getenv("ADAPI_SEED"); s && *s) j["seed_override"] = s;
  io::write_text(path, j.dump(2) + "\n");
}

config::ExperimentConfig load_config(const std::string& path) {
  auto cfg = config::load_experiment(path);
  config::apply_seed_override(cfg);
  return cfg;
}

// A bundle carries the configuration it was trained under.
config::ExperimentConfig bundle_config(const train::ModelBundle& bundle, const std::string& override_path) {
  if (!override_path.empty()) return load_config(override_path);
  ADAPI_ENFORCE(bundle.provenance.contains("config"), ConfigError,
                "bundle has no embedded configuration; pass --config");
  auto cfg = config::ExperimentConfig::from_json(bundle.provenance.at("config"));
  config::apply_seed_override(cfg);
  return cfg;
}

std::string dataset_name(const config::ExperimentConfig& cfg) {
  const auto kind = cfg.dataset.value("kind", std::string("unknown"));
  if (kind != "idx") return kind;
  return fs::path(cfg.dataset.at("train_images").get<std::string>()).parent_path().filename().string();
}

// ---------------------------------------------------------------- train-teacher

struct TeacherOptions {
  std::string config;
  std::optional<size_t> epochs;
  std::string out;
};

int cmd_train_teacher(const TeacherOptions& o) {
  auto cfg = load_config(o.config);
  if (o.epochs) cfg.teacher.epochs = *o.epochs;
  const auto out = ensure_dir(o.out.empty() ? join(cfg.output_dir, "teacher") : o.out);
  write_snapshot(join(out, "resolved_config.json"), "train-teacher",
                 {{"config", o.config}, {"out", out}, {"epochs", cfg.teacher.epochs}}, &cfg);

  Stopwatch clock;
  const auto data = config::load_data(cfg);
  spdlog::info("teacher: {} train / {} test samples, {} epochs", data.train.size(), data.test.size(),
               cfg.teacher.epochs);
  const auto run = config::teacher_stage(cfg, data);
  const double train_acc = nn::accuracy(run.model, data.train);
  const double test_acc = nn::accuracy(run.model, data.test);
  const auto counts = nn::count_macs_relus(cfg.model);

  nn::save_checkpoint(run.model, join(out, "teacher.ckpt"), {{"config", cfg.to_json()}, {"test_accuracy", test_acc}});

  std::ostringstream log;
  log << "epoch,loss,train_accuracy\n";
  for (const auto& e : run.logs) log << e.epoch << ',' << e.loss << ',' << e.train_accuracy << '\n';
  io::write_text(join(out, "train_log.csv"), log.str());

  std::ostringstream stats;
  stats << "model_digest,dataset,params,macs,relus,train_accuracy,test_accuracy,epochs,seconds\n"
        << cfg.model.digest() << ',' << dataset_name(cfg) << ',' << run.model.weight_count() << ','
        << static_cast<uint64_t>(counts.macs) << ',' << static_cast<uint64_t>(counts.relus) << ',' << train_acc << ','
        << test_acc << ',' << cfg.teacher.epochs << ',' << clock.seconds() << '\n';
  io::write_text(join(out, "teacher_metrics.csv"), stats.str());

  spdlog::info("teacher: train {:.4f} test {:.4f} in {:.1f}s -> {}", train_acc, test_acc, clock.seconds(), out);
  std::cout << stats.str();
  return kOk;
}

// ---------------------------------------------------------------- train-adaptive

struct AdaptiveOptions {
  std::string config;
  std::string teacher;
  std::string mode = "adaptive";
  std::string freeze_mode;
  std::string out;
};

std::string phase_log_csv(const std::vector<train::PhaseLog>& logs) {
  std::ostringstream os;
  os << "phase,epoch,task,weight_reg,relu_reg,kd_kl,kd_at,total,train_accuracy\n";
  for (const auto& l : logs) {
    os << l.phase << ',' << l.epoch << ',' << l.loss.task << ',' << l.loss.weight_reg << ',' << l.loss.relu_reg << ','
       << l.loss.kd_kl << ',' << l.loss.kd_at << ',' << l.loss.total() << ',' << l.train_accuracy << '\n';
  }
  return os.str();
}

int cmd_train_adaptive(const AdaptiveOptions& o) {
  auto cfg = load_config(o.config);
  if (!o.freeze_mode.empty()) cfg.adaptive.freeze_mode = train::freeze_mode_from(o.freeze_mode);
  ADAPI_ENFORCE(o.mode == "adaptive" || o.mode == "single", ConfigError, "--mode must be adaptive or single");
  const auto out = ensure_dir(o.out.empty() ? join(cfg.output_dir, o.mode == "single" ? "single" : "bundle") : o.out);

  std::optional<nn::Model> teacher;
  std::string teacher_digest;
  if (!o.teacher.empty()) {
    ADAPI_ENFORCE(fs::exists(o.teacher), ConfigError, "teacher checkpoint not found: " + o.teacher);
    teacher = nn::load_checkpoint(o.teacher);
    teacher_digest = io::sha256_hex(io::read_text(o.teacher));
  }
  const json options = {{"config", o.config},
                        {"teacher", o.teacher},
                        {"mode", o.mode},
                        {"freeze_mode", train::to_string(cfg.adaptive.freeze_mode)},
                        {"out", out}};
  write_snapshot(join(out, "resolved_config.json"), "train-adaptive", options, &cfg);

  // Provenance holds no paths or times so reruns are byte-identical.
  const json provenance_base = {{"command", "train-adaptive"},
                                {"mode", o.mode},
                                {"teacher_sha256", teacher_digest},
                                {"config", cfg.to_json()}};
  Stopwatch clock;
  const auto data = config::load_data(cfg);
  const nn::Model* tp = teacher ? &*teacher : nullptr;

  auto report = [](const std::vector<train::LevelMetrics>& metrics) {
    for (const auto& m : metrics) {
      spdlog::info("  {}: accuracy {:.4f}, weight density {:.4f}, relu density {:.4f}, relus {}", m.level, m.accuracy,
                   m.realized_weight_density, m.realized_relu_density, m.relus);
    }
  };

  if (o.mode == "adaptive") {
    auto res = config::adaptive_stage(cfg, data, tp);
    res.bundle.provenance = provenance_base;
    train::save_bundle(res.bundle, out);
    io::write_text(join(out, "train_log.csv"), phase_log_csv(res.logs));
    spdlog::info("adaptive bundle in {:.1f}s -> {}", clock.seconds(), out);
    report(res.bundle.metrics);
    std::cout << train::metrics_csv(res.bundle.metrics);
    return kOk;
  }

  std::vector<train::LevelMetrics> all;
  for (size_t i = 0; i < cfg.adaptive.schedule.size(); ++i) {
    const auto& level = cfg.adaptive.schedule.levels[i];
    auto res = config::single_stage(cfg, data, tp, i);
    res.bundle.provenance = provenance_base;
    res.bundle.provenance["level"] = level.name;
    const auto dir = ensure_dir(join(out, level.name));
    train::save_bundle(res.bundle, dir);
    io::write_text(join(dir, "train_log.csv"), phase_log_csv(res.logs));
    all.insert(all.end(), res.bundle.metrics.begin(), res.bundle.metrics.end());
    spdlog::info("single {} done at {:.1f}s", level.name, clock.seconds());
  }
  io::write_text(join(out, "metrics.csv"), train::metrics_csv(all));
  report(all);
  std::cout << train::metrics_csv(all);
  return kOk;
}

// ---------------------------------------------------------------- export

struct ExportOptions {
  std::string bundle;
  std::string level;
  std::string out;
  std::optional<uint64_t> seed;
  std::string config;
};

int cmd_export(const ExportOptions& o) {
  const auto bundle = train::load_bundle(o.bundle);
  const auto cfg = bundle_config(bundle, o.config);
  const uint64_t seed = o.seed.value_or(cfg.seed);
  const auto out = ensure_dir(o.out.empty() ? join(join(o.bundle, "export"), o.level) : o.out);
  write_snapshot(join(out, "resolved_config.json"), "export",
                 {{"bundle", o.bundle}, {"level", o.level}, {"seed", seed}, {"out", out}}, &cfg);
  const auto [server, client] =
      runtime::deploy(bundle, o.level, seed, ring::FixedPointCodec(cfg.simulate.frac_bits));
  runtime::save_package(server, join(out, "server.pkg"));
  runtime::save_package(client, join(out, "client.pkg"));
  spdlog::info("exported {} (digest {}) -> {}", o.level, server.metadata_digest().substr(0, 16), out);
  return kOk;
}

// ---------------------------------------------------------------- simulate

struct SimulateOptions {
  std::string bundle;
  std::string config;
  std::string level = "all";
  std::string transport = "local";
  std::string role = "both";
  std::string host = "127.0.0.1";
  uint16_t port = 0;
  std::optional<size_t> limit;
  std::optional<std::string> comparison;
  std::optional<size_t> batch_size;
  std::string package;
  std::string out;
  std::optional<uint64_t> seed;
};

struct LevelOutcome {
  std::string level;
  size_t samples = 0;
  std::optional<double> secure_accuracy;
  std::optional<double> plain_accuracy;
  std::optional<double> agreement;
  double measured_mb = 0;         // one party's view, both directions, all samples
  double measured_relu_mb = 0;
  double modeled_mb = 0;          // samples * first-principles volume
  double modeled_latency_s = 0;   // per inference
  double modeled_energy_j = 0;
  double wall_seconds = 0;
  cost::Reconciliation reconciliation;
};

runtime::PairResult run_both_tcp(const SimulateOptions& o, const runtime::SharePackage& s,
                                 const runtime::SharePackage& c, const nn::RealTensor& x, size_t batch,
                                 const runtime::RuntimeOptions& ro) {
  net::TcpListener listener(o.host, o.port);
  std::unique_ptr<net::Channel> client_ch;
  std::exception_ptr connect_error;
  std::thread connector([&] {
    try {
      client_ch = net::tcp_connect(o.host, listener.port(), runtime::kClient);
    } catch (...) {
      connect_error = std::current_exception();
    }
  });
  auto server_ch = listener.accept(runtime::kServer, std::chrono::seconds(30));
  connector.join();
  if (connect_error) std::rethrow_exception(connect_error);
  return runtime::simulate_pair(*server_ch, *client_ch, s, c, x, batch, ro);
}

int cmd_simulate(const SimulateOptions& o) {
  ADAPI_ENFORCE(o.transport == "local" || o.transport == "tcp", ConfigError, "--transport must be local or tcp");
  ADAPI_ENFORCE(o.role == "both" || o.role == "server" || o.role == "client", ConfigError,
                "--role must be both, server or client");
  ADAPI_ENFORCE(o.role == "both" || o.transport == "tcp", ConfigError, "separate roles need --transport tcp");
  ADAPI_ENFORCE(!o.bundle.empty(), ConfigError, "--bundle is required");

  const auto bundle = train::load_bundle(o.bundle);
  auto cfg = bundle_config(bundle, o.config);
  if (o.limit) cfg.simulate.limit = *o.limit;
  if (o.comparison) cfg.simulate.comparison = runtime::comparison_from(*o.comparison);
  if (o.batch_size) cfg.simulate.batch_size = *o.batch_size;
  ADAPI_ENFORCE(cfg.simulate.batch_size > 0, ConfigError, "--batch-size must be positive");
  ADAPI_ENFORCE(cfg.model == bundle.model.spec(), ConfigError, "configured model differs from the bundle");
  const uint64_t seed = o.seed.value_or(cfg.seed);

  std::vector<std::string> levels;
  std::optional<runtime::SharePackage> pkg_server, pkg_client;
  if (!o.package.empty()) {
    if (o.role != "client") pkg_server = runtime::load_package(join(o.package, "server.pkg"));
    if (o.role != "server") pkg_client = runtime::load_package(join(o.package, "client.pkg"));
    const auto& any = pkg_server ? *pkg_server : *pkg_client;
    ADAPI_ENFORCE(o.level == "all" || o.level == any.level.name, ConfigError,
                  "--level " + o.level + " differs from the package level " + any.level.name);
    ADAPI_ENFORCE(any.spec == bundle.model.spec(), ConfigError, "package model differs from the bundle");
    levels.push_back(any.level.name);
  } else if (o.level == "all") {
    for (const auto& l : bundle.family.schedule.levels) levels.push_back(l.name);
  } else {
    levels.push_back(o.level);
  }

  const auto out = ensure_dir(o.out.empty() ? join(o.bundle, "simulate") : o.out);
  write_snapshot(join(out, "resolved_config.json"), "simulate",
                 {{"bundle", o.bundle},
                  {"level", o.level},
                  {"transport", o.transport},
                  {"role", o.role},
                  {"host", o.host},
                  {"port", o.port},
                  {"package", o.package},
                  {"seed", seed},
                  {"out", out}},
                 &cfg);

  // Only the client needs data; the server never sees inputs or labels.
  nn::Dataset test;
  if (o.role != "server") {
    test = config::load_data(cfg).test;
    if (cfg.simulate.limit > 0 && cfg.simulate.limit < test.size()) test = test.head(cfg.simulate.limit);
  }

  runtime::RuntimeOptions ro;
  ro.comparison = cfg.simulate.comparison;
  ro.dealer_seed = seed;
  const ring::FixedPointCodec codec(cfg.simulate.frac_bits);

  std::vector<LevelOutcome> outcomes;
  json levels_json = json::array();
  for (const auto& name : levels) {
    const size_t li = bundle.family.schedule.index_of(name);
    runtime::SharePackage server, client;
    if (!o.package.empty()) {
      if (pkg_server) server = *pkg_server;
      if (pkg_client) client = *pkg_client;
    } else {
      std::tie(server, client) = runtime::deploy(bundle, name, seed, codec);
    }

    spdlog::info("simulate {}: {} over {} as {}", name, runtime::to_string(ro.comparison), o.transport, o.role);
    Stopwatch clock;
    std::optional<runtime::InferenceResult> client_result;
    runtime::InferenceTranscript transcript;
    if (o.role == "both") {
      auto pair = o.transport == "local"
                      ? runtime::simulate_local(server, client, test.x, cfg.simulate.batch_size, ro)
                      : run_both_tcp(o, server, client, test.x, cfg.simulate.batch_size, ro);
      ADAPI_ENFORCE(pair.server.transcript.totals.sent_bytes == pair.client.transcript.totals.received_bytes &&
                        pair.client.transcript.totals.sent_bytes == pair.server.transcript.totals.received_bytes,
                    ProtocolError, "server and client transcripts disagree");
      io::write_text(join(out, "transcript_" + name + "_server.json"), pair.server.transcript.to_json().dump(2) + "\n");
      transcript = pair.client.transcript;
      client_result = std::move(pair.client);
    } else if (o.role == "server") {
      auto ch = net::tcp_listen(o.host, o.port, runtime::kServer);
      auto r = runtime::run_server(*ch, server, ro);
      transcript = r.transcript;
    } else {
      auto ch = net::tcp_connect(o.host, o.port, runtime::kClient);
      client_result = runtime::run_client(*ch, client, test.x, cfg.simulate.batch_size, ro);
      transcript = client_result->transcript;
    }
    const std::string side = o.role == "server" ? "server" : "client";
    io::write_text(join(out, "transcript_" + name + "_" + side + ".json"), transcript.to_json().dump(2) + "\n");

    LevelOutcome oc;
    oc.level = name;
    oc.samples = transcript.samples;
    oc.wall_seconds = clock.seconds();
    oc.measured_mb = static_cast<double>(transcript.total_bytes()) / 1e6;
    oc.measured_relu_mb = static_cast<double>(transcript.relu_payload_bytes()) / 1e6;
    const auto mask_set = bundle.family.mask_set(li);
    oc.modeled_mb = static_cast<double>(oc.samples) *
                    cost::comm_volume_bytes(bundle.model.spec(), &mask_set, cost::VolumeMode::FirstPrinciples) / 1e6;
    const auto report = cost::cost_report(bundle.model.spec(), bundle.family, cfg.device);
    oc.modeled_latency_s = report.rows[li].latency_s;
    oc.modeled_energy_j = report.rows[li].energy_j;
    oc.reconciliation = cost::reconcile(bundle.model.spec(), bundle.family.levels[li], transcript);
    if (client_result) {
      const auto secure = nn::argmax_rows(client_result->revealed);
      const auto plain = nn::argmax_rows(nn::predict(bundle.model, test.x, &mask_set));
      size_t hit = 0, plain_hit = 0, agree = 0;
      for (size_t i = 0; i < secure.size(); ++i) {
        hit += secure[i] == test.y[i];
        plain_hit += plain[i] == test.y[i];
        agree += secure[i] == plain[i];
      }
      const double n = static_cast<double>(std::max<size_t>(secure.size(), 1));
      oc.secure_accuracy = hit / n;
      oc.plain_accuracy = plain_hit / n;
      oc.agreement = agree / n;
    }
    spdlog::info("  {} samples in {:.2f}s, measured {:.3f} MB (relu {:.3f}), modeled {:.3f} MB", oc.samples,
                 oc.wall_seconds, oc.measured_mb, oc.measured_relu_mb, oc.modeled_mb);

    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };
    levels_json.push_back({{"level", name},
                           {"samples", oc.samples},
                           {"secure_accuracy", opt(oc.secure_accuracy)},
                           {"plaintext_accuracy", opt(oc.plain_accuracy)},
                           {"agreement", opt(oc.agreement)},
                           {"measured_mb", oc.measured_mb},
                           {"measured_relu_payload_mb", oc.measured_relu_mb},
                           {"modeled_mb", oc.modeled_mb},
                           {"modeled_latency_s", oc.modeled_latency_s},
                           {"modeled_energy_j", oc.modeled_energy_j},
                           {"wall_seconds", oc.wall_seconds},
                           {"relu_deviation", oc.reconciliation.relu_deviation()},
                           {"total_deviation", oc.reconciliation.total_deviation()}});
    outcomes.push_back(std::move(oc));
  }

  std::ostringstream csv;
  csv << "level,samples,secure_accuracy,plaintext_accuracy,agreement,measured_mb,measured_relu_payload_mb,modeled_mb,"
         "modeled_latency_s,modeled_energy_j,wall_seconds\n";
  auto cell = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& oc : outcomes) {
    csv << oc.level << ',' << oc.samples << ',' << cell(oc.secure_accuracy) << ',' << cell(oc.plain_accuracy) << ','
        << cell(oc.agreement) << ',' << oc.measured_mb << ',' << oc.measured_relu_mb << ',' << oc.modeled_mb << ','
        << oc.modeled_latency_s << ',' << oc.modeled_energy_j << ',' << oc.wall_seconds << '\n';
  }
  const auto suffix = o.role == "both" ? std::string() : "_" + o.role;
  io::write_text(join(out, "simulate" + suffix + ".csv"), csv.str());

  cost::CostReport rep = cost::cost_report(bundle.model.spec(), bundle.family, cfg.device,
                                           cfg.calibration ? &*cfg.calibration : nullptr, &bundle.metrics);
  rep.reconciliation.clear();
  for (const auto& oc : outcomes) rep.reconciliation.push_back(oc.reconciliation);
  io::write_text(join(out, "simulate" + suffix + ".json"),
                 json({{"comparison", runtime::to_string(ro.comparison)},
                       {"transport", o.transport},
                       {"role", o.role},
                       {"levels", levels_json},
                       {"cost_report", rep.to_json()}})
                         .dump(2) +
                     "\n");
  std::cout << csv.str();
  return kOk;
}

// ---------------------------------------------------------------- cost-report

struct CostOptions {
  std::string bundle;
  std::string config;
  bool reference = false;
  std::string format = "csv";
  std::string out;
  std::string calibration;
};

std::string reference_csv(const cost::VolumeFit& fit, const std::vector<double>& factors, const cost::DeviceProfile& p) {
  std::ostringstream os;
  os << "table,group,level,relus_k,comm_mb,calibrated_comm_mb,relative_error\n";
  for (const auto& r : cost::reference_volume_rows()) {
    const auto& g = fit.group(r.group);
    const double mb = (g.slope_bytes_per_relu * r.relus_k * 1e3 + g.offset_bytes) / 1e6;
    os << "volume," << r.group << ',' << r.level << ',' << r.relus_k << ',' << r.comm_mb << ',' << mb << ','
       << (mb - r.comm_mb) / r.comm_mb << '\n';
  }
  os << "table,group,level,macs_m,relus_k,normalized_relu_k,implied_macs_per_relu,latency_s,energy_j,modeled_energy_j\n";
  const auto& rows = cost::reference_latency_rows();
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    os << "latency," << r.group << ',' << r.level << ',' << r.macs_m << ',' << r.relus_k << ','
       << r.normalized_relu_k << ',' << factors[i] << ',' << r.latency_s << ',' << r.energy_j << ','
       << cost::energy_joules(r.latency_s, p) << '\n';
  }
  return os.str();
}

json reference_json(const cost::VolumeFit& fit, const std::vector<double>& factors, const cost::DeviceProfile& p) {
  json groups = json::array();
  for (const auto& g : fit.groups) groups.push_back(g.to_json());
  json volume = json::array();
  for (const auto& r : cost::reference_volume_rows()) {
    const auto& g = fit.group(r.group);
    const double mb = (g.slope_bytes_per_relu * r.relus_k * 1e3 + g.offset_bytes) / 1e6;
    volume.push_back({{"group", r.group},
                      {"level", r.level},
                      {"relus_k", r.relus_k},
                      {"comm_mb", r.comm_mb},
                      {"calibrated_comm_mb", mb},
                      {"relative_error", (mb - r.comm_mb) / r.comm_mb}});
  }
  json latency = json::array();
  const auto& rows = cost::reference_latency_rows();
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    latency.push_back({{"group", r.group},
                       {"level", r.level},
                       {"implied_macs_per_relu", factors[i]},
                       {"latency_s", r.latency_s},
                       {"energy_j", r.energy_j},
                       {"modeled_energy_j", cost::energy_joules(r.latency_s, p)}});
  }
  return {{"format", 1},
          {"slope_bytes_per_relu", fit.slope_bytes_per_relu},
          {"max_relative_error", fit.max_relative_error},
          {"groups", groups},
          {"volume", volume},
          {"latency", latency},
          {"profile", p.to_json()},
          {"profile_implied_macs_per_relu", cost::implied_macs_per_relu(p)}};
}

// A reference group name selects the fitted constants; anything else is a
// calibration file.
std::optional<cost::Calibration> resolve_calibration(const std::string& arg,
                                                     const std::optional<cost::Calibration>& configured) {
  if (arg.empty()) return configured;
  const auto fit = cost::fit_volume(cost::reference_volume_rows());
  for (const auto& g : fit.groups) {
    if (g.group == arg) return g;
  }
  ADAPI_ENFORCE(fs::exists(arg), ConfigError, "--calibration is neither a reference group nor a file: " + arg);
  return cost::Calibration::from_json(config::read_config_file(arg));
}

int cmd_cost_report(const CostOptions& o) {
  ADAPI_ENFORCE(o.format == "csv" || o.format == "json", ConfigError, "--format must be csv or json");
  std::string text;
  json snapshot_options = {{"bundle", o.bundle}, {"config", o.config}, {"reference", o.reference},
                           {"format", o.format}, {"calibration", o.calibration}};
  std::optional<config::ExperimentConfig> cfg;

  if (o.reference) {
    cost::DeviceProfile p;
    if (!o.config.empty()) p = (cfg = load_config(o.config))->device;
    const auto fit = cost::fit_volume(cost::reference_volume_rows());
    const auto factors = cost::implied_factors(cost::reference_latency_rows());
    text = o.format == "csv" ? reference_csv(fit, factors, p) : reference_json(fit, factors, p).dump(2) + "\n";
  } else {
    ADAPI_ENFORCE(!o.bundle.empty() || !o.config.empty(), ConfigError, "pass --bundle, --config or --reference");
    std::optional<train::ModelBundle> bundle;
    masks::MaskFamily family;
    if (!o.bundle.empty()) {
      bundle = train::load_bundle(o.bundle);
      cfg = bundle_config(*bundle, o.config);
      family = bundle->family;
    } else {
      cfg = load_config(o.config);
      family = config::uniform_family(*cfg);
    }
    const auto cal = resolve_calibration(o.calibration, cfg->calibration);
    const auto spec = bundle ? bundle->model.spec() : cfg->model;
    const auto rep = cost::cost_report(spec, family, cfg->device, cal ? &*cal : nullptr,
                                       bundle ? &bundle->metrics : nullptr);
    text = o.format == "csv" ? rep.to_csv() : rep.to_json().dump(2) + "\n";
  }

  if (o.out.empty()) {
    std::cout << text;
  } else {
    const auto parent = fs::path(o.out).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    io::write_text(o.out, text);
    auto snap = fs::path(o.out);
    snap.replace_extension(".resolved_config.json");
    write_snapshot(snap.string(), "cost-report", snapshot_options, cfg ? &*cfg : nullptr);
    spdlog::info("cost report -> {}", o.out);
  }
  return kOk;
}

// ---------------------------------------------------------------- verify-bundle

struct VerifyOptions {
  std::string bundle;
  bool evaluate = false;
  std::string config;
};

int cmd_verify_bundle(const VerifyOptions& o) {
  const auto bundle = train::load_bundle(o.bundle);  // format, checksums, digests
  const auto& spec = bundle.model.spec();
  bundle.family.validate(spec);
  if (const auto v = masks::check_nesting(bundle.family)) {
    throw FormatError("mask family is not nested: level " + std::to_string(v->sparser_level) + " sets position " +
                      std::to_string(v->index) + (v->weight ? " of weight tensor " : " of feature tensor ") +
                      std::to_string(v->tensor) + " that level " + std::to_string(v->denser_level) + " drops");
  }
  bool ok = true;
  std::cout << "level,kind,tensor,size,kept,density,target,within_one\n";
  for (size_t li = 0; li < bundle.family.levels.size(); ++li) {
    const auto& level = bundle.family.schedule.levels[li];
    const auto& lm = bundle.family.levels[li];
    auto row = [&](const char* kind, size_t t, const masks::BinaryMask& m, double target) {
      const double size = static_cast<double>(m.size());
      const bool within = std::abs(m.density() - target) <= 1.0 / size + 1e-12;
      ok = ok && within;
      std::cout << level.name << ',' << kind << ',' << t << ',' << m.size() << ',' << m.popcount() << ','
                << m.density() << ',' << target << ',' << (within ? "yes" : "no") << '\n';
    };
    for (size_t t = 0; t < lm.weight.size(); ++t) row("weight", t, lm.weight[t], level.weight_density);
    for (size_t t = 0; t < lm.feature.size(); ++t) row("feature", t, lm.feature[t], level.relu_density);
  }
  ADAPI_ENFORCE(ok, FormatError, "realized mask density deviates from its target by more than one element");

  if (o.evaluate) {
    const auto cfg = bundle_config(bundle, o.config);
    const auto test = config::load_data(cfg).test;
    const auto fresh = train::evaluate_levels(bundle.model, bundle.family, test);
    for (size_t i = 0; i < fresh.size(); ++i) {
      const double stored = i < bundle.metrics.size() ? bundle.metrics[i].accuracy : -1;
      spdlog::info("{}: stored accuracy {:.4f}, recomputed {:.4f}", fresh[i].level, stored, fresh[i].accuracy);
      ADAPI_ENFORCE(std::abs(stored - fresh[i].accuracy) < 1e-12, FormatError,
                    "stored metrics for " + fresh[i].level + " do not match the weights");
    }
  }
  spdlog::info("bundle {} is consistent ({} levels, model {})", o.bundle, bundle.family.levels.size(),
               spec.digest().substr(0, 16));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("adapi"));
  spdlog::set_pattern("[%H:%M:%S] %v");

  CLI::App app{"Two-party private inference with adaptive ReLU and weight masks"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  TeacherOptions teacher;
  auto* t = app.add_subcommand("train-teacher", "Train the unmasked teacher model");
  t->add_option("--config", teacher.config, "Experiment config (.toml or .json)")->required();
  t->add_option("--epochs", teacher.epochs, "Override the configured epoch count");
  t->add_option("--out", teacher.out, "Output directory (default <output_dir>/teacher)");

  AdaptiveOptions adaptive;
  auto* a = app.add_subcommand("train-adaptive", "Train one weight set with nested masks, or per-level baselines");
  a->add_option("--config", adaptive.config, "Experiment config (.toml or .json)")->required();
  a->add_option("--teacher", adaptive.teacher, "Teacher checkpoint, required when distillation is enabled");
  a->add_option("--mode", adaptive.mode, "adaptive: one bundle with every level; single: one model per level")
      ->check(CLI::IsMember({"adaptive", "single"}));
  a->add_option("--freeze-mode", adaptive.freeze_mode, "Override the sequential phase's update rule")
      ->check(CLI::IsMember({"freeze-core", "retrain-all"}));
  a->add_option("--out", adaptive.out, "Output directory (default <output_dir>/bundle or /single)");

  ExportOptions exp;
  auto* e = app.add_subcommand("export", "Split a bundle level into server and client share packages");
  e->add_option("--bundle", exp.bundle, "Bundle directory")->required();
  e->add_option("--level", exp.level, "Density level name, e.g. L4")->required();
  e->add_option("--out", exp.out, "Output directory (default <bundle>/export/<level>)");
  e->add_option("--seed", exp.seed, "Sharing seed (default: config seed)");
  e->add_option("--config", exp.config, "Use this config instead of the one embedded in the bundle");

  SimulateOptions sim;
  auto* s = app.add_subcommand("simulate", "Run two-party inference on the test split and meter it");
  s->add_option("--bundle", sim.bundle, "Bundle directory")->required();
  s->add_option("--config", sim.config, "Use this config instead of the one embedded in the bundle");
  s->add_option("--level", sim.level, "Level name or 'all'");
  s->add_option("--transport", sim.transport, "local or tcp")->check(CLI::IsMember({"local", "tcp"}));
  s->add_option("--role", sim.role, "both runs the two parties locally; server or client runs one side over tcp")
      ->check(CLI::IsMember({"both", "server", "client"}));
  s->add_option("--host", sim.host, "TCP host");
  s->add_option("--port", sim.port, "TCP port (0 picks a free one with --role both)");
  s->add_option("--limit", sim.limit, "Only the first N test samples");
  s->add_option("--comparison", sim.comparison, "ReLU comparison protocol")->check(CLI::IsMember({"signbit", "ot"}));
  s->add_option("--batch-size", sim.batch_size, "Samples per protocol batch");
  s->add_option("--package", sim.package, "Directory with exported server.pkg / client.pkg");
  s->add_option("--seed", sim.seed, "Sharing and dealer seed (default: config seed)");
  s->add_option("--out", sim.out, "Output directory (default <bundle>/simulate)");

  CostOptions cost_opts;
  auto* c = app.add_subcommand("cost-report", "Analytic latency, communication and energy per level");
  c->add_option("--bundle", cost_opts.bundle, "Bundle directory");
  c->add_option("--config", cost_opts.config, "Config; without --bundle, masks are drawn at the scheduled densities");
  c->add_flag("--reference", cost_opts.reference, "Fit and check the published reference measurements");
  c->add_option("--format", cost_opts.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  c->add_option("--out", cost_opts.out, "Output file (default stdout)");
  c->add_option("--calibration", cost_opts.calibration, "Reference group name or calibration file");

  VerifyOptions verify;
  auto* v = app.add_subcommand("verify-bundle", "Check a bundle's integrity, nesting and densities");
  v->add_option("--bundle", verify.bundle, "Bundle directory")->required();
  v->add_flag("--evaluate", verify.evaluate, "Recompute per-level accuracy and compare with stored metrics");
  v->add_option("--config", verify.config, "Use this config instead of the one embedded in the bundle");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kConfig;
  }
  if (quiet) spdlog::set_level(spdlog::level::warn);

  try {
    if (*t) return cmd_train_teacher(teacher);
    if (*a) return cmd_train_adaptive(adaptive);
    if (*e) return cmd_export(exp);
    if (*s) return cmd_simulate(sim);
    if (*c) return cmd_cost_report(cost_opts);
    if (*v) return cmd_verify_bundle(verify);
  } catch (const std::exception& err) {
    spdlog::error("{}", err.what());
    return exit_code_for(err);
  }
  return kOther;
}

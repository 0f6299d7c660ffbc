// Thin Python surface over the C++ library. Structured results cross the
// boundary as JSON text and are decoded by the package's __init__.
#include <cstdint>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "adapi/config.h"
#include "adapi/container.h"
#include "adapi/cost.h"
#include "adapi/mpc.h"
#include "adapi/ot.h"
#include "adapi/parties.h"
#include "adapi/runtime.h"

namespace py = pybind11;
using namespace adapi;

namespace {

std::string resolved_config(const std::string& path) { return config::load_experiment(path).to_json().dump(); }

std::string reference_fit() {
  const auto fit = cost::fit_volume(cost::reference_volume_rows());
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : fit.groups) groups.push_back(g.to_json());
  return nlohmann::json{{"slope_bytes_per_relu", fit.slope_bytes_per_relu},
                        {"max_relative_error", fit.max_relative_error},
                        {"groups", groups},
                        {"implied_factors", cost::implied_factors(cost::reference_latency_rows())}}
      .dump();
}

std::string cost_report_for_config(const std::string& path) {
  const auto cfg = config::load_experiment(path);
  return cost::cost_report(cfg.model, config::uniform_family(cfg), cfg.device).to_json().dump();
}

std::string cost_report_for_bundle(const std::string& dir) {
  const auto bundle = train::load_bundle(dir);
  cost::DeviceProfile profile;
  if (bundle.provenance.contains("config")) {
    profile = config::ExperimentConfig::from_json(bundle.provenance.at("config")).device;
  }
  return cost::cost_report(bundle.model.spec(), bundle.family, profile, nullptr, &bundle.metrics).to_json().dump();
}

// Teacher and adaptive stages as the CLI runs them, without writing files
// unless `bundle_dir` is given.
std::string train_from_config(const std::string& path, const std::string& bundle_dir) {
  const auto cfg = config::load_experiment(path);
  const auto data = config::load_data(cfg);
  const auto teacher = config::teacher_stage(cfg, data).model;
  auto res = config::adaptive_stage(cfg, data, cfg.adaptive.kd.enabled ? &teacher : nullptr);
  res.bundle.provenance = {{"command", "python"}, {"mode", "adaptive"}, {"config", cfg.to_json()}};
  if (!bundle_dir.empty()) train::save_bundle(res.bundle, bundle_dir);
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& m : res.bundle.metrics) {
    levels.push_back({{"level", m.level}, {"accuracy", m.accuracy}, {"relus", m.relus}, {"macs", m.macs},
                      {"realized_weight_density", m.realized_weight_density},
                      {"realized_relu_density", m.realized_relu_density}});
  }
  return nlohmann::json{{"teacher_accuracy", nn::accuracy(teacher, data.test)}, {"levels", levels}}.dump();
}

std::string simulate(const std::string& bundle_dir, const std::string& level, size_t limit,
                     const std::string& comparison) {
  const auto bundle = train::load_bundle(bundle_dir);
  ADAPI_ENFORCE(bundle.provenance.contains("config"), ConfigError, "bundle has no embedded configuration");
  const auto cfg = config::ExperimentConfig::from_json(bundle.provenance.at("config"));
  auto test = config::load_data(cfg).test;
  if (limit > 0 && limit < test.size()) test = test.head(limit);
  const auto [s, c] = runtime::deploy(bundle, level, cfg.seed, ring::FixedPointCodec(cfg.simulate.frac_bits));
  runtime::RuntimeOptions opts;
  opts.comparison = runtime::comparison_from(comparison);
  const auto r = runtime::simulate_local(s, c, test.x, cfg.simulate.batch_size, opts);
  const auto ms = bundle.family.mask_set(bundle.family.schedule.index_of(level));
  const auto secure = nn::argmax_rows(r.client.revealed);
  const auto plain = nn::argmax_rows(nn::predict(bundle.model, test.x, &ms));
  size_t hit = 0, agree = 0;
  for (size_t i = 0; i < secure.size(); ++i) {
    hit += secure[i] == test.y[i];
    agree += secure[i] == plain[i];
  }
  const double n = static_cast<double>(secure.size());
  const auto rc = cost::reconcile(bundle.model.spec(), bundle.family.levels[bundle.family.schedule.index_of(level)],
                                  r.client.transcript);
  return nlohmann::json{{"level", level},
                        {"samples", secure.size()},
                        {"secure_accuracy", hit / n},
                        {"agreement", agree / n},
                        {"total_bytes", r.client.transcript.total_bytes()},
                        {"relu_payload_bytes", r.client.transcript.relu_payload_bytes()},
                        {"relu_deviation", rc.relu_deviation()},
                        {"transcript", r.client.transcript.to_json()}}
      .dump();
}

// Secure product and comparison of signed 64-bit inputs over an in-process
// channel; reconstructed results.
std::vector<int64_t> secure_mul(const std::vector<int64_t>& x, const std::vector<int64_t>& y, uint64_t seed) {
  ADAPI_ENFORCE(x.size() == y.size(), ShapeError, "operands differ in length");
  share::RingTensor a({x.size()}), b({y.size()});
  for (size_t i = 0; i < x.size(); ++i) {
    a[i] = ring::RingElement(static_cast<uint64_t>(x[i]));
    b[i] = ring::RingElement(static_cast<uint64_t>(y[i]));
  }
  Prg rng(seed, 1);
  const auto [a0, a1] = share::share(a, rng);
  const auto [b0, b1] = share::share(b, rng);
  auto [r0, r1] = run_local(
      [&](mpc::Context& ctx) {
        auto t = ctx.dealer().beaver(mpc::BilinearSpec::elementwise({x.size()}));
        return mpc::secure_mul(ctx, ctx.party() == 0 ? a0 : a1, ctx.party() == 0 ? b0 : b1, t);
      },
      seed, seed + 1);
  const auto out = share::reconstruct(r0, r1);
  std::vector<int64_t> v(out.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = out[i].as_signed();
  return v;
}

std::vector<int> drelu(const std::vector<int64_t>& x, const std::string& comparison, uint64_t seed) {
  share::RingTensor a({x.size()});
  for (size_t i = 0; i < x.size(); ++i) a[i] = ring::RingElement(static_cast<uint64_t>(x[i]));
  Prg rng(seed, 2);
  const auto [a0, a1] = share::share(a, rng);
  const bool ot = runtime::comparison_from(comparison) == runtime::Comparison::Ot;
  auto [r0, r1] = run_local(
      [&](mpc::Context& ctx) {
        const auto& mine = ctx.party() == 0 ? a0 : a1;
        if (!ot) return mpc::drelu(ctx, mine);
        auto session = mpc::ot_setup(ctx, 0, ring::OtGroup::paper_width());
        return mpc::drelu_ot(ctx, session, mine);
      },
      seed, seed + 1);
  const auto out = share::reconstruct(r0, r1);
  std::vector<int> v(out.numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(out[i].value);
  return v;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-party private inference with adaptive masks";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ProtocolError>(m, "ProtocolError", PyExc_RuntimeError);
  py::register_exception<TransportError>(m, "TransportError", PyExc_RuntimeError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def("encode", [](double x, int frac_bits) { return ring::FixedPointCodec(frac_bits).encode(x).as_signed(); },
        py::arg("x"), py::arg("frac_bits") = 16);
  m.def("decode",
        [](int64_t r, int frac_bits) {
          return ring::FixedPointCodec(frac_bits).decode(ring::RingElement(static_cast<uint64_t>(r)));
        },
        py::arg("r"), py::arg("frac_bits") = 16);
  m.def("secure_mul", &secure_mul, py::arg("x"), py::arg("y"), py::arg("seed") = 1);
  m.def("drelu", &drelu, py::arg("x"), py::arg("comparison") = "signbit", py::arg("seed") = 1);
  m.def("relu_element_bytes", &cost::relu_element_bytes);
  m.def("_resolved_config", &resolved_config);
  m.def("_reference_fit", &reference_fit);
  m.def("_cost_report_for_config", &cost_report_for_config);
  m.def("_cost_report_for_bundle", &cost_report_for_bundle);
  m.def("_train", &train_from_config, py::arg("config"), py::arg("bundle_dir") = "");
  m.def("_simulate", &simulate, py::arg("bundle"), py::arg("level"), py::arg("limit") = 0,
        py::arg("comparison") = "signbit");
}

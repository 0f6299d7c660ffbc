#include "adapi/config.h"

#include <cstdlib>
#include <filesystem>
#include <set>

#include <toml.hpp>

#include "adapi/container.h"

namespace adapi::config {

namespace {

using Json = nlohmann::json;

Json node_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    Json out = Json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = node_to_json(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    Json out = Json::array();
    for (const auto& v : *a) out.push_back(node_to_json(v));
    return out;
  }
  if (const auto* s = node.as_string()) return s->get();
  if (const auto* i = node.as_integer()) return i->get();
  if (const auto* f = node.as_floating_point()) return f->get();
  if (const auto* b = node.as_boolean()) return b->get();
  throw ConfigError("unsupported TOML value (dates and times are not accepted)");
}

// Whitelist of keys per section; nested sections are checked by the caller.
void require_keys(const Json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a table");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

const std::set<std::string> kOptimizerKeys = {"kind", "lr", "beta1", "beta2", "eps", "weight_decay", "momentum", "cosine"};

void check_phase(const Json& j, const std::string& where) {
  require_keys(j, where, {"epochs", "batch_size", "optimizer"});
  if (j.contains("optimizer")) require_keys(j.at("optimizer"), where + ".optimizer", kOptimizerKeys);
}

// Rewrites idx paths as absolute so a resolved snapshot loads from anywhere.
void check_dataset(Json& d, const std::string& base_dir) {
  if (!d.is_object() || !d.contains("kind")) throw ConfigError("dataset: 'kind' is required");
  const std::string kind = d.at("kind").get<std::string>();
  if (kind == "two_moons") {
    require_keys(d, "dataset", {"kind", "train", "test", "noise", "seed"});
  } else if (kind == "blobs") {
    require_keys(d, "dataset", {"kind", "train", "test", "classes", "dims", "spread", "seed"});
  } else if (kind == "idx") {
    require_keys(d, "dataset", {"kind", "train_images", "train_labels", "test_images", "test_labels", "classes"});
    for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"}) {
      if (!d.contains(key)) throw ConfigError(std::string("dataset: '") + key + "' is required for idx data");
      std::filesystem::path p = d.at(key).get<std::string>();
      if (!p.is_absolute()) p = std::filesystem::path(base_dir) / p;
      if (!std::filesystem::exists(p)) throw ConfigError("dataset: file not found: " + p.string());
      d[key] = std::filesystem::weakly_canonical(p).string();
    }
  } else {
    throw ConfigError("dataset: unknown kind '" + kind + "'");
  }
}

}  // namespace

SimulateConfig SimulateConfig::from_json(const Json& j) {
  require_keys(j, "simulate", {"comparison", "batch_size", "limit", "frac_bits"});
  SimulateConfig c;
  if (j.contains("comparison")) c.comparison = runtime::comparison_from(j.at("comparison").get<std::string>());
  c.batch_size = j.value("batch_size", c.batch_size);
  c.limit = j.value("limit", c.limit);
  c.frac_bits = j.value("frac_bits", c.frac_bits);
  ADAPI_ENFORCE(c.batch_size > 0, ConfigError, "simulate.batch_size must be positive");
  ADAPI_ENFORCE(c.frac_bits > 0 && c.frac_bits < 32, ConfigError, "simulate.frac_bits must be in [1, 31]");
  return c;
}

Json SimulateConfig::to_json() const {
  return {{"comparison", runtime::to_string(comparison)},
          {"batch_size", batch_size},
          {"limit", limit},
          {"frac_bits", frac_bits}};
}

nn::TeacherConfig teacher_from_json(const Json& j) {
  require_keys(j, "teacher", {"epochs", "batch_size", "optimizer"});
  nn::TeacherConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  ADAPI_ENFORCE(t.batch_size > 0, ConfigError, "teacher.batch_size must be positive");
  if (j.contains("optimizer")) {
    require_keys(j.at("optimizer"), "teacher.optimizer", kOptimizerKeys);
    t.optimizer = nn::OptimizerConfig::from_json(j.at("optimizer"), t.optimizer);
  }
  return t;
}

Json teacher_to_json(const nn::TeacherConfig& t) {
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"optimizer", t.optimizer.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const Json& j, const std::string& base_dir) {
  require_keys(j, "config",
               {"name", "seed", "output_dir", "dataset", "model", "teacher", "adaptive", "device", "calibration",
                "simulate"});
  ExperimentConfig c;
  c.base_dir = base_dir;
  try {
    c.name = j.value("name", c.name);
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", "runs/" + c.name);

    if (!j.contains("dataset")) throw ConfigError("config: [dataset] is required");
    c.dataset = j.at("dataset");
    check_dataset(c.dataset, base_dir);

    if (!j.contains("model")) throw ConfigError("config: [model] is required");
    const auto& m = j.at("model");
    require_keys(m, "model", {"input_shape", "classes", "layers"});
    c.model = nn::ModelSpec::build(m.at("input_shape").get<Shape>(), m.at("classes").get<size_t>(), m.at("layers"));

    if (j.contains("teacher")) c.teacher = teacher_from_json(j.at("teacher"));
    if (j.contains("adaptive")) {
      const auto& a = j.at("adaptive");
      require_keys(a, "adaptive",
                   {"lambda", "mu", "kd", "soft_phase", "sequential", "freeze_mode", "threshold_scope", "schedule"});
      if (a.contains("kd")) {
        require_keys(a.at("kd"), "adaptive.kd", {"enabled", "alpha_kl", "alpha_at", "temperature", "attention_layers"});
      }
      if (a.contains("soft_phase")) check_phase(a.at("soft_phase"), "adaptive.soft_phase");
      if (a.contains("sequential")) check_phase(a.at("sequential"), "adaptive.sequential");
      if (a.contains("schedule")) {
        for (const auto& lv : a.at("schedule")) require_keys(lv, "adaptive.schedule", {"name", "weight_density", "relu_density"});
      }
      c.adaptive = train::AdaptiveConfig::from_json(a);
      if (c.adaptive.kd.attention_layers) {
        for (size_t li : *c.adaptive.kd.attention_layers) {
          ADAPI_ENFORCE(li < c.model.layers.size(), ConfigError, "adaptive.kd.attention_layers: layer out of range");
        }
      }
    }
    if (j.contains("device")) c.device = cost::DeviceProfile::from_json(j.at("device"));
    if (j.contains("calibration") && !j.at("calibration").is_null()) {
      require_keys(j.at("calibration"), "calibration", {"slope_bytes_per_relu", "offset_bytes", "group"});
      c.calibration = cost::Calibration::from_json(j.at("calibration"));
    }
    if (j.contains("simulate")) c.simulate = SimulateConfig::from_json(j.at("simulate"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

Json ExperimentConfig::to_json() const {
  Json j = {{"name", name},
            {"seed", seed},
            {"output_dir", output_dir},
            {"dataset", dataset},
            {"model", {{"input_shape", model.input_shape}, {"classes", model.classes}, {"layers", model.to_json().at("layers")}}},
            {"teacher", teacher_to_json(teacher)},
            {"adaptive", adaptive.to_json()},
            {"device", device.to_json()},
            {"simulate", simulate.to_json()}};
  if (calibration) j["calibration"] = calibration->to_json();
  return j;
}

Json toml_to_json(const std::string& text) {
  try {
    return node_to_json(toml::parse(text));
  } catch (const toml::parse_error& e) {
    throw ConfigError(std::string("TOML parse error: ") + std::string(e.description()) + " at line " +
                      std::to_string(e.source().begin.line));
  }
}

Json read_config_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path);
  const std::string text = io::read_text(path);
  const auto ext = std::filesystem::path(path).extension().string();
  if (ext == ".toml") return toml_to_json(text);
  if (ext == ".json") {
    try {
      return Json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("JSON parse error in " + path + ": " + e.what());
    }
  }
  throw ConfigError("config must be .toml or .json: " + path);
}

ExperimentConfig load_experiment(const std::string& path) {
  // Relative dataset paths are relative to the config file.
  const auto base = std::filesystem::absolute(path).parent_path();
  return ExperimentConfig::from_json(read_config_file(path), base.string());
}

void apply_seed_override(ExperimentConfig& cfg) {
  if (const char* s = std::getenv("ADAPI_SEED"); s && *s) {
    try {
      size_t used = 0;
      cfg.seed = std::stoull(s, &used);
      if (used != std::string(s).size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError(std::string("ADAPI_SEED must be an unsigned integer, got '") + s + "'");
    }
  }
}

nn::DataSplit load_data(const ExperimentConfig& cfg) { return nn::load_dataset(cfg.dataset, cfg.base_dir); }

TeacherRun teacher_stage(const ExperimentConfig& cfg, const nn::DataSplit& data) {
  auto rng = cfg.rng(kTeacherStream);
  TeacherRun run{nn::Model(cfg.model), {}};
  run.model.init(rng);
  run.logs = nn::train_teacher(run.model, data.train, cfg.teacher, rng);
  return run;
}

namespace {

nn::Model starting_point(const ExperimentConfig& cfg, const nn::Model* teacher) {
  ADAPI_ENFORCE(teacher || !cfg.adaptive.kd.enabled, ConfigError,
                "distillation is enabled but no teacher checkpoint was given");
  if (teacher) {
    ADAPI_ENFORCE(teacher->spec() == cfg.model, ConfigError, "teacher architecture differs from the configured model");
    return *teacher;
  }
  auto rng = cfg.rng(kInitStream);
  nn::Model m(cfg.model);
  m.init(rng);
  return m;
}

}  // namespace

train::AdaptiveResult adaptive_stage(const ExperimentConfig& cfg, const nn::DataSplit& data, const nn::Model* teacher) {
  const auto init = starting_point(cfg, teacher);
  auto rng = cfg.rng(kAdaptiveStream);
  return train::train_adaptive(init, data.train, data.test, teacher, cfg.adaptive, rng);
}

train::AdaptiveResult single_stage(const ExperimentConfig& cfg, const nn::DataSplit& data, const nn::Model* teacher,
                                   size_t level) {
  ADAPI_ENFORCE(level < cfg.adaptive.schedule.size(), ConfigError, "level index out of range");
  const auto init = starting_point(cfg, teacher);
  auto rng = cfg.rng(kSingleStream + level);
  return train::train_single(init, cfg.adaptive.schedule.levels[level], data.train, data.test, teacher, cfg.adaptive,
                             rng);
}

masks::MaskFamily uniform_family(const ExperimentConfig& cfg) {
  auto rng = cfg.rng(kUniformMaskStream);
  std::vector<nn::RealTensor> sw, sf;
  for (size_t li : cfg.model.weight_layers()) {
    nn::RealTensor t(cfg.model.layers[li].weight_shape());
    for (auto& v : t.vec()) v = rng.uniform_real();
    sw.push_back(std::move(t));
  }
  for (size_t li : cfg.model.relu_layers()) {
    nn::RealTensor t(cfg.model.layers[li].out_shape);
    for (auto& v : t.vec()) v = rng.uniform_real();
    sf.push_back(std::move(t));
  }
  return masks::mask_family(sw, sf, cfg.adaptive.schedule, cfg.adaptive.scope);
}

}  // namespace adapi::config

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "adapi/adaptive.h"
#include "adapi/cost.h"
#include "adapi/data.h"
#include "adapi/nn.h"
#include "adapi/runtime.h"

namespace adapi::config {

struct SimulateConfig {
  runtime::Comparison comparison = runtime::Comparison::SignBit;
  size_t batch_size = 64;
  size_t limit = 0;  // 0 runs the whole test split
  int frac_bits = 16;

  static SimulateConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Everything a command needs, with every default spelled out by to_json().
struct ExperimentConfig {
  std::string name = "experiment";
  uint64_t seed = 7;
  std::string output_dir;  // defaults to runs/<name>, relative to the working directory
  nlohmann::json dataset;
  nn::ModelSpec model;
  nn::TeacherConfig teacher;
  train::AdaptiveConfig adaptive;
  cost::DeviceProfile device;
  std::optional<cost::Calibration> calibration;
  SimulateConfig simulate;
  std::string base_dir = ".";  // relative dataset paths resolve here

  // Rejects unknown keys at every level and checks dataset files exist.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::string& base_dir = ".");
  nlohmann::json to_json() const;

  // Seed streams per stage, so stages can be rerun independently.
  Prg rng(uint64_t stage) const { return Prg(seed, stage); }
};

// Parses .toml or .json by extension into JSON.
nlohmann::json read_config_file(const std::string& path);
nlohmann::json toml_to_json(const std::string& text);
ExperimentConfig load_experiment(const std::string& path);

nn::TeacherConfig teacher_from_json(const nlohmann::json& j);
nlohmann::json teacher_to_json(const nn::TeacherConfig& t);

// ADAPI_SEED, when set, replaces the configured seed.
void apply_seed_override(ExperimentConfig& cfg);

// Seed stream of each pipeline stage; single-level baselines use
// kSingleStream + level index.
enum Stream : uint64_t {
  kTeacherStream = 1,
  kAdaptiveStream = 2,
  kInitStream = 3,
  kUniformMaskStream = 4,
  kSingleStream = 16,
};

nn::DataSplit load_data(const ExperimentConfig& cfg);

struct TeacherRun {
  nn::Model model;
  std::vector<nn::EpochLog> logs;
};
TeacherRun teacher_stage(const ExperimentConfig& cfg, const nn::DataSplit& data);

// Starts from the teacher when given, else from a fresh initialization.
// Distillation with no teacher is a ConfigError.
train::AdaptiveResult adaptive_stage(const ExperimentConfig& cfg, const nn::DataSplit& data, const nn::Model* teacher);
train::AdaptiveResult single_stage(const ExperimentConfig& cfg, const nn::DataSplit& data, const nn::Model* teacher,
                                   size_t level);

// Nested masks at the scheduled densities over seeded random scores, for
// analytic reports on untrained architectures.
masks::MaskFamily uniform_family(const ExperimentConfig& cfg);

}  // namespace adapi::config

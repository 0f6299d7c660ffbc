#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "adapi/config.h"
#include "adapi/container.h"

using namespace adapi::config;
namespace fs = std::filesystem;

namespace {

const std::string kSource = ADAPI_SOURCE_DIR;

std::string temp_file(const std::string& name, const std::string& text) {
  const auto dir = fs::temp_directory_path() / "adapi_test_config";
  fs::create_directories(dir);
  const auto path = (dir / name).string();
  adapi::io::write_text(path, text);
  return path;
}

const char* kMinimal = R"(
name = "tiny"
[dataset]
kind = "two_moons"
train = 40
test = 20
[model]
input_shape = [2]
classes = 2
layers = [{ type = "linear", out_features = 4 }, { type = "relu" }, { type = "linear", out_features = 2 }]
)";

}  // namespace

TEST_CASE("shipped configs load and round trip through the resolved snapshot") {
  for (const char* name : {"moons", "digits"}) {
    CAPTURE(name);
    const auto cfg = load_experiment(kSource + "/configs/" + name + ".toml");
    CHECK(cfg.name == name);
    CHECK(cfg.adaptive.schedule.size() == 4);
    const auto again = ExperimentConfig::from_json(cfg.to_json());
    CHECK(again.to_json() == cfg.to_json());
    CHECK(again.model == cfg.model);
  }
  const auto digits = load_experiment(kSource + "/configs/digits.toml");
  CHECK(fs::path(digits.dataset.at("train_images").get<std::string>()).is_absolute());
  CHECK(load_data(digits).test.size() > 0);
}

TEST_CASE("defaults are spelled out") {
  const auto cfg = ExperimentConfig::from_json(toml_to_json(kMinimal));
  const auto j = cfg.to_json();
  CHECK(j.at("seed") == 7);
  CHECK(j.at("output_dir") == "runs/tiny");
  CHECK(j.at("adaptive").at("freeze_mode") == "freeze-core");
  CHECK(j.at("adaptive").at("schedule").size() == 4);
  CHECK(j.at("device").at("power_watts") == 9.1);
  CHECK(j.at("simulate").at("comparison") == "signbit");
  CHECK_FALSE(j.contains("calibration"));
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(toml_to_json("name = ["), adapi::ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(toml_to_json(std::string(kMinimal) + "bogus = 1\n")),
                  adapi::ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(toml_to_json(std::string(kMinimal) + "[teacher]\nepoch = 3\n")),
                  adapi::ConfigError);
  CHECK_THROWS_AS(load_experiment("/nonexistent/config.toml"), adapi::ConfigError);

  const auto missing = temp_file("missing.toml", R"(
[dataset]
kind = "idx"
train_images = "nope/train-images"
train_labels = "nope/train-labels"
test_images = "nope/test-images"
test_labels = "nope/test-labels"
[model]
input_shape = [1, 8, 8]
classes = 10
layers = [{ type = "flatten" }, { type = "linear", out_features = 10 }]
)");
  CHECK_THROWS_AS(load_experiment(missing), adapi::ConfigError);

  // Shapes are checked when the model is built.
  std::string bad = kMinimal;
  bad.replace(bad.find("out_features = 2"), 16, "out_features = 3");
  CHECK_THROWS_AS(ExperimentConfig::from_json(toml_to_json(bad)), adapi::ConfigError);
}

TEST_CASE("seed override and per-stage streams") {
  auto cfg = ExperimentConfig::from_json(toml_to_json(kMinimal));
  ::setenv("ADAPI_SEED", "123", 1);
  apply_seed_override(cfg);
  CHECK(cfg.seed == 123);
  ::setenv("ADAPI_SEED", "12x", 1);
  CHECK_THROWS_AS(apply_seed_override(cfg), adapi::ConfigError);
  ::unsetenv("ADAPI_SEED");

  auto a = cfg.rng(kTeacherStream), b = cfg.rng(kTeacherStream), c = cfg.rng(kAdaptiveStream);
  const auto va = a.next_u64();
  CHECK(va == b.next_u64());
  CHECK(va != c.next_u64());
}

TEST_CASE("pipeline stages are deterministic") {
  auto cfg = ExperimentConfig::from_json(toml_to_json(kMinimal));
  cfg.teacher.epochs = 2;
  cfg.adaptive.soft_phase.epochs = 1;
  cfg.adaptive.sequential.epochs = 1;
  const auto data = load_data(cfg);
  const auto t1 = teacher_stage(cfg, data), t2 = teacher_stage(cfg, data);
  CHECK(t1.model.params()[0].weight == t2.model.params()[0].weight);

  const auto a = adaptive_stage(cfg, data, &t1.model), b = adaptive_stage(cfg, data, &t1.model);
  CHECK(a.bundle.family == b.bundle.family);
  CHECK(a.bundle.model.params()[2].weight == b.bundle.model.params()[2].weight);

  auto no_kd = cfg;
  CHECK_THROWS_AS(adaptive_stage(no_kd, data, nullptr), adapi::ConfigError);
  no_kd.adaptive.kd.enabled = false;
  CHECK(adaptive_stage(no_kd, data, nullptr).bundle.family.levels.size() == 4);

  const auto single = single_stage(cfg, data, &t1.model, 0);
  CHECK(single.bundle.family.levels.size() == 1);
  CHECK_THROWS_AS(single_stage(cfg, data, &t1.model, 9), adapi::ConfigError);

  const auto fam = uniform_family(cfg);
  CHECK(fam.levels.size() == 4);
  CHECK_FALSE(adapi::masks::check_nesting(fam).has_value());
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "adapi/adaptive.h"
#include "adapi/container.h"

using adapi::Prg;
using namespace adapi::train;
using adapi::nn::Model;
using adapi::nn::ModelSpec;

namespace {

ModelSpec mlp(size_t hidden = 16) {
  return ModelSpec::build({2}, 2, nlohmann::json::parse(R"([
    {"type":"linear","out_features":)" + std::to_string(hidden) + R"(},{"type":"relu"},
    {"type":"linear","out_features":)" + std::to_string(hidden) + R"(},{"type":"relu"},
    {"type":"linear","out_features":2}])"));
}

ModelSpec tiny_cnn() {
  return ModelSpec::build({1, 4, 4}, 3, nlohmann::json::parse(R"([
    {"type":"conv","out_channels":2,"kernel":3,"pad":1},{"type":"relu"},{"type":"avgpool","size":2},
    {"type":"flatten"},{"type":"linear","out_features":3}])"));
}

AdaptiveConfig quick_config() {
  AdaptiveConfig cfg;
  cfg.soft_phase.epochs = 3;
  cfg.sequential.epochs = 2;
  cfg.schedule = adapi::masks::DensitySchedule{{{"L4", 0.05, 0.05}, {"L3", 0.1, 0.1}, {"L2", 0.2, 0.2},
                                                {"L1", 0.4, 0.4}}};
  return cfg;
}

struct GradCheck {
  double diff2 = 0, norm2 = 0;
  void add(double a, double n) {
    diff2 += (a - n) * (a - n);
    norm2 += (std::abs(a) + std::abs(n)) * (std::abs(a) + std::abs(n));
  }
  double rel() const { return std::sqrt(diff2) / std::max(std::sqrt(norm2), 1e-12); }
};

}  // namespace

TEST_CASE("softplus straight-through estimator") {
  CHECK(ste_backward(0.0, 1.0) == doctest::Approx(0.5));
  CHECK(ste_backward(50.0, 1.0) == doctest::Approx(1.0));
  CHECK(ste_backward(0.0, 3.0) == doctest::Approx(1.5));
  Prg rng(1, 1);
  for (int i = 0; i < 200; ++i) {
    const double m = 6 * rng.normal();
    const double h = 1e-5;
    const double fd = (softplus(m + h) - softplus(m - h)) / (2 * h);
    CHECK(std::abs(ste_backward(m, 1.0) - fd) <= 1e-6 * std::max(std::abs(fd), 1e-3));
  }
}

TEST_CASE("sparsity regularizer") {
  using adapi::masks::BinaryMask;
  std::vector<RealTensor> soft = {RealTensor({4}, std::vector<double>{0, 1, -1, 2})};
  std::vector<BinaryMask> ones = {BinaryMask::ones({4})};
  CHECK(sparsity_regularizer(ones, soft).value == 1.0);
  std::vector<BinaryMask> half = {BinaryMask({4}, {1, 0, 1, 0})};
  const auto r = sparsity_regularizer(half, soft);
  CHECK(r.value == 0.5);
  for (size_t i = 0; i < 4; ++i) CHECK(r.grad[0][i] == doctest::Approx(logistic(soft[0][i]) / 4));
}

TEST_CASE("distillation terms") {
  const RealTensor s({1, 2}, std::vector<double>{0, 0});
  const RealTensor t({1, 2}, std::vector<double>{std::log(3.0), 0});
  CHECK(kl_distillation(s, s, 4.0).value == doctest::Approx(0.0));
  // p_t = (0.75, 0.25), p_s = (0.5, 0.5).
  CHECK(kl_distillation(s, t, 1.0).value ==
        doctest::Approx(0.75 * std::log(1.5) + 0.25 * std::log(0.5)).epsilon(1e-12));
  const RealTensor z({2, 3, 2, 2}, 0.0);
  CHECK(attention_transfer(z, z).value == 0.0);

  Prg rng(3, 3);
  RealTensor a({2, 3, 2, 2}), b({2, 3, 2, 2});
  for (auto& v : a.vec()) v = rng.normal();
  for (auto& v : b.vec()) v = rng.normal();
  CHECK(attention_transfer(a, a).value == doctest::Approx(0.0));
  const auto at = attention_transfer(a, b);
  const auto kl = kl_distillation(a.reshaped({2, 12}), b.reshaped({2, 12}), 2.0);
  GradCheck ga, gk;
  for (size_t i = 0; i < a.numel(); ++i) {
    const double h = 1e-6, saved = a[i];
    a[i] = saved + h;
    const double up_a = attention_transfer(a, b).value, up_k = kl_distillation(a.reshaped({2, 12}), b.reshaped({2, 12}), 2.0).value;
    a[i] = saved - h;
    const double dn_a = attention_transfer(a, b).value, dn_k = kl_distillation(a.reshaped({2, 12}), b.reshaped({2, 12}), 2.0).value;
    a[i] = saved;
    ga.add(at.grad[i], (up_a - dn_a) / (2 * h));
    gk.add(kl.grad[i], (up_k - dn_k) / (2 * h));
  }
  CHECK(ga.rel() < 1e-5);
  CHECK(gk.rel() < 1e-5);
  CHECK_THROWS_AS(attention_transfer(a, RealTensor({2, 12})), adapi::ShapeError);
}

TEST_CASE("relaxed objective gradient matches finite differences") {
  for (const auto& spec : {mlp(6), tiny_cnn()}) {
    Model student(spec), teacher(spec);
    Prg rng(21, 4);
    student.init(rng);
    teacher.init(rng);
    RealTensor x(adapi::Shape{3});
    {
      adapi::Shape s = {3};
      s.insert(s.end(), spec.input_shape.begin(), spec.input_shape.end());
      x = RealTensor(s);
      for (auto& v : x.vec()) v = rng.normal();
    }
    const std::vector<int> y = {0, 1, 1};
    SoftMasks soft = SoftMasks::init(student, rng);
    for (auto& t : soft.feature) {
      for (auto& v : t.vec()) v = rng.normal();
    }
    AdaptiveConfig cfg;
    cfg.kd.alpha_at = 10.0;
    cfg.kd.attention_layers = spec.relu_layers();
    const auto level = cfg.schedule.levels.front();
    const auto r = soft_objective(student, soft, x, y, &teacher, cfg, MaskMode::Relaxed, level);
    CHECK(r.loss.total() == doctest::Approx(r.loss.task + r.loss.weight_reg + r.loss.relu_reg + r.loss.kd_kl +
                                            r.loss.kd_at).epsilon(1e-12));
    auto total = [&]() {
      return soft_objective(student, soft, x, y, &teacher, cfg, MaskMode::Relaxed, level).loss.total();
    };
    GradCheck check;
    const double h = 1e-6;
    for (int kind = 0; kind < 2; ++kind) {
      auto& list = kind == 0 ? soft.weight : soft.feature;
      const auto& grads = kind == 0 ? r.soft_weight : r.soft_feature;
      for (size_t k = 0; k < list.size(); ++k) {
        for (size_t i = 0; i < list[k].numel(); ++i) {
          const double saved = list[k][i];
          list[k][i] = saved + h;
          const double up = total();
          list[k][i] = saved - h;
          const double dn = total();
          list[k][i] = saved;
          check.add(grads[k][i], (up - dn) / (2 * h));
        }
      }
    }
    CHECK(check.rel() < 1e-4);
  }
}

TEST_CASE("hard mode pins densities and zero-weight objective reduces to the task loss") {
  const auto spec = mlp();
  Model m(spec);
  Prg rng(5, 5);
  m.init(rng);
  SoftMasks soft = SoftMasks::init(m, rng);
  AdaptiveConfig cfg;
  cfg.lambda = cfg.mu = 0;
  cfg.kd.enabled = false;
  const RealTensor x({4, 2}, 0.5);
  const std::vector<int> y = {0, 1, 0, 1};
  const auto full = soft_objective(m, soft, x, y, nullptr, cfg, MaskMode::Hard, {"all", 1.0, 1.0});
  CHECK(full.loss.total() == doctest::Approx(adapi::nn::cross_entropy(adapi::nn::forward(m, x), y).loss));
}

TEST_CASE("freeze-core keeps every sparser level bit-identical") {
  Prg drng(9, 9);
  const auto data = adapi::nn::two_moons(300, 0.1, drng);
  const auto spec = mlp();
  Model teacher(spec);
  Prg rng(2, 2);
  teacher.init(rng);
  adapi::nn::TeacherConfig tc;
  tc.epochs = 5;
  adapi::nn::train_teacher(teacher, data, tc, rng);

  const AdaptiveConfig cfg = quick_config();
  Model model = teacher;
  SoftMasks soft = SoftMasks::init(model, rng);
  optimize_soft_phase(model, soft, data, &teacher, cfg, rng);
  const auto family = adapi::masks::mask_family(soft.weight, soft.feature, cfg.schedule);

  std::vector<RealTensor> after_level(family.levels.size());
  sequential_train(model, family, data, &teacher, cfg, rng, [&](size_t level, const Model& m) {
    const auto ms = family.mask_set(level);
    after_level[level] = adapi::nn::forward(m, data.x, &ms);
  });
  for (size_t k = 0; k < family.levels.size(); ++k) {
    const auto ms = family.mask_set(k);
    CHECK(adapi::nn::forward(model, data.x, &ms) == after_level[k]);
  }

  // Retrain-all touches shared weights, so the sparsest level moves.
  AdaptiveConfig all = cfg;
  all.freeze_mode = FreezeMode::RetrainAll;
  Model m2 = teacher;
  RealTensor first;
  sequential_train(m2, family, data, &teacher, all, rng, [&](size_t level, const Model& m) {
    if (level == 0) {
      const auto ms = family.mask_set(0);
      first = adapi::nn::forward(m, data.x, &ms);
    }
  });
  const auto ms0 = family.mask_set(0);
  CHECK_FALSE(adapi::nn::forward(m2, data.x, &ms0) == first);

  // Refuses a family that is not nested.
  auto broken = family;
  std::swap(broken.levels[0], broken.levels[3]);
  CHECK_THROWS_AS(sequential_train(model, broken, data, &teacher, cfg, rng), adapi::TrainingError);
}

TEST_CASE("adaptive pipeline, bundle round trip and determinism") {
  Prg drng(9, 9);
  const auto data = adapi::nn::two_moons(200, 0.1, drng);
  const auto spec = mlp();
  Model teacher(spec);
  Prg trng(2, 2);
  teacher.init(trng);
  const AdaptiveConfig cfg = quick_config();
  Prg r1(77, 0), r2(77, 0);
  const auto a = train_adaptive(teacher, data, data, &teacher, cfg, r1);
  const auto b = train_adaptive(teacher, data, data, &teacher, cfg, r2);
  CHECK_FALSE(adapi::masks::check_nesting(a.bundle.family).has_value());
  REQUIRE(a.bundle.metrics.size() == 4);
  for (size_t k = 0; k < 4; ++k) {
    CHECK(a.bundle.metrics[k].accuracy == b.bundle.metrics[k].accuracy);
    CHECK(std::abs(a.bundle.metrics[k].realized_relu_density - cfg.schedule.levels[k].relu_density) <= 1.0 / 16);
  }
  const auto dir = std::filesystem::temp_directory_path() / "adapi_test_bundle";
  const auto d1 = (dir / "one").string(), d2 = (dir / "two").string();
  save_bundle(a.bundle, d1);
  save_bundle(b.bundle, d2);
  for (const char* f : {"manifest.json", "weights.ckpt", "masks.bin", "metrics.csv"}) {
    CHECK(adapi::io::read_file(d1 + "/" + f) == adapi::io::read_file(d2 + "/" + f));
  }
  const auto back = load_bundle(d1);
  CHECK(back.family == a.bundle.family);
  CHECK(back.model.spec() == spec);
  CHECK(back.metrics.size() == 4);
  CHECK_THROWS_AS(load_bundle((dir / "missing").string()), adapi::ConfigError);

  const auto single = train_single(teacher, {"full", 1.0, 1.0}, data, data, &teacher, cfg, r1);
  CHECK(single.bundle.family.levels.size() == 1);
  CHECK(single.bundle.provenance["mode"] == "single");
  std::filesystem::remove_all(dir);
}

TEST_CASE("config parsing") {
  const auto cfg = AdaptiveConfig::from_json(nlohmann::json::parse(R"({
    "lambda": 0.5, "freeze_mode": "retrain-all", "threshold_scope": "global",
    "soft_phase": {"epochs": 2}, "kd": {"temperature": 2}})"));
  CHECK(cfg.lambda == 0.5);
  CHECK(cfg.freeze_mode == FreezeMode::RetrainAll);
  CHECK(cfg.scope == adapi::masks::ThresholdScope::Global);
  CHECK(cfg.soft_phase.epochs == 2);
  CHECK(cfg.soft_phase.optimizer.kind == "adamw");
  CHECK(cfg.sequential.optimizer.kind == "sgd");
  CHECK(cfg.kd.temperature == 2);
  CHECK_FALSE(cfg.kd.attention_layers.has_value());
  CHECK(cfg.kd.resolved_layers(tiny_cnn()) == std::vector<size_t>{1});
  CHECK(cfg.kd.resolved_layers(mlp()).empty());
  const auto none = KdConfig::from_json({{"attention_layers", nlohmann::json::array()}});
  REQUIRE(none.attention_layers.has_value());
  CHECK(none.attention_layers->empty());
  CHECK(AdaptiveConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  CHECK_THROWS_AS(AdaptiveConfig::from_json({{"freeze_mode", "sometimes"}}), adapi::ConfigError);
  CHECK_THROWS_AS(AdaptiveConfig::from_json({{"mu", -1}}), adapi::ConfigError);
}

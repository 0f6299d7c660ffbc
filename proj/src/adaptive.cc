#include "adapi/adaptive.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "adapi/container.h"
#include "adapi/errors.h"

namespace adapi::train {

double softplus(double m) { return m > 30 ? m : std::log1p(std::exp(m)); }

double logistic(double m) {
  if (m >= 0) return 1.0 / (1.0 + std::exp(-m));
  const double e = std::exp(m);
  return e / (1.0 + e);
}

double ste_backward(double m, double upstream) { return upstream * logistic(m); }

SoftMasks SoftMasks::init(const nn::Model& model, Prg& rng) {
  SoftMasks s;
  const auto& spec = model.spec();
  for (size_t li : spec.weight_layers()) {
    RealTensor t = model.layer(li).weight;
    for (auto& v : t.vec()) v = std::abs(v);
    s.weight.push_back(std::move(t));
  }
  for (size_t li : spec.relu_layers()) {
    RealTensor t(spec.layers[li].out_shape);
    for (auto& v : t.vec()) v = 0.01 + 0.001 * rng.uniform_real();
    s.feature.push_back(std::move(t));
  }
  return s;
}

namespace {

size_t total_size(std::span<const RealTensor> ts) {
  size_t n = 0;
  for (const auto& t : ts) n += t.numel();
  return n;
}

}  // namespace

RegularizerResult sparsity_regularizer(std::span<const masks::BinaryMask> hard, std::span<const RealTensor> soft) {
  ADAPI_ENFORCE(hard.size() == soft.size(), ShapeError, "one hard mask per soft mask required");
  RegularizerResult r;
  const size_t n = total_size(soft);
  if (n == 0) return r;
  size_t ones = 0;
  for (size_t k = 0; k < soft.size(); ++k) {
    require_same_shape(hard[k].shape, soft[k].shape(), "regularizer");
    ones += hard[k].popcount();
    RealTensor g(soft[k].shape());
    for (size_t i = 0; i < g.numel(); ++i) g[i] = logistic(soft[k][i]) / static_cast<double>(n);
    r.grad.push_back(std::move(g));
  }
  r.value = static_cast<double>(ones) / static_cast<double>(n);
  return r;
}

RegularizerResult relaxed_regularizer(std::span<const RealTensor> soft) {
  RegularizerResult r;
  const size_t n = total_size(soft);
  if (n == 0) return r;
  for (const auto& t : soft) {
    RealTensor g(t.shape());
    for (size_t i = 0; i < t.numel(); ++i) {
      r.value += softplus(t[i]);
      g[i] = logistic(t[i]) / static_cast<double>(n);
    }
    r.grad.push_back(std::move(g));
  }
  r.value /= static_cast<double>(n);
  return r;
}

KdConfig KdConfig::from_json(const nlohmann::json& j) {
  KdConfig c;
  c.enabled = j.value("enabled", c.enabled);
  c.alpha_kl = j.value("alpha_kl", c.alpha_kl);
  c.alpha_at = j.value("alpha_at", c.alpha_at);
  c.temperature = j.value("temperature", c.temperature);
  if (j.contains("attention_layers") && !j.at("attention_layers").is_null()) {
    c.attention_layers = j.at("attention_layers").get<std::vector<size_t>>();
  }
  ADAPI_ENFORCE(c.temperature > 0 && c.alpha_kl >= 0 && c.alpha_at >= 0, ConfigError,
                "distillation weights must be >= 0 and temperature > 0");
  return c;
}

nlohmann::json KdConfig::to_json() const {
  return {{"enabled", enabled}, {"alpha_kl", alpha_kl}, {"alpha_at", alpha_at}, {"temperature", temperature},
          {"attention_layers", attention_layers ? nlohmann::json(*attention_layers) : nlohmann::json()}};
}

std::vector<size_t> KdConfig::resolved_layers(const nn::ModelSpec& spec) const {
  if (attention_layers) return *attention_layers;
  std::vector<size_t> out;
  for (size_t li : spec.relu_layers()) {
    if (spec.layers[li].out_shape.size() == 3) out.push_back(li);
  }
  return out;
}

LossGrad kl_distillation(const RealTensor& s, const RealTensor& t, double temperature) {
  require_same_shape(s.shape(), t.shape(), "distillation logits");
  ADAPI_ENFORCE(s.rank() == 2, ShapeError, "distillation expects [N, C] logits");
  const size_t n = s.dim(0), c = s.dim(1);
  LossGrad out{0.0, RealTensor(s.shape())};
  std::vector<double> ps(c), pt(c);
  auto softmax = [&](const double* z, std::vector<double>& p) {
    double mx = z[0];
    for (size_t k = 1; k < c; ++k) mx = std::max(mx, z[k]);
    double sum = 0;
    for (size_t k = 0; k < c; ++k) sum += (p[k] = std::exp((z[k] - mx) / temperature));
    for (auto& v : p) v /= sum;
  };
  for (size_t i = 0; i < n; ++i) {
    softmax(s.data() + i * c, ps);
    softmax(t.data() + i * c, pt);
    for (size_t k = 0; k < c; ++k) {
      if (pt[k] > 0) out.value += pt[k] * (std::log(pt[k]) - std::log(std::max(ps[k], 1e-300)));
      out.grad[i * c + k] = temperature * (ps[k] - pt[k]) / static_cast<double>(n);
    }
  }
  out.value *= temperature * temperature / static_cast<double>(n);
  return out;
}

LossGrad attention_transfer(const RealTensor& student, const RealTensor& teacher) {
  require_same_shape(student.shape(), teacher.shape(), "attention pair");
  ADAPI_ENFORCE(student.rank() == 2 || student.rank() == 4, ShapeError, "attention expects [N,F] or [N,C,H,W]");
  const size_t n = student.dim(0);
  const size_t channels = student.rank() == 4 ? student.dim(1) : 1;
  const size_t positions = student.numel() / (n * channels);
  LossGrad out{0.0, RealTensor(student.shape())};
  std::vector<double> as(positions), at(positions), g(positions);
  auto map = [&](const RealTensor& x, size_t i, std::vector<double>& a) {
    std::fill(a.begin(), a.end(), 0.0);
    for (size_t c = 0; c < channels; ++c) {
      const double* p = x.data() + (i * channels + c) * positions;
      for (size_t q = 0; q < positions; ++q) a[q] += p[q] * p[q];
    }
    double norm = 0;
    for (double v : a) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 1e-12) {
      for (auto& v : a) v /= norm;
    }
    return norm;
  };
  const double denom = static_cast<double>(n * positions);
  for (size_t i = 0; i < n; ++i) {
    const double rs = map(student, i, as);
    map(teacher, i, at);
    double dot = 0;
    for (size_t q = 0; q < positions; ++q) {
      const double d = as[q] - at[q];
      out.value += d * d;
      g[q] = 2 * d / denom;
      dot += as[q] * g[q];
    }
    if (rs <= 1e-12) continue;
    // d a / d A = (I - a a^T) / |A|, and d A / d x = 2 x per channel.
    for (size_t q = 0; q < positions; ++q) g[q] = (g[q] - as[q] * dot) / rs;
    for (size_t c = 0; c < channels; ++c) {
      const size_t base = (i * channels + c) * positions;
      for (size_t q = 0; q < positions; ++q) out.grad[base + q] = g[q] * 2 * student[base + q];
    }
  }
  out.value /= denom;
  return out;
}

TripleLossBreakdown& TripleLossBreakdown::operator+=(const TripleLossBreakdown& o) {
  task += o.task;
  weight_reg += o.weight_reg;
  relu_reg += o.relu_reg;
  kd_kl += o.kd_kl;
  kd_at += o.kd_at;
  return *this;
}

TripleLossBreakdown TripleLossBreakdown::scaled(double s) const {
  return {task * s, weight_reg * s, relu_reg * s, kd_kl * s, kd_at * s};
}

nlohmann::json TripleLossBreakdown::to_json() const {
  return {{"task", task}, {"weight_reg", weight_reg}, {"relu_reg", relu_reg},
          {"kd_kl", kd_kl}, {"kd_at", kd_at},         {"total", total()}};
}

std::string to_string(FreezeMode mode) { return mode == FreezeMode::FreezeCore ? "freeze-core" : "retrain-all"; }

FreezeMode freeze_mode_from(const std::string& name) {
  if (name == "freeze-core") return FreezeMode::FreezeCore;
  if (name == "retrain-all") return FreezeMode::RetrainAll;
  throw ConfigError("freeze mode must be freeze-core or retrain-all, got '" + name + "'");
}

PhaseConfig PhaseConfig::from_json(const nlohmann::json& j, const PhaseConfig& d) {
  PhaseConfig c = d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  ADAPI_ENFORCE(c.batch_size > 0, ConfigError, "batch_size must be positive");
  if (j.contains("optimizer")) c.optimizer = nn::OptimizerConfig::from_json(j.at("optimizer"), d.optimizer);
  return c;
}

nlohmann::json PhaseConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"optimizer", optimizer.to_json()}};
}

PhaseConfig AdaptiveConfig::default_soft_phase() {
  PhaseConfig p;
  p.epochs = 20;
  p.optimizer.kind = "adamw";
  p.optimizer.lr = 1e-3;
  p.optimizer.weight_decay = 1e-4;
  return p;
}

PhaseConfig AdaptiveConfig::default_sequential() {
  PhaseConfig p;
  p.epochs = 10;
  p.optimizer.kind = "sgd";
  p.optimizer.lr = 0.01;
  p.optimizer.momentum = 0.9;
  p.optimizer.weight_decay = 1e-4;
  p.optimizer.cosine = true;
  return p;
}

AdaptiveConfig AdaptiveConfig::from_json(const nlohmann::json& j) {
  AdaptiveConfig c;
  try {
    c.lambda = j.value("lambda", c.lambda);
    c.mu = j.value("mu", c.mu);
    ADAPI_ENFORCE(c.lambda >= 0 && c.mu >= 0, ConfigError, "lambda and mu must be >= 0");
    if (j.contains("kd")) c.kd = KdConfig::from_json(j.at("kd"));
    if (j.contains("soft_phase")) c.soft_phase = PhaseConfig::from_json(j.at("soft_phase"), c.soft_phase);
    if (j.contains("sequential")) c.sequential = PhaseConfig::from_json(j.at("sequential"), c.sequential);
    if (j.contains("freeze_mode")) c.freeze_mode = freeze_mode_from(j.at("freeze_mode").get<std::string>());
    if (j.contains("threshold_scope")) {
      const auto s = j.at("threshold_scope").get<std::string>();
      ADAPI_ENFORCE(s == "per-tensor" || s == "global", ConfigError, "threshold_scope must be per-tensor or global");
      c.scope = s == "global" ? masks::ThresholdScope::Global : masks::ThresholdScope::PerTensor;
    }
    if (j.contains("schedule")) c.schedule = masks::DensitySchedule::from_json(j.at("schedule"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("adaptive config: ") + e.what());
  }
  return c;
}

nlohmann::json AdaptiveConfig::to_json() const {
  return {{"lambda", lambda},
          {"mu", mu},
          {"kd", kd.to_json()},
          {"soft_phase", soft_phase.to_json()},
          {"sequential", sequential.to_json()},
          {"freeze_mode", to_string(freeze_mode)},
          {"threshold_scope", scope == masks::ThresholdScope::Global ? "global" : "per-tensor"},
          {"schedule", schedule.to_json()}};
}

namespace {

struct KdTerms {
  double kl = 0, at = 0;
};

// Adds distillation gradients into dlogits and per-layer output gradients.
KdTerms add_distillation(const nn::Model& student, const nn::ForwardCache& scache, const nn::Model& teacher,
                         const RealTensor& x, const KdConfig& kd, RealTensor& dlogits,
                         std::vector<RealTensor>& output_grads) {
  KdTerms terms;
  nn::ForwardCache tcache;
  const RealTensor tlogits = nn::forward(teacher, x, nullptr, &tcache);
  if (kd.alpha_kl > 0) {
    const auto kl = kl_distillation(scache.activations.back(), tlogits, kd.temperature);
    terms.kl = kd.alpha_kl * kl.value;
    for (size_t i = 0; i < dlogits.numel(); ++i) dlogits[i] += kd.alpha_kl * kl.grad[i];
  }
  if (kd.alpha_at > 0) {
    const auto layers = kd.resolved_layers(student.spec());
    for (size_t li : layers) {
      ADAPI_ENFORCE(li < student.spec().layers.size(), ConfigError, "attention layer index out of range");
      const auto at = attention_transfer(scache.output_of(li), tcache.output_of(li));
      terms.at += kd.alpha_at * at.value;
      RealTensor& g = output_grads[li];
      if (g.empty()) g = RealTensor(at.grad.shape());
      for (size_t i = 0; i < g.numel(); ++i) g[i] += kd.alpha_at * at.grad[i];
    }
  }
  return terms;
}

ObjectiveResult run_objective(const nn::Model& model, const nn::MaskSet& masks, const RealTensor& x,
                              const std::vector<int>& y, const nn::Model* teacher, const KdConfig& kd) {
  ObjectiveResult r;
  nn::ForwardCache cache;
  const RealTensor logits = nn::forward(model, x, &masks, &cache);
  auto ce = nn::cross_entropy(logits, y);
  ADAPI_ENFORCE(std::isfinite(ce.loss), TrainingError, "task loss is not finite");
  r.loss.task = ce.loss;
  std::vector<RealTensor> output_grads(model.spec().layers.size());
  if (teacher && kd.enabled) {
    const auto t = add_distillation(model, cache, *teacher, x, kd, ce.grad, output_grads);
    r.loss.kd_kl = t.kl;
    r.loss.kd_at = t.at;
  }
  ADAPI_ENFORCE(std::isfinite(r.loss.total()), TrainingError, "training loss is not finite");
  r.grads = nn::backward(model, cache, ce.grad, &output_grads);
  r.predictions = nn::argmax_rows(logits);
  return r;
}

}  // namespace

ObjectiveResult soft_objective(const nn::Model& model, const SoftMasks& soft, const RealTensor& x,
                               const std::vector<int>& y, const nn::Model* teacher, const AdaptiveConfig& cfg,
                               MaskMode mode, const masks::DensityLevel& level) {
  nn::MaskSet masks;
  RegularizerResult rw, rr;
  if (mode == MaskMode::Hard) {
    const auto hw = masks::masks_for_density(soft.weight, level.weight_density, cfg.scope);
    const auto hr = masks::masks_for_density(soft.feature, level.relu_density, cfg.scope);
    for (const auto& m : hw) masks.weight.push_back(m.to_real());
    for (const auto& m : hr) masks.feature.push_back(m.to_real());
    rw = sparsity_regularizer(hw, soft.weight);
    rr = sparsity_regularizer(hr, soft.feature);
  } else {
    auto relax = [](const RealTensor& t) {
      RealTensor out(t.shape());
      for (size_t i = 0; i < t.numel(); ++i) out[i] = softplus(t[i]);
      return out;
    };
    for (const auto& t : soft.weight) masks.weight.push_back(relax(t));
    for (const auto& t : soft.feature) masks.feature.push_back(relax(t));
    rw = relaxed_regularizer(soft.weight);
    rr = relaxed_regularizer(soft.feature);
  }
  ObjectiveResult r = run_objective(model, masks, x, y, teacher, cfg.kd);
  r.loss.weight_reg = cfg.lambda * rw.value;
  r.loss.relu_reg = cfg.mu * rr.value;
  auto chain = [](const std::vector<RealTensor>& dmask, const std::vector<RealTensor>& soft_vals,
                  const std::vector<RealTensor>& reg_grad, double weight) {
    std::vector<RealTensor> out;
    for (size_t k = 0; k < soft_vals.size(); ++k) {
      RealTensor g(soft_vals[k].shape());
      for (size_t i = 0; i < g.numel(); ++i) {
        g[i] = ste_backward(soft_vals[k][i], dmask[k][i]) + weight * reg_grad[k][i];
      }
      out.push_back(std::move(g));
    }
    return out;
  };
  r.soft_weight = chain(r.grads.weight_masks, soft.weight, rw.grad, cfg.lambda);
  r.soft_feature = chain(r.grads.feature_masks, soft.feature, rr.grad, cfg.mu);
  return r;
}

ObjectiveResult masked_objective(const nn::Model& model, const nn::MaskSet& masks, const RealTensor& x,
                                 const std::vector<int>& y, const nn::Model* teacher, const KdConfig& kd) {
  return run_objective(model, masks, x, y, teacher, kd);
}

namespace {

template <class StepFn>
std::vector<PhaseLog> run_epochs(const std::string& phase, size_t epochs, size_t batch_size, const nn::Dataset& train,
                                 Prg& rng, StepFn&& step) {
  std::vector<PhaseLog> logs;
  for (size_t e = 0; e < epochs; ++e) {
    const auto order = nn::shuffled_indices(train.size(), rng);
    PhaseLog log{phase, e, {}, 0};
    size_t correct = 0;
    for (size_t start = 0; start < order.size(); start += batch_size) {
      const std::vector<size_t> idx(order.begin() + start,
                                    order.begin() + std::min(order.size(), start + batch_size));
      const RealTensor xb = train.batch_x(idx);
      const auto yb = train.batch_y(idx);
      const ObjectiveResult r = step(xb, yb);
      log.loss += r.loss.scaled(static_cast<double>(idx.size()));
      for (size_t i = 0; i < idx.size(); ++i) correct += r.predictions[i] == yb[i];
    }
    log.loss = log.loss.scaled(1.0 / static_cast<double>(train.size()));
    log.train_accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    logs.push_back(log);
  }
  return logs;
}

size_t steps_for(const PhaseConfig& p, size_t n) { return p.epochs * ((n + p.batch_size - 1) / p.batch_size); }

}  // namespace

std::vector<PhaseLog> optimize_soft_phase(nn::Model& model, SoftMasks& soft, const nn::Dataset& train,
                                          const nn::Model* teacher, const AdaptiveConfig& cfg, Prg& rng) {
  cfg.schedule.validate();
  const masks::DensityLevel& level = cfg.schedule.levels.front();
  nn::Optimizer opt(cfg.soft_phase.optimizer, steps_for(cfg.soft_phase, train.size()));
  const auto wl = model.spec().weight_layers();
  for (size_t li : wl) {
    opt.add(model.layer(li).weight, cfg.soft_phase.optimizer.weight_decay);
    opt.add(model.layer(li).bias, 0.0);
  }
  for (auto& t : soft.weight) opt.add(t, 0.0);
  for (auto& t : soft.feature) opt.add(t, 0.0);

  return run_epochs("soft", cfg.soft_phase.epochs, cfg.soft_phase.batch_size, train, rng,
                    [&](const RealTensor& xb, const std::vector<int>& yb) {
                      ObjectiveResult r = soft_objective(model, soft, xb, yb, teacher, cfg, MaskMode::Hard, level);
                      std::vector<const RealTensor*> grads;
                      for (size_t li : wl) {
                        grads.push_back(&r.grads.params[li].weight);
                        grads.push_back(&r.grads.params[li].bias);
                      }
                      for (const auto& g : r.soft_weight) grads.push_back(&g);
                      for (const auto& g : r.soft_feature) grads.push_back(&g);
                      opt.step(grads);
                      return r;
                    });
}

std::vector<PhaseLog> sequential_train(nn::Model& model, const masks::MaskFamily& family, const nn::Dataset& train,
                                       const nn::Model* teacher, const AdaptiveConfig& cfg, Prg& rng,
                                       const LevelHook& hook) {
  family.validate(model.spec());
  if (const auto v = masks::check_nesting(family)) {
    throw TrainingError("mask family is not nested: level " + std::to_string(v->sparser_level) + " vs " +
                        std::to_string(v->denser_level) + ", tensor " + std::to_string(v->tensor) + ", index " +
                        std::to_string(v->index));
  }
  const auto wl = model.spec().weight_layers();
  std::vector<PhaseLog> logs;
  for (size_t level = 0; level < family.levels.size(); ++level) {
    const nn::MaskSet masks = family.mask_set(level);
    nn::Optimizer opt(cfg.sequential.optimizer, steps_for(cfg.sequential, train.size()));
    const bool biases_train = cfg.freeze_mode == FreezeMode::RetrainAll || level == 0;
    for (size_t k = 0; k < wl.size(); ++k) {
      const auto& now = family.levels[level].weight[k].bits;
      std::vector<uint8_t> trainable(now);
      if (cfg.freeze_mode == FreezeMode::FreezeCore && level > 0) {
        const auto& before = family.levels[level - 1].weight[k].bits;
        for (size_t i = 0; i < trainable.size(); ++i) trainable[i] = now[i] && !before[i];
      }
      auto& p = model.layer(wl[k]);
      opt.add(p.weight, cfg.sequential.optimizer.weight_decay, std::move(trainable));
      opt.add(p.bias, 0.0, std::vector<uint8_t>(p.bias.numel(), biases_train ? 1 : 0));
    }
    auto level_logs = run_epochs(family.schedule.levels[level].name, cfg.sequential.epochs,
                                 cfg.sequential.batch_size, train, rng,
                                 [&](const RealTensor& xb, const std::vector<int>& yb) {
                                   ObjectiveResult r = masked_objective(model, masks, xb, yb, teacher, cfg.kd);
                                   std::vector<const RealTensor*> grads;
                                   for (size_t li : wl) {
                                     grads.push_back(&r.grads.params[li].weight);
                                     grads.push_back(&r.grads.params[li].bias);
                                   }
                                   opt.step(grads);
                                   return r;
                                 });
    logs.insert(logs.end(), level_logs.begin(), level_logs.end());
    if (hook) hook(level, model);
  }
  return logs;
}

std::vector<LevelMetrics> evaluate_levels(const nn::Model& model, const masks::MaskFamily& family,
                                          const nn::Dataset& test) {
  std::vector<LevelMetrics> out;
  for (size_t level = 0; level < family.levels.size(); ++level) {
    const auto& sl = family.schedule.levels[level];
    const auto ms = family.mask_set(level);
    const auto counts = nn::count_macs_relus(model.spec(), &ms);
    LevelMetrics m;
    m.level = sl.name;
    m.weight_density = sl.weight_density;
    m.relu_density = sl.relu_density;
    size_t wk = 0, wn = 0, rk = 0, rn = 0;
    for (const auto& b : family.levels[level].weight) {
      wk += b.popcount();
      wn += b.size();
    }
    for (const auto& b : family.levels[level].feature) {
      rk += b.popcount();
      rn += b.size();
    }
    m.realized_weight_density = wn ? static_cast<double>(wk) / wn : 0.0;
    m.realized_relu_density = rn ? static_cast<double>(rk) / rn : 0.0;
    m.accuracy = nn::accuracy(model, test, &ms);
    m.macs = counts.macs;
    m.relus = counts.relus;
    out.push_back(m);
  }
  return out;
}

AdaptiveResult train_adaptive(const nn::Model& init, const nn::Dataset& train, const nn::Dataset& test,
                              const nn::Model* teacher, const AdaptiveConfig& cfg, Prg& rng) {
  AdaptiveResult res;
  nn::Model model = init;
  SoftMasks soft = SoftMasks::init(model, rng);
  res.logs = optimize_soft_phase(model, soft, train, teacher, cfg, rng);
  masks::MaskFamily family = masks::mask_family(soft.weight, soft.feature, cfg.schedule, cfg.scope);
  auto seq = sequential_train(model, family, train, teacher, cfg, rng);
  res.logs.insert(res.logs.end(), seq.begin(), seq.end());
  res.bundle.metrics = evaluate_levels(model, family, test);
  res.bundle.model = std::move(model);
  res.bundle.family = std::move(family);
  res.bundle.provenance = {{"adaptive", cfg.to_json()}, {"mode", "adaptive"}};
  return res;
}

AdaptiveResult train_single(const nn::Model& init, const masks::DensityLevel& level, const nn::Dataset& train,
                            const nn::Dataset& test, const nn::Model* teacher, const AdaptiveConfig& cfg, Prg& rng) {
  AdaptiveConfig one = cfg;
  one.schedule = masks::DensitySchedule{{level}};
  AdaptiveResult res = train_adaptive(init, train, test, teacher, one, rng);
  res.bundle.provenance["mode"] = "single";
  return res;
}

std::string metrics_csv(const std::vector<LevelMetrics>& metrics) {
  std::ostringstream os;
  os.precision(10);
  os << "level,weight_density,relu_density,realized_weight_density,realized_relu_density,accuracy,macs,relus\n";
  for (const auto& m : metrics) {
    os << m.level << ',' << m.weight_density << ',' << m.relu_density << ',' << m.realized_weight_density << ','
       << m.realized_relu_density << ',' << m.accuracy << ',' << m.macs << ',' << m.relus << '\n';
  }
  return os.str();
}

namespace {

nlohmann::json metrics_json(const std::vector<LevelMetrics>& metrics) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& m : metrics) {
    out.push_back({{"level", m.level},
                   {"weight_density", m.weight_density},
                   {"relu_density", m.relu_density},
                   {"realized_weight_density", m.realized_weight_density},
                   {"realized_relu_density", m.realized_relu_density},
                   {"accuracy", m.accuracy},
                   {"macs", m.macs},
                   {"relus", m.relus}});
  }
  return out;
}

}  // namespace

void save_bundle(const ModelBundle& bundle, const std::string& dir) {
  bundle.family.validate(bundle.model.spec());
  std::filesystem::create_directories(dir);
  const auto path = [&](const char* f) { return (std::filesystem::path(dir) / f).string(); };
  nn::save_checkpoint(bundle.model, path("weights.ckpt"));
  masks::save_masks(bundle.family, path("masks.bin"));
  io::write_text(path("metrics.csv"), metrics_csv(bundle.metrics));
  const nlohmann::json manifest = {{"format", 1},
                                   {"model", bundle.model.spec().to_json()},
                                   {"model_digest", bundle.model.spec().digest()},
                                   {"schedule", bundle.family.schedule.to_json()},
                                   {"files", {{"weights", "weights.ckpt"}, {"masks", "masks.bin"},
                                              {"metrics", "metrics.csv"}}},
                                   {"metrics", metrics_json(bundle.metrics)},
                                   {"provenance", bundle.provenance}};
  io::write_text(path("manifest.json"), manifest.dump(2) + "\n");
}

ModelBundle load_bundle(const std::string& dir) {
  const auto root = std::filesystem::path(dir);
  if (!std::filesystem::exists(root / "manifest.json")) throw ConfigError("no bundle manifest in " + dir);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_text((root / "manifest.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir + ": malformed manifest: " + e.what());
  }
  ModelBundle b;
  try {
    const auto& files = manifest.at("files");
    b.model = nn::load_checkpoint((root / files.at("weights").get<std::string>()).string());
    ADAPI_ENFORCE(b.model.spec().digest() == manifest.at("model_digest").get<std::string>(), FormatError,
                  dir + ": checkpoint does not match the manifest's model digest");
    b.family = masks::load_masks((root / files.at("masks").get<std::string>()).string(), &b.model.spec());
    ADAPI_ENFORCE(b.family.schedule == masks::DensitySchedule::from_json(manifest.at("schedule")), FormatError,
                  dir + ": mask file levels differ from the manifest");
    for (const auto& m : manifest.at("metrics")) {
      b.metrics.push_back({m.at("level"), m.at("weight_density"), m.at("relu_density"),
                           m.at("realized_weight_density"), m.at("realized_relu_density"), m.at("accuracy"),
                           m.at("macs"), m.at("relus")});
    }
    b.provenance = manifest.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir + ": malformed manifest: " + e.what());
  }
  return b;
}

}  // namespace adapi::train

#include "adapi/nn.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "adapi/container.h"
#include "adapi/data.h"
#include "adapi/errors.h"

namespace adapi::nn {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Linear: return "linear";
    case LayerKind::Relu: return "relu";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

LayerKind layer_kind_from(const std::string& name) {
  for (auto k : {LayerKind::Conv, LayerKind::Linear, LayerKind::Relu, LayerKind::AvgPool, LayerKind::Flatten}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown layer type '" + name + "'");
}

Shape LayerSpec::weight_shape() const {
  if (kind == LayerKind::Conv) return conv.kernel_shape();
  if (kind == LayerKind::Linear) return {in_features, out_features};
  return {};
}

Shape LayerSpec::bias_shape() const {
  if (kind == LayerKind::Conv) return {conv.out_channels};
  if (kind == LayerKind::Linear) return {out_features};
  return {};
}

uint64_t LayerSpec::macs() const {
  if (kind == LayerKind::Conv) {
    return uint64_t{conv.kernel} * conv.kernel * conv.out_height() * conv.out_width() * conv.in_channels *
           conv.out_channels;
  }
  if (kind == LayerKind::Linear) return uint64_t{in_features} * out_features;
  return 0;
}

ModelSpec ModelSpec::build(Shape input_shape, size_t classes, const nlohmann::json& layers) {
  ModelSpec spec;
  spec.input_shape = input_shape;
  spec.classes = classes;
  Shape cur = std::move(input_shape);
  try {
    for (const auto& lj : layers) {
      LayerSpec l;
      l.kind = layer_kind_from(lj.at("type").get<std::string>());
      l.in_shape = cur;
      switch (l.kind) {
        case LayerKind::Conv: {
          ADAPI_ENFORCE(cur.size() == 3, ConfigError, "conv expects a [C,H,W] input, got " + shape_str(cur));
          l.conv = ConvGeometry{cur[0], lj.at("out_channels").get<size_t>(), lj.at("kernel").get<size_t>(),
                                lj.value("stride", size_t{1}), lj.value("pad", size_t{0}), cur[1], cur[2]};
          l.conv.validate();
          l.out_shape = l.conv.output_shape();
          break;
        }
        case LayerKind::Linear:
          ADAPI_ENFORCE(cur.size() == 1, ConfigError, "linear expects a flat input, got " + shape_str(cur));
          l.in_features = cur[0];
          l.out_features = lj.at("out_features").get<size_t>();
          l.out_shape = {l.out_features};
          break;
        case LayerKind::Relu: l.out_shape = cur; break;
        case LayerKind::AvgPool:
          ADAPI_ENFORCE(cur.size() == 3, ConfigError, "avgpool expects a [C,H,W] input");
          l.pool = lj.at("size").get<size_t>();
          ADAPI_ENFORCE(l.pool > 0 && cur[1] % l.pool == 0 && cur[2] % l.pool == 0, ConfigError,
                        "avgpool window must divide the feature map");
          l.out_shape = {cur[0], cur[1] / l.pool, cur[2] / l.pool};
          break;
        case LayerKind::Flatten: l.out_shape = {adapi::numel(cur)}; break;
      }
      cur = l.out_shape;
      spec.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model layers: ") + e.what());
  }
  ADAPI_ENFORCE(cur == Shape{classes}, ConfigError,
                "model output " + shape_str(cur) + " does not match " + std::to_string(classes) + " classes");
  return spec;
}

nlohmann::json ModelSpec::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : this->layers) {
    nlohmann::json j = {{"type", to_string(l.kind)}};
    if (l.kind == LayerKind::Conv) {
      j["out_channels"] = l.conv.out_channels;
      j["kernel"] = l.conv.kernel;
      j["stride"] = l.conv.stride;
      j["pad"] = l.conv.pad;
    } else if (l.kind == LayerKind::Linear) {
      j["out_features"] = l.out_features;
    } else if (l.kind == LayerKind::AvgPool) {
      j["size"] = l.pool;
    }
    layers.push_back(j);
  }
  return {{"input_shape", input_shape}, {"classes", classes}, {"layers", layers}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  try {
    return build(j.at("input_shape").get<Shape>(), j.at("classes").get<size_t>(), j.at("layers"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
}

std::string ModelSpec::digest() const { return io::sha256_hex(to_json().dump()); }

std::vector<size_t> ModelSpec::weight_layers() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].has_weights()) out.push_back(i);
  }
  return out;
}

std::vector<size_t> ModelSpec::relu_layers() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::Relu) out.push_back(i);
  }
  return out;
}

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  params_.resize(spec_.layers.size());
  for (size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    if (l.has_weights()) {
      params_[i].weight = RealTensor(l.weight_shape());
      params_[i].bias = RealTensor(l.bias_shape());
    }
  }
}

void Model::init(Prg& rng) {
  for (size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    if (!l.has_weights()) continue;
    const double fan_in = l.kind == LayerKind::Conv
                              ? static_cast<double>(l.conv.in_channels * l.conv.kernel * l.conv.kernel)
                              : static_cast<double>(l.in_features);
    const double std = std::sqrt(2.0 / fan_in);
    for (auto& w : params_[i].weight.vec()) w = std * rng.normal();
    for (auto& b : params_[i].bias.vec()) b = 0.0;
  }
}

uint64_t Model::weight_count() const {
  uint64_t n = 0;
  for (const auto& p : params_) n += p.weight.numel();
  return n;
}

MaskSet MaskSet::ones(const ModelSpec& spec) {
  MaskSet m;
  for (size_t i : spec.weight_layers()) m.weight.emplace_back(spec.layers[i].weight_shape(), 1.0);
  for (size_t i : spec.relu_layers()) m.feature.emplace_back(spec.layers[i].out_shape, 1.0);
  return m;
}

void MaskSet::validate(const ModelSpec& spec) const {
  const auto wl = spec.weight_layers();
  const auto rl = spec.relu_layers();
  if (!weight.empty()) {
    ADAPI_ENFORCE(weight.size() == wl.size(), ShapeError, "one weight mask per weight layer required");
    for (size_t k = 0; k < wl.size(); ++k) {
      if (!weight[k].empty()) require_same_shape(weight[k].shape(), spec.layers[wl[k]].weight_shape(), "weight mask");
    }
  }
  if (!feature.empty()) {
    ADAPI_ENFORCE(feature.size() == rl.size(), ShapeError, "one feature mask per ReLU layer required");
    for (size_t k = 0; k < rl.size(); ++k) {
      if (!feature[k].empty()) require_same_shape(feature[k].shape(), spec.layers[rl[k]].out_shape, "feature mask");
    }
  }
}

namespace {

Shape batched(size_t n, const Shape& per) {
  Shape s = {n};
  s.insert(s.end(), per.begin(), per.end());
  return s;
}

void conv_forward(const ConvGeometry& g, const RealTensor& x, const RealTensor& w, const RealTensor& b,
                  RealTensor& out, size_t n) {
  const size_t in_per = adapi::numel(g.input_shape()), out_per = adapi::numel(g.output_shape());
  const size_t plane = g.out_height() * g.out_width();
  for (size_t s = 0; s < n; ++s) {
    std::span<double> o(out.data() + s * out_per, out_per);
    for (size_t c = 0; c < g.out_channels; ++c) std::fill_n(o.data() + c * plane, plane, b[c]);
    conv2d_accumulate<double>(g, std::span<const double>(x.data() + s * in_per, in_per), w.span(), o);
  }
}

void conv_backward(const ConvGeometry& g, const RealTensor& x, const RealTensor& w, const RealTensor& dy,
                   RealTensor& dx, RealTensor& dw, RealTensor& db, size_t n) {
  const size_t in_per = adapi::numel(g.input_shape()), out_per = adapi::numel(g.output_shape());
  const size_t oh = g.out_height(), ow = g.out_width(), K = g.kernel;
  for (size_t s = 0; s < n; ++s) {
    const double* xs = x.data() + s * in_per;
    const double* dys = dy.data() + s * out_per;
    double* dxs = dx.data() + s * in_per;
    for (size_t o = 0; o < g.out_channels; ++o) {
      for (size_t p = 0; p < oh * ow; ++p) db[o] += dys[o * oh * ow + p];
      for (size_t c = 0; c < g.in_channels; ++c) {
        for (size_t i = 0; i < K; ++i) {
          for (size_t j = 0; j < K; ++j) {
            const size_t widx = ((o * g.in_channels + c) * K + i) * K + j;
            const double wv = w[widx];
            double acc = 0;
            for (size_t y = 0; y < oh; ++y) {
              const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
              if (iy < 0 || iy >= static_cast<long>(g.in_height)) continue;
              const double* xrow = xs + (c * g.in_height + iy) * g.in_width;
              double* dxrow = dxs + (c * g.in_height + iy) * g.in_width;
              const double* dyrow = dys + (o * oh + y) * ow;
              for (size_t xo = 0; xo < ow; ++xo) {
                const long ix = static_cast<long>(xo * g.stride + j) - static_cast<long>(g.pad);
                if (ix < 0 || ix >= static_cast<long>(g.in_width)) continue;
                acc += dyrow[xo] * xrow[ix];
                dxrow[ix] += dyrow[xo] * wv;
              }
            }
            dw[widx] += acc;
          }
        }
      }
    }
  }
}

const RealTensor* mask_or_null(const std::vector<RealTensor>& masks, size_t k) {
  if (masks.empty() || masks[k].empty()) return nullptr;
  return &masks[k];
}

}  // namespace

RealTensor forward(const Model& model, const RealTensor& x, const MaskSet* masks, ForwardCache* cache) {
  const ModelSpec& spec = model.spec();
  ADAPI_ENFORCE(x.rank() == spec.input_shape.size() + 1, ShapeError, "forward expects a batched input");
  const size_t n = x.dim(0);
  require_same_shape(x.shape(), batched(n, spec.input_shape), "forward input");
  if (masks) masks->validate(spec);

  if (cache) {
    cache->activations.assign(spec.layers.size() + 1, RealTensor());
    cache->effective_weights.assign(spec.layers.size(), RealTensor());
    cache->weight_masks.assign(spec.layers.size(), RealTensor());
    cache->feature_masks.assign(spec.layers.size(), RealTensor());
    cache->batch = n;
    cache->activations[0] = x;
  }

  RealTensor cur = x;
  size_t wk = 0, rk = 0;
  for (size_t li = 0; li < spec.layers.size(); ++li) {
    const LayerSpec& l = spec.layers[li];
    RealTensor next(batched(n, l.out_shape));
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear: {
        const auto& p = model.layer(li);
        RealTensor w = p.weight;
        if (masks) {
          if (const RealTensor* m = mask_or_null(masks->weight, wk)) {
            for (size_t i = 0; i < w.numel(); ++i) w[i] *= (*m)[i];
            if (cache) cache->weight_masks[li] = *m;
          }
        }
        if (l.kind == LayerKind::Conv) {
          conv_forward(l.conv, cur, w, p.bias, next, n);
        } else {
          const size_t in = l.in_features, out = l.out_features;
          for (size_t s = 0; s < n; ++s) {
            double* o = next.data() + s * out;
            std::copy_n(p.bias.data(), out, o);
            const double* xi = cur.data() + s * in;
            for (size_t a = 0; a < in; ++a) {
              const double xv = xi[a];
              if (xv == 0.0) continue;
              const double* wrow = w.data() + a * out;
              for (size_t b = 0; b < out; ++b) o[b] += xv * wrow[b];
            }
          }
        }
        if (cache) cache->effective_weights[li] = std::move(w);
        ++wk;
        break;
      }
      case LayerKind::Relu: {
        const RealTensor* m = masks ? mask_or_null(masks->feature, rk) : nullptr;
        const size_t per = adapi::numel(l.out_shape);
        for (size_t s = 0; s < n; ++s) {
          for (size_t i = 0; i < per; ++i) {
            const double z = cur[s * per + i];
            const double r = z > 0 ? z : 0.0;
            next[s * per + i] = m ? (*m)[i] * r + (1.0 - (*m)[i]) * z : r;
          }
        }
        if (cache && m) cache->feature_masks[li] = *m;
        ++rk;
        break;
      }
      case LayerKind::AvgPool: {
        const size_t C = l.in_shape[0], H = l.in_shape[1], W = l.in_shape[2], k = l.pool;
        const size_t oh = H / k, ow = W / k;
        const double inv = 1.0 / static_cast<double>(k * k);
        for (size_t s = 0; s < n; ++s) {
          for (size_t c = 0; c < C; ++c) {
            for (size_t y = 0; y < oh; ++y) {
              for (size_t xo = 0; xo < ow; ++xo) {
                double acc = 0;
                for (size_t i = 0; i < k; ++i) {
                  for (size_t j = 0; j < k; ++j) acc += cur[((s * C + c) * H + y * k + i) * W + xo * k + j];
                }
                next[((s * C + c) * oh + y) * ow + xo] = acc * inv;
              }
            }
          }
        }
        break;
      }
      case LayerKind::Flatten: next = cur.reshaped(batched(n, l.out_shape)); break;
    }
    ADAPI_ENFORCE(std::all_of(next.vec().begin(), next.vec().end(), [](double v) { return std::isfinite(v); }),
                  TrainingError, "non-finite activation in layer " + std::to_string(li));
    if (cache) cache->activations[li + 1] = next;
    cur = std::move(next);
  }
  return cur;
}

Gradients backward(const Model& model, const ForwardCache& cache, const RealTensor& dlogits,
                   const std::vector<RealTensor>* output_grads) {
  const ModelSpec& spec = model.spec();
  ADAPI_ENFORCE(cache.activations.size() == spec.layers.size() + 1 && cache.batch > 0, ProtocolError,
                "backward needs a forward cache of the same model");
  const size_t n = cache.batch;
  require_same_shape(dlogits.shape(), cache.activations.back().shape(), "backward upstream");

  Gradients g;
  g.params.resize(spec.layers.size());
  const auto wl = spec.weight_layers();
  const auto rl = spec.relu_layers();
  g.weight_masks.resize(wl.size());
  g.feature_masks.resize(rl.size());
  size_t wk = wl.size(), rk = rl.size();

  RealTensor up = dlogits;
  for (size_t li = spec.layers.size(); li-- > 0;) {
    const LayerSpec& l = spec.layers[li];
    if (output_grads && li < output_grads->size() && !(*output_grads)[li].empty()) {
      const RealTensor& extra = (*output_grads)[li];
      require_same_shape(extra.shape(), up.shape(), "extra output gradient");
      for (size_t i = 0; i < up.numel(); ++i) up[i] += extra[i];
    }
    const RealTensor& in = cache.activations[li];
    RealTensor down(in.shape());
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear: {
        --wk;
        const RealTensor& w_eff = cache.effective_weights[li];
        RealTensor dw(l.weight_shape()), db(l.bias_shape());
        if (l.kind == LayerKind::Conv) {
          conv_backward(l.conv, in, w_eff, up, down, dw, db, n);
        } else {
          const size_t a_n = l.in_features, b_n = l.out_features;
          for (size_t s = 0; s < n; ++s) {
            const double* xi = in.data() + s * a_n;
            const double* dy = up.data() + s * b_n;
            double* dx = down.data() + s * a_n;
            for (size_t b = 0; b < b_n; ++b) db[b] += dy[b];
            for (size_t a = 0; a < a_n; ++a) {
              const double* wrow = w_eff.data() + a * b_n;
              double* dwrow = dw.data() + a * b_n;
              double acc = 0;
              for (size_t b = 0; b < b_n; ++b) {
                acc += dy[b] * wrow[b];
                dwrow[b] += xi[a] * dy[b];
              }
              dx[a] = acc;
            }
          }
        }
        // dW_eff -> dW = dW_eff (.) M and dM = dW_eff (.) W.
        const RealTensor& w = model.layer(li).weight;
        const RealTensor& m = cache.weight_masks[li];
        RealTensor dm(l.weight_shape());
        for (size_t i = 0; i < dw.numel(); ++i) {
          dm[i] = dw[i] * w[i];
          if (!m.empty()) dw[i] *= m[i];
        }
        g.weight_masks[wk] = std::move(dm);
        g.params[li].weight = std::move(dw);
        g.params[li].bias = std::move(db);
        break;
      }
      case LayerKind::Relu: {
        --rk;
        const RealTensor& m = cache.feature_masks[li];
        const size_t per = adapi::numel(l.out_shape);
        RealTensor dm(l.out_shape);
        for (size_t s = 0; s < n; ++s) {
          for (size_t i = 0; i < per; ++i) {
            const double z = in[s * per + i];
            const double d = up[s * per + i];
            const double relu_grad = z > 0 ? 1.0 : 0.0;
            if (m.empty()) {
              down[s * per + i] = d * relu_grad;
            } else {
              down[s * per + i] = d * (m[i] * relu_grad + (1.0 - m[i]));
              dm[i] += d * ((z > 0 ? z : 0.0) - z);
            }
          }
        }
        g.feature_masks[rk] = std::move(dm);
        break;
      }
      case LayerKind::AvgPool: {
        const size_t C = l.in_shape[0], H = l.in_shape[1], W = l.in_shape[2], k = l.pool;
        const size_t oh = H / k, ow = W / k;
        const double inv = 1.0 / static_cast<double>(k * k);
        for (size_t s = 0; s < n; ++s) {
          for (size_t c = 0; c < C; ++c) {
            for (size_t y = 0; y < oh; ++y) {
              for (size_t xo = 0; xo < ow; ++xo) {
                const double d = up[((s * C + c) * oh + y) * ow + xo] * inv;
                for (size_t i = 0; i < k; ++i) {
                  for (size_t j = 0; j < k; ++j) down[((s * C + c) * H + y * k + i) * W + xo * k + j] = d;
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::Flatten: down = up.reshaped(in.shape()); break;
    }
    up = std::move(down);
  }
  g.input = std::move(up);
  return g;
}

LossResult cross_entropy(const RealTensor& logits, const std::vector<int>& labels) {
  ADAPI_ENFORCE(logits.rank() == 2 && logits.dim(0) == labels.size(), ShapeError,
                "cross_entropy expects [N, C] logits and N labels");
  const size_t n = logits.dim(0), c = logits.dim(1);
  LossResult r;
  r.grad = RealTensor(logits.shape());
  for (size_t s = 0; s < n; ++s) {
    ADAPI_ENFORCE(labels[s] >= 0 && static_cast<size_t>(labels[s]) < c, ShapeError, "label out of range");
    const double* z = logits.data() + s * c;
    const double mx = *std::max_element(z, z + c);
    double sum = 0;
    for (size_t k = 0; k < c; ++k) sum += std::exp(z[k] - mx);
    const double lse = mx + std::log(sum);
    r.loss += lse - z[labels[s]];
    for (size_t k = 0; k < c; ++k) {
      r.grad[s * c + k] = (std::exp(z[k] - lse) - (static_cast<int>(k) == labels[s] ? 1.0 : 0.0)) / n;
    }
  }
  r.loss /= static_cast<double>(n);
  return r;
}

std::vector<int> argmax_rows(const RealTensor& logits) {
  const size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (size_t s = 0; s < n; ++s) {
    const double* z = logits.data() + s * c;
    out[s] = static_cast<int>(std::max_element(z, z + c) - z);
  }
  return out;
}

CountSummary count_macs_relus(const ModelSpec& spec, const MaskSet* masks) {
  CountSummary sum;
  size_t wk = 0, rk = 0;
  auto ones = [](const RealTensor& m) {
    double c = 0;
    for (double v : m.vec()) c += v != 0.0 ? 1.0 : 0.0;
    return c;
  };
  for (size_t li = 0; li < spec.layers.size(); ++li) {
    const auto& l = spec.layers[li];
    LayerCount row{li, l.kind, 0, 0};
    if (l.has_weights()) {
      row.macs = static_cast<double>(l.macs());
      if (masks && !masks->weight.empty() && !masks->weight[wk].empty()) {
        const double kept = ones(masks->weight[wk]);
        row.macs = l.kind == LayerKind::Conv
                       ? kept * static_cast<double>(l.conv.out_height() * l.conv.out_width())
                       : kept;
      }
      ++wk;
    } else if (l.kind == LayerKind::Relu) {
      row.relus = static_cast<double>(adapi::numel(l.out_shape));
      if (masks && !masks->feature.empty() && !masks->feature[rk].empty()) row.relus = ones(masks->feature[rk]);
      ++rk;
    }
    sum.macs += row.macs;
    sum.relus += row.relus;
    sum.layers.push_back(row);
  }
  return sum;
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j, const OptimizerConfig& d) {
  OptimizerConfig c = d;
  c.kind = j.value("kind", d.kind);
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.momentum = j.value("momentum", d.momentum);
  c.cosine = j.value("cosine", d.cosine);
  ADAPI_ENFORCE(c.kind == "adamw" || c.kind == "sgd", ConfigError, "optimizer kind must be adamw or sgd");
  ADAPI_ENFORCE(c.lr > 0, ConfigError, "learning rate must be positive");
  return c;
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"kind", kind}, {"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps},
          {"weight_decay", weight_decay}, {"momentum", momentum}, {"cosine", cosine}};
}

Optimizer::Optimizer(OptimizerConfig config, size_t total_steps)
    : config_(std::move(config)), total_steps_(std::max<size_t>(total_steps, 1)) {}

void Optimizer::add(RealTensor& param, double weight_decay, std::vector<uint8_t> trainable) {
  ADAPI_ENFORCE(trainable.empty() || trainable.size() == param.numel(), ShapeError,
                "trainable flags must match parameter size");
  slots_.push_back(Slot{&param, weight_decay, std::move(trainable), std::vector<double>(param.numel(), 0.0),
                        config_.kind == "adamw" ? std::vector<double>(param.numel(), 0.0) : std::vector<double>()});
}

double Optimizer::current_lr() const {
  if (!config_.cosine) return config_.lr;
  const double t = std::min(1.0, static_cast<double>(step_) / static_cast<double>(total_steps_));
  return config_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void Optimizer::step(const std::vector<const RealTensor*>& grads) {
  ADAPI_ENFORCE(grads.size() == slots_.size(), ProtocolError, "one gradient per registered parameter required");
  const double lr = current_lr();
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (size_t k = 0; k < slots_.size(); ++k) {
    Slot& s = slots_[k];
    const RealTensor& g = *grads[k];
    require_same_shape(g.shape(), s.param->shape(), "optimizer gradient");
    for (size_t i = 0; i < g.numel(); ++i) {
      if (!s.trainable.empty() && !s.trainable[i]) continue;
      double& p = (*s.param)[i];
      if (config_.kind == "adamw") {
        s.m[i] = config_.beta1 * s.m[i] + (1 - config_.beta1) * g[i];
        s.v[i] = config_.beta2 * s.v[i] + (1 - config_.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
        p -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + s.decay * p);
      } else {
        const double gi = g[i] + s.decay * p;
        s.m[i] = config_.momentum * s.m[i] + gi;
        p -= lr * s.m[i];
      }
    }
  }
}

std::vector<EpochLog> train_teacher(Model& model, const Dataset& train, const TeacherConfig& config, Prg& rng) {
  std::vector<EpochLog> logs;
  if (config.epochs == 0 || train.size() == 0) return logs;
  const size_t bs = std::max<size_t>(1, config.batch_size);
  const size_t steps_per_epoch = (train.size() + bs - 1) / bs;
  Optimizer opt(config.optimizer, config.epochs * steps_per_epoch);
  const auto wl = model.spec().weight_layers();
  for (size_t li : wl) {
    opt.add(model.layer(li).weight, config.optimizer.weight_decay);
    opt.add(model.layer(li).bias, 0.0);
  }
  for (size_t e = 0; e < config.epochs; ++e) {
    const auto order = shuffled_indices(train.size(), rng);
    double loss_sum = 0;
    size_t correct = 0;
    for (size_t start = 0; start < order.size(); start += bs) {
      std::vector<size_t> idx(order.begin() + start, order.begin() + std::min(order.size(), start + bs));
      const RealTensor xb = train.batch_x(idx);
      const auto yb = train.batch_y(idx);
      ForwardCache cache;
      const RealTensor logits = forward(model, xb, nullptr, &cache);
      const LossResult ce = cross_entropy(logits, yb);
      ADAPI_ENFORCE(std::isfinite(ce.loss), TrainingError, "teacher loss diverged");
      loss_sum += ce.loss * idx.size();
      const auto pred = argmax_rows(logits);
      for (size_t i = 0; i < idx.size(); ++i) correct += pred[i] == yb[i];
      const Gradients g = backward(model, cache, ce.grad);
      std::vector<const RealTensor*> grads;
      for (size_t li : wl) {
        grads.push_back(&g.params[li].weight);
        grads.push_back(&g.params[li].bias);
      }
      opt.step(grads);
    }
    logs.push_back({e, loss_sum / train.size(), static_cast<double>(correct) / train.size()});
  }
  return logs;
}

RealTensor predict(const Model& model, const RealTensor& x, const MaskSet* masks, size_t chunk) {
  const size_t n = x.dim(0);
  const size_t per = x.numel() / std::max<size_t>(n, 1);
  RealTensor out({n, model.spec().classes});
  for (size_t start = 0; start < n; start += chunk) {
    const size_t m = std::min(chunk, n - start);
    Shape shape = x.shape();
    shape[0] = m;
    RealTensor xb(shape, std::vector<double>(x.data() + start * per, x.data() + (start + m) * per));
    const RealTensor y = forward(model, xb, masks);
    std::copy_n(y.data(), y.numel(), out.data() + start * model.spec().classes);
  }
  return out;
}

double accuracy(const Model& model, const Dataset& data, const MaskSet* masks) {
  if (data.size() == 0) return 0.0;
  const auto pred = argmax_rows(predict(model, data.x, masks));
  size_t correct = 0;
  for (size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.y[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {
constexpr std::string_view kCheckpointMagic = "ADAPICKP";
}

void save_checkpoint(const Model& model, const std::string& path, const nlohmann::json& extra) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<uint8_t> payload;
  for (size_t li = 0; li < model.params().size(); ++li) {
    const auto& p = model.layer(li);
    for (const auto* t : {&p.weight, &p.bias}) {
      if (t->empty()) continue;
      tensors.push_back({{"layer", li}, {"role", t == &p.weight ? "weight" : "bias"}, {"shape", t->shape()},
                         {"offset", payload.size()}});
      for (double v : t->vec()) io::put_f64(payload, v);
    }
  }
  nlohmann::json header = {{"format", 1},
                           {"model", model.spec().to_json()},
                           {"dtype", "f64-le"},
                           {"tensors", tensors},
                           {"payload_crc32", io::crc32(payload)}};
  if (!extra.is_null()) header["extra"] = extra;
  io::write_container(path, kCheckpointMagic, header, payload);
}

Model load_checkpoint(const std::string& path, nlohmann::json* extra) {
  const auto c = io::read_container(path, kCheckpointMagic);
  try {
    if (c.header.at("payload_crc32").get<uint32_t>() != io::crc32(c.payload)) {
      throw FormatError(path + ": checkpoint payload checksum mismatch");
    }
    Model model(ModelSpec::from_json(c.header.at("model")));
    for (const auto& t : c.header.at("tensors")) {
      const size_t li = t.at("layer").get<size_t>();
      ADAPI_ENFORCE(li < model.params().size(), FormatError, "checkpoint tensor for unknown layer");
      RealTensor& dst = t.at("role").get<std::string>() == "weight" ? model.layer(li).weight : model.layer(li).bias;
      require_same_shape(t.at("shape").get<Shape>(), dst.shape(), "checkpoint tensor");
      const size_t off = t.at("offset").get<size_t>();
      ADAPI_ENFORCE(off + 8 * dst.numel() <= c.payload.size(), FormatError, "checkpoint payload truncated");
      for (size_t i = 0; i < dst.numel(); ++i) dst[i] = io::get_f64(c.payload.data() + off + 8 * i);
    }
    if (extra) *extra = c.header.value("extra", nlohmann::json());
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed checkpoint header: " + e.what());
  }
}

}  // namespace adapi::nn

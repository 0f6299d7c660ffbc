#include "adapi/runtime.h"

#include <cmath>
#include <cstring>

#include "adapi/container.h"
#include "adapi/parties.h"

namespace adapi::runtime {

using nn::LayerKind;
using ring::RingElement;

namespace {

constexpr std::string_view kPackageMagic = "ADAPIPKG";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// "L3/relu-signbit:a2b:and7" -> "relu-signbit"; "handshake" -> "handshake".
std::string category_of(const std::string& tag) {
  const size_t slash = tag.find('/');
  const size_t start = slash == std::string::npos ? 0 : slash + 1;
  const size_t colon = tag.find(':', start);
  return tag.substr(start, colon == std::string::npos ? std::string::npos : colon - start);
}

RingTensor sample_slice(const RingTensor& x, size_t n) {
  const size_t per = x.numel() / x.dim(0);
  Shape s(x.shape().begin() + 1, x.shape().end());
  return RingTensor(s, std::vector<RingElement>(x.vec().begin() + n * per, x.vec().begin() + (n + 1) * per));
}

Shape batched(size_t n, const Shape& per_sample) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

void require_batched(const ArithmeticShare& x, const Shape& per_sample, const char* what) {
  if (x.shape().empty() || Shape(x.shape().begin() + 1, x.shape().end()) != per_sample) {
    throw ShapeError(std::string(what) + ": input " + shape_str(x.shape()) + " does not match per-sample shape " +
                     shape_str(per_sample));
  }
}

// Adds bias[c] to every element of channel c, for tensors [N, C, rest...].
template <class T>
void add_channel_bias(Tensor<T>& out, const Tensor<T>& bias) {
  if (bias.empty()) return;
  const size_t n = out.dim(0), c = bias.numel();
  const size_t rest = out.numel() / (n * c);
  for (size_t s = 0; s < n; ++s) {
    for (size_t k = 0; k < c; ++k) {
      T* p = out.data() + (s * c + k) * rest;
      for (size_t i = 0; i < rest; ++i) p[i] += bias[k];
    }
  }
}

RingTensor pool_sum(const RingTensor& x, size_t pool) {
  const size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const size_t oh = h / pool, ow = w / pool;
  RingTensor out({n, c, oh, ow});
  for (size_t s = 0; s < n * c; ++s) {
    const RingElement* in = x.data() + s * h * w;
    RingElement* o = out.data() + s * oh * ow;
    for (size_t y = 0; y < oh; ++y) {
      for (size_t xx = 0; xx < ow; ++xx) {
        RingElement acc;
        for (size_t i = 0; i < pool; ++i) {
          for (size_t j = 0; j < pool; ++j) acc += in[(y * pool + i) * w + xx * pool + j];
        }
        o[y * ow + xx] = acc;
      }
    }
  }
  return out;
}

void put_words(std::vector<uint8_t>& out, const RingTensor& t) {
  const size_t off = out.size();
  out.resize(off + 8 * t.numel());
  for (size_t i = 0; i < t.numel(); ++i) {
    const uint64_t v = t[i].value;
    for (int b = 0; b < 8; ++b) out[off + 8 * i + b] = static_cast<uint8_t>(v >> (8 * b));
  }
}

RingTensor get_words(const std::vector<uint8_t>& in, size_t off, Shape shape) {
  RingTensor t(std::move(shape));
  ADAPI_ENFORCE(off + 8 * t.numel() <= in.size(), FormatError, "package payload truncated");
  for (size_t i = 0; i < t.numel(); ++i) {
    uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<uint64_t>(in[off + 8 * i + b]) << (8 * b);
    t[i] = RingElement(v);
  }
  return t;
}

nlohmann::json masks_json(const masks::LevelMasks& m) {
  auto one = [](const std::vector<masks::BinaryMask>& ms) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : ms) arr.push_back({{"shape", b.shape}, {"bits", io::sha256_hex(std::string_view(
                                                                             reinterpret_cast<const char*>(b.bits.data()), b.bits.size()))}});
    return arr;
  };
  return {{"weight", one(m.weight)}, {"feature", one(m.feature)}};
}

}  // namespace

std::string role_name(int party) { return party == kServer ? "server" : "client"; }

std::string to_string(Comparison c) { return c == Comparison::SignBit ? "signbit" : "ot"; }

Comparison comparison_from(const std::string& name) {
  if (name == "signbit") return Comparison::SignBit;
  if (name == "ot") return Comparison::Ot;
  throw ConfigError("unknown comparison mode '" + name + "' (expected signbit or ot)");
}

std::string SharePackage::metadata_digest() const {
  const nlohmann::json meta = {{"model", spec.digest()},
                               {"level", {level.name, level.weight_density, level.relu_density}},
                               {"masks", masks_json(masks)},
                               {"frac_bits", frac_bits}};
  return io::sha256_hex(meta.dump());
}

void save_package(const SharePackage& pkg, const std::string& path) {
  std::vector<uint8_t> payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (size_t i = 0; i < pkg.weights.size(); ++i) {
    if (pkg.weights[i].empty()) continue;
    tensors.push_back({{"layer", i}, {"role", "weight"}, {"offset", payload.size()}});
    put_words(payload, pkg.weights[i]);
    tensors.push_back({{"layer", i}, {"role", "bias"}, {"offset", payload.size()}});
    put_words(payload, pkg.biases[i]);
  }
  nlohmann::json mask_entries = nlohmann::json::array();
  for (int kind = 0; kind < 2; ++kind) {
    for (const auto& m : kind == 0 ? pkg.masks.weight : pkg.masks.feature) {
      const auto packed = masks::pack_bits(m.bits);
      mask_entries.push_back({{"kind", kind == 0 ? "weight" : "feature"}, {"shape", m.shape}, {"offset", payload.size()}});
      payload.insert(payload.end(), packed.begin(), packed.end());
    }
  }
  const nlohmann::json header = {{"format", 1},
                                 {"party", pkg.party},
                                 {"role", role_name(pkg.party)},
                                 {"model", pkg.spec.to_json()},
                                 {"level", {{"name", pkg.level.name},
                                            {"weight_density", pkg.level.weight_density},
                                            {"relu_density", pkg.level.relu_density}}},
                                 {"frac_bits", pkg.frac_bits},
                                 {"metadata_digest", pkg.metadata_digest()},
                                 {"tensors", tensors},
                                 {"masks", mask_entries},
                                 {"payload_crc32", io::crc32(payload)}};
  io::write_container(path, kPackageMagic, header, payload);
}

SharePackage load_package(const std::string& path) {
  const auto c = io::read_container(path, kPackageMagic);
  SharePackage pkg;
  try {
    ADAPI_ENFORCE(c.header.at("payload_crc32").get<uint32_t>() == io::crc32(c.payload), FormatError,
                  path + ": payload checksum mismatch");
    pkg.party = c.header.at("party").get<int>();
    pkg.spec = nn::ModelSpec::from_json(c.header.at("model"));
    const auto& lj = c.header.at("level");
    pkg.level = {lj.at("name").get<std::string>(), lj.at("weight_density").get<double>(),
                 lj.at("relu_density").get<double>()};
    pkg.frac_bits = c.header.at("frac_bits").get<int>();
    pkg.weights.assign(pkg.spec.layers.size(), {});
    pkg.biases.assign(pkg.spec.layers.size(), {});
    for (const auto& tj : c.header.at("tensors")) {
      const size_t li = tj.at("layer").get<size_t>();
      ADAPI_ENFORCE(li < pkg.spec.layers.size() && pkg.spec.layers[li].has_weights(), FormatError,
                    path + ": tensor for a parameter-free layer");
      const auto& L = pkg.spec.layers[li];
      const bool weight = tj.at("role").get<std::string>() == "weight";
      auto t = get_words(c.payload, tj.at("offset").get<size_t>(), weight ? L.weight_shape() : L.bias_shape());
      (weight ? pkg.weights : pkg.biases)[li] = std::move(t);
    }
    for (const auto& mj : c.header.at("masks")) {
      const Shape shape = mj.at("shape").get<Shape>();
      const size_t off = mj.at("offset").get<size_t>(), n = numel(shape);
      ADAPI_ENFORCE(off + (n + 7) / 8 <= c.payload.size(), FormatError, path + ": mask payload truncated");
      masks::BinaryMask m(shape, masks::unpack_bits(std::span(c.payload).subspan(off, (n + 7) / 8), n));
      (mj.at("kind").get<std::string>() == "weight" ? pkg.masks.weight : pkg.masks.feature).push_back(std::move(m));
    }
    ADAPI_ENFORCE(pkg.metadata_digest() == c.header.at("metadata_digest").get<std::string>(), FormatError,
                  path + ": metadata digest mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed package header: " + e.what());
  }
  return pkg;
}

std::pair<SharePackage, SharePackage> deploy(const train::ModelBundle& bundle, const std::string& level,
                                             uint64_t seed, ring::FixedPointCodec codec) {
  const size_t li = bundle.family.schedule.index_of(level);
  const auto& spec = bundle.model.spec();
  bundle.family.validate(spec);
  SharePackage p0, p1;
  for (SharePackage* p : {&p0, &p1}) {
    p->spec = spec;
    p->level = bundle.family.schedule.levels[li];
    p->masks = bundle.family.levels[li];
    p->frac_bits = codec.frac_bits();
    p->weights.assign(spec.layers.size(), {});
    p->biases.assign(spec.layers.size(), {});
  }
  p1.party = kClient;
  Prg rng(seed, 0x5eed);
  size_t k = 0;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    if (!spec.layers[i].has_weights()) continue;
    const auto& mask = p0.masks.weight.at(k++);
    const auto& W = bundle.model.layer(i).weight;
    const auto& b = bundle.model.layer(i).bias;
    RingTensor w0(W.shape()), w1(W.shape());
    for (size_t j = 0; j < W.numel(); ++j) {
      if (!mask.bits[j]) continue;
      const RingElement enc = codec.encode(W[j]);
      w0[j] = RingElement(rng.next_u64());
      w1[j] = enc - w0[j];
    }
    RingTensor b0(b.shape()), b1(b.shape());
    for (size_t j = 0; j < b.numel(); ++j) {
      b0[j] = RingElement(rng.next_u64());
      b1[j] = codec.encode(b[j]) - b0[j];
    }
    p0.weights[i] = std::move(w0);
    p1.weights[i] = std::move(w1);
    p0.biases[i] = std::move(b0);
    p1.biases[i] = std::move(b1);
  }
  return {std::move(p0), std::move(p1)};
}

ArithmeticShare secure_conv(mpc::Context& ctx, const ConvGeometry& g, const ArithmeticShare& x,
                            const RingTensor& weight, const RingTensor& bias, const masks::BinaryMask* support) {
  require_batched(x, g.input_shape(), "secure_conv");
  require_same_shape(weight.shape(), g.kernel_shape(), "secure_conv weight");
  mpc::BilinearSpec spec = mpc::BilinearSpec::convolution(g);
  if (support) spec = spec.with_support(support->bits);
  const size_t n = x.shape()[0];
  const ArithmeticShare w{ctx.party(), weight};
  RingTensor out(batched(n, g.output_shape()));
  const size_t per = numel(g.output_shape());
  mpc::Context::Scope scope(ctx, "conv-exchange:");
  for (size_t s = 0; s < n; ++s) {
    mpc::BeaverTriple triple = ctx.dealer().beaver(spec);
    const ArithmeticShare xs{ctx.party(), sample_slice(x.data, s)};
    const auto y = share::truncate(mpc::secure_mul(ctx, xs, w, triple), ctx.codec().frac_bits());
    std::copy(y.data.vec().begin(), y.data.vec().end(), out.vec().begin() + s * per);
  }
  add_channel_bias(out, bias);
  return {ctx.party(), std::move(out)};
}

ArithmeticShare secure_linear(mpc::Context& ctx, const ArithmeticShare& x, const RingTensor& weight,
                              const RingTensor& bias, const masks::BinaryMask* support) {
  ADAPI_ENFORCE(x.data.rank() == 2 && weight.rank() == 2 && x.shape()[1] == weight.dim(0), ShapeError,
                "secure_linear shapes " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  const size_t n = x.shape()[0];
  mpc::BilinearSpec spec = mpc::BilinearSpec::matmul(n, weight.dim(0), weight.dim(1));
  if (support) spec = spec.with_support(support->bits);
  mpc::Context::Scope scope(ctx, "linear-exchange:");
  mpc::BeaverTriple triple = ctx.dealer().beaver(spec);
  auto y = share::truncate(mpc::secure_mul(ctx, x, ArithmeticShare{ctx.party(), weight}, triple),
                           ctx.codec().frac_bits());
  add_channel_bias(y.data, bias);
  return y;
}

ArithmeticShare secure_avgpool(mpc::Context& ctx, const ArithmeticShare& x, size_t pool) {
  ADAPI_ENFORCE(x.data.rank() == 4 && pool > 0, ShapeError, "secure_avgpool expects [N, C, H, W]");
  const RingElement inv = ctx.codec().encode(1.0 / static_cast<double>(pool * pool));
  ArithmeticShare s{ctx.party(), pool_sum(x.data, pool)};
  return share::truncate(share::scale(s, inv), ctx.codec().frac_bits());
}

ArithmeticShare secure_masked_relu(mpc::Context& ctx, const ArithmeticShare& x, const masks::BinaryMask& mask,
                                   Comparison mode, mpc::OtSession* ot) {
  const size_t n = x.shape().empty() ? 0 : x.shape()[0];
  ADAPI_ENFORCE(n > 0 && x.numel() == n * mask.size(), ShapeError,
                "secure_masked_relu: input " + shape_str(x.shape()) + " vs mask " + shape_str(mask.shape));
  std::vector<size_t> active;
  active.reserve(n * mask.popcount());
  for (size_t s = 0; s < n; ++s) {
    for (size_t i = 0; i < mask.size(); ++i) {
      if (mask.bits[i]) active.push_back(s * mask.size() + i);
    }
  }
  ArithmeticShare out = x;
  if (active.empty()) return out;
  ArithmeticShare gathered{x.party, RingTensor({active.size()})};
  for (size_t j = 0; j < active.size(); ++j) gathered.data[j] = x.data[active[j]];
  ArithmeticShare y;
  if (mode == Comparison::Ot) {
    ADAPI_ENFORCE(ot != nullptr, ProtocolError, "OT comparison mode without an OT session");
    y = mpc::secure_relu_ot(ctx, *ot, gathered);
  } else {
    y = mpc::secure_relu(ctx, gathered);
  }
  for (size_t j = 0; j < active.size(); ++j) out.data[active[j]] = y.data[j];
  return out;
}

uint64_t InferenceTranscript::relu_payload_bytes() const {
  uint64_t total = 0;
  for (const auto& l : layers) {
    if (l.kind == "relu") total += l.counters.sent_payload + l.counters.received_payload;
  }
  return total;
}

void InferenceTranscript::merge(const InferenceTranscript& other) {
  layers.insert(layers.end(), other.layers.begin(), other.layers.end());
  totals += other.totals;
  samples += other.samples;
  seconds += other.seconds;
}

nlohmann::json InferenceTranscript::to_json() const {
  auto counters = [](const net::TagCounters& c) {
    return nlohmann::json{{"sent_bytes", c.sent_bytes},         {"received_bytes", c.received_bytes},
                          {"sent_payload", c.sent_payload},     {"received_payload", c.received_payload},
                          {"messages_sent", c.messages_sent},   {"messages_received", c.messages_received}};
  };
  nlohmann::json ls = nlohmann::json::array();
  for (const auto& l : layers) {
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& [k, v] : l.categories) cats[k] = counters(v);
    ls.push_back({{"name", l.name}, {"kind", l.kind}, {"counters", counters(l.counters)},
                  {"categories", cats}, {"seconds", l.seconds}});
  }
  return {{"party", party},
          {"role", role_name(party)},
          {"comparison", comparison},
          {"level", level},
          {"samples", samples},
          {"totals", counters(totals)},
          {"total_bytes", total_bytes()},
          {"relu_payload_bytes", relu_payload_bytes()},
          {"seconds", seconds},
          {"layers", ls}};
}

namespace {

// Records the traffic of one step as a transcript entry.
class StepMeter {
 public:
  StepMeter(net::Channel& ch, InferenceTranscript& t, std::string name, std::string kind)
      : ch_(ch), t_(t), name_(std::move(name)), kind_(std::move(kind)),
        before_(ch.meter().snapshot()), start_(Clock::now()) {}
  ~StepMeter() {
    const net::MeterSnapshot delta = ch_.meter().snapshot() - before_;
    LayerTranscript l{name_, kind_, delta.totals, {}, seconds_since(start_)};
    for (const auto& [tag, c] : delta.per_tag) {
      if (c.messages_sent || c.messages_received) l.categories[category_of(tag)] += c;
    }
    t_.totals += delta.totals;
    t_.layers.push_back(std::move(l));
  }
  StepMeter(const StepMeter&) = delete;
  StepMeter& operator=(const StepMeter&) = delete;

 private:
  net::Channel& ch_;
  InferenceTranscript& t_;
  std::string name_, kind_;
  net::MeterSnapshot before_;
  Clock::time_point start_;
};

}  // namespace

SecureSession::SecureSession(net::Channel& channel, SharePackage package, RuntimeOptions options)
    : channel_(&channel),
      package_(std::move(package)),
      options_(options),
      ctx_(channel, options.dealer_seed, options.party_seed, package_.codec()) {
  ADAPI_ENFORCE(channel.party() == package_.party, ProtocolError,
                "channel party " + std::to_string(channel.party()) + " holds the " + role_name(package_.party) +
                    " package");
  ADAPI_ENFORCE(package_.weights.size() == package_.spec.layers.size(), ShapeError, "package weight list size");
  ADAPI_ENFORCE(package_.masks.weight.size() == package_.spec.weight_layers().size() &&
                    package_.masks.feature.size() == package_.spec.relu_layers().size(),
                ShapeError, "package mask lists do not match the model");
}

void SecureSession::handshake(InferenceTranscript& t) {
  if (ready_) return;
  {
    StepMeter m(*channel_, t, "handshake", "session");
    const nlohmann::json hello = {{"digest", package_.metadata_digest()},
                                  {"comparison", to_string(options_.comparison)}};
    const std::string text = hello.dump();
    const std::vector<uint8_t> mine(text.begin(), text.end());
    const auto theirs = ctx_.exchange("handshake", mine);
    if (theirs != mine) {
      throw ProtocolError("handshake mismatch: this party has " + text + ", peer has " +
                          std::string(theirs.begin(), theirs.end()));
    }
  }
  if (options_.comparison == Comparison::Ot) {
    StepMeter m(*channel_, t, "ot-setup", "session");
    ot_ = mpc::ot_setup(ctx_, kServer, *options_.ot_group);
  }
  ready_ = true;
}

InferenceResult SecureSession::infer(const nn::RealTensor& input) {
  ADAPI_ENFORCE(party() == kClient, ProtocolError, "only the client supplies inputs");
  ADAPI_ENFORCE(!input.shape().empty() && input.dim(0) > 0 &&
                    Shape(input.shape().begin() + 1, input.shape().end()) == package_.spec.input_shape,
                ShapeError, "input " + shape_str(input.shape()) + " does not match the model input");
  InferenceTranscript t;
  handshake(t);
  {
    StepMeter m(*channel_, t, "batch", "session");
    const uint32_t n = static_cast<uint32_t>(input.dim(0));
    std::vector<uint8_t> header(4);
    std::memcpy(header.data(), &n, 4);
    channel_->send("batch", header);
  }
  return run(&input, input.dim(0), std::move(t));
}

std::optional<InferenceResult> SecureSession::serve() {
  ADAPI_ENFORCE(party() == kServer, ProtocolError, "only the server serves batches");
  InferenceTranscript t;
  handshake(t);
  uint32_t n = 0;
  {
    StepMeter m(*channel_, t, "batch", "session");
    const auto header = channel_->recv("batch");
    ADAPI_ENFORCE(header.size() == 4, ProtocolError, "malformed batch header");
    std::memcpy(&n, header.data(), 4);
  }
  if (n == 0) return std::nullopt;
  return run(nullptr, n, std::move(t));
}

void SecureSession::finish() {
  ADAPI_ENFORCE(party() == kClient, ProtocolError, "only the client ends a session");
  const std::vector<uint8_t> zero(4, 0);
  channel_->send("batch", zero);
}

InferenceResult SecureSession::run(const nn::RealTensor* input, size_t samples, InferenceTranscript t) {
  const auto started = Clock::now();
  const auto& spec = package_.spec;
  const auto codec = ctx_.codec();
  t.party = party();
  t.comparison = to_string(options_.comparison);
  t.level = package_.level.name;
  t.samples = samples;

  InferenceResult result;
  ArithmeticShare x{party(), RingTensor(batched(samples, spec.input_shape))};
  {
    StepMeter m(*channel_, t, "input", "session");
    if (party() == kClient) {
      // Keep a fresh mask r, hand the server encode(x) - r.
      std::vector<uint64_t> to_server(x.numel());
      for (size_t i = 0; i < x.numel(); ++i) {
        x.data[i] = RingElement(ctx_.prg().next_u64());
        to_server[i] = (codec.encode((*input)[i]) - x.data[i]).value;
      }
      channel_->send_words("input", to_server);
    } else {
      const auto words = channel_->recv_words("input");
      ADAPI_ENFORCE(words.size() == x.numel(), ProtocolError, "input share has the wrong length");
      for (size_t i = 0; i < words.size(); ++i) x.data[i] = RingElement(words[i]);
    }
  }

  size_t wk = 0, rk = 0;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& L = spec.layers[i];
    StepMeter m(*channel_, t, "L" + std::to_string(i), nn::to_string(L.kind));
    mpc::Context::Scope scope(ctx_, "L" + std::to_string(i) + "/");
    switch (L.kind) {
      case LayerKind::Conv:
        x = secure_conv(ctx_, L.conv, x, package_.weights[i], package_.biases[i], &package_.masks.weight[wk++]);
        break;
      case LayerKind::Linear:
        x = secure_linear(ctx_, x, package_.weights[i], package_.biases[i], &package_.masks.weight[wk++]);
        break;
      case LayerKind::Relu:
        x = secure_masked_relu(ctx_, x, package_.masks.feature[rk++], options_.comparison, ot_ ? &*ot_ : nullptr);
        break;
      case LayerKind::AvgPool:
        x = secure_avgpool(ctx_, x, L.pool);
        break;
      case LayerKind::Flatten:
        x.data = x.data.reshaped(batched(samples, L.out_shape));
        break;
    }
    if (options_.keep_layer_shares) result.layer_outputs.push_back(x);
  }

  {
    StepMeter m(*channel_, t, "output", "session");
    if (party() == kServer) {
      channel_->send_words("output", std::span(reinterpret_cast<const uint64_t*>(x.data.data()), x.numel()));
    } else {
      const auto words = channel_->recv_words("output");
      ADAPI_ENFORCE(words.size() == x.numel(), ProtocolError, "output share has the wrong length");
      result.revealed = nn::RealTensor(x.shape());
      for (size_t i = 0; i < words.size(); ++i) {
        result.revealed[i] = codec.decode(RingElement(words[i]) + x.data[i]);
      }
    }
  }
  result.logits = std::move(x);
  t.seconds = seconds_since(started);
  result.transcript = std::move(t);
  return result;
}

RingTensor fixed_point_layer(const nn::LayerSpec& L, const RingTensor& weight, const RingTensor& bias,
                             const masks::BinaryMask* feature_mask, const RingTensor& x,
                             const ring::FixedPointCodec& codec) {
  const size_t n = x.dim(0);
  const int f = codec.frac_bits();
  auto trunc_all = [f](RingTensor& t) {
    for (auto& v : t.vec()) v = ring::truncate(v, f);
  };
  switch (L.kind) {
    case LayerKind::Conv: {
      RingTensor out(batched(n, L.out_shape));
      const size_t per_in = numel(L.in_shape), per_out = numel(L.out_shape);
      for (size_t s = 0; s < n; ++s) {
        conv2d_accumulate<RingElement>(L.conv, x.span().subspan(s * per_in, per_in), weight.span(),
                                       out.span().subspan(s * per_out, per_out));
      }
      trunc_all(out);
      add_channel_bias(out, bias);
      return out;
    }
    case LayerKind::Linear: {
      RingTensor out = matmul(x, weight);
      trunc_all(out);
      add_channel_bias(out, bias);
      return out;
    }
    case LayerKind::Relu: {
      RingTensor out = x;
      const size_t per = numel(L.in_shape);
      for (size_t j = 0; j < out.numel(); ++j) {
        const bool active = !feature_mask || feature_mask->bits[j % per];
        if (active && out[j].as_signed() <= 0) out[j] = RingElement(0);
      }
      return out;
    }
    case LayerKind::AvgPool: {
      RingTensor out = pool_sum(x, L.pool);
      const RingElement inv = codec.encode(1.0 / static_cast<double>(L.pool * L.pool));
      for (auto& v : out.vec()) v = ring::truncate(v * inv, f);
      return out;
    }
    case LayerKind::Flatten:
      return x.reshaped(batched(n, L.out_shape));
  }
  throw ShapeError("unknown layer kind");
}

std::vector<RingTensor> fixed_point_forward(const nn::ModelSpec& spec, const std::vector<RingTensor>& weights,
                                            const std::vector<RingTensor>& biases, const masks::LevelMasks& masks,
                                            const RingTensor& input, const ring::FixedPointCodec& codec) {
  std::vector<RingTensor> outs;
  RingTensor x = input;
  size_t rk = 0;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& L = spec.layers[i];
    const masks::BinaryMask* fm = L.kind == LayerKind::Relu ? &masks.feature.at(rk++) : nullptr;
    x = fixed_point_layer(L, weights.at(i), biases.at(i), fm, x, codec);
    outs.push_back(x);
  }
  return outs;
}

int64_t layer_tolerance_lsb(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv:
    case LayerKind::Linear:
    case LayerKind::AvgPool:
      return 1;
    default:
      return 0;
  }
}

std::vector<nn::RealTensor> propagated_error_bound(const nn::ModelSpec& spec, const std::vector<RingTensor>& weights,
                                                   const masks::LevelMasks& masks, const ring::FixedPointCodec& codec) {
  (void)masks;  // pruned weights are already zero in `weights`
  std::vector<nn::RealTensor> bounds;
  nn::RealTensor e(batched(1, spec.input_shape), 0.0);
  const double scale = codec.scale();
  // Error of floor(a + d) against floor(a) is at most |d| + 1; the share
  // truncation adds one more LSB.
  auto slack = [](const nn::RealTensor& err) {
    for (double v : err.vec()) {
      if (v > 0) return 2.0;
    }
    return 1.0;
  };
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& L = spec.layers[i];
    switch (L.kind) {
      case LayerKind::Conv:
      case LayerKind::Linear: {
        nn::RealTensor absw(weights[i].shape());
        for (size_t j = 0; j < absw.numel(); ++j) absw[j] = std::abs(static_cast<double>(weights[i][j].as_signed())) / scale;
        nn::RealTensor out(batched(1, L.out_shape));
        if (L.kind == LayerKind::Conv) {
          conv2d_accumulate<double>(L.conv, e.span(), absw.span(), out.span());
        } else {
          out = matmul(e, absw);
        }
        const double add = slack(e);
        for (auto& v : out.vec()) v += add;
        e = std::move(out);
        break;
      }
      case LayerKind::AvgPool: {
        const size_t c = e.dim(1), h = e.dim(2), w = e.dim(3), p = L.pool;
        const double inv = static_cast<double>(codec.encode(1.0 / static_cast<double>(p * p)).value) / scale;
        nn::RealTensor out({1, c, h / p, w / p});
        for (size_t ch = 0; ch < c; ++ch) {
          for (size_t y = 0; y < h / p; ++y) {
            for (size_t x = 0; x < w / p; ++x) {
              double acc = 0;
              for (size_t a = 0; a < p; ++a) {
                for (size_t b = 0; b < p; ++b) acc += e[(ch * h + y * p + a) * w + x * p + b];
              }
              out[(ch * (h / p) + y) * (w / p) + x] = acc * inv;
            }
          }
        }
        const double add = slack(e);
        for (auto& v : out.vec()) v += add;
        e = std::move(out);
        break;
      }
      case LayerKind::Relu:
        break;  // 1-Lipschitz, and exact on equal inputs
      case LayerKind::Flatten:
        e = e.reshaped(batched(1, L.out_shape));
        break;
    }
    bounds.push_back(e.reshaped(L.out_shape));
  }
  return bounds;
}

RingTensor reconstruct_tensor(const RingTensor& a, const RingTensor& b) {
  require_same_shape(a.shape(), b.shape(), "reconstruct");
  RingTensor out(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

}  // namespace adapi::runtime

namespace adapi::runtime {

namespace {

template <class T>
Tensor<T> concat_samples(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) return {};
  Shape s = parts.front().shape();
  std::vector<T> data;
  s[0] = 0;
  for (const auto& p : parts) {
    s[0] += p.dim(0);
    data.insert(data.end(), p.vec().begin(), p.vec().end());
  }
  return Tensor<T>(s, std::move(data));
}

void append(InferenceResult& acc, InferenceResult&& r, std::vector<std::vector<RingTensor>>& layers,
            std::vector<RingTensor>& logits, std::vector<nn::RealTensor>& revealed) {
  acc.transcript.party = r.transcript.party;
  acc.transcript.comparison = r.transcript.comparison;
  acc.transcript.level = r.transcript.level;
  acc.transcript.merge(r.transcript);
  logits.push_back(std::move(r.logits.data));
  if (!r.revealed.empty()) revealed.push_back(std::move(r.revealed));
  if (layers.empty()) layers.resize(r.layer_outputs.size());
  for (size_t i = 0; i < r.layer_outputs.size(); ++i) layers[i].push_back(std::move(r.layer_outputs[i].data));
}

InferenceResult finalize(int party, InferenceResult acc, std::vector<std::vector<RingTensor>>& layers,
                         std::vector<RingTensor>& logits, std::vector<nn::RealTensor>& revealed) {
  acc.logits = ArithmeticShare{party, concat_samples(logits)};
  acc.revealed = concat_samples(revealed);
  for (auto& l : layers) acc.layer_outputs.push_back(ArithmeticShare{party, concat_samples(l)});
  return acc;
}

nn::RealTensor sample_range(const nn::RealTensor& x, size_t begin, size_t end) {
  const size_t per = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = end - begin;
  return nn::RealTensor(s, std::vector<double>(x.vec().begin() + begin * per, x.vec().begin() + end * per));
}

}  // namespace

InferenceResult run_server(net::Channel& channel, const SharePackage& pkg, const RuntimeOptions& options) {
  SecureSession session(channel, pkg, options);
  InferenceResult acc;
  std::vector<std::vector<RingTensor>> layers;
  std::vector<RingTensor> logits;
  std::vector<nn::RealTensor> revealed;
  while (auto r = session.serve()) append(acc, std::move(*r), layers, logits, revealed);
  return finalize(kServer, std::move(acc), layers, logits, revealed);
}

InferenceResult run_client(net::Channel& channel, const SharePackage& pkg, const nn::RealTensor& input,
                           size_t batch_size, const RuntimeOptions& options) {
  ADAPI_ENFORCE(batch_size > 0, ConfigError, "batch size must be positive");
  SecureSession session(channel, pkg, options);
  InferenceResult acc;
  std::vector<std::vector<RingTensor>> layers;
  std::vector<RingTensor> logits;
  std::vector<nn::RealTensor> revealed;
  const size_t n = input.empty() ? 0 : input.dim(0);
  for (size_t b = 0; b < n; b += batch_size) {
    append(acc, session.infer(sample_range(input, b, std::min(n, b + batch_size))), layers, logits, revealed);
  }
  session.finish();
  return finalize(kClient, std::move(acc), layers, logits, revealed);
}

PairResult simulate_pair(net::Channel& server_channel, net::Channel& client_channel, const SharePackage& server,
                         const SharePackage& client, const nn::RealTensor& input, size_t batch_size,
                         const RuntimeOptions& options) {
  auto [s, c] = run_parties(
      server_channel, client_channel, [&](net::Channel& ch) { return run_server(ch, server, options); },
      [&](net::Channel& ch) { return run_client(ch, client, input, batch_size, options); });
  return {std::move(s), std::move(c)};
}

PairResult simulate_local(const SharePackage& server, const SharePackage& client, const nn::RealTensor& input,
                          size_t batch_size, const RuntimeOptions& options) {
  auto [c0, c1] = net::make_local_pair();
  return simulate_pair(*c0, *c1, server, client, input, batch_size, options);
}

}  // namespace adapi::runtime

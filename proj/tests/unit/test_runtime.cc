#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <thread>

#include "adapi/container.h"
#include "adapi/parties.h"
#include "adapi/runtime.h"

using adapi::Prg;
using adapi::Shape;
using adapi::numel;
using adapi::mpc::Context;
using adapi::nn::RealTensor;
using adapi::ring::FixedPointCodec;
using adapi::ring::RingElement;
using adapi::share::ArithmeticShare;
using adapi::share::RingTensor;
using namespace adapi::runtime;
namespace masks = adapi::masks;

namespace {

adapi::nn::ModelSpec toy_spec() {
  return adapi::nn::ModelSpec::build({1, 6, 6}, 3, nlohmann::json::parse(R"([
    {"type":"conv","out_channels":4,"kernel":3,"pad":1},{"type":"relu"},{"type":"avgpool","size":2},
    {"type":"flatten"},{"type":"linear","out_features":8},{"type":"relu"},{"type":"linear","out_features":3}])"));
}

RealTensor random_tensor(Shape s, Prg& rng, double scale = 1.0) {
  RealTensor t(std::move(s));
  for (auto& v : t.vec()) v = scale * rng.normal();
  return t;
}

adapi::train::ModelBundle toy_bundle(uint64_t seed) {
  const auto spec = toy_spec();
  Prg rng(seed, 3);
  adapi::nn::Model model(spec);
  model.init(rng);
  for (auto& p : model.params()) {
    for (auto& b : p.bias.vec()) b = 0.1 * rng.normal();
  }
  std::vector<RealTensor> sw, sf;
  for (size_t li : spec.weight_layers()) sw.push_back(random_tensor(spec.layers[li].weight_shape(), rng));
  for (size_t li : spec.relu_layers()) sf.push_back(random_tensor(spec.layers[li].out_shape, rng));
  auto family = masks::mask_family(sw, sf, masks::DensitySchedule::standard());
  return {std::move(model), std::move(family), {}, {}};
}

Shape batched(size_t n, const Shape& s) {
  Shape out{n};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

int64_t lsb_diff(RingElement a, RingElement b) { return std::abs((a - b).as_signed()); }

// Private input of party 1, shared as (x - r, r).
std::pair<ArithmeticShare, ArithmeticShare> shares_of(const RingTensor& x, uint64_t seed) {
  Prg rng(seed, 9);
  return adapi::share::share(x, rng);
}

ArithmeticShare mine(const Context& ctx, const std::pair<ArithmeticShare, ArithmeticShare>& s) {
  return ctx.party() == 0 ? s.first : s.second;
}

RingTensor encode_all(const RealTensor& t, const FixedPointCodec& c) {
  RingTensor r(t.shape());
  for (size_t i = 0; i < t.numel(); ++i) r[i] = c.encode(t[i]);
  return r;
}

}  // namespace

TEST_CASE("deploy shares the masked weights") {
  const auto bundle = toy_bundle(1);
  const FixedPointCodec codec(16);
  const auto [p0, p1] = deploy(bundle, "L3", 42);
  CHECK(p0.party == kServer);
  CHECK(p1.party == kClient);
  CHECK(p0.metadata_digest() == p1.metadata_digest());
  const auto& spec = bundle.model.spec();
  size_t k = 0;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    if (!spec.layers[i].has_weights()) {
      CHECK(p0.weights[i].empty());
      continue;
    }
    const auto& mask = bundle.family.levels[1].weight[k++];
    const auto w = reconstruct_tensor(p0.weights[i], p1.weights[i]);
    const auto& W = bundle.model.layer(i).weight;
    for (size_t j = 0; j < W.numel(); ++j) {
      if (mask.bits[j]) {
        CHECK(w[j] == codec.encode(W[j]));
      } else {
        CHECK(w[j].value == 0);
        CHECK(p0.weights[i][j].value == 0);
        CHECK(p1.weights[i][j].value == 0);
      }
    }
    const auto b = reconstruct_tensor(p0.biases[i], p1.biases[i]);
    for (size_t j = 0; j < b.numel(); ++j) CHECK(b[j] == codec.encode(bundle.model.layer(i).bias[j]));
  }

  // Two levels agree wherever both keep a weight.
  const auto [q0, q1] = deploy(bundle, "L1", 7);
  for (size_t i : spec.weight_layers()) {
    const auto a = reconstruct_tensor(p0.weights[i], p1.weights[i]);
    const auto c = reconstruct_tensor(q0.weights[i], q1.weights[i]);
    for (size_t j = 0; j < a.numel(); ++j) {
      if (a[j].value != 0 && c[j].value != 0) CHECK(a[j] == c[j]);
    }
  }
  CHECK(p0.metadata_digest() != q0.metadata_digest());
  CHECK_THROWS_AS(deploy(bundle, "L9", 1), adapi::ConfigError);
}

TEST_CASE("share packages round trip and reject corruption") {
  const auto bundle = toy_bundle(2);
  const auto [p0, p1] = deploy(bundle, "L2", 3);
  const auto dir = std::filesystem::temp_directory_path() / "adapi_test_runtime";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "client.pkg").string();
  save_package(p1, path);
  const auto back = load_package(path);
  CHECK(back.party == kClient);
  CHECK(back.spec == p1.spec);
  CHECK(back.level == p1.level);
  CHECK(back.masks == p1.masks);
  CHECK(back.weights == p1.weights);
  CHECK(back.biases == p1.biases);
  auto bytes = adapi::io::read_file(path);
  bytes[bytes.size() - 3] ^= 0x40;
  adapi::io::write_file(path, bytes);
  CHECK_THROWS_AS(load_package(path), adapi::FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("secure conv matches the plaintext fixed-point conv") {
  const FixedPointCodec codec(16);
  Prg rng(5, 5);

  SUBCASE("identity 1x1 kernel") {
    adapi::ConvGeometry g{1, 1, 1, 1, 0, 5, 5};
    const auto x = encode_all(random_tensor({2, 1, 5, 5}, rng, 3.0), codec);
    const auto xs = shares_of(x, 1);
    const auto ws = shares_of(RingTensor({1, 1, 1, 1}, codec.encode(1.0)), 2);
    auto [y0, y1] = adapi::run_local([&](Context& ctx) {
      return secure_conv(ctx, g, mine(ctx, xs), mine(ctx, ws).data, RingTensor(), nullptr);
    });
    const auto y = adapi::share::reconstruct(y0, y1);
    for (size_t i = 0; i < y.numel(); ++i) CHECK(lsb_diff(y[i], x[i]) <= 1);
  }

  SUBCASE("random 3x3 kernel on 8x8 inputs") {
    adapi::ConvGeometry g{3, 4, 3, 1, 1, 8, 8};
    const RealTensor xr = random_tensor({2, 3, 8, 8}, rng), wr = random_tensor(g.kernel_shape(), rng, 0.5);
    const auto x = encode_all(xr, codec), w = encode_all(wr, codec);
    const auto xs = shares_of(x, 3), ws = shares_of(w, 4);
    auto [y0, y1] = adapi::run_local([&](Context& ctx) {
      return secure_conv(ctx, g, mine(ctx, xs), mine(ctx, ws).data, RingTensor(), nullptr);
    });
    const auto y = adapi::share::reconstruct(y0, y1);
    adapi::nn::LayerSpec L;
    L.kind = adapi::nn::LayerKind::Conv;
    L.conv = g;
    L.in_shape = g.input_shape();
    L.out_shape = g.output_shape();
    const auto ref = fixed_point_layer(L, w, RingTensor(), nullptr, x, codec);
    // Real-valued conv of the decoded operands.
    RealTensor xd(xr.shape()), wd(wr.shape());
    for (size_t i = 0; i < x.numel(); ++i) xd[i] = codec.decode(x[i]);
    for (size_t i = 0; i < w.numel(); ++i) wd[i] = codec.decode(w[i]);
    int64_t worst_ref = 0;
    double worst_real = 0;
    const size_t per_in = 3 * 64, per_out = 4 * 64;
    for (size_t s = 0; s < 2; ++s) {
      RealTensor out(g.output_shape());
      adapi::conv2d_accumulate<double>(g, xd.span().subspan(s * per_in, per_in), wd.span(), out.span());
      for (size_t i = 0; i < per_out; ++i) {
        worst_real = std::max(worst_real, std::abs(codec.decode(y[s * per_out + i]) - out[i]));
        worst_ref = std::max(worst_ref, lsb_diff(y[s * per_out + i], ref[s * per_out + i]));
      }
    }
    CHECK(worst_ref <= 1);
    CHECK(worst_real <= 27.0 / codec.scale());
  }

  SUBCASE("all-zero weight mask yields zero output and opens no weights") {
    adapi::ConvGeometry g{2, 3, 3, 1, 1, 4, 4};
    const auto x = encode_all(random_tensor({1, 2, 4, 4}, rng), codec);
    const auto xs = shares_of(x, 5);
    const RingTensor zero(g.kernel_shape());
    const masks::BinaryMask none(g.kernel_shape(), std::vector<uint8_t>(numel(g.kernel_shape()), 0));
    auto [r0, r1] = adapi::run_local([&](Context& ctx) {
      auto y = secure_conv(ctx, g, mine(ctx, xs), zero, RingTensor(), &none);
      return std::pair(y, ctx.channel().meter().snapshot());
    });
    const auto y = adapi::share::reconstruct(r0.first, r1.first);
    for (size_t i = 0; i < y.numel(); ++i) CHECK(y[i].value == 0);
    CHECK(r0.second.matching("conv-exchange:F").sent_payload == 0);
    CHECK(r0.second.matching("conv-exchange:E").sent_payload == 8 * x.numel());
  }

  SUBCASE("weight support limits the opened weights") {
    adapi::ConvGeometry g{2, 3, 3, 1, 1, 4, 4};
    const auto x = encode_all(random_tensor({3, 2, 4, 4}, rng), codec);
    auto w = encode_all(random_tensor(g.kernel_shape(), rng), codec);
    masks::BinaryMask m(g.kernel_shape(), std::vector<uint8_t>(numel(g.kernel_shape()), 0));
    for (size_t i = 0; i < m.size(); i += 3) m.bits[i] = 1;
    for (size_t i = 0; i < w.numel(); ++i) {
      if (!m.bits[i]) w[i] = RingElement(0);
    }
    const auto xs = shares_of(x, 6);
    adapi::share::ArithmeticShare w0{0, w}, w1{1, RingTensor(w.shape())};
    auto [r0, r1] = adapi::run_local([&](Context& ctx) {
      auto y = secure_conv(ctx, g, mine(ctx, xs), ctx.party() == 0 ? w0.data : w1.data, RingTensor(), &m);
      return std::pair(y, ctx.channel().meter().snapshot());
    });
    CHECK(r0.second.matching("conv-exchange:F").sent_payload == 3 * 8 * m.popcount());
    const auto y = adapi::share::reconstruct(r0.first, r1.first);
    adapi::nn::LayerSpec L;
    L.kind = adapi::nn::LayerKind::Conv;
    L.conv = g;
    L.in_shape = g.input_shape();
    L.out_shape = g.output_shape();
    const auto ref = fixed_point_layer(L, w, RingTensor(), nullptr, x, codec);
    for (size_t i = 0; i < y.numel(); ++i) CHECK(lsb_diff(y[i], ref[i]) <= 1);
  }
}

TEST_CASE("secure linear and avgpool stay within one LSB") {
  const FixedPointCodec codec(16);
  Prg rng(6, 6);
  const auto x = encode_all(random_tensor({4, 5}, rng), codec);
  const auto w = encode_all(random_tensor({5, 3}, rng), codec);
  const auto b = encode_all(random_tensor({3}, rng), codec);
  const auto p = encode_all(random_tensor({2, 2, 4, 4}, rng), codec);
  const auto xs = shares_of(x, 1), ws = shares_of(w, 2), bs = shares_of(b, 3), ps = shares_of(p, 4);
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    return std::pair(secure_linear(ctx, mine(ctx, xs), mine(ctx, ws).data, mine(ctx, bs).data, nullptr),
                     secure_avgpool(ctx, mine(ctx, ps), 2));
  });
  adapi::nn::LayerSpec lin;
  lin.kind = adapi::nn::LayerKind::Linear;
  lin.in_features = 5;
  lin.out_features = 3;
  const auto ref = fixed_point_layer(lin, w, b, nullptr, x, codec);
  const auto y = adapi::share::reconstruct(r0.first, r1.first);
  for (size_t i = 0; i < y.numel(); ++i) CHECK(lsb_diff(y[i], ref[i]) <= 1);

  adapi::nn::LayerSpec pool;
  pool.kind = adapi::nn::LayerKind::AvgPool;
  pool.pool = 2;
  const auto pref = fixed_point_layer(pool, RingTensor(), RingTensor(), nullptr, p, codec);
  const auto py = adapi::share::reconstruct(r0.second, r1.second);
  REQUIRE(py.shape() == Shape{2, 2, 2, 2});
  for (size_t i = 0; i < py.numel(); ++i) CHECK(lsb_diff(py[i], pref[i]) <= 1);
}

TEST_CASE("masked relu follows the public mask") {
  const FixedPointCodec codec(16);
  for (Comparison mode : {Comparison::SignBit, Comparison::Ot}) {
    CAPTURE(to_string(mode));
    auto run = [&](const RingTensor& z, const masks::BinaryMask& m) {
      const auto zs = shares_of(z, 11);
      auto [r0, r1] = adapi::run_local([&](Context& ctx) {
        std::optional<adapi::mpc::OtSession> ot;
        if (mode == Comparison::Ot) ot = adapi::mpc::ot_setup(ctx, 0, adapi::ring::OtGroup::paper_width());
        const auto before = ctx.channel().meter().snapshot();
        auto y = secure_masked_relu(ctx, mine(ctx, zs), m, mode, ot ? &*ot : nullptr);
        return std::pair(y, ctx.channel().meter().snapshot() - before);
      });
      return std::pair(adapi::share::reconstruct(r0.first, r1.first), r0.second.totals);
    };
    const RingTensor z({1, 2}, std::vector<RingElement>{codec.encode(-1.0), codec.encode(2.0)});

    const auto [all, all_bytes] = run(z, masks::BinaryMask::ones({2}));
    CHECK(codec.decode(all[0]) == 0.0);
    CHECK(codec.decode(all[1]) == 2.0);
    CHECK(all_bytes.sent_bytes > 0);

    const auto [none, none_bytes] = run(z, masks::BinaryMask({2}, {0, 0}));
    CHECK(none == z);
    CHECK(none_bytes.sent_bytes == 0);
    CHECK(none_bytes.received_bytes == 0);

    const RingTensor neg({1, 2}, std::vector<RingElement>{codec.encode(-1.0), codec.encode(-1.0)});
    const auto [mixed, mixed_bytes] = run(neg, masks::BinaryMask({2}, {1, 0}));
    CHECK(codec.decode(mixed[0]) == 0.0);
    CHECK(codec.decode(mixed[1]) == -1.0);
  }
}

TEST_CASE("end-to-end inference matches the fixed-point reference") {
  const auto bundle = toy_bundle(3);
  const auto& spec = bundle.model.spec();
  const FixedPointCodec codec(16);
  Prg rng(8, 8);
  const RealTensor input = random_tensor(batched(6, spec.input_shape), rng);
  for (const std::string level : {"L4", "L1"}) {
    CAPTURE(level);
    const auto [p0, p1] = deploy(bundle, level, 5);
    RuntimeOptions opts;
    opts.keep_layer_shares = true;
    const auto r = simulate_local(p0, p1, input, 4, opts);
    REQUIRE(r.client.revealed.shape() == Shape({6, 3}));
    CHECK(r.server.revealed.empty());

    std::vector<RingTensor> w(spec.layers.size()), b(spec.layers.size());
    for (size_t i = 0; i < spec.layers.size(); ++i) {
      if (!p0.weights[i].empty()) {
        w[i] = reconstruct_tensor(p0.weights[i], p1.weights[i]);
        b[i] = reconstruct_tensor(p0.biases[i], p1.biases[i]);
      }
    }
    const auto lm = bundle.family.levels[bundle.family.schedule.index_of(level)];
    RingTensor x = encode_all(input, codec);
    const auto ref = fixed_point_forward(spec, w, b, lm, x, codec);
    const auto bound = propagated_error_bound(spec, w, lm, codec);

    // Layer by layer, re-running each layer on the secure input.
    size_t rk = 0;
    RingTensor prev = x;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
      const auto& L = spec.layers[i];
      const auto got = reconstruct_tensor(r.server.layer_outputs[i].data, r.client.layer_outputs[i].data);
      const masks::BinaryMask* fm = L.kind == adapi::nn::LayerKind::Relu ? &lm.feature[rk++] : nullptr;
      const auto again = fixed_point_layer(L, w[i], b[i], fm, prev, codec);
      int64_t worst = 0;
      double over = 0;
      const size_t per = numel(L.out_shape);
      for (size_t j = 0; j < got.numel(); ++j) {
        worst = std::max(worst, lsb_diff(got[j], again[j]));
        over = std::max(over, static_cast<double>(lsb_diff(got[j], ref[i][j])) - bound[i][j % per]);
      }
      CAPTURE(i);
      CHECK(worst <= layer_tolerance_lsb(L.kind));
      CHECK(over <= 0.0);
      prev = got;
    }

    // Client logits agree with the plaintext masked model.
    const auto plain = adapi::nn::forward(bundle.model, input, nullptr);
    const auto ms = bundle.family.mask_set(bundle.family.schedule.index_of(level));
    const auto masked = adapi::nn::forward(bundle.model, input, &ms);
    CHECK(adapi::nn::argmax_rows(masked) == adapi::nn::argmax_rows(r.client.revealed));
    (void)plain;

    // Mirrored transcripts whose layers sum to the totals.
    const auto& ts = r.server.transcript;
    const auto& tc = r.client.transcript;
    CHECK(ts.totals.sent_bytes == tc.totals.received_bytes);
    CHECK(ts.totals.received_bytes == tc.totals.sent_bytes);
    CHECK(ts.total_bytes() == tc.total_bytes());
    adapi::net::TagCounters sum;
    for (const auto& l : ts.layers) sum += l.counters;
    CHECK(sum == ts.totals);
    CHECK(ts.samples == 6);
    CHECK(ts.to_json().at("layers").size() == ts.layers.size());
  }
}

TEST_CASE("relu bytes are a per-element constant and scale with density") {
  const auto bundle = toy_bundle(4);
  const auto& spec = bundle.model.spec();
  Prg rng(9, 9);
  const RealTensor input = random_tensor(batched(2, spec.input_shape), rng);
  RuntimeOptions opts;
  opts.comparison = Comparison::Ot;
  std::map<std::string, uint64_t> relu_bytes;
  for (const std::string level : {"L4", "L1"}) {
    const auto [p0, p1] = deploy(bundle, level, 5);
    const auto r = simulate_local(p0, p1, input, 2, opts);
    size_t rk = 0;
    uint64_t total = 0;
    for (const auto& l : r.server.transcript.layers) {
      if (l.kind != "relu") continue;
      const uint64_t pop = p0.masks.feature[rk++].popcount();
      const auto& ot = l.categories.count("relu-ot") ? l.categories.at("relu-ot") : adapi::net::TagCounters{};
      CHECK(ot.sent_payload + ot.received_payload == 324 * 2 * pop);
      if (pop == 0) CHECK(l.counters.sent_bytes + l.counters.received_bytes == 0);
      total += ot.sent_payload + ot.received_payload;
    }
    CHECK(total == r.server.transcript.relu_payload_bytes() - [&] {
      uint64_t other = 0;
      for (const auto& l : r.server.transcript.layers) {
        if (l.kind != "relu") continue;
        for (const auto& [cat, c] : l.categories) {
          if (cat != "relu-ot") other += c.sent_payload + c.received_payload;
        }
      }
      return other;
    }());
    relu_bytes[level] = total;
    // Argmax still agrees in OT mode.
    const auto ms = bundle.family.mask_set(bundle.family.schedule.index_of(level));
    CHECK(adapi::nn::argmax_rows(adapi::nn::forward(bundle.model, input, &ms)) ==
          adapi::nn::argmax_rows(r.client.revealed));
  }
  const double layers = static_cast<double>(spec.relu_layers().size());
  CHECK(std::abs(static_cast<double>(relu_bytes["L1"]) / 8.0 - static_cast<double>(relu_bytes["L4"])) <=
        324.0 * 2 * layers);
}

TEST_CASE("digest mismatch aborts before any layer runs") {
  const auto bundle = toy_bundle(5);
  const auto [s4, c4] = deploy(bundle, "L4", 1);
  const auto [s1, c1] = deploy(bundle, "L1", 1);
  Prg rng(1, 1);
  const RealTensor input = random_tensor(batched(1, bundle.model.spec().input_shape), rng);
  CHECK_THROWS_AS(simulate_local(s4, c1, input, 1), adapi::ProtocolError);
  RuntimeOptions signbit, ot;
  ot.comparison = Comparison::Ot;
  auto [a, b] = adapi::net::make_local_pair();
  CHECK_THROWS_AS(adapi::run_parties(
                      *a, *b, [&](adapi::net::Channel& ch) { return run_server(ch, s4, signbit); },
                      [&](adapi::net::Channel& ch) { return run_client(ch, c4, input, 1, ot); }),
                  adapi::ProtocolError);
}

TEST_CASE("tcp loopback transcript equals the in-process one") {
  const auto bundle = toy_bundle(6);
  const auto [p0, p1] = deploy(bundle, "L2", 2);
  Prg rng(3, 3);
  const RealTensor input = random_tensor(batched(3, bundle.model.spec().input_shape), rng);
  const auto local = simulate_local(p0, p1, input, 2);

  adapi::net::TcpListener listener("127.0.0.1", 0);
  std::unique_ptr<adapi::net::Channel> server_ch;
  std::thread acceptor([&] { server_ch = listener.accept(kServer, std::chrono::seconds(10)); });
  auto client_ch = adapi::net::tcp_connect("127.0.0.1", listener.port(), kClient);
  acceptor.join();
  REQUIRE(server_ch);
  const auto tcp = simulate_pair(*server_ch, *client_ch, p0, p1, input, 2);
  CHECK(tcp.server.transcript.totals == local.server.transcript.totals);
  CHECK(tcp.client.transcript.totals == local.client.transcript.totals);
  CHECK(tcp.client.revealed == local.client.revealed);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "adapi/mpc.h"
#include "adapi/parties.h"

using adapi::ConvGeometry;
using adapi::Prg;
using adapi::Tensor;
using adapi::ring::RingElement;
using namespace adapi::mpc;
using adapi::share::reconstruct;
using adapi::share::RingTensor;

namespace {

ArithmeticShare my_half(Context& ctx, const RingTensor& x, uint64_t seed) {
  Prg rng(seed, 77);
  auto [s0, s1] = adapi::share::share(x, rng);
  return ctx.party() == 0 ? s0 : s1;
}

RingTensor random_ring(const adapi::Shape& shape, Prg& rng) {
  RingTensor t(shape);
  for (auto& v : t.vec()) v = RingElement(rng.next_u64());
  return t;
}

RingTensor from_signed(const std::vector<int64_t>& xs) {
  RingTensor t({xs.size()});
  for (size_t i = 0; i < xs.size(); ++i) t[i] = RingElement(static_cast<uint64_t>(xs[i]));
  return t;
}

RingTensor scalar(uint64_t v) { return RingTensor({1}, {RingElement(v)}); }

}  // namespace

TEST_CASE("dealer triples reconstruct to the declared product") {
  Prg rng(1);
  auto [t0, t1] = Dealer::deal_from(BilinearSpec::elementwise({1}), scalar(2), scalar(4), rng);
  CHECK(reconstruct(t0.z(), t1.z())[0].value == 8);
  auto [u0, u1] = Dealer::deal_from(BilinearSpec::elementwise({1}), scalar(0), scalar(777), rng);
  CHECK(reconstruct(u0.z(), u1.z())[0].value == 0);

  const ConvGeometry g{2, 3, 3, 1, 1, 3, 3};
  const auto spec = BilinearSpec::convolution(g);
  auto [c0, c1] = Dealer::deal_pair(spec, rng);
  const RingTensor a = reconstruct(c0.a(), c1.a()), b = reconstruct(c0.b(), c1.b());
  CHECK(reconstruct(c0.z(), c1.z()) == adapi::conv2d(g, a, b));

  auto [s0, s1] = dealer_triples(3, BilinearSpec::matmul(2, 3, 4), 99);
  REQUIRE(s0.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    const RingTensor a2 = reconstruct(s0[i].a(), s1[i].a()), b2 = reconstruct(s0[i].b(), s1[i].b());
    CHECK(reconstruct(s0[i].z(), s1[i].z()) == adapi::matmul(a2, b2));
  }
}

TEST_CASE("secure_mul hand-expanded example") {
  // X = 3, Y = 5, triple (2, 4, 8): E = 1, F = 1, R = -1 + 3 + 5 + 8 = 15.
  Prg rng(2);
  auto [t0, t1] = Dealer::deal_from(BilinearSpec::elementwise({1}), scalar(2), scalar(4), rng);
  auto [q0, q1] = adapi::run_local([&](Context& ctx) {
    BeaverTriple& t = ctx.party() == 0 ? t0 : t1;
    return secure_mul(ctx, my_half(ctx, scalar(3), 1), my_half(ctx, scalar(5), 2), t);
  });
  CHECK(reconstruct(q0, q1)[0].value == 15);
}

TEST_CASE("secure_mul exact for random elementwise, matmul and conv operands") {
  Prg rng(3);
  const RingTensor x = random_ring({1000}, rng), y = random_ring({1000}, rng);
  const RingTensor mx = random_ring({2, 2}, rng), my = random_ring({2, 2}, rng);
  const ConvGeometry g{3, 4, 3, 1, 1, 6, 6};
  const RingTensor cx = random_ring(g.input_shape(), rng), cy = random_ring(g.kernel_shape(), rng);
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    std::vector<ArithmeticShare> out;
    BeaverTriple te = ctx.dealer().beaver(BilinearSpec::elementwise({1000}));
    out.push_back(secure_mul(ctx, my_half(ctx, x, 1), my_half(ctx, y, 2), te));
    BeaverTriple tm = ctx.dealer().beaver(BilinearSpec::matmul(2, 2, 2));
    out.push_back(secure_mul(ctx, my_half(ctx, mx, 3), my_half(ctx, my, 4), tm));
    BeaverTriple tc = ctx.dealer().beaver(BilinearSpec::convolution(g));
    out.push_back(secure_mul(ctx, my_half(ctx, cx, 5), my_half(ctx, cy, 6), tc));
    return out;
  });
  RingTensor want(x.shape());
  for (size_t i = 0; i < x.numel(); ++i) want[i] = x[i] * y[i];
  CHECK(reconstruct(r0[0], r1[0]) == want);
  CHECK(reconstruct(r0[1], r1[1]) == adapi::matmul(mx, my));
  CHECK(reconstruct(r0[2], r1[2]) == adapi::conv2d(g, cx, cy));
}

TEST_CASE("secure_mul with zero operand and triple reuse") {
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    BeaverTriple t = ctx.dealer().beaver(BilinearSpec::elementwise({1}));
    auto r = secure_mul(ctx, my_half(ctx, scalar(0), 1), my_half(ctx, scalar(123), 2), t);
    CHECK_FALSE(t.usable());
    bool threw = false;
    try {
      secure_mul(ctx, my_half(ctx, scalar(1), 1), my_half(ctx, scalar(1), 2), t);
    } catch (const adapi::ProtocolError&) {
      threw = true;
    }
    CHECK(threw);
    BeaverTriple moved = std::move(t);
    CHECK_FALSE(t.usable());
    return r;
  });
  CHECK(reconstruct(r0, r1)[0].value == 0);
}

TEST_CASE("secure_mul rejects shape mismatch") {
  auto [c0, c1] = adapi::net::make_local_pair();
  Context ctx(*c0, 1, 2);
  BeaverTriple t = ctx.dealer().beaver(BilinearSpec::elementwise({2}));
  ArithmeticShare x{0, RingTensor({3})};
  CHECK_THROWS_AS(secure_mul(ctx, x, x, t), adapi::ProtocolError);
}

TEST_CASE("secure_mul opens exactly two tagged operands") {
  auto [m0, m1] = adapi::run_local([&](Context& ctx) {
    BeaverTriple t = ctx.dealer().beaver(BilinearSpec::elementwise({4}));
    secure_mul(ctx, my_half(ctx, RingTensor({4}), 1), my_half(ctx, RingTensor({4}), 2), t);
    return ctx.channel().meter().snapshot();
  });
  CHECK(m0.per_tag.size() == 2);
  CHECK(m0.per_tag.at("E").sent_payload == 32);
  CHECK(m0.per_tag.at("F").sent_payload == 32);
  CHECK(m0.totals.sent_bytes == m1.totals.received_bytes);
  CHECK(m1.totals.sent_bytes == m0.totals.received_bytes);
}

TEST_CASE("support-restricted triples skip pruned operand positions") {
  Prg rng(4);
  const RingTensor x = random_ring({2, 3}, rng);
  RingTensor w = random_ring({3, 2}, rng);
  const std::vector<uint8_t> support = {1, 0, 0, 1, 1, 0};
  for (size_t i = 0; i < w.numel(); ++i) {
    if (!support[i]) w[i] = RingElement(0);
  }
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    const auto spec = BilinearSpec::matmul(2, 3, 2).with_support(support);
    BeaverTriple t = ctx.dealer().beaver(spec);
    auto r = secure_mul(ctx, my_half(ctx, x, 1), my_half(ctx, w, 2), t);
    return std::pair(r, ctx.channel().meter().snapshot().per_tag.at("F").sent_payload);
  });
  CHECK(reconstruct(r0.first, r1.first) == adapi::matmul(x, w));
  CHECK(r0.second == 3 * 8);
}

TEST_CASE("secure_mul_fixed examples") {
  const adapi::ring::FixedPointCodec codec(16);
  const double lsb = std::ldexp(1.0, -15);
  const std::vector<std::pair<double, double>> cases = {{1.0, 1.0}, {0.5, -2.0}, {0.0, 3.75}};
  for (auto [a, b] : cases) {
    auto [r0, r1] = adapi::run_local([&](Context& ctx) {
      BeaverTriple t = ctx.dealer().beaver(BilinearSpec::elementwise({1}));
      return secure_mul_fixed(ctx, my_half(ctx, scalar(codec.encode(a).value), 1),
                              my_half(ctx, scalar(codec.encode(b).value), 2), t);
    });
    CHECK(std::fabs(codec.decode(reconstruct(r0, r1)[0]) - a * b) <= lsb);
  }
}

TEST_CASE("and_words matches plaintext AND at several widths") {
  Prg rng(5);
  for (unsigned width : {1u, 2u, 16u, 64u}) {
    const uint64_t mask = width == 64 ? ~uint64_t{0} : (uint64_t{1} << width) - 1;
    std::vector<uint64_t> x(100), y(100), rx(100), ry(100);
    for (size_t i = 0; i < 100; ++i) {
      x[i] = rng.next_u64() & mask;
      y[i] = rng.next_u64() & mask;
      rx[i] = rng.next_u64() & mask;
      ry[i] = rng.next_u64() & mask;
    }
    auto [z0, z1] = adapi::run_local([&](Context& ctx) {
      std::vector<uint64_t> xs(100), ys(100);
      for (size_t i = 0; i < 100; ++i) {
        xs[i] = ctx.party() == 0 ? rx[i] : x[i] ^ rx[i];
        ys[i] = ctx.party() == 0 ? ry[i] : y[i] ^ ry[i];
      }
      auto z = and_words(ctx, "and", xs, ys, width);
      const auto bytes = ctx.channel().meter().totals().sent_payload;
      CHECK(bytes == 2 * 100 * ((width + 7) / 8));
      return z;
    });
    for (size_t i = 0; i < 100; ++i) CHECK((z0[i] ^ z1[i]) == (x[i] & y[i]));
  }
}

namespace {

std::vector<uint64_t> drelu_bits(const RingTensor& x) {
  auto [d0, d1] = adapi::run_local([&](Context& ctx) { return drelu(ctx, my_half(ctx, x, 8)); });
  const auto d = reconstruct(d0, d1);
  std::vector<uint64_t> out(d.numel());
  for (size_t i = 0; i < d.numel(); ++i) out[i] = d[i].value;
  return out;
}

}  // namespace

TEST_CASE("drelu examples") {
  const auto d = drelu_bits(from_signed({-7, 7, 0}));
  CHECK(d[0] == 0);
  CHECK(d[1] == 1);
  CHECK(d[2] == 0);
}

TEST_CASE("drelu exhaustive 16-bit sweep and random 64-bit values") {
  std::vector<int64_t> xs;
  for (int64_t v = -32768; v < 32768; ++v) xs.push_back(v);
  Prg rng(9);
  for (int i = 0; i < 10000; ++i) xs.push_back(static_cast<int64_t>(rng.next_u64()));
  xs.push_back(INT64_MIN);
  xs.push_back(INT64_MAX);
  const auto d = drelu_bits(from_signed(xs));
  size_t mismatches = 0;
  for (size_t i = 0; i < xs.size(); ++i) mismatches += d[i] != (xs[i] > 0 ? 1u : 0u);
  CHECK(mismatches == 0);
}

TEST_CASE("secure_relu examples and the |x| identity") {
  const adapi::ring::FixedPointCodec codec(16);
  std::vector<double> vals = {-2.0, 3.5, 0.0};
  Prg rng(10);
  for (int i = 0; i < 200; ++i) vals.push_back((rng.uniform_real() * 2 - 1) * 1000);
  RingTensor x({vals.size()}), neg({vals.size()});
  for (size_t i = 0; i < vals.size(); ++i) {
    x[i] = codec.encode(vals[i]);
    neg[i] = -x[i];
  }
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    return std::pair(secure_relu(ctx, my_half(ctx, x, 1)), secure_relu(ctx, my_half(ctx, neg, 2)));
  });
  const auto pos = reconstruct(r0.first, r1.first);
  const auto negr = reconstruct(r0.second, r1.second);
  CHECK(codec.decode(pos[0]) == 0.0);
  CHECK(codec.decode(pos[1]) == 3.5);
  CHECK(pos[2].value == 0);
  for (size_t i = 0; i < vals.size(); ++i) {
    // d is a 0/1 integer, so the product needs no truncation and is exact.
    CHECK((pos[i] + negr[i]).as_signed() == std::llabs(x[i].as_signed()));
  }
}

TEST_CASE("sign-bit relu bytes per element are constant") {
  auto bytes_for = [](size_t n) {
    auto [m0, m1] = adapi::run_local([&](Context& ctx) {
      secure_relu(ctx, my_half(ctx, RingTensor({n}), 3));
      return ctx.channel().meter().totals().sent_payload;
    });
    return m0 + m1;
  };
  const uint64_t one = bytes_for(1);
  CHECK(bytes_for(7) == 7 * one);
  CHECK(bytes_for(33) == 33 * one);
}

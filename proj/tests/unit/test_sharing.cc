#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>

#include "adapi/mpc.h"
#include "adapi/parties.h"
#include "adapi/sharing.h"

using adapi::Prg;
using adapi::Tensor;
using adapi::mpc::Context;
using adapi::ring::RingElement;
using namespace adapi::share;

namespace {

RingTensor scalar(uint64_t v) { return RingTensor({1}, {RingElement(v)}); }

RingTensor from_signed(const std::vector<int64_t>& xs) {
  RingTensor t({xs.size()});
  for (size_t i = 0; i < xs.size(); ++i) t[i] = RingElement(static_cast<uint64_t>(xs[i]));
  return t;
}

// Each party shares the same plaintext with a dealer-seeded mask so both
// sides agree on the split without communicating.
ArithmeticShare my_half(Context& ctx, const RingTensor& x, uint64_t seed) {
  Prg rng(seed, 99);
  auto [s0, s1] = share(x, rng);
  return ctx.party() == 0 ? s0 : s1;
}

}  // namespace

TEST_CASE("share examples") {
  Prg rng(1);
  auto [z0, z1] = share(scalar(0), rng);
  CHECK(z1.data[0] == -z0.data[0]);
  CHECK(reconstruct(z0, z1)[0].value == 0);

  auto [a, b] = share_with_mask(scalar(42), scalar(100));
  CHECK(a.data[0].value == 100);
  CHECK(b.data[0].value == 0ULL - 58ULL);
  CHECK(reconstruct(a, b)[0].value == 42);
  CHECK(a.party == 0);
  CHECK(b.party == 1);
}

TEST_CASE("reconstruct examples and errors") {
  ArithmeticShare a{0, scalar(5)}, b{1, scalar(0ULL - 5ULL)};
  CHECK(reconstruct(a, b)[0].value == 0);
  CHECK_THROWS_AS(reconstruct(a, a), adapi::ProtocolError);
  ArithmeticShare wide{1, RingTensor({2})};
  CHECK_THROWS_AS(reconstruct(a, wide), adapi::ProtocolError);

  Prg rng(2);
  RingTensor x({10000});
  for (auto& v : x.vec()) v = RingElement(rng.next_u64());
  auto [s0, s1] = share(x, rng);
  CHECK(reconstruct(s0, s1) == x);
}

TEST_CASE("a single half shows no fixed bit") {
  Prg rng(3);
  uint64_t ones = 0, zeros = 0;
  for (int i = 0; i < 10000; ++i) {
    auto [s0, s1] = share(scalar(0xdeadbeef), rng);
    ones |= s1.data[0].value;
    zeros |= ~s1.data[0].value;
  }
  CHECK(ones == ~uint64_t{0});
  CHECK(zeros == ~uint64_t{0});
}

TEST_CASE("halves of different plaintexts are indistinguishable by byte frequency") {
  // Chi-square two-sample test over the low byte of 10^5 party-1 halves.
  Prg rng(4);
  std::array<double, 256> hist_a{}, hist_b{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    auto [a0, a1] = share(scalar(7), rng);
    auto [b0, b1] = share(scalar(0xffffffffffff0000ULL), rng);
    hist_a[a1.data[0].value & 0xff] += 1;
    hist_b[b1.data[0].value & 0xff] += 1;
  }
  double chi2 = 0;
  for (int k = 0; k < 256; ++k) {
    const double total = hist_a[k] + hist_b[k];
    if (total > 0) chi2 += (hist_a[k] - hist_b[k]) * (hist_a[k] - hist_b[k]) / total;
  }
  // Critical value of chi^2 with 255 degrees of freedom at alpha = 0.01.
  CHECK(chi2 < 310.46);
}

TEST_CASE("linear_combine examples") {
  Prg rng(5);
  auto [x0, x1] = share(scalar(3), rng);
  auto [y0, y1] = share(scalar(5), rng);
  const std::array<RingElement, 2> c = {RingElement(2), RingElement(1)};
  const std::array<ArithmeticShare, 2> p0 = {x0, y0}, p1 = {x1, y1};
  CHECK(reconstruct(linear_combine(p0, c), linear_combine(p1, c))[0].value == 11);

  const std::array<RingElement, 2> ident = {RingElement(1), RingElement(0)};
  CHECK(linear_combine(p0, ident).data == x0.data);

  auto [z0, z1] = share(scalar(0), rng);
  const std::array<ArithmeticShare, 1> q0 = {z0}, q1 = {z1};
  const std::array<RingElement, 1> a = {RingElement(12345)};
  CHECK(reconstruct(linear_combine(q0, a), linear_combine(q1, a))[0].value == 0);

  const std::array<ArithmeticShare, 2> mixed = {x0, y1};
  CHECK_THROWS_AS(linear_combine(mixed, c), adapi::ProtocolError);
}

TEST_CASE("linear_combine sends nothing") {
  auto [m0, m1] = adapi::run_local([](Context& ctx) {
    ArithmeticShare x = my_half(ctx, scalar(9), 1);
    const std::array<ArithmeticShare, 2> s = {x, x};
    const std::array<RingElement, 2> c = {RingElement(3), RingElement(4)};
    linear_combine(s, c);
    return ctx.channel().meter().totals().sent_bytes + ctx.channel().meter().totals().received_bytes;
  });
  CHECK(m0 == 0);
  CHECK(m1 == 0);
}

TEST_CASE("a2b examples") {
  const RingTensor x = from_signed({0, static_cast<int64_t>(uint64_t{1} << 63), -1, 12345, -98765});
  auto [b0, b1] = adapi::run_local([&](Context& ctx) { return a2b(ctx, my_half(ctx, x, 2)); });
  const auto bits = reconstruct(b0, b1);
  CHECK(bits[0] == 0);
  CHECK(bits[1] == uint64_t{1} << 63);
  for (size_t i = 0; i < x.numel(); ++i) CHECK(bits[i] == x[i].value);
}

TEST_CASE("a2b exhaustive 16-bit sweep") {
  std::vector<int64_t> xs;
  for (int64_t v = -32768; v < 32768; ++v) xs.push_back(v);
  const RingTensor x = from_signed(xs);
  auto [b0, b1] = adapi::run_local([&](Context& ctx) { return a2b(ctx, my_half(ctx, x, 3)); });
  const auto bits = reconstruct(b0, b1);
  size_t mismatches = 0;
  for (size_t i = 0; i < xs.size(); ++i) mismatches += bits[i] != x[i].value;
  CHECK(mismatches == 0);
}

TEST_CASE("b2a examples") {
  for (auto [u, v] : {std::pair{0u, 0u}, {1u, 1u}, {1u, 0u}, {0u, 1u}}) {
    auto [r0, r1] = adapi::run_local([&](Context& ctx) {
      BinaryShare b{ctx.party(), Tensor<uint64_t>({1}, {ctx.party() == 0 ? u : v})};
      return b2a(ctx, b);
    });
    CHECK(reconstruct(r0, r1)[0].value == (u ^ v));
  }
}

TEST_CASE("b2a of a2b sign bit matches plaintext sign on the 16-bit sweep") {
  std::vector<int64_t> xs;
  for (int64_t v = -32768; v < 32768; ++v) xs.push_back(v);
  const RingTensor x = from_signed(xs);
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    BinaryShare b = a2b(ctx, my_half(ctx, x, 4));
    for (auto& w : b.bits.vec()) w >>= 63;
    return b2a(ctx, b);
  });
  const auto sign = reconstruct(r0, r1);
  size_t mismatches = 0;
  for (size_t i = 0; i < xs.size(); ++i) mismatches += sign[i].value != (xs[i] < 0 ? 1u : 0u);
  CHECK(mismatches == 0);
}

TEST_CASE("local truncation and public addition") {
  const adapi::ring::FixedPointCodec codec(16);
  RingTensor x({3}, {codec.encode(1.5), codec.encode(-2.25), codec.encode(100.0)});
  Prg rng(6);
  auto [s0, s1] = share(x, rng);
  RingTensor raw({3});
  for (size_t i = 0; i < 3; ++i) raw[i] = x[i] * codec.encode(2.0);
  auto [p0, p1] = share(raw, rng);
  const auto t = reconstruct(truncate(p0, 16), truncate(p1, 16));
  for (size_t i = 0; i < 3; ++i) CHECK(std::fabs(codec.decode(t[i]) - 2 * codec.decode(x[i])) <= std::ldexp(1.0, -16));
  const RingTensor c({3}, {RingElement(1), RingElement(2), RingElement(3)});
  const auto sum = reconstruct(add_public(s0, c), add_public(s1, c));
  for (size_t i = 0; i < 3; ++i) CHECK(sum[i] == x[i] + c[i]);
}

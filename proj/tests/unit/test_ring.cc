#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "adapi/prg.h"
#include "adapi/ring.h"

using adapi::ring::BigUint;
using adapi::ring::FixedPointCodec;
using adapi::ring::GroupElement;
using adapi::ring::RingElement;

TEST_CASE("encode examples") {
  const FixedPointCodec codec(16);
  CHECK(codec.encode(0.0).value == 0);
  CHECK(codec.encode(1.0).value == 65536);
  CHECK(codec.encode(-1.0).value == 0ULL - 65536ULL);
  CHECK(codec.encode(-1.0).value == 18446744073709486080ULL);
}

TEST_CASE("decode examples") {
  const FixedPointCodec codec(16);
  CHECK(codec.decode(RingElement(65536)) == 1.0);
  CHECK(codec.decode(RingElement(0)) == 0.0);
  CHECK(codec.decode(RingElement(18446744073709518848ULL)) == -0.5);
}

TEST_CASE("encode rejects out-of-range and non-finite values") {
  const FixedPointCodec codec(16);
  CHECK_THROWS_AS(codec.encode(std::ldexp(1.0, 47)), adapi::EncodingOverflow);
  CHECK_THROWS_AS(codec.encode(-std::ldexp(1.0, 47)), adapi::EncodingOverflow);
  CHECK_THROWS_AS(codec.encode(std::nan("")), adapi::EncodingOverflow);
  CHECK_NOTHROW(codec.encode(std::ldexp(1.0, 46)));
  CHECK_THROWS_AS(FixedPointCodec(62), adapi::ConfigError);
}

TEST_CASE("round trip within one quantum") {
  const FixedPointCodec codec(16);
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> dist(-1e6, 1e6);
  for (int i = 0; i < 10000; ++i) {
    const double x = dist(gen);
    CHECK(std::fabs(codec.decode(codec.encode(x)) - x) <= std::ldexp(1.0, -16));
  }
}

TEST_CASE("truncate examples") {
  const FixedPointCodec codec(16);
  const RingElement one = codec.encode(1.0);
  CHECK(adapi::ring::truncate(one * one, 16) == one);
  CHECK(adapi::ring::truncate(RingElement(0), 16).value == 0);
  const RingElement half = codec.encode(0.5);
  CHECK(adapi::ring::truncate(half * half, 16) == codec.encode(0.25));
  const RingElement neg = codec.encode(-0.5);
  CHECK(adapi::ring::truncate(neg * half, 16) == codec.encode(-0.25));
}

TEST_CASE("ring laws hold exactly") {
  adapi::Prg rng(11);
  for (int i = 0; i < 100000; ++i) {
    const RingElement a(rng.next_u64()), b(rng.next_u64()), c(rng.next_u64());
    REQUIRE((a + b) + c == a + (b + c));
    REQUIRE((a * b) * c == a * (b * c));
    REQUIRE(a + b == b + a);
    REQUIRE(a * b == b * a);
    REQUIRE(a * (b + c) == a * b + a * c);
    REQUIRE((a + (-a)).value == 0);
  }
}

TEST_CASE("fixed-point product within two quanta") {
  // Operands are fixed-point values, so only truncation error remains.
  const FixedPointCodec codec(16);
  adapi::Prg rng(12);
  for (int i = 0; i < 10000; ++i) {
    const double x = codec.decode(codec.encode((rng.uniform_real() * 2 - 1) * 1024.0));
    const double y = codec.decode(codec.encode((rng.uniform_real() * 2 - 1) * 1024.0));
    const double got = codec.decode(adapi::ring::truncate(codec.encode(x) * codec.encode(y), 16));
    CHECK(std::fabs(got - x * y) <= 2 * std::ldexp(1.0, -16));
  }
}

TEST_CASE("share truncation is within one LSB of plaintext truncation") {
  adapi::Prg rng(13);
  for (int i = 0; i < 10000; ++i) {
    const auto x = static_cast<int64_t>(rng.next_u64() >> 24) - (int64_t{1} << 39);
    const RingElement r(rng.next_u64());
    const RingElement s0 = r, s1 = RingElement(static_cast<uint64_t>(x)) - r;
    const RingElement t = adapi::ring::truncate_share(s0, 16, 0) + adapi::ring::truncate_share(s1, 16, 1);
    const int64_t want = x >> 16;
    const int64_t diff = t.as_signed() - want;
    // Wrap probability is about 2^-24 per sample at this magnitude.
    CHECK(std::llabs(diff) <= 1);
  }
}

TEST_CASE("group_pow examples") {
  const GroupElement g(2, 13);
  CHECK(adapi::ring::group_pow(g, 0).residue() == 1);
  CHECK(adapi::ring::group_pow(g, 4).residue() == 3);
  CHECK(adapi::ring::group_pow(g, 1).residue() == 2);
}

TEST_CASE("group_pow exponent law in the shipped groups") {
  adapi::Prg rng(14);
  for (const auto* grp : {&adapi::ring::OtGroup::small_test(), &adapi::ring::OtGroup::paper_width(),
                          &adapi::ring::OtGroup::standard()}) {
    const GroupElement g = adapi::ring::group_generator(*grp);
    for (int i = 0; i < 50; ++i) {
      const BigUint a = rng.next_u64(), b = rng.next_u64();
      CHECK(adapi::ring::group_pow(g, a + b) == adapi::ring::group_pow(g, a) * adapi::ring::group_pow(g, b));
    }
    // The generator has order q: g^q = 1.
    CHECK(adapi::ring::group_pow(g, grp->order).residue() == 1);
  }
}

TEST_CASE("production groups have subgroup order at least 2^40") {
  CHECK(boost::multiprecision::msb(adapi::ring::OtGroup::standard().order) >= 40);
  CHECK(adapi::ring::OtGroup::standard().element_bytes() == 32);
  CHECK(adapi::ring::OtGroup::paper_width().element_bytes() == 4);
  CHECK(adapi::ring::OtGroup::small_test().order == 1289);
}

TEST_CASE("group inverse and serialization") {
  const auto& grp = adapi::ring::OtGroup::standard();
  const GroupElement x = adapi::ring::group_pow(adapi::ring::group_generator(grp), BigUint(123456789));
  CHECK((x * x.inverse()).residue() == 1);
  const auto bytes = x.to_bytes(32);
  CHECK(GroupElement::from_bytes(bytes.data(), 32, grp.modulus) == x);
  CHECK_THROWS_AS(GroupElement(0, 13), adapi::ProtocolError);
}

TEST_CASE("prg is deterministic per seed and stream") {
  adapi::Prg a(5, 1), b(5, 1), c(5, 2);
  const uint64_t va = a.next_u64();
  CHECK(va == b.next_u64());
  CHECK(va != c.next_u64());
  for (int i = 0; i < 1000; ++i) CHECK(a.uniform(10) < 10);
}

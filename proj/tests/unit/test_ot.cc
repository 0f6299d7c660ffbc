#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "adapi/ot.h"
#include "adapi/parties.h"

using adapi::Prg;
using adapi::ring::OtGroup;
using adapi::ring::RingElement;
using namespace adapi::mpc;
using adapi::share::reconstruct;
using adapi::share::RingTensor;

namespace {

ArithmeticShare my_half(Context& ctx, const RingTensor& x, uint64_t seed) {
  Prg rng(seed, 55);
  auto [s0, s1] = adapi::share::share(x, rng);
  return ctx.party() == 0 ? s0 : s1;
}

uint32_t run_ot(const std::array<uint32_t, 4>& messages, uint8_t choice, const OtGroup& group) {
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    OtSession s = ot_setup(ctx, 0, group);
    return ot_1of4(ctx, s, messages, choice);
  });
  return r1;
}

// Flips one byte of the first ciphertext frame it forwards.
class CorruptingChannel final : public adapi::net::Channel {
 public:
  explicit CorruptingChannel(std::unique_ptr<adapi::net::Channel> inner)
      : Channel(inner->party()), inner_(std::move(inner)) {}
  void close() override { inner_->close(); }
  std::string backend() const override { return "corrupting"; }

 protected:
  void write_all(std::span<const uint8_t> bytes) override {
    std::vector<uint8_t> copy(bytes.begin(), bytes.end());
    const size_t tag_len = copy[4];
    const std::string tag(copy.begin() + 5, copy.begin() + 5 + static_cast<long>(tag_len));
    if (!done_ && tag.find("cipher") != std::string::npos) {
      for (size_t i = 5 + tag_len; i < copy.size(); ++i) copy[i] ^= 0x80;
      done_ = true;
    }
    inner_->send_raw(copy);
  }
  void read_exact(std::span<uint8_t> out) override { inner_->recv_raw(out); }

 private:
  std::unique_ptr<adapi::net::Channel> inner_;
  bool done_ = false;
};

}  // namespace

TEST_CASE("ot_1of4 examples") {
  const auto& g = OtGroup::paper_width();
  CHECK(run_ot({10, 20, 30, 40}, 2, g) == 30);
  CHECK(run_ot({10, 20, 30, 40}, 0, g) == 10);
  for (uint8_t c = 0; c < 4; ++c) CHECK(run_ot({99, 99, 99, 99}, c, g) == 99);
  CHECK(run_ot({0xdeadbeef, 1, 2, 0xffffffff}, 3, OtGroup::standard()) == 0xffffffff);
  CHECK(run_ot({5, 6, 7, 8}, 1, OtGroup::small_test()) == 6);
}

TEST_CASE("ot_transcript_bytes examples") {
  CHECK(ot_transcript_bytes(1) == OtTranscriptBytes{4, 64, 256, 4});
  CHECK(ot_transcript_bytes(0) == OtTranscriptBytes{4, 0, 0, 0});
  CHECK(ot_transcript_bytes(1024 * 3).choices == 196608);
}

TEST_CASE("metered ot_1of4 transcript equals the analytic byte counts") {
  for (const OtGroup* g : {&OtGroup::paper_width(), &OtGroup::standard()}) {
    auto [m0, m1] = adapi::run_local([&](Context& ctx) {
      OtSession s = ot_setup(ctx, 0, *g);
      ot_1of4(ctx, s, {1, 2, 3, 4}, 1);
      return ctx.channel().meter().snapshot();
    });
    const auto want = ot_transcript_bytes(1, g->element_bytes());
    CHECK(m0.per_tag.at("ot-setup").sent_payload == want.setup);
    CHECK(m1.per_tag.at("choices").sent_payload == want.choices);
    CHECK(m0.per_tag.at("cipher").sent_payload == want.cipher);
    CHECK(m1.per_tag.at("status").sent_payload == want.status);
    CHECK(m0.totals.sent_payload + m1.totals.sent_payload == want.per_session_total());
  }
}

TEST_CASE("corrupted ciphertexts are detected on both sides") {
  auto [a, b] = adapi::net::make_local_pair();
  CorruptingChannel bad(std::move(a));
  CHECK_THROWS_AS(adapi::run_parties(
                      bad, *b,
                      [](adapi::net::Channel& ch) {
                        Context ctx(ch, 1, 2);
                        OtSession s = ot_setup(ctx, 0, OtGroup::paper_width());
                        return ot_1of4(ctx, s, {1, 2, 3, 4}, 0);
                      },
                      [](adapi::net::Channel& ch) {
                        Context ctx(ch, 1, 2);
                        OtSession s = ot_setup(ctx, 0, OtGroup::paper_width());
                        return ot_1of4(ctx, s, {}, 2);
                      }),
                  adapi::ProtocolError);
}

TEST_CASE("drelu_ot is exact for |x| < 2^31") {
  std::vector<int64_t> xs = {0, 1, -1, 2, -2, (int64_t{1} << 31) - 1, -((int64_t{1} << 31) - 1)};
  for (int64_t v = -2000; v <= 2000; v += 7) xs.push_back(v);
  Prg rng(3);
  for (int i = 0; i < 300; ++i) xs.push_back(static_cast<int64_t>(rng.uniform(uint64_t{1} << 32)) - (int64_t{1} << 31) + 1);
  RingTensor x({xs.size()});
  for (size_t i = 0; i < xs.size(); ++i) x[i] = RingElement(static_cast<uint64_t>(xs[i]));
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    OtSession s = ot_setup(ctx, 0, OtGroup::paper_width());
    return drelu_ot(ctx, s, my_half(ctx, x, 4));
  });
  const auto d = reconstruct(r0, r1);
  size_t mismatches = 0;
  for (size_t i = 0; i < xs.size(); ++i) mismatches += d[i].value != (xs[i] > 0 ? 1u : 0u);
  CHECK(mismatches == 0);
}

TEST_CASE("OT-priced relu moves 324 bytes per element through the transfer steps") {
  const size_t n = 37;
  const adapi::ring::FixedPointCodec codec(16);
  RingTensor x({n});
  for (size_t i = 0; i < n; ++i) x[i] = codec.encode(static_cast<double>(i) - 18.5);
  auto [r0, r1] = adapi::run_local([&](Context& ctx) {
    OtSession s = ot_setup(ctx, 0, OtGroup::paper_width());
    auto y = secure_relu_ot(ctx, s, my_half(ctx, x, 5));
    return std::pair(y, ctx.channel().meter().snapshot());
  });
  const auto y = reconstruct(r0.first, r1.first);
  for (size_t i = 0; i < n; ++i) CHECK(y[i] == (x[i].as_signed() > 0 ? x[i] : RingElement(0)));
  const uint64_t ot_bytes = r0.second.matching("relu-ot").sent_payload + r1.second.matching("relu-ot").sent_payload;
  CHECK(ot_bytes == 324 * n);
}

TEST_CASE("OT-generated elementwise triples satisfy the Beaver relation") {
  auto [t0, t1] = adapi::run_local([&](Context& ctx) {
    return ot_elementwise_triple(ctx, {5}, OtGroup::paper_width());
  });
  const auto a = reconstruct(t0.a(), t1.a()), b = reconstruct(t0.b(), t1.b()), z = reconstruct(t0.z(), t1.z());
  for (size_t i = 0; i < 5; ++i) CHECK(z[i] == a[i] * b[i]);
}

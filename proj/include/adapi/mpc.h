#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "adapi/linalg.h"
#include "adapi/prg.h"
#include "adapi/ring.h"
#include "adapi/sharing.h"
#include "adapi/transport.h"

namespace adapi::mpc {

using share::ArithmeticShare;
using share::BinaryShare;
using share::RingTensor;

enum class OpKind { Elementwise, MatMul, Conv };

// The bilinear map a Beaver triple serves: x (.) y.
//  Elementwise: x, y, out share one shape.
//  MatMul:      x [m,k], y [k,n] -> [m,n].
//  Conv:        x [IC,H,W], y [OC,IC,K,K] -> [OC,FO,FO].
// `y_support` optionally marks the y positions that may be nonzero; the
// others are skipped in every product and never opened.
struct BilinearSpec {
  OpKind kind = OpKind::Elementwise;
  Shape x_shape;
  Shape y_shape;
  ConvGeometry conv;
  std::vector<uint8_t> y_support;

  static BilinearSpec elementwise(Shape shape);
  static BilinearSpec matmul(size_t m, size_t k, size_t n);
  static BilinearSpec convolution(const ConvGeometry& g);
  BilinearSpec with_support(std::vector<uint8_t> support) const;

  Shape out_shape() const;
  RingTensor apply(const RingTensor& x, const RingTensor& y) const;
  size_t opened_y_count() const;
  bool operator==(const BilinearSpec&) const = default;
};

// One party's half of (a, b, z = a (.) b). Single use: secure_mul marks it
// consumed and refuses a consumed or moved-from triple.
class BeaverTriple {
 public:
  BeaverTriple() = default;
  BeaverTriple(BilinearSpec spec, ArithmeticShare a, ArithmeticShare b, ArithmeticShare z);
  BeaverTriple(BeaverTriple&& o) noexcept;
  BeaverTriple& operator=(BeaverTriple&& o) noexcept;
  BeaverTriple(const BeaverTriple&) = delete;
  BeaverTriple& operator=(const BeaverTriple&) = delete;

  const BilinearSpec& spec() const { return spec_; }
  const ArithmeticShare& a() const { return a_; }
  const ArithmeticShare& b() const { return b_; }
  const ArithmeticShare& z() const { return z_; }
  bool usable() const { return valid_ && !consumed_; }
  void mark_consumed() { consumed_ = true; }

 private:
  BilinearSpec spec_;
  ArithmeticShare a_, b_, z_;
  bool valid_ = false;
  bool consumed_ = false;
};

// One party's half of `count` AND triples over `width`-bit words.
struct BooleanTriples {
  int party = 0;
  unsigned width = 64;
  std::vector<uint64_t> a, b, c;
};

// Trusted-dealer correlated randomness. Both parties construct a Dealer from
// the same seed and request material in the same order; each keeps its own
// half.
class Dealer {
 public:
  Dealer(uint64_t seed, int party);

  BeaverTriple beaver(const BilinearSpec& spec);
  BooleanTriples boolean(size_t count, unsigned width);

  int party() const { return party_; }

  // Both halves of a fresh triple.
  static std::pair<BeaverTriple, BeaverTriple> deal_pair(const BilinearSpec& spec, Prg& rng);
  // Both halves for caller-chosen plaintext a, b.
  static std::pair<BeaverTriple, BeaverTriple> deal_from(const BilinearSpec& spec, const RingTensor& a,
                                                         const RingTensor& b, Prg& rng);
  static std::pair<BooleanTriples, BooleanTriples> deal_boolean(size_t count, unsigned width, Prg& rng);

 private:
  Prg rng_;
  int party_;
};

// Per-party protocol state bound to one channel.
class Context {
 public:
  Context(net::Channel& channel, uint64_t dealer_seed, uint64_t party_seed,
          ring::FixedPointCodec codec = ring::FixedPointCodec(16));

  int party() const { return channel_->party(); }
  net::Channel& channel() { return *channel_; }
  Dealer& dealer() { return dealer_; }
  Prg& prg() { return prg_; }
  const ring::FixedPointCodec& codec() const { return codec_; }

  // Tags are prefixed by the innermost active scope.
  std::string tag(std::string_view name) const;

  class Scope {
   public:
    Scope(Context& ctx, std::string prefix);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Context& ctx_;
    std::string saved_;
  };

  // Party 0 sends then receives, party 1 receives then sends.
  std::vector<uint8_t> exchange(std::string_view tag, std::span<const uint8_t> mine);
  std::vector<uint64_t> exchange_words(std::string_view tag, std::span<const uint64_t> mine);

 private:
  net::Channel* channel_;
  Dealer dealer_;
  Prg prg_;
  ring::FixedPointCodec codec_;
  std::string prefix_;
};

// Beaver multiplication: open E = X - A and F = Y - B, then
// R_i = -i*E(.)F + X_i(.)F + E(.)Y_i + Z_i.
ArithmeticShare secure_mul(Context& ctx, const ArithmeticShare& x, const ArithmeticShare& y,
                           BeaverTriple& triple);
// secure_mul followed by local truncation by the codec's fractional bits.
ArithmeticShare secure_mul_fixed(Context& ctx, const ArithmeticShare& x, const ArithmeticShare& y,
                                 BeaverTriple& triple);

// Shared AND of `width`-bit words; each element costs ceil(width/8) bytes of
// E and of F per party.
std::vector<uint64_t> and_words(Context& ctx, std::string_view tag, std::span<const uint64_t> x,
                                std::span<const uint64_t> y, unsigned width);
std::vector<uint64_t> and_words(Context& ctx, std::string_view tag, std::span<const uint64_t> x,
                                std::span<const uint64_t> y, unsigned width, const BooleanTriples& triples);

// 1 iff signed(x) > 0, through A2B, the sign bit and a zero test.
ArithmeticShare drelu(Context& ctx, const ArithmeticShare& x);
// max(x, 0) = drelu(x) * x.
ArithmeticShare secure_relu(Context& ctx, const ArithmeticShare& x);

// Shared "x != 0" over binary shares: OR-reduction of all 64 bits.
std::vector<uint64_t> nonzero_bits(Context& ctx, std::span<const uint64_t> words);

std::pair<std::vector<BeaverTriple>, std::vector<BeaverTriple>> dealer_triples(size_t count,
                                                                               const BilinearSpec& spec,
                                                                               uint64_t seed);

}  // namespace adapi::mpc

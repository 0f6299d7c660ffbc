#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "adapi/errors.h"

namespace adapi::ring {

// An element of Z_{2^64}. Arithmetic wraps through unsigned overflow.
struct RingElement {
  uint64_t value = 0;

  constexpr RingElement() = default;
  constexpr explicit RingElement(uint64_t v) : value(v) {}

  constexpr RingElement operator+(RingElement o) const { return RingElement(value + o.value); }
  constexpr RingElement operator-(RingElement o) const { return RingElement(value - o.value); }
  constexpr RingElement operator*(RingElement o) const { return RingElement(value * o.value); }
  constexpr RingElement operator-() const { return RingElement(0 - value); }
  constexpr RingElement& operator+=(RingElement o) { value += o.value; return *this; }
  constexpr RingElement& operator-=(RingElement o) { value -= o.value; return *this; }
  constexpr RingElement& operator*=(RingElement o) { value *= o.value; return *this; }
  constexpr bool operator==(const RingElement&) const = default;

  constexpr int64_t as_signed() const { return static_cast<int64_t>(value); }
};

static_assert(sizeof(RingElement) == sizeof(uint64_t));

// Arithmetic right shift of the signed interpretation.
constexpr RingElement truncate(RingElement r, int shift) {
  return RingElement(static_cast<uint64_t>(r.as_signed() >> shift));
}

// Local truncation of one additive share. Party 0 shifts its half, party 1
// shifts the negation of its half; the reconstruction is off from
// truncate(x) by at most one LSB unless a share wraps, which happens with
// probability about |x| / 2^64.
constexpr RingElement truncate_share(RingElement share, int shift, int party) {
  if (party == 0) {
    return RingElement(share.value >> shift);
  }
  return RingElement(0 - ((0 - share.value) >> shift));
}

class FixedPointCodec {
 public:
  static constexpr int kTotalBits = 64;

  constexpr FixedPointCodec() = default;
  explicit FixedPointCodec(int frac_bits);

  int frac_bits() const { return frac_bits_; }
  double scale() const { return static_cast<double>(uint64_t{1} << frac_bits_); }
  // Largest magnitude accepted by encode; 2^(63 - frac_bits).
  double limit() const;

  // round(x * 2^frac_bits) as a two's complement residue.
  RingElement encode(double x) const;
  double decode(RingElement r) const;

  std::vector<RingElement> encode(const std::vector<double>& xs) const;
  std::vector<double> decode(const std::vector<RingElement>& rs) const;

  bool operator==(const FixedPointCodec&) const = default;

 private:
  int frac_bits_ = 16;
};

using BigUint = boost::multiprecision::cpp_int;

// Multiplicative group parameters for the OT flow: a safe prime m = 2q + 1 and
// a generator of the order-q subgroup of quadratic residues.
struct OtGroup {
  BigUint modulus;
  BigUint generator;
  BigUint order;
  std::string name;

  // Bytes used to serialize one residue on the wire.
  size_t element_bytes() const;

  // 256-bit safe prime, order-q subgroup generated by 4.
  static const OtGroup& standard();
  // Largest safe prime below 2^32. Residues fit one 32-bit word, which is the
  // operand width the transcript sizes of the OT flow are stated in.
  static const OtGroup& paper_width();
  // m = 2579 = 2 * 1289 + 1, for unit tests.
  static const OtGroup& small_test();
};

class GroupElement {
 public:
  GroupElement() = default;
  GroupElement(BigUint residue, BigUint modulus);

  const BigUint& residue() const { return residue_; }
  const BigUint& modulus() const { return modulus_; }

  GroupElement operator*(const GroupElement& o) const;
  GroupElement inverse() const;
  bool operator==(const GroupElement& o) const {
    return residue_ == o.residue_ && modulus_ == o.modulus_;
  }

  // Little-endian, fixed width.
  std::vector<uint8_t> to_bytes(size_t width) const;
  static GroupElement from_bytes(const uint8_t* data, size_t width, const BigUint& modulus);

 private:
  BigUint residue_ = 1;
  BigUint modulus_ = 2;
};

// Square-and-multiply modular exponentiation.
GroupElement group_pow(const GroupElement& base, const BigUint& exponent);

GroupElement group_generator(const OtGroup& group);

}  // namespace adapi::ring

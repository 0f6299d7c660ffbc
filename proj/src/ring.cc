#include "adapi/ring.h"

#include <cmath>

#include "adapi/errors.h"

namespace adapi::ring {

FixedPointCodec::FixedPointCodec(int frac_bits) : frac_bits_(frac_bits) {
  ADAPI_ENFORCE(frac_bits >= 0 && frac_bits < 62, ConfigError,
                "frac_bits must be in [0, 62), got " + std::to_string(frac_bits));
}

double FixedPointCodec::limit() const { return std::ldexp(1.0, 63 - frac_bits_); }

RingElement FixedPointCodec::encode(double x) const {
  if (!std::isfinite(x) || std::fabs(x) >= limit()) {
    throw EncodingOverflow("value " + std::to_string(x) + " exceeds fixed-point range 2^" +
                           std::to_string(63 - frac_bits_));
  }
  const double scaled = std::nearbyint(std::ldexp(x, frac_bits_));
  return RingElement(static_cast<uint64_t>(static_cast<int64_t>(scaled)));
}

double FixedPointCodec::decode(RingElement r) const {
  return std::ldexp(static_cast<double>(r.as_signed()), -frac_bits_);
}

std::vector<RingElement> FixedPointCodec::encode(const std::vector<double>& xs) const {
  std::vector<RingElement> out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back(encode(x));
  return out;
}

std::vector<double> FixedPointCodec::decode(const std::vector<RingElement>& rs) const {
  std::vector<double> out;
  out.reserve(rs.size());
  for (auto r : rs) out.push_back(decode(r));
  return out;
}

size_t OtGroup::element_bytes() const {
  const auto bits = boost::multiprecision::msb(modulus) + 1;
  return (bits + 7) / 8;
}

namespace {

OtGroup make_group(const char* hex_modulus, const char* name) {
  OtGroup g;
  g.modulus = BigUint(hex_modulus);
  g.order = (g.modulus - 1) / 2;
  g.generator = 4;
  g.name = name;
  return g;
}

}  // namespace

const OtGroup& OtGroup::standard() {
  static const OtGroup g =
      make_group("0xfffffffffffffeffffffffffffffffffffffffffffffffffffffffffffffbe8f", "safe-prime-256");
  return g;
}

const OtGroup& OtGroup::paper_width() {
  static const OtGroup g = make_group("0xffffff2f", "safe-prime-32");
  return g;
}

const OtGroup& OtGroup::small_test() {
  static const OtGroup g = make_group("0xa13", "safe-prime-2579");
  return g;
}

GroupElement::GroupElement(BigUint residue, BigUint modulus)
    : residue_(std::move(residue)), modulus_(std::move(modulus)) {
  ADAPI_ENFORCE(modulus_ > 1, ProtocolError, "group modulus must exceed 1");
  residue_ %= modulus_;
  ADAPI_ENFORCE(residue_ != 0, ProtocolError, "group element must be a unit");
}

GroupElement GroupElement::operator*(const GroupElement& o) const {
  ADAPI_ENFORCE(modulus_ == o.modulus_, ProtocolError, "group elements from different groups");
  return GroupElement((residue_ * o.residue_) % modulus_, modulus_);
}

GroupElement GroupElement::inverse() const {
  // Extended Euclid; modulus is prime so every nonzero residue is invertible.
  BigUint r0 = modulus_, r1 = residue_;
  boost::multiprecision::cpp_int t0 = 0, t1 = 1;
  while (r1 != 0) {
    BigUint q = r0 / r1;
    BigUint r2 = r0 - q * r1;
    r0 = r1;
    r1 = r2;
    boost::multiprecision::cpp_int t2 = t0 - boost::multiprecision::cpp_int(q) * t1;
    t0 = t1;
    t1 = t2;
  }
  ADAPI_ENFORCE(r0 == 1, ProtocolError, "group element is not invertible");
  if (t0 < 0) t0 += modulus_;
  return GroupElement(BigUint(t0), modulus_);
}

std::vector<uint8_t> GroupElement::to_bytes(size_t width) const {
  std::vector<uint8_t> out(width, 0);
  BigUint v = residue_;
  for (size_t i = 0; i < width && v != 0; ++i) {
    out[i] = static_cast<uint8_t>(v & 0xff);
    v >>= 8;
  }
  ADAPI_ENFORCE(v == 0, ProtocolError, "group element does not fit serialization width");
  return out;
}

GroupElement GroupElement::from_bytes(const uint8_t* data, size_t width, const BigUint& modulus) {
  BigUint v = 0;
  for (size_t i = width; i-- > 0;) {
    v <<= 8;
    v |= data[i];
  }
  ADAPI_ENFORCE(v != 0 && v < modulus, ProtocolError, "received residue outside the group");
  return GroupElement(std::move(v), modulus);
}

GroupElement group_pow(const GroupElement& base, const BigUint& exponent) {
  const BigUint& m = base.modulus();
  if (boost::multiprecision::msb(m) < 64 && boost::multiprecision::msb(exponent | 1) < 64) {
    // Word-sized moduli take a 128-bit product path; same square-and-multiply.
    const uint64_t mw = static_cast<uint64_t>(m);
    uint64_t e = static_cast<uint64_t>(exponent);
    unsigned __int128 b = static_cast<uint64_t>(base.residue());
    unsigned __int128 result = 1;
    while (e != 0) {
      if (e & 1u) result = (result * b) % mw;
      b = (b * b) % mw;
      e >>= 1;
    }
    return GroupElement(BigUint(static_cast<uint64_t>(result)), m);
  }
  BigUint result = 1;
  BigUint b = base.residue();
  BigUint e = exponent;
  while (e != 0) {
    if (bit_test(e, 0)) result = (result * b) % m;
    b = (b * b) % m;
    e >>= 1;
  }
  return GroupElement(std::move(result), m);
}

GroupElement group_generator(const OtGroup& group) {
  return GroupElement(group.generator, group.modulus);
}

}  // namespace adapi::ring

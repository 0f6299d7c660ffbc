#pragma once

#include <span>
#include <utility>

#include "adapi/prg.h"
#include "adapi/ring.h"
#include "adapi/tensor.h"

namespace adapi::mpc {
class Context;
}

namespace adapi::share {

using ring::RingElement;
using RingTensor = Tensor<RingElement>;

// One party's additive half of a ring tensor.
struct ArithmeticShare {
  int party = 0;
  RingTensor data;

  const Shape& shape() const { return data.shape(); }
  size_t numel() const { return data.numel(); }
};

// One party's XOR half of a tensor of 64-bit words.
struct BinaryShare {
  int party = 0;
  Tensor<uint64_t> bits;

  const Shape& shape() const { return bits.shape(); }
  size_t numel() const { return bits.numel(); }
};

// (r, x - r) with r drawn from `rng`.
std::pair<ArithmeticShare, ArithmeticShare> share(const RingTensor& x, Prg& rng);
// (r, x - r) with a caller-chosen r.
std::pair<ArithmeticShare, ArithmeticShare> share_with_mask(const RingTensor& x, const RingTensor& r);

RingTensor reconstruct(const ArithmeticShare& a, const ArithmeticShare& b);
Tensor<uint64_t> reconstruct(const BinaryShare& a, const BinaryShare& b);

// sum_i coeffs[i] * shares[i], computed locally.
ArithmeticShare linear_combine(std::span<const ArithmeticShare> shares,
                               std::span<const RingElement> coeffs);

ArithmeticShare add(const ArithmeticShare& x, const ArithmeticShare& y);
ArithmeticShare sub(const ArithmeticShare& x, const ArithmeticShare& y);
ArithmeticShare scale(const ArithmeticShare& x, RingElement c);
// Adds a public tensor; only party 0 folds it into its half.
ArithmeticShare add_public(const ArithmeticShare& x, const RingTensor& c);
// Local SecureML-style truncation of every element.
ArithmeticShare truncate(const ArithmeticShare& x, int shift);

// Both parties' inputs: a party's own half as a sharing where the peer holds 0.
ArithmeticShare as_private_input(int owner, int party, const RingTensor& value);

// Arithmetic to binary conversion with a ripple-carry adder over shared AND
// gates. Each party passes its own half.
BinaryShare a2b(mpc::Context& ctx, const ArithmeticShare& x);
// Single-bit binary to arithmetic conversion, b0 + b1 - 2*b0*b1.
ArithmeticShare b2a(mpc::Context& ctx, const BinaryShare& b);

}  // namespace adapi::share

#include "adapi/sharing.h"

#include "adapi/mpc.h"

namespace adapi::share {

namespace {

void require_pair(const ArithmeticShare& a, const ArithmeticShare& b) {
  ADAPI_ENFORCE(a.party != b.party, ProtocolError, "reconstruct needs halves from both parties");
  if (a.shape() != b.shape()) {
    throw ProtocolError("share shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_compatible(const ArithmeticShare& a, const ArithmeticShare& b) {
  ADAPI_ENFORCE(a.party == b.party, ProtocolError, "cannot combine halves of different parties");
  if (a.shape() != b.shape()) {
    throw ProtocolError("share shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

std::pair<ArithmeticShare, ArithmeticShare> share(const RingTensor& x, Prg& rng) {
  RingTensor r(x.shape());
  for (auto& v : r.vec()) v = RingElement(rng.next_u64());
  return share_with_mask(x, r);
}

std::pair<ArithmeticShare, ArithmeticShare> share_with_mask(const RingTensor& x, const RingTensor& r) {
  require_same_shape(x.shape(), r.shape(), "share mask");
  RingTensor other(x.shape());
  for (size_t i = 0; i < x.numel(); ++i) other[i] = x[i] - r[i];
  return {ArithmeticShare{0, r}, ArithmeticShare{1, std::move(other)}};
}

RingTensor reconstruct(const ArithmeticShare& a, const ArithmeticShare& b) {
  require_pair(a, b);
  RingTensor out(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a.data[i] + b.data[i];
  return out;
}

Tensor<uint64_t> reconstruct(const BinaryShare& a, const BinaryShare& b) {
  ADAPI_ENFORCE(a.party != b.party, ProtocolError, "reconstruct needs halves from both parties");
  if (a.shape() != b.shape()) {
    throw ProtocolError("share shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<uint64_t> out(a.shape());
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a.bits[i] ^ b.bits[i];
  return out;
}

ArithmeticShare linear_combine(std::span<const ArithmeticShare> shares, std::span<const RingElement> coeffs) {
  ADAPI_ENFORCE(!shares.empty(), ProtocolError, "linear_combine of no shares");
  ADAPI_ENFORCE(shares.size() == coeffs.size(), ProtocolError, "one coefficient per share required");
  ArithmeticShare out{shares[0].party, RingTensor(shares[0].shape())};
  for (size_t s = 0; s < shares.size(); ++s) {
    require_compatible(out, shares[s]);
    const RingElement c = coeffs[s];
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] += c * shares[s].data[i];
  }
  return out;
}

ArithmeticShare add(const ArithmeticShare& x, const ArithmeticShare& y) {
  require_compatible(x, y);
  ArithmeticShare out = x;
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] += y.data[i];
  return out;
}

ArithmeticShare sub(const ArithmeticShare& x, const ArithmeticShare& y) {
  require_compatible(x, y);
  ArithmeticShare out = x;
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= y.data[i];
  return out;
}

ArithmeticShare scale(const ArithmeticShare& x, RingElement c) {
  ArithmeticShare out = x;
  for (auto& v : out.data.vec()) v *= c;
  return out;
}

ArithmeticShare add_public(const ArithmeticShare& x, const RingTensor& c) {
  require_same_shape(x.shape(), c.shape(), "add_public");
  ArithmeticShare out = x;
  if (x.party == 0) {
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] += c[i];
  }
  return out;
}

ArithmeticShare truncate(const ArithmeticShare& x, int shift) {
  ArithmeticShare out = x;
  for (auto& v : out.data.vec()) v = ring::truncate_share(v, shift, x.party);
  return out;
}

ArithmeticShare as_private_input(int owner, int party, const RingTensor& value) {
  if (owner == party) return ArithmeticShare{party, value};
  return ArithmeticShare{party, RingTensor(value.shape())};
}

BinaryShare a2b(mpc::Context& ctx, const ArithmeticShare& x) {
  ADAPI_ENFORCE(x.party == ctx.party(), ProtocolError, "share does not belong to this party");
  const int party = ctx.party();
  const size_t n = x.numel();
  mpc::Context::Scope scope(ctx, "a2b:");

  // Party 0 contributes its half as the first addend, party 1 as the second.
  // XOR-sharing each addend is free: the owner holds it, the peer holds 0.
  std::vector<uint64_t> own(n), lhs(n, 0), rhs(n, 0);
  for (size_t i = 0; i < n; ++i) own[i] = x.data[i].value;
  if (party == 0) lhs = own; else rhs = own;

  const std::vector<uint64_t>& propagate = own;
  const std::vector<uint64_t> generate = mpc::and_words(ctx, "generate", lhs, rhs, 64);

  std::vector<uint64_t> carries(n, 0);  // bit i holds carry into position i
  std::vector<uint64_t> carry(n), pbit(n), tmp;
  for (size_t e = 0; e < n; ++e) {
    carry[e] = generate[e] & 1u;
    carries[e] |= carry[e] << 1;
  }
  for (int bit = 1; bit < 63; ++bit) {
    for (size_t e = 0; e < n; ++e) pbit[e] = (propagate[e] >> bit) & 1u;
    tmp = mpc::and_words(ctx, "carry" + std::to_string(bit), pbit, carry, 1);
    for (size_t e = 0; e < n; ++e) {
      carry[e] = ((generate[e] >> bit) & 1u) ^ tmp[e];
      carries[e] |= carry[e] << (bit + 1);
    }
  }

  BinaryShare out{party, Tensor<uint64_t>(x.shape())};
  for (size_t e = 0; e < n; ++e) out.bits[e] = propagate[e] ^ carries[e];
  return out;
}

ArithmeticShare b2a(mpc::Context& ctx, const BinaryShare& b) {
  ADAPI_ENFORCE(b.party == ctx.party(), ProtocolError, "share does not belong to this party");
  const int party = ctx.party();
  mpc::Context::Scope scope(ctx, "b2a:");
  RingTensor own(b.shape());
  for (size_t i = 0; i < b.numel(); ++i) own[i] = RingElement(b.bits[i] & 1u);
  const ArithmeticShare first = as_private_input(0, party, own);
  const ArithmeticShare second = as_private_input(1, party, own);
  mpc::BeaverTriple triple = ctx.dealer().beaver(mpc::BilinearSpec::elementwise(b.shape()));
  const ArithmeticShare product = mpc::secure_mul(ctx, first, second, triple);
  ArithmeticShare out{party, own};
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= RingElement(2) * product.data[i];
  return out;
}

}  // namespace adapi::share

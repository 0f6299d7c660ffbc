#include "adapi/ot.h"

#include <algorithm>
#include <cstring>

#include <openssl/sha.h>

namespace adapi::mpc {

using ring::BigUint;
using ring::GroupElement;
using ring::RingElement;

namespace {

constexpr uint32_t kStatusOk = 0;
constexpr uint32_t kStatusDecodeFailed = 1;

BigUint random_exponent(Prg& rng, const ring::OtGroup& group) {
  if (boost::multiprecision::msb(group.order) < 63) {
    const auto q = static_cast<uint64_t>(group.order);
    return BigUint(rng.uniform(q - 1) + 1);
  }
  std::vector<uint8_t> bytes(group.element_bytes() + 8);
  rng.fill(bytes);
  BigUint v = 0;
  for (uint8_t b : bytes) {
    v <<= 8;
    v |= b;
  }
  return v % (group.order - 1) + 1;
}

// Key material for one (instance, candidate) pair; depends on the session
// mask, the receiver's element and the shared Diffie-Hellman point.
void derive_key(const OtSession& s, const std::vector<uint8_t>& r_bytes, uint64_t instance, unsigned candidate,
                const GroupElement& point, size_t width, uint8_t* out) {
  const size_t gb = s.group->element_bytes();
  std::vector<uint8_t> buf;
  buf.reserve(16 + 3 * gb);
  static constexpr char kLabel[] = "adapi-ot-key";
  buf.insert(buf.end(), kLabel, kLabel + sizeof(kLabel) - 1);
  const auto s_bytes = s.mask.to_bytes(gb);
  buf.insert(buf.end(), s_bytes.begin(), s_bytes.end());
  buf.insert(buf.end(), r_bytes.begin(), r_bytes.end());
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<uint8_t>(instance >> (8 * i)));
  buf.push_back(static_cast<uint8_t>(candidate));
  const auto p_bytes = point.to_bytes(gb);
  buf.insert(buf.end(), p_bytes.begin(), p_bytes.end());
  uint8_t digest[SHA256_DIGEST_LENGTH];
  SHA256(buf.data(), buf.size(), digest);
  std::memcpy(out, digest, width);
}

// Generic batched 1-of-N transfer of `payload_bits`-bit messages, each sent as
// a `cipher_bytes` ciphertext whose bits above the payload must decode to 0.
// One status word travels back per `status_group` instances.
std::vector<uint64_t> ot_batch(Context& ctx, OtSession& s, unsigned candidates, unsigned payload_bits,
                               size_t cipher_bytes, std::span<const uint64_t> messages,
                               std::span<const uint8_t> choices, size_t instances, size_t status_group) {
  ADAPI_ENFORCE(s.group != nullptr, ProtocolError, "OT session not established");
  ADAPI_ENFORCE(cipher_bytes <= SHA256_DIGEST_LENGTH && payload_bits <= 64 && payload_bits < 8 * cipher_bytes,
                ProtocolError, "unsupported OT ciphertext layout");
  ADAPI_ENFORCE(status_group > 0 && instances % status_group == 0, ProtocolError,
                "OT instances must fill whole status groups");
  const bool sender = s.is_sender(ctx.party());
  const size_t gb = s.group->element_bytes();
  const uint64_t base_instance = s.instances;
  s.instances += instances;
  const GroupElement g = group_generator(*s.group);
  const size_t groups = instances / status_group;

  auto encode_payload = [&](uint64_t v, uint8_t* out) {
    for (size_t i = 0; i < cipher_bytes; ++i) out[i] ^= i < 8 ? static_cast<uint8_t>(v >> (8 * i)) : 0;
  };

  if (sender) {
    ADAPI_ENFORCE(messages.size() == instances * candidates, ProtocolError, "sender message count mismatch");
    const auto r_list = ctx.channel().recv(ctx.tag("choices"));
    ADAPI_ENFORCE(r_list.size() == instances * gb, ProtocolError, "receiver sent a malformed choice list");
    std::vector<GroupElement> unmask(candidates);  // S^-j
    const GroupElement s_inv = s.mask.inverse();
    unmask[0] = GroupElement(1, s.group->modulus);
    for (unsigned j = 1; j < candidates; ++j) unmask[j] = unmask[j - 1] * s_inv;
    std::vector<uint8_t> cipher(instances * candidates * cipher_bytes, 0);
    std::vector<uint8_t> r_bytes(gb);
    for (size_t inst = 0; inst < instances; ++inst) {
      std::copy_n(r_list.data() + inst * gb, gb, r_bytes.begin());
      const GroupElement r = GroupElement::from_bytes(r_bytes.data(), gb, s.group->modulus);
      for (unsigned j = 0; j < candidates; ++j) {
        const GroupElement point = group_pow(r * unmask[j], s.secret);
        uint8_t* ct = cipher.data() + (inst * candidates + j) * cipher_bytes;
        derive_key(s, r_bytes, base_instance + inst, j, point, cipher_bytes, ct);
        const uint64_t m = messages[inst * candidates + j];
        ADAPI_ENFORCE(payload_bits == 64 || (m >> payload_bits) == 0, ProtocolError,
                      "OT message exceeds payload width");
        encode_payload(m, ct);
      }
    }
    ctx.channel().send(ctx.tag("cipher"), cipher);
    const auto status = ctx.channel().recv(ctx.tag("status"));
    ADAPI_ENFORCE(status.size() == groups * 4, ProtocolError, "malformed OT status list");
    for (size_t i = 0; i < status.size(); ++i) {
      ADAPI_ENFORCE(status[i] == 0, ProtocolError, "receiver reported an OT decode failure");
    }
    return {};
  }

  ADAPI_ENFORCE(choices.size() == instances, ProtocolError, "receiver choice count mismatch");
  std::vector<GroupElement> s_pow(candidates);  // S^c
  s_pow[0] = GroupElement(1, s.group->modulus);
  for (unsigned j = 1; j < candidates; ++j) s_pow[j] = s_pow[j - 1] * s.mask;
  std::vector<BigUint> secrets(instances);
  std::vector<uint8_t> r_list;
  r_list.reserve(instances * gb);
  for (size_t inst = 0; inst < instances; ++inst) {
    ADAPI_ENFORCE(choices[inst] < candidates, ProtocolError, "OT choice out of range");
    secrets[inst] = random_exponent(ctx.prg(), *s.group);
    const GroupElement r = s_pow[choices[inst]] * group_pow(g, secrets[inst]);
    const auto bytes = r.to_bytes(gb);
    r_list.insert(r_list.end(), bytes.begin(), bytes.end());
  }
  ctx.channel().send(ctx.tag("choices"), r_list);
  const auto cipher = ctx.channel().recv(ctx.tag("cipher"));
  ADAPI_ENFORCE(cipher.size() == instances * candidates * cipher_bytes, ProtocolError,
                "sender sent a malformed ciphertext list");

  std::vector<uint64_t> out(instances);
  std::vector<uint32_t> group_status(groups, kStatusOk);
  std::vector<uint8_t> key(cipher_bytes), r_bytes(gb);
  for (size_t inst = 0; inst < instances; ++inst) {
    std::copy_n(r_list.data() + inst * gb, gb, r_bytes.begin());
    const GroupElement point = group_pow(s.mask, secrets[inst]);
    derive_key(s, r_bytes, base_instance + inst, choices[inst], point, cipher_bytes, key.data());
    const uint8_t* ct = cipher.data() + (inst * candidates + choices[inst]) * cipher_bytes;
    std::vector<uint8_t> plain(cipher_bytes);
    for (size_t i = 0; i < cipher_bytes; ++i) plain[i] = ct[i] ^ key[i];
    uint64_t v = 0;
    for (size_t i = 0; i < std::min<size_t>(8, cipher_bytes); ++i) v |= uint64_t{plain[i]} << (8 * i);
    bool check_ok = payload_bits == 64 || (v >> payload_bits) == 0;
    for (size_t i = 8; i < cipher_bytes; ++i) check_ok = check_ok && plain[i] == 0;
    if (!check_ok) group_status[inst / status_group] = kStatusDecodeFailed;
    out[inst] = payload_bits == 64 ? v : v & ((uint64_t{1} << payload_bits) - 1);
  }
  std::vector<uint8_t> status_bytes;
  status_bytes.reserve(groups * 4);
  bool failed = false;
  for (uint32_t st : group_status) {
    failed = failed || st != kStatusOk;
    for (int i = 0; i < 4; ++i) status_bytes.push_back(static_cast<uint8_t>(st >> (8 * i)));
  }
  ctx.channel().send(ctx.tag("status"), status_bytes);
  ADAPI_ENFORCE(!failed, ProtocolError, "OT ciphertext failed its check bits");
  return out;
}

}  // namespace

OtTranscriptBytes ot_transcript_bytes(uint64_t elements, size_t group_bytes) {
  const uint64_t chunks = OtSession::kChunks;
  return OtTranscriptBytes{group_bytes, chunks * group_bytes * elements,
                           chunks * OtSession::kIndexCount * 4 * elements, 4 * elements};
}

OtSession ot_setup(Context& ctx, int sender, const ring::OtGroup& group) {
  OtSession s;
  s.group = &group;
  s.sender = sender;
  const size_t gb = group.element_bytes();
  const std::string tag = ctx.tag("ot-setup");
  if (ctx.party() == sender) {
    s.secret = random_exponent(ctx.prg(), group);
    s.mask = group_pow(group_generator(group), s.secret);
    ctx.channel().send(tag, s.mask.to_bytes(gb));
  } else {
    const auto bytes = ctx.channel().recv(tag);
    ADAPI_ENFORCE(bytes.size() == gb, ProtocolError, "malformed OT setup message");
    s.mask = GroupElement::from_bytes(bytes.data(), gb, group.modulus);
  }
  return s;
}

std::vector<uint8_t> ot_transfer(Context& ctx, OtSession& session, std::span<const std::array<uint8_t, 4>> messages,
                                 std::span<const uint8_t> choices, size_t instances) {
  std::vector<uint64_t> flat;
  if (session.is_sender(ctx.party())) {
    flat.reserve(messages.size() * 4);
    for (const auto& m : messages) flat.insert(flat.end(), m.begin(), m.end());
  }
  const auto got = ot_batch(ctx, session, OtSession::kIndexCount, OtSession::kChunkBits, 4, flat, choices,
                            instances, OtSession::kChunks);
  return std::vector<uint8_t>(got.begin(), got.end());
}

uint32_t ot_1of4(Context& ctx, OtSession& session, const std::array<uint32_t, 4>& messages, uint8_t choice) {
  constexpr int kChunks = OtSession::kChunks;
  std::vector<std::array<uint8_t, 4>> parts;
  std::vector<uint8_t> choices;
  if (session.is_sender(ctx.party())) {
    parts.resize(kChunks);
    for (int k = 0; k < kChunks; ++k) {
      for (int j = 0; j < 4; ++j) parts[k][j] = static_cast<uint8_t>((messages[j] >> (2 * k)) & 3u);
    }
  } else {
    choices.assign(kChunks, choice);
  }
  const auto got = ot_transfer(ctx, session, parts, choices, kChunks);
  uint32_t value = 0;
  for (int k = 0; k < static_cast<int>(got.size()); ++k) value |= uint32_t{got[k]} << (2 * k);
  return value;
}

ArithmeticShare drelu_ot(Context& ctx, OtSession& session, const ArithmeticShare& x) {
  constexpr int kChunks = OtSession::kChunks;
  const int party = ctx.party();
  const bool sender = session.is_sender(party);
  const size_t n = x.numel();

  // Sender holds a = x_s - 1, receiver b = x_r (low 32 bits). For |x| < 2^31,
  // x > 0 iff msb(a + b mod 2^32) == 0. The carry into bit 31 is
  // [2^31 - 1 - (a mod 2^31) < (b mod 2^31)], a millionaires comparison.
  std::vector<uint32_t> top(n), operand(n);
  for (size_t i = 0; i < n; ++i) {
    const uint32_t low = static_cast<uint32_t>(x.data[i].value) - (sender ? 1u : 0u);
    top[i] = low >> 31;
    operand[i] = sender ? 0x7fffffffu - (low & 0x7fffffffu) : (low & 0x7fffffffu);
  }

  // Leaves: chunk k (k = 0 most significant) yields XOR shares of
  // lt = [alpha_k < beta_k] and eq = [alpha_k == beta_k].
  std::vector<uint64_t> lt(n * kChunks), eq(n * kChunks);
  {
    Context::Scope scope(ctx, "relu-ot:");
    std::vector<std::array<uint8_t, 4>> messages;
    std::vector<uint8_t> choices;
    if (sender) {
      messages.resize(n * kChunks);
      for (size_t i = 0; i < n; ++i) {
        for (int k = 0; k < kChunks; ++k) {
          const unsigned alpha = (operand[i] >> (2 * (kChunks - 1 - k))) & 3u;
          const uint64_t mask_bits = ctx.prg().next_u64();
          const uint8_t r_lt = mask_bits & 1u, r_eq = (mask_bits >> 1) & 1u;
          lt[i * kChunks + k] = r_lt;
          eq[i * kChunks + k] = r_eq;
          for (unsigned c = 0; c < 4; ++c) {
            const uint8_t l = (alpha < c ? 1 : 0) ^ r_lt, e = (alpha == c ? 1 : 0) ^ r_eq;
            messages[i * kChunks + k][c] = static_cast<uint8_t>(l | (e << 1));
          }
        }
      }
    } else {
      choices.resize(n * kChunks);
      for (size_t i = 0; i < n; ++i) {
        for (int k = 0; k < kChunks; ++k) choices[i * kChunks + k] = (operand[i] >> (2 * (kChunks - 1 - k))) & 3u;
      }
    }
    const auto got = ot_transfer(ctx, session, messages, choices, n * kChunks);
    if (!sender) {
      for (size_t t = 0; t < got.size(); ++t) {
        lt[t] = got[t] & 1u;
        eq[t] = (got[t] >> 1) & 1u;
      }
    }
  }

  // Merge adjacent (hi, lo) pairs: lt = lt_hi ^ (eq_hi & lt_lo), eq = eq_hi & eq_lo.
  // Both ANDs share eq_hi, so each merge is one 2-bit AND.
  std::vector<uint64_t> carry(n);
  {
    Context::Scope scope(ctx, "relu-combine:");
    size_t nodes = kChunks;
    while (nodes > 1) {
      const size_t half = nodes / 2;
      const bool last = half == 1;
      const unsigned width = last ? 1 : static_cast<unsigned>(2 * half);
      std::vector<uint64_t> lhs(n, 0), rhs(n, 0);
      for (size_t i = 0; i < n; ++i) {
        for (size_t p = 0; p < half; ++p) {
          const size_t hi = i * kChunks + 2 * p, lo = hi + 1;
          if (last) {
            lhs[i] = eq[hi];
            rhs[i] = lt[lo];
          } else {
            lhs[i] |= (eq[hi] | (eq[hi] << 1)) << (2 * p);
            rhs[i] |= (lt[lo] | (eq[lo] << 1)) << (2 * p);
          }
        }
      }
      const auto prod = and_words(ctx, "merge" + std::to_string(half), lhs, rhs, width);
      for (size_t i = 0; i < n; ++i) {
        for (size_t p = 0; p < half; ++p) {
          const size_t hi = i * kChunks + 2 * p;
          const size_t dst = i * kChunks + p;
          const uint64_t t_lt = last ? prod[i] & 1u : (prod[i] >> (2 * p)) & 1u;
          const uint64_t t_eq = last ? 0 : (prod[i] >> (2 * p + 1)) & 1u;
          // Reads of slot hi happen before the write to dst <= hi.
          const uint64_t new_lt = lt[hi] ^ t_lt;
          lt[dst] = new_lt;
          eq[dst] = t_eq;
        }
      }
      nodes = half;
    }
    for (size_t i = 0; i < n; ++i) carry[i] = lt[i * kChunks];
  }

  // msb(a + b) = a31 ^ b31 ^ carry; sender flips its half to get NOT msb.
  std::vector<uint64_t> positive(n);
  for (size_t i = 0; i < n; ++i) positive[i] = (top[i] ^ carry[i] ^ (party == 0 ? 1u : 0u)) & 1u;
  Context::Scope scope(ctx, "relu-b2a:");
  return share::b2a(ctx, BinaryShare{party, Tensor<uint64_t>(x.shape(), positive)});
}

ArithmeticShare secure_relu_ot(Context& ctx, OtSession& session, const ArithmeticShare& x) {
  const ArithmeticShare d = drelu_ot(ctx, session, x);
  Context::Scope scope(ctx, "relu-mul:");
  BeaverTriple triple = ctx.dealer().beaver(BilinearSpec::elementwise(x.shape()));
  return secure_mul(ctx, d, x, triple);
}

BeaverTriple ot_elementwise_triple(Context& ctx, const Shape& shape, const ring::OtGroup& group) {
  const int party = ctx.party();
  const size_t n = numel(shape);
  Context::Scope scope(ctx, "ot-triple:");
  RingTensor a(shape), b(shape);
  for (size_t i = 0; i < n; ++i) {
    a[i] = RingElement(ctx.prg().next_u64());
    b[i] = RingElement(ctx.prg().next_u64());
  }
  // z_i = a_i b_i + <a_0 b_1> + <a_1 b_0>; each cross term is one 64-instance
  // batch of 1-of-2 transfers of 64-bit correlated messages.
  RingTensor z(shape);
  for (size_t i = 0; i < n; ++i) z[i] = a[i] * b[i];
  for (int sender = 0; sender < 2; ++sender) {
    OtSession session = ot_setup(ctx, sender, group);
    std::vector<uint64_t> messages;
    std::vector<uint8_t> choices;
    if (party == sender) {
      messages.reserve(n * 128);
      for (size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 64; ++k) {
          const uint64_t r = ctx.prg().next_u64();
          messages.push_back(r);
          messages.push_back(r + (a[i].value << k));
          z[i] -= RingElement(r);
        }
      }
    } else {
      choices.reserve(n * 64);
      for (size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 64; ++k) choices.push_back(static_cast<uint8_t>((b[i].value >> k) & 1u));
      }
    }
    const auto got = ot_batch(ctx, session, 2, 64, 12, messages, choices, n * 64, 64);
    if (party != sender) {
      for (size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 64; ++k) z[i] += RingElement(got[i * 64 + k]);
      }
    }
  }
  return BeaverTriple(BilinearSpec::elementwise(shape), ArithmeticShare{party, std::move(a)},
                      ArithmeticShare{party, std::move(b)}, ArithmeticShare{party, std::move(z)});
}

}  // namespace adapi::mpc

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "adapi/mpc.h"
#include "adapi/ring.h"

namespace adapi::mpc {

// Chou-Orlandi style 1-of-4 OT. The sender publishes S = g^secret once per
// session; every instance then costs one group element up (R = S^c * g^b)
// and four 32-bit ciphertexts down. A ciphertext carries a 2-bit payload in
// its low bits and 30 zero check bits, so a wrong key is detected on decode.
struct OtSession {
  static constexpr int kChunks = 16;
  static constexpr int kChunkBits = 2;
  static constexpr int kIndexCount = 4;

  const ring::OtGroup* group = nullptr;
  int sender = 0;              // party id acting as OT sender
  ring::BigUint secret;        // only meaningful at the sender
  ring::GroupElement mask;     // S, known to both
  uint64_t instances = 0;      // running counter, bound into every key

  bool is_sender(int party) const { return party == sender; }
};

struct OtTranscriptBytes {
  uint64_t setup = 0;    // S, once per session
  uint64_t choices = 0;  // R list, receiver to sender
  uint64_t cipher = 0;   // four encryptions per instance, sender to receiver
  uint64_t status = 0;   // decode status word per element, receiver to sender

  uint64_t per_session_total() const { return setup + choices + cipher + status; }
  bool operator==(const OtTranscriptBytes&) const = default;
};

// Payload bytes of `elements` 16-chunk transfers, for a group whose residues
// take `group_bytes` on the wire.
OtTranscriptBytes ot_transcript_bytes(uint64_t elements, size_t group_bytes = 4);

// Step 1: the sender draws its secret and sends S.
OtSession ot_setup(Context& ctx, int sender, const ring::OtGroup& group);

// Batched 2-bit transfers: `messages` holds four 2-bit values per instance
// (sender side), `choices` one index in [0, 4) per instance (receiver side).
// The caller passes empty spans for the side it does not play. Returns the
// chosen values at the receiver and an empty vector at the sender.
// Representation per element: `kChunks` consecutive instances.
std::vector<uint8_t> ot_transfer(Context& ctx, OtSession& session, std::span<const std::array<uint8_t, 4>> messages,
                                 std::span<const uint8_t> choices, size_t instances);

// One element: 4 candidate 32-bit messages, the receiver learns messages[choice].
uint32_t ot_1of4(Context& ctx, OtSession& session, const std::array<uint32_t, 4>& messages, uint8_t choice);

// DReLU priced at the OT flow: 16-chunk millionaires comparison on the low 32
// bits. Requires |x| < 2^31 in the ring; exact for those inputs.
ArithmeticShare drelu_ot(Context& ctx, OtSession& session, const ArithmeticShare& x);
ArithmeticShare secure_relu_ot(Context& ctx, OtSession& session, const ArithmeticShare& x);

// Gilboa-style elementwise triples from 1-of-2 transfers over the same group.
// Each party contributes its own random operands; no dealer involved.
BeaverTriple ot_elementwise_triple(Context& ctx, const Shape& shape, const ring::OtGroup& group);

}  // namespace adapi::mpc

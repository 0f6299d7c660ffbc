#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>

namespace adapi {

// Counter-mode PRG: AES-128 keyed from (seed, stream), encrypting an
// incrementing counter. Two instances built from the same (seed, stream)
// produce identical output, which is what lets both parties derive the same
// dealer material.
class Prg {
 public:
  explicit Prg(uint64_t seed, uint64_t stream = 0);
  ~Prg();
  Prg(Prg&&) noexcept;
  Prg& operator=(Prg&&) noexcept;
  Prg(const Prg&) = delete;
  Prg& operator=(const Prg&) = delete;

  void fill(std::span<uint8_t> out);
  uint64_t next_u64();
  uint32_t next_u32();
  // Uniform in [0, bound).
  uint64_t uniform(uint64_t bound);
  // Uniform double in [0, 1).
  double uniform_real();
  double normal();

  // Derive an independent child stream; deterministic in (this state, label).
  Prg fork(uint64_t label);

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }

 private:
  void refill();

  struct Cipher;
  std::unique_ptr<Cipher> cipher_;
  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_ = 0;
  std::array<uint8_t, 4096> buffer_{};
  size_t pos_ = sizeof(buffer_);
};

}  // namespace adapi

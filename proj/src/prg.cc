#include "adapi/prg.h"

#include <cmath>
#include <cstring>

#include <openssl/evp.h>
#include <openssl/sha.h>

#include "adapi/errors.h"

namespace adapi {

struct Prg::Cipher {
  EVP_CIPHER_CTX* ctx = nullptr;
  ~Cipher() { EVP_CIPHER_CTX_free(ctx); }
};

Prg::Prg(uint64_t seed, uint64_t stream)
    : cipher_(std::make_unique<Cipher>()), seed_(seed), stream_(stream) {
  uint8_t material[16];
  std::memcpy(material, &seed, 8);
  std::memcpy(material + 8, &stream, 8);
  uint8_t digest[SHA256_DIGEST_LENGTH];
  SHA256(material, sizeof(material), digest);

  uint8_t iv[16] = {0};
  cipher_->ctx = EVP_CIPHER_CTX_new();
  if (cipher_->ctx == nullptr ||
      EVP_EncryptInit_ex(cipher_->ctx, EVP_aes_128_ctr(), nullptr, digest, iv) != 1) {
    throw Error("failed to initialise AES-CTR PRG");
  }
}

Prg::~Prg() = default;
Prg::Prg(Prg&&) noexcept = default;
Prg& Prg::operator=(Prg&&) noexcept = default;

void Prg::refill() {
  static const std::array<uint8_t, sizeof(buffer_)> zeros{};
  int len = 0;
  if (EVP_EncryptUpdate(cipher_->ctx, buffer_.data(), &len, zeros.data(),
                        static_cast<int>(zeros.size())) != 1 ||
      len != static_cast<int>(buffer_.size())) {
    throw Error("AES-CTR PRG update failed");
  }
  counter_ += buffer_.size() / 16;
  pos_ = 0;
}

void Prg::fill(std::span<uint8_t> out) {
  size_t done = 0;
  while (done < out.size()) {
    if (pos_ == buffer_.size()) refill();
    const size_t n = std::min(out.size() - done, buffer_.size() - pos_);
    std::memcpy(out.data() + done, buffer_.data() + pos_, n);
    pos_ += n;
    done += n;
  }
}

uint64_t Prg::next_u64() {
  if (buffer_.size() - pos_ < 8) refill();
  uint64_t v;
  std::memcpy(&v, buffer_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

uint32_t Prg::next_u32() { return static_cast<uint32_t>(next_u64()); }

uint64_t Prg::uniform(uint64_t bound) {
  if (bound == 0) return next_u64();
  // Rejection sampling removes modulo bias.
  const uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % bound;
}

double Prg::uniform_real() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Prg::normal() {
  // Box-Muller; one draw per call keeps the stream position simple to reason about.
  double u1 = uniform_real();
  while (u1 <= 0.0) u1 = uniform_real();
  const double u2 = uniform_real();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Prg Prg::fork(uint64_t label) {
  const uint64_t child_seed = next_u64();
  return Prg(child_seed, label);
}

}  // namespace adapi

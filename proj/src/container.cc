#include "adapi/container.h"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include <openssl/sha.h>
#include <zlib.h>

#include "adapi/errors.h"

namespace adapi::io {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, std::span<const uint8_t> bytes) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path);
}

void write_text(const std::string& path, const std::string& text) {
  write_file(path, {reinterpret_cast<const uint8_t*>(text.data()), text.size()});
}

std::string read_text(const std::string& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_container(const std::string& path, std::string_view magic, const nlohmann::json& header,
                     std::span<const uint8_t> payload) {
  ADAPI_ENFORCE(magic.size() == 8, FormatError, "container magic must be 8 bytes");
  const std::string head = header.dump();
  std::vector<uint8_t> bytes;
  bytes.reserve(12 + head.size() + payload.size());
  bytes.insert(bytes.end(), magic.begin(), magic.end());
  const auto len = static_cast<uint32_t>(head.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(len >> (8 * i)));
  bytes.insert(bytes.end(), head.begin(), head.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  write_file(path, bytes);
}

Container read_container(const std::string& path, std::string_view magic) {
  const auto bytes = read_file(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), magic.data(), 8) != 0) {
    throw FormatError(path + ": bad magic, expected " + std::string(magic));
  }
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(bytes[8 + i]) << (8 * i);
  if (bytes.size() < 12 + static_cast<size_t>(len)) throw FormatError(path + ": truncated header");
  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed header: " + e.what());
  }
  c.payload.assign(bytes.begin() + 12 + len, bytes.end());
  return c;
}

void put_f64(std::vector<uint8_t>& out, double v) {
  const auto bits = std::bit_cast<uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(bits >> (8 * i)));
}

double get_f64(const uint8_t* p) {
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= uint64_t{p[i]} << (8 * i);
  return std::bit_cast<double>(bits);
}

uint32_t crc32(std::span<const uint8_t> bytes) {
  return static_cast<uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::string sha256_hex(std::span<const uint8_t> bytes) {
  uint8_t digest[SHA256_DIGEST_LENGTH];
  SHA256(bytes.data(), bytes.size(), digest);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (uint8_t b : digest) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 15]);
  }
  return out;
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

}  // namespace adapi::io

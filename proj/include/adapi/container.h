#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace adapi::io {

// File layout: 8-byte magic | u32 LE header length | JSON header | payload.
struct Container {
  nlohmann::json header;
  std::vector<uint8_t> payload;
};

void write_container(const std::string& path, std::string_view magic, const nlohmann::json& header,
                     std::span<const uint8_t> payload);
Container read_container(const std::string& path, std::string_view magic);

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const uint8_t> bytes);
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

void put_f64(std::vector<uint8_t>& out, double v);
double get_f64(const uint8_t* p);

uint32_t crc32(std::span<const uint8_t> bytes);
std::string sha256_hex(std::span<const uint8_t> bytes);
std::string sha256_hex(std::string_view text);

}  // namespace adapi::io

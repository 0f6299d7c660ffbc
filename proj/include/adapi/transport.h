#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace adapi::net {

// Frame layout (bit-exact, little-endian):
//   u32 payload_length | u8 tag_length | tag bytes | payload bytes
constexpr size_t kFrameHeaderBytes = 5;

inline size_t frame_bytes(size_t tag_len, size_t payload_len) {
  return kFrameHeaderBytes + tag_len + payload_len;
}

std::vector<uint8_t> encode_frame(std::string_view tag, std::span<const uint8_t> payload);

struct TagCounters {
  uint64_t sent_bytes = 0;
  uint64_t received_bytes = 0;
  uint64_t sent_payload = 0;
  uint64_t received_payload = 0;
  uint64_t messages_sent = 0;
  uint64_t messages_received = 0;

  TagCounters& operator+=(const TagCounters& o);
  TagCounters operator-(const TagCounters& o) const;
  bool operator==(const TagCounters&) const = default;
};

struct MeterSnapshot {
  TagCounters totals;
  uint64_t round_trips = 0;
  std::map<std::string, TagCounters> per_tag;

  MeterSnapshot operator-(const MeterSnapshot& earlier) const;
  // Sum of counters whose tag contains `needle`.
  TagCounters matching(std::string_view needle) const;
  nlohmann::json to_json() const;
};

// Application-layer traffic counter; frame bytes include the 5-byte header
// and the tag, payload bytes do not.
class ByteMeter {
 public:
  void on_send(std::string_view tag, size_t payload_len);
  void on_recv(std::string_view tag, size_t payload_len);

  const TagCounters& totals() const { return snapshot_.totals; }
  uint64_t round_trips() const { return snapshot_.round_trips; }
  const MeterSnapshot& snapshot() const { return snapshot_; }
  void reset() { snapshot_ = {}; last_was_send_ = false; }

 private:
  MeterSnapshot snapshot_;
  bool last_was_send_ = false;
};

class Channel {
 public:
  virtual ~Channel() = default;

  void send(std::string_view tag, std::span<const uint8_t> payload);
  std::vector<uint8_t> recv(std::string_view expected_tag);

  void send_words(std::string_view tag, std::span<const uint64_t> words);
  std::vector<uint64_t> recv_words(std::string_view expected_tag);

  ByteMeter& meter() { return meter_; }
  const ByteMeter& meter() const { return meter_; }
  int party() const { return party_; }
  void set_timeout(std::chrono::milliseconds t) { timeout_ = t; }
  std::chrono::milliseconds timeout() const { return timeout_; }

  // Unmetered byte access for channel decorators.
  void send_raw(std::span<const uint8_t> bytes) { write_all(bytes); }
  void recv_raw(std::span<uint8_t> out) { read_exact(out); }

  virtual void close() = 0;
  virtual std::string backend() const = 0;

 protected:
  explicit Channel(int party) : party_(party) {}

  virtual void write_all(std::span<const uint8_t> bytes) = 0;
  // Blocks until exactly out.size() bytes are read; throws TransportError on
  // timeout or when the peer has closed.
  virtual void read_exact(std::span<uint8_t> out) = 0;

 private:
  int party_;
  ByteMeter meter_;
  std::chrono::milliseconds timeout_{30000};
};

// In-process duplex pair; index 0 is party 0.
std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_local_pair();

// Blocking TCP endpoints. `tcp_listen` accepts exactly one peer.
std::unique_ptr<Channel> tcp_listen(const std::string& host, uint16_t port, int party,
                                    std::chrono::milliseconds accept_timeout = std::chrono::seconds(30));
std::unique_ptr<Channel> tcp_connect(const std::string& host, uint16_t port, int party,
                                     std::chrono::milliseconds connect_timeout = std::chrono::seconds(30));

// Bind to an ephemeral port and report it before accepting; used by tests and
// the local supervisor.
class TcpListener {
 public:
  TcpListener(const std::string& host, uint16_t port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  uint16_t port() const { return port_; }
  std::unique_ptr<Channel> accept(int party, std::chrono::milliseconds timeout);

 private:
  int fd_ = -1;
  uint16_t port_ = 0;
};

}  // namespace adapi::net

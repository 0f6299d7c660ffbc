#include "adapi/transport.h"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>

#include "adapi/errors.h"

namespace adapi::net {

TagCounters& TagCounters::operator+=(const TagCounters& o) {
  sent_bytes += o.sent_bytes;
  received_bytes += o.received_bytes;
  sent_payload += o.sent_payload;
  received_payload += o.received_payload;
  messages_sent += o.messages_sent;
  messages_received += o.messages_received;
  return *this;
}

TagCounters TagCounters::operator-(const TagCounters& o) const {
  TagCounters d;
  d.sent_bytes = sent_bytes - o.sent_bytes;
  d.received_bytes = received_bytes - o.received_bytes;
  d.sent_payload = sent_payload - o.sent_payload;
  d.received_payload = received_payload - o.received_payload;
  d.messages_sent = messages_sent - o.messages_sent;
  d.messages_received = messages_received - o.messages_received;
  return d;
}

MeterSnapshot MeterSnapshot::operator-(const MeterSnapshot& earlier) const {
  MeterSnapshot d;
  d.totals = totals - earlier.totals;
  d.round_trips = round_trips - earlier.round_trips;
  for (const auto& [tag, c] : per_tag) {
    auto it = earlier.per_tag.find(tag);
    TagCounters delta = it == earlier.per_tag.end() ? c : c - it->second;
    if (!(delta == TagCounters{})) d.per_tag[tag] = delta;
  }
  return d;
}

TagCounters MeterSnapshot::matching(std::string_view needle) const {
  TagCounters sum;
  for (const auto& [tag, c] : per_tag) {
    if (tag.find(needle) != std::string::npos) sum += c;
  }
  return sum;
}

namespace {

nlohmann::json counters_json(const TagCounters& c) {
  return {{"sent_bytes", c.sent_bytes},         {"received_bytes", c.received_bytes},
          {"sent_payload", c.sent_payload},     {"received_payload", c.received_payload},
          {"messages_sent", c.messages_sent},   {"messages_received", c.messages_received}};
}

}  // namespace

nlohmann::json MeterSnapshot::to_json() const {
  nlohmann::json tags = nlohmann::json::object();
  for (const auto& [tag, c] : per_tag) tags[tag] = counters_json(c);
  return {{"totals", counters_json(totals)}, {"round_trips", round_trips}, {"per_tag", tags}};
}

void ByteMeter::on_send(std::string_view tag, size_t payload_len) {
  const uint64_t frame = frame_bytes(tag.size(), payload_len);
  auto& t = snapshot_.per_tag[std::string(tag)];
  for (TagCounters* c : {&snapshot_.totals, &t}) {
    c->sent_bytes += frame;
    c->sent_payload += payload_len;
    c->messages_sent += 1;
  }
  last_was_send_ = true;
}

void ByteMeter::on_recv(std::string_view tag, size_t payload_len) {
  const uint64_t frame = frame_bytes(tag.size(), payload_len);
  auto& t = snapshot_.per_tag[std::string(tag)];
  for (TagCounters* c : {&snapshot_.totals, &t}) {
    c->received_bytes += frame;
    c->received_payload += payload_len;
    c->messages_received += 1;
  }
  if (last_was_send_) snapshot_.round_trips += 1;
  last_was_send_ = false;
}

std::vector<uint8_t> encode_frame(std::string_view tag, std::span<const uint8_t> payload) {
  ADAPI_ENFORCE(tag.size() <= 255, TransportError, "tag longer than 255 bytes");
  ADAPI_ENFORCE(payload.size() <= UINT32_MAX, TransportError, "payload exceeds 4 GiB frame limit");
  std::vector<uint8_t> frame(frame_bytes(tag.size(), payload.size()));
  const uint32_t len = static_cast<uint32_t>(payload.size());
  for (int i = 0; i < 4; ++i) frame[i] = static_cast<uint8_t>(len >> (8 * i));
  frame[4] = static_cast<uint8_t>(tag.size());
  std::memcpy(frame.data() + 5, tag.data(), tag.size());
  if (!payload.empty()) std::memcpy(frame.data() + 5 + tag.size(), payload.data(), payload.size());
  return frame;
}

void Channel::send(std::string_view tag, std::span<const uint8_t> payload) {
  const auto frame = encode_frame(tag, payload);
  write_all(frame);
  meter_.on_send(tag, payload.size());
}

std::vector<uint8_t> Channel::recv(std::string_view expected_tag) {
  uint8_t header[kFrameHeaderBytes];
  read_exact(header);
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(header[i]) << (8 * i);
  std::string tag(header[4], '\0');
  if (!tag.empty()) read_exact({reinterpret_cast<uint8_t*>(tag.data()), tag.size()});
  std::vector<uint8_t> payload(len);
  if (len) read_exact(payload);
  meter_.on_recv(tag, len);
  if (tag != expected_tag) {
    throw ProtocolError("expected frame tag '" + std::string(expected_tag) + "' but received '" +
                        tag + "'");
  }
  return payload;
}

void Channel::send_words(std::string_view tag, std::span<const uint64_t> words) {
  std::vector<uint8_t> bytes(words.size() * 8);
  for (size_t i = 0; i < words.size(); ++i) {
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<uint8_t>(words[i] >> (8 * b));
  }
  send(tag, bytes);
}

std::vector<uint64_t> Channel::recv_words(std::string_view expected_tag) {
  const auto bytes = recv(expected_tag);
  ADAPI_ENFORCE(bytes.size() % 8 == 0, ProtocolError, "word payload is not a multiple of 8 bytes");
  std::vector<uint64_t> words(bytes.size() / 8);
  for (size_t i = 0; i < words.size(); ++i) {
    uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<uint64_t>(bytes[i * 8 + b]) << (8 * b);
    words[i] = v;
  }
  return words;
}

namespace {

struct Pipe {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<uint8_t> bytes;
  bool closed = false;
};

class LocalChannel final : public Channel {
 public:
  LocalChannel(int party, std::shared_ptr<Pipe> inbox, std::shared_ptr<Pipe> outbox)
      : Channel(party), inbox_(std::move(inbox)), outbox_(std::move(outbox)) {}
  ~LocalChannel() override { close(); }

  void close() override {
    for (auto* p : {inbox_.get(), outbox_.get()}) {
      std::lock_guard lk(p->mu);
      p->closed = true;
      p->cv.notify_all();
    }
  }
  std::string backend() const override { return "local"; }

 protected:
  void write_all(std::span<const uint8_t> bytes) override {
    std::lock_guard lk(outbox_->mu);
    if (outbox_->closed) throw TransportError("send on closed local channel");
    outbox_->bytes.insert(outbox_->bytes.end(), bytes.begin(), bytes.end());
    outbox_->cv.notify_all();
  }

  void read_exact(std::span<uint8_t> out) override {
    std::unique_lock lk(inbox_->mu);
    const bool ready = inbox_->cv.wait_for(lk, timeout(), [&] {
      return inbox_->bytes.size() >= out.size() || inbox_->closed;
    });
    if (inbox_->bytes.size() < out.size()) {
      throw TransportError(ready ? "local peer closed with a truncated frame"
                                 : "timed out waiting for local peer");
    }
    std::copy_n(inbox_->bytes.begin(), out.size(), out.begin());
    inbox_->bytes.erase(inbox_->bytes.begin(), inbox_->bytes.begin() + static_cast<long>(out.size()));
  }

 private:
  std::shared_ptr<Pipe> inbox_;
  std::shared_ptr<Pipe> outbox_;
};

class TcpChannel final : public Channel {
 public:
  TcpChannel(int party, int fd) : Channel(party), fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~TcpChannel() override { close(); }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }
  std::string backend() const override { return "tcp"; }

 protected:
  void write_all(std::span<const uint8_t> bytes) override {
    if (fd_ < 0) throw TransportError("send on closed TCP channel");
    size_t done = 0;
    while (done < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + done, bytes.size() - done, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("TCP send failed: ") + std::strerror(errno));
      }
      done += static_cast<size_t>(n);
    }
  }

  void read_exact(std::span<uint8_t> out) override {
    if (fd_ < 0) throw TransportError("recv on closed TCP channel");
    size_t done = 0;
    while (done < out.size()) {
      pollfd p{fd_, POLLIN, 0};
      const int rc = ::poll(&p, 1, static_cast<int>(timeout().count()));
      if (rc == 0) throw TransportError("timed out waiting for TCP peer");
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("poll failed: ") + std::strerror(errno));
      }
      const ssize_t n = ::recv(fd_, out.data() + done, out.size() - done, 0);
      if (n == 0) throw TransportError("TCP peer closed the connection");
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("TCP recv failed: ") + std::strerror(errno));
      }
      done += static_cast<size_t>(n);
    }
  }

 private:
  int fd_;
};

sockaddr_in resolve(const std::string& host, uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string h = host == "localhost" ? "127.0.0.1" : host;
  if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (::getaddrinfo(h.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
      throw TransportError("cannot resolve host " + host);
    }
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    ::freeaddrinfo(res);
  }
  return addr;
}

}  // namespace

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_local_pair() {
  auto a_to_b = std::make_shared<Pipe>();
  auto b_to_a = std::make_shared<Pipe>();
  return {std::make_unique<LocalChannel>(0, b_to_a, a_to_b),
          std::make_unique<LocalChannel>(1, a_to_b, b_to_a)};
}

TcpListener::TcpListener(const std::string& host, uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw TransportError("socket() failed");
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr = resolve(host, port);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd_);
    throw TransportError("bind " + host + ":" + std::to_string(port) + " failed: " + err);
  }
  if (::listen(fd_, 1) != 0) {
    ::close(fd_);
    throw TransportError("listen failed");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Channel> TcpListener::accept(int party, std::chrono::milliseconds timeout) {
  pollfd p{fd_, POLLIN, 0};
  const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
  if (rc <= 0) throw TransportError("timed out waiting for TCP client on port " + std::to_string(port_));
  const int cfd = ::accept(fd_, nullptr, nullptr);
  if (cfd < 0) throw TransportError(std::string("accept failed: ") + std::strerror(errno));
  return std::make_unique<TcpChannel>(party, cfd);
}

std::unique_ptr<Channel> tcp_listen(const std::string& host, uint16_t port, int party,
                                    std::chrono::milliseconds accept_timeout) {
  TcpListener listener(host, port);
  return listener.accept(party, accept_timeout);
}

std::unique_ptr<Channel> tcp_connect(const std::string& host, uint16_t port, int party,
                                     std::chrono::milliseconds connect_timeout) {
  const sockaddr_in addr = resolve(host, port);
  const auto deadline = std::chrono::steady_clock::now() + connect_timeout;
  while (true) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed");
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      return std::make_unique<TcpChannel>(party, fd);
    }
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw TransportError("cannot connect to " + host + ":" + std::to_string(port));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

}  // namespace adapi::net

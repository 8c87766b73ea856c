#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <cstring>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "omniserve/errors.hpp"
#include "omniserve/payload.hpp"

namespace omni {

// Inner protocol of the TCP data plane. Frames share the connector's
// length-prefixed layout: u32 LE body length, u8 kind, body.
enum class TcpOp : uint8_t {
  STORE = 0,  // body: u64 stream id, raw bytes
  FETCH = 1,  // body: u64 stream id
  FREE = 2,   // body: u64 stream id
  DATA = 3,   // body: raw bytes
  ACK = 4,    // body: u64 value (freed bytes for FREE)
  NACK = 5,   // body: empty
};

namespace detail {

inline void send_all(int fd, const uint8_t* data, size_t len) {
  size_t off = 0;
  while (off < len) {
    ssize_t n = ::send(fd, data + off, len - off, MSG_NOSIGNAL);
    if (n <= 0) throw TransportDown("tcp send failed");
    off += static_cast<size_t>(n);
  }
}

inline bool recv_all(int fd, uint8_t* data, size_t len) {
  size_t off = 0;
  while (off < len) {
    ssize_t n = ::recv(fd, data + off, len - off, 0);
    if (n == 0) return false;  // peer closed
    if (n < 0) throw TransportDown("tcp recv failed");
    off += static_cast<size_t>(n);
  }
  return true;
}

inline void send_frame(int fd, TcpOp op, std::span<const uint8_t> body) {
  std::vector<uint8_t> hdr;
  wire::put_u32(hdr, static_cast<uint32_t>(body.size()));
  hdr.push_back(static_cast<uint8_t>(op));
  send_all(fd, hdr.data(), hdr.size());
  if (!body.empty()) send_all(fd, body.data(), body.size());
}

inline bool recv_frame(int fd, TcpOp& op, std::vector<uint8_t>& body) {
  uint8_t hdr[5];
  if (!recv_all(fd, hdr, 5)) return false;
  uint32_t len = static_cast<uint32_t>(hdr[0]) | (static_cast<uint32_t>(hdr[1]) << 8) |
                 (static_cast<uint32_t>(hdr[2]) << 16) |
                 (static_cast<uint32_t>(hdr[3]) << 24);
  if (hdr[4] > 5) throw ProtocolViolation("bad tcp op");
  op = static_cast<TcpOp>(hdr[4]);
  body.resize(len);
  if (len && !recv_all(fd, body.data(), len)) return false;
  return true;
}

inline std::pair<std::string, uint16_t> split_endpoint(const std::string& ep) {
  auto pos = ep.rfind(':');
  if (pos == std::string::npos) throw ConfigInvalid("bad tcp endpoint: " + ep);
  return {ep.substr(0, pos), static_cast<uint16_t>(std::stoi(ep.substr(pos + 1)))};
}

}  // namespace detail

/// Byte store reachable over TCP loopback/network; the data plane behind a
/// TCP-transport connector edge. Ids are assigned by the writing side.
class TcpStoreServer {
 public:
  explicit TcpStoreServer(const std::string& endpoint) {
    auto [host, port] = detail::split_endpoint(endpoint);
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw TransportDown("socket failed");
    int one = 1;
    setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
      addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(listen_fd_);
      throw PortInUse("cannot bind " + endpoint);
    }
    if (::listen(listen_fd_, 16) != 0) {
      ::close(listen_fd_);
      throw TransportDown("listen failed on " + endpoint);
    }
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~TcpStoreServer() { stop(); }

  void stop() {
    bool expected = false;
    if (!stopped_.compare_exchange_strong(expected, true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    std::lock_guard lk(conn_mu_);
    for (auto& t : conn_threads_)
      if (t.joinable()) t.join();
  }

 private:
  void accept_loop() {
    while (!stopped_) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) break;
      int one = 1;
      setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      std::lock_guard lk(conn_mu_);
      conn_threads_.emplace_back([this, fd] { serve(fd); });
    }
  }

  void serve(int fd) {
    TcpOp op;
    std::vector<uint8_t> body;
    try {
      while (detail::recv_frame(fd, op, body)) {
        switch (op) {
          case TcpOp::STORE: {
            wire::Reader r{body};
            uint64_t id = r.u64();
            std::vector<uint8_t> data(body.begin() + 8, body.end());
            {
              std::lock_guard lk(mu_);
              blobs_[id] = std::move(data);
            }
            std::vector<uint8_t> ack;
            wire::put_u64(ack, id);
            detail::send_frame(fd, TcpOp::ACK, ack);
            break;
          }
          case TcpOp::FETCH: {
            wire::Reader r{body};
            uint64_t id = r.u64();
            std::unique_lock lk(mu_);
            auto it = blobs_.find(id);
            if (it == blobs_.end()) {
              lk.unlock();
              detail::send_frame(fd, TcpOp::NACK, {});
            } else {
              auto data = it->second;
              lk.unlock();
              detail::send_frame(fd, TcpOp::DATA, data);
            }
            break;
          }
          case TcpOp::FREE: {
            wire::Reader r{body};
            uint64_t id = r.u64();
            uint64_t freed = 0;
            {
              std::lock_guard lk(mu_);
              auto it = blobs_.find(id);
              if (it != blobs_.end()) {
                freed = it->second.size();
                blobs_.erase(it);
              }
            }
            std::vector<uint8_t> ack;
            wire::put_u64(ack, freed);
            detail::send_frame(fd, TcpOp::ACK, ack);
            break;
          }
          default:
            detail::send_frame(fd, TcpOp::NACK, {});
        }
      }
    } catch (const OmniError&) {
      // connection torn down; drop it
    }
    ::close(fd);
  }

  int listen_fd_ = -1;
  std::atomic<bool> stopped_{false};
  std::thread accept_thread_;
  std::mutex conn_mu_;
  std::vector<std::thread> conn_threads_;
  std::mutex mu_;
  std::map<uint64_t, std::vector<uint8_t>> blobs_;
};

class TcpStoreClient {
 public:
  explicit TcpStoreClient(const std::string& endpoint) {
    auto [host, port] = detail::split_endpoint(endpoint);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw TransportDown("socket failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
      addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    // The server's accept thread may still be coming up; retry briefly.
    int rc = -1;
    for (int attempt = 0; attempt < 50; ++attempt) {
      rc = ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
      if (rc == 0) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    if (rc != 0) {
      ::close(fd_);
      throw TransportDown("cannot connect to " + endpoint);
    }
    int one = 1;
    setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  ~TcpStoreClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  TcpStoreClient(const TcpStoreClient&) = delete;
  TcpStoreClient& operator=(const TcpStoreClient&) = delete;

  void store(uint64_t id, std::span<const uint8_t> data) {
    std::lock_guard lk(mu_);
    std::vector<uint8_t> body;
    wire::put_u64(body, id);
    body.insert(body.end(), data.begin(), data.end());
    detail::send_frame(fd_, TcpOp::STORE, body);
    expect_ack();
  }

  std::vector<uint8_t> fetch(uint64_t id) {
    std::lock_guard lk(mu_);
    std::vector<uint8_t> body;
    wire::put_u64(body, id);
    detail::send_frame(fd_, TcpOp::FETCH, body);
    TcpOp op;
    std::vector<uint8_t> resp;
    if (!detail::recv_frame(fd_, op, resp)) throw TransportDown("tcp store closed");
    if (op == TcpOp::NACK) throw MissingKey("tcp stream id " + std::to_string(id));
    if (op != TcpOp::DATA) throw ProtocolViolation("unexpected tcp reply");
    return resp;
  }

  uint64_t free(uint64_t id) {
    std::lock_guard lk(mu_);
    std::vector<uint8_t> body;
    wire::put_u64(body, id);
    detail::send_frame(fd_, TcpOp::FREE, body);
    return expect_ack();
  }

 private:
  uint64_t expect_ack() {
    TcpOp op;
    std::vector<uint8_t> resp;
    if (!detail::recv_frame(fd_, op, resp)) throw TransportDown("tcp store closed");
    if (op != TcpOp::ACK) throw ProtocolViolation("expected ACK");
    wire::Reader r{resp};
    return r.u64();
  }

  int fd_ = -1;
  std::mutex mu_;
};

}  // namespace omni

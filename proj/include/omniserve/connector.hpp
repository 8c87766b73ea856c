#pragma once

#include <cctype>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "omniserve/clock.hpp"
#include "omniserve/control.hpp"
#include "omniserve/errors.hpp"
#include "omniserve/graph.hpp"
#include "omniserve/payload.hpp"
#include "omniserve/shm_region.hpp"
#include "omniserve/tcp_store.hpp"

namespace omni {

struct TransportConfig {
  TransportKind kind = TransportKind::INPROC;
  uint64_t inline_threshold = 4096;
  uint64_t shm_region_bytes = 64ull << 20;
  std::string tcp_endpoint;  // host:port, required for TCP
  std::string shm_name;      // default "omni.{server_id}.{edge}"
  uint64_t default_timeout_ms = 5000;
};

/// Ordered unit of a streaming edge.
struct StreamChunk {
  uint64_t request_id = 0;
  std::string from;
  std::string to;
  uint32_t seq = 0;
  Payload payload;
  bool eos = false;
};

class Connector;

class StreamSender {
 public:
  StreamSender() = default;
  void send(const StreamChunk& c);
  bool valid() const { return conn_ != nullptr; }

 private:
  friend class Connector;
  StreamSender(Connector* c, uint64_t rid) : conn_(c), request_id_(rid) {}
  Connector* conn_ = nullptr;
  uint64_t request_id_ = 0;
};

class StreamReceiver {
 public:
  StreamReceiver() = default;
  std::optional<StreamChunk> try_recv();
  StreamChunk recv(uint64_t timeout_ms);
  bool valid() const { return conn_ != nullptr; }

 private:
  friend class Connector;
  StreamReceiver(Connector* c, uint64_t rid) : conn_(c), request_id_(rid) {}
  Connector* conn_ = nullptr;
  uint64_t request_id_ = 0;
};

/// Data plane for one edge: keyed put/get plus single-producer
/// single-consumer ordered streams. Small payloads ride inline in control
/// messages; larger ones go through the edge's shared-memory region or TCP
/// byte store with only a locator in the control plane.
class Connector {
 public:
  Connector(std::string edge, TransportConfig cfg, const std::string& server_id = "0")
      : edge_(std::move(edge)), cfg_(std::move(cfg)) {
    if (cfg_.kind == TransportKind::SHM) {
      std::string name = cfg_.shm_name.empty()
                             ? "/omni." + server_id + "." + sanitize(edge_)
                             : cfg_.shm_name;
      shm_ = std::make_unique<ShmRegion>(name, cfg_.shm_region_bytes);
    } else if (cfg_.kind == TransportKind::TCP) {
      if (cfg_.tcp_endpoint.empty())
        throw ConfigInvalid("tcp transport needs an endpoint on edge " + edge_);
      server_ = std::make_unique<TcpStoreServer>(cfg_.tcp_endpoint);
      client_ = std::make_unique<TcpStoreClient>(cfg_.tcp_endpoint);
    }
  }

  const std::string& edge() const { return edge_; }
  const TransportConfig& config() const { return cfg_; }

  void put(const ConnectorKey& key, const Payload& p) {
    auto blob = encode_payload(p);
    uint64_t h = fnv1a(blob);
    std::unique_lock lk(mu_);
    std::string k = key.canonical();
    auto it = kv_.find(k);
    if (it != kv_.end()) {
      if (it->second.hash == h && it->second.length == blob.size()) return;
      throw WriteConflict(k);
    }
    Locator loc = stash(key.request_id, blob, lk);
    kv_.emplace(k, KvEntry{loc, h, blob.size(), false, key.request_id});
    cv_.notify_all();
  }

  Payload get(const ConnectorKey& key, uint64_t timeout_ms) {
    std::unique_lock lk(mu_);
    std::string k = key.canonical();
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::milliseconds(timeout_ms);
    while (true) {
      auto it = kv_.find(k);
      if (it != kv_.end() && !it->second.consumed) {
        it->second.consumed = true;
        Locator loc = it->second.loc;
        lk.unlock();
        auto blob = materialize(loc);
        release(loc);
        return decode_payload(blob);
      }
      if (cv_.wait_until(lk, deadline) == std::cv_status::timeout)
        throw TimeoutError("get timed out on " + k);
    }
  }

  StreamSender open_stream(uint64_t request_id) {
    std::lock_guard lk(mu_);
    auto& st = streams_[request_id];
    if (st.sender_open) throw AlreadyOpen("stream sender for request " +
                                          std::to_string(request_id));
    st.sender_open = true;
    return StreamSender(this, request_id);
  }

  StreamReceiver subscribe(uint64_t request_id) {
    std::lock_guard lk(mu_);
    auto& st = streams_[request_id];
    if (st.receiver_open) throw AlreadyOpen("stream receiver for request " +
                                            std::to_string(request_id));
    st.receiver_open = true;
    return StreamReceiver(this, request_id);
  }

  uint64_t cleanup(uint64_t request_id) {
    std::unique_lock lk(mu_);
    uint64_t freed = 0;
    for (auto it = kv_.begin(); it != kv_.end();) {
      if (it->second.request_id == request_id) {
        if (!it->second.consumed) freed += release_locked(it->second.loc, lk);
        it = kv_.erase(it);
      } else {
        ++it;
      }
    }
    auto st = streams_.find(request_id);
    if (st != streams_.end()) {
      for (auto& c : st->second.q) freed += release_locked(c.loc, lk);
      streams_.erase(st);
    }
    if (shm_) freed += shm_->free_request(request_id);
    return freed;
  }

  uint64_t shm_allocated_bytes() const {
    return shm_ ? shm_->allocated_bytes() : 0;
  }

 private:
  friend class StreamSender;
  friend class StreamReceiver;

  struct KvEntry {
    Locator loc;
    uint64_t hash;
    size_t length;
    bool consumed;
    uint64_t request_id;
  };

  struct BufferedChunk {
    uint32_t seq;
    bool eos;
    Locator loc;
  };

  struct StreamState {
    bool sender_open = false;
    bool receiver_open = false;
    uint32_t next_send_seq = 0;
    bool eos_sent = false;
    std::deque<BufferedChunk> q;
  };

  static uint64_t fnv1a(std::span<const uint8_t> data) {
    uint64_t h = 1469598103934665603ull;
    for (uint8_t b : data) {
      h ^= b;
      h *= 1099511628211ull;
    }
    return h;
  }

  static std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s) out.push_back((std::isalnum(static_cast<unsigned char>(c))) ? c : '_');
    return out;
  }

  // mu_ must be held; drops it only around blocking transport work.
  Locator stash(uint64_t request_id, std::span<const uint8_t> blob,
                std::unique_lock<std::mutex>& lk) {
    Locator loc;
    if (cfg_.kind == TransportKind::INPROC || blob.size() <= cfg_.inline_threshold) {
      loc.kind = Locator::Kind::INLINE;
      loc.inline_bytes.assign(blob.begin(), blob.end());
      return loc;
    }
    if (cfg_.kind == TransportKind::SHM) {
      loc.kind = Locator::Kind::SHM;
      loc.shm_region = shm_->name();
      loc.shm_offset = shm_->alloc_and_write(request_id, blob);
      loc.shm_length = blob.size();
      return loc;
    }
    // TCP
    loc.kind = Locator::Kind::TCP;
    loc.tcp_stream_id = next_stream_id_++;
    lk.unlock();
    client_->store(loc.tcp_stream_id, blob);
    lk.lock();
    return loc;
  }

  std::vector<uint8_t> materialize(const Locator& loc) {
    switch (loc.kind) {
      case Locator::Kind::INLINE:
        return loc.inline_bytes;
      case Locator::Kind::SHM:
        return shm_->read(loc.shm_offset, loc.shm_length);
      case Locator::Kind::TCP:
        return client_->fetch(loc.tcp_stream_id);
    }
    throw ProtocolViolation("bad locator");
  }

  uint64_t release(const Locator& loc) {
    switch (loc.kind) {
      case Locator::Kind::INLINE:
        return loc.inline_bytes.size();
      case Locator::Kind::SHM:
        shm_->free_slot(loc.shm_offset);
        return loc.shm_length;
      case Locator::Kind::TCP:
        return client_->free(loc.tcp_stream_id);
    }
    return 0;
  }

  uint64_t release_locked(const Locator& loc, std::unique_lock<std::mutex>& lk) {
    if (loc.kind == Locator::Kind::TCP) {
      lk.unlock();
      uint64_t n = client_->free(loc.tcp_stream_id);
      lk.lock();
      return n;
    }
    return release(loc);
  }

  void stream_send(uint64_t request_id, const StreamChunk& c) {
    std::unique_lock lk(mu_);
    auto& st = streams_[request_id];
    if (st.eos_sent) throw ProtocolViolation("chunk after eos");
    if (c.seq != st.next_send_seq)
      throw ProtocolViolation("out-of-order chunk seq " + std::to_string(c.seq) +
                              " (expected " + std::to_string(st.next_send_seq) + ")");
    auto blob = encode_payload(c.payload);
    Locator loc = stash(request_id, blob, lk);
    st.q.push_back({c.seq, c.eos, std::move(loc)});
    st.next_send_seq++;
    if (c.eos) st.eos_sent = true;
    cv_.notify_all();
  }

  std::optional<StreamChunk> stream_try_recv(uint64_t request_id) {
    std::unique_lock lk(mu_);
    auto it = streams_.find(request_id);
    if (it == streams_.end() || it->second.q.empty()) return std::nullopt;
    BufferedChunk bc = std::move(it->second.q.front());
    it->second.q.pop_front();
    lk.unlock();
    auto blob = materialize(bc.loc);
    release(bc.loc);
    StreamChunk c;
    c.request_id = request_id;
    auto arrow = edge_.find("->");
    if (arrow != std::string::npos) {
      c.from = edge_.substr(0, arrow);
      c.to = edge_.substr(arrow + 2);
    }
    c.seq = bc.seq;
    c.eos = bc.eos;
    c.payload = decode_payload(blob);
    return c;
  }

  StreamChunk stream_recv(uint64_t request_id, uint64_t timeout_ms) {
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::milliseconds(timeout_ms);
    while (true) {
      if (auto c = stream_try_recv(request_id)) return *c;
      std::unique_lock lk(mu_);
      auto it = streams_.find(request_id);
      if (it != streams_.end() && !it->second.q.empty()) continue;
      if (cv_.wait_until(lk, deadline) == std::cv_status::timeout)
        throw TimeoutError("stream recv timed out");
    }
  }

  std::string edge_;
  TransportConfig cfg_;
  std::unique_ptr<ShmRegion> shm_;
  std::unique_ptr<TcpStoreServer> server_;
  std::unique_ptr<TcpStoreClient> client_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, KvEntry> kv_;
  std::map<uint64_t, StreamState> streams_;
  uint64_t next_stream_id_ = 1;
};

inline void StreamSender::send(const StreamChunk& c) {
  conn_->stream_send(request_id_, c);
}

inline std::optional<StreamChunk> StreamReceiver::try_recv() {
  return conn_->stream_try_recv(request_id_);
}

inline StreamChunk StreamReceiver::recv(uint64_t timeout_ms) {
  return conn_->stream_recv(request_id_, timeout_ms);
}

}  // namespace omni

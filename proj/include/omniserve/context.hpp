#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "omniserve/errors.hpp"
#include "omniserve/graph.hpp"
#include "omniserve/payload.hpp"

namespace omni {

struct Request {
  uint64_t request_id = 0;
  std::vector<uint8_t> prompt_tokens;  // values in [1,255], non-empty
  uint32_t seed = 0;
  bool stream = false;
  uint64_t submitted_at_us = 0;
};

enum class RequestStatus { QUEUED, RUNNING, STREAMING, DONE, FAILED };

inline const char* status_name(RequestStatus s) {
  switch (s) {
    case RequestStatus::QUEUED: return "QUEUED";
    case RequestStatus::RUNNING: return "RUNNING";
    case RequestStatus::STREAMING: return "STREAMING";
    case RequestStatus::DONE: return "DONE";
    case RequestStatus::FAILED: return "FAILED";
  }
  return "?";
}

inline bool status_transition_allowed(RequestStatus from, RequestStatus to) {
  switch (from) {
    case RequestStatus::QUEUED:
      return to == RequestStatus::RUNNING;
    case RequestStatus::RUNNING:
      return to == RequestStatus::STREAMING || to == RequestStatus::DONE ||
             to == RequestStatus::FAILED;
    case RequestStatus::STREAMING:
      return to == RequestStatus::DONE || to == RequestStatus::FAILED;
    case RequestStatus::DONE:
    case RequestStatus::FAILED:
      return false;
  }
  return false;
}

/// Per-request store of intermediate artifacts. Keys are write-once:
/// re-putting identical bytes is a no-op, different bytes is a conflict.
class RequestContext {
 public:
  RequestContext() = default;
  explicit RequestContext(uint64_t id) : request_id_(id) {}

  uint64_t request_id() const { return request_id_; }

  RequestStatus status() const { return status_; }
  void set_status(RequestStatus next) {
    if (!status_transition_allowed(status_, next))
      throw OmniError(std::string("illegal status transition ") +
                      status_name(status_) + " -> " + status_name(next));
    status_ = next;
  }

  const StageId& current_stage() const { return current_stage_; }
  void set_current_stage(StageId s) { current_stage_ = std::move(s); }

  void put(const std::string& key, Payload p) {
    if (key.empty()) throw OmniError("ctx_put: empty key");
    auto it = store_.find(key);
    if (it != store_.end()) {
      if (it->second == p) return;  // idempotent
      throw WriteConflict(key);
    }
    store_.emplace(key, std::move(p));
  }

  const Payload& get(const std::string& key) const {
    auto it = store_.find(key);
    if (it == store_.end()) throw MissingKey(key);
    return it->second;
  }

  bool has(const std::string& key) const { return store_.count(key) != 0; }

  const std::map<std::string, Payload>& store() const { return store_; }

  // Wire format: u64 request id, u32 entry count, then (key, payload blob)
  // pairs in key order.
  std::vector<uint8_t> serialize() const {
    std::vector<uint8_t> out;
    wire::put_u64(out, request_id_);
    wire::put_u32(out, static_cast<uint32_t>(store_.size()));
    for (const auto& [k, v] : store_) {
      wire::put_str(out, k);
      auto blob = encode_payload(v);
      wire::put_u32(out, static_cast<uint32_t>(blob.size()));
      out.insert(out.end(), blob.begin(), blob.end());
    }
    return out;
  }

  static RequestContext deserialize(std::span<const uint8_t> buf) {
    wire::Reader r{buf};
    RequestContext ctx(r.u64());
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
      std::string k = r.str();
      uint32_t len = r.u32();
      auto blob = r.raw(len);
      ctx.store_.emplace(std::move(k), decode_payload(blob));
    }
    return ctx;
  }

 private:
  uint64_t request_id_ = 0;
  std::map<std::string, Payload> store_;
  StageId current_stage_;
  RequestStatus status_ = RequestStatus::QUEUED;
};

}  // namespace omni

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "omniserve/errors.hpp"
#include "omniserve/payload.hpp"

namespace omni {

/// Canonical identity of a keyed payload on one edge.
struct ConnectorKey {
  uint64_t request_id = 0;
  std::string from;
  std::string to;
  std::string tag;

  std::string canonical() const {
    return "req:" + std::to_string(request_id) + "/edge:" + from + "->" + to +
           "/" + tag;
  }
};

struct Locator {
  enum class Kind : uint8_t { INLINE = 0, SHM = 1, TCP = 2 };
  Kind kind = Kind::INLINE;
  std::vector<uint8_t> inline_bytes;  // INLINE
  std::string shm_region;             // SHM
  uint64_t shm_offset = 0;
  uint64_t shm_length = 0;
  uint64_t tcp_stream_id = 0;  // TCP

  bool operator==(const Locator&) const = default;
};

struct ControlMessage {
  enum class Kind : uint8_t {
    PUT_NOTICE = 0,
    CHUNK_NOTICE = 1,
    EOS = 2,
    HANDOFF = 3,
    ACK = 4,
  };
  Kind kind = Kind::PUT_NOTICE;
  std::string key;           // PUT_NOTICE / HANDOFF / ACK
  uint64_t request_id = 0;   // CHUNK_NOTICE / EOS
  std::string edge;          // CHUNK_NOTICE / EOS
  uint32_t seq = 0;          // CHUNK_NOTICE / EOS
  Locator locator;

  bool operator==(const ControlMessage&) const = default;
};

// Frame layout: u32 LE body length, u8 message kind, body.
inline std::vector<uint8_t> encode_control_frame(const ControlMessage& m) {
  std::vector<uint8_t> body;
  wire::put_str(body, m.key);
  wire::put_u64(body, m.request_id);
  wire::put_str(body, m.edge);
  wire::put_u32(body, m.seq);
  body.push_back(static_cast<uint8_t>(m.locator.kind));
  switch (m.locator.kind) {
    case Locator::Kind::INLINE:
      wire::put_u32(body, static_cast<uint32_t>(m.locator.inline_bytes.size()));
      body.insert(body.end(), m.locator.inline_bytes.begin(),
                  m.locator.inline_bytes.end());
      break;
    case Locator::Kind::SHM:
      wire::put_str(body, m.locator.shm_region);
      wire::put_u64(body, m.locator.shm_offset);
      wire::put_u64(body, m.locator.shm_length);
      break;
    case Locator::Kind::TCP:
      wire::put_u64(body, m.locator.tcp_stream_id);
      break;
  }
  std::vector<uint8_t> out;
  wire::put_u32(out, static_cast<uint32_t>(body.size()));
  out.push_back(static_cast<uint8_t>(m.kind));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline ControlMessage decode_control_frame(std::span<const uint8_t> frame) {
  wire::Reader r{frame};
  uint32_t len = r.u32();
  uint8_t kind = r.u8();
  if (kind > 4) throw ProtocolViolation("bad control message kind");
  if (frame.size() != 5 + len) throw ProtocolViolation("frame length mismatch");
  ControlMessage m;
  m.kind = static_cast<ControlMessage::Kind>(kind);
  m.key = r.str();
  m.request_id = r.u64();
  m.edge = r.str();
  m.seq = r.u32();
  uint8_t lk = r.u8();
  if (lk > 2) throw ProtocolViolation("bad locator kind");
  m.locator.kind = static_cast<Locator::Kind>(lk);
  switch (m.locator.kind) {
    case Locator::Kind::INLINE: {
      uint32_t n = r.u32();
      m.locator.inline_bytes = r.raw(n);
      break;
    }
    case Locator::Kind::SHM:
      m.locator.shm_region = r.str();
      m.locator.shm_offset = r.u64();
      m.locator.shm_length = r.u64();
      break;
    case Locator::Kind::TCP:
      m.locator.tcp_stream_id = r.u64();
      break;
  }
  if (!r.done()) throw ProtocolViolation("trailing bytes in control frame");
  return m;
}

}  // namespace omni

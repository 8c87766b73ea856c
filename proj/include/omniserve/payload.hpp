#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "omniserve/errors.hpp"

namespace omni {

enum class Dtype : uint8_t { U8 = 0, I32 = 1, FIX16 = 2 };

inline size_t dtype_width(Dtype d) {
  switch (d) {
    case Dtype::U8:
      return 1;
    case Dtype::I32:
      return 4;
    case Dtype::FIX16:
      return 2;
  }
  throw BadDtype("unknown dtype tag");
}

/// Opaque typed buffer moved between stages. Little-endian throughout.
struct Payload {
  Dtype dtype = Dtype::U8;
  std::vector<uint32_t> shape;
  std::vector<uint8_t> bytes;

  size_t element_count() const {
    return std::accumulate(shape.begin(), shape.end(), size_t{1},
                           [](size_t a, uint32_t b) { return a * b; });
  }

  bool operator==(const Payload& o) const {
    return dtype == o.dtype && shape == o.shape && bytes == o.bytes;
  }

  static Payload from_u8(std::vector<uint8_t> data) {
    Payload p;
    p.dtype = Dtype::U8;
    p.shape = {static_cast<uint32_t>(data.size())};
    p.bytes = std::move(data);
    return p;
  }

  static Payload from_i32(std::span<const int32_t> data) {
    Payload p;
    p.dtype = Dtype::I32;
    p.shape = {static_cast<uint32_t>(data.size())};
    p.bytes.resize(data.size() * 4);
    for (size_t i = 0; i < data.size(); ++i) {
      uint32_t v = static_cast<uint32_t>(data[i]);
      p.bytes[4 * i + 0] = static_cast<uint8_t>(v);
      p.bytes[4 * i + 1] = static_cast<uint8_t>(v >> 8);
      p.bytes[4 * i + 2] = static_cast<uint8_t>(v >> 16);
      p.bytes[4 * i + 3] = static_cast<uint8_t>(v >> 24);
    }
    return p;
  }

  std::vector<int32_t> as_i32() const {
    if (dtype != Dtype::I32) throw BadDtype("payload is not I32");
    std::vector<int32_t> out(bytes.size() / 4);
    for (size_t i = 0; i < out.size(); ++i) {
      uint32_t v = static_cast<uint32_t>(bytes[4 * i]) |
                   (static_cast<uint32_t>(bytes[4 * i + 1]) << 8) |
                   (static_cast<uint32_t>(bytes[4 * i + 2]) << 16) |
                   (static_cast<uint32_t>(bytes[4 * i + 3]) << 24);
      out[i] = static_cast<int32_t>(v);
    }
    return out;
  }

  bool size_consistent() const {
    return bytes.size() == element_count() * dtype_width(dtype);
  }
};

namespace wire {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  put_u32(out, static_cast<uint32_t>(v));
  put_u32(out, static_cast<uint32_t>(v >> 32));
}

struct Reader {
  std::span<const uint8_t> data;
  size_t pos = 0;

  uint8_t u8() {
    if (pos + 1 > data.size()) throw ProtocolViolation("short read");
    return data[pos++];
  }
  uint32_t u32() {
    if (pos + 4 > data.size()) throw ProtocolViolation("short read");
    uint32_t v = static_cast<uint32_t>(data[pos]) |
                 (static_cast<uint32_t>(data[pos + 1]) << 8) |
                 (static_cast<uint32_t>(data[pos + 2]) << 16) |
                 (static_cast<uint32_t>(data[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    uint64_t lo = u32();
    uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::vector<uint8_t> raw(size_t n) {
    if (pos + n > data.size()) throw ProtocolViolation("short read");
    std::vector<uint8_t> v(data.begin() + pos, data.begin() + pos + n);
    pos += n;
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    auto b = raw(n);
    return std::string(b.begin(), b.end());
  }
  bool done() const { return pos == data.size(); }
};

inline void put_str(std::vector<uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

}  // namespace wire

// Wire layout: dtype tag (1 byte), rank (1 byte), dims as u32 LE, raw bytes.
inline std::vector<uint8_t> encode_payload(const Payload& p) {
  std::vector<uint8_t> out;
  out.reserve(2 + p.shape.size() * 4 + p.bytes.size());
  out.push_back(static_cast<uint8_t>(p.dtype));
  out.push_back(static_cast<uint8_t>(p.shape.size()));
  for (uint32_t d : p.shape) wire::put_u32(out, d);
  out.insert(out.end(), p.bytes.begin(), p.bytes.end());
  return out;
}

inline Payload decode_payload(std::span<const uint8_t> buf) {
  wire::Reader r{buf};
  Payload p;
  uint8_t tag = r.u8();
  if (tag > 2) throw BadDtype("bad dtype tag in payload header");
  p.dtype = static_cast<Dtype>(tag);
  uint8_t rank = r.u8();
  p.shape.resize(rank);
  for (auto& d : p.shape) d = r.u32();
  size_t want = p.element_count() * dtype_width(p.dtype);
  p.bytes = r.raw(want);
  if (!r.done()) throw ProtocolViolation("trailing bytes after payload");
  return p;
}

/// Fixed-point hidden-state vector: 8 nibbles, denominator 15.
struct HiddenState {
  std::array<uint8_t, 8> values{};

  bool operator==(const HiddenState&) const = default;

  int component_sum() const {
    int s = 0;
    for (uint8_t v : values) s += v;
    return s;
  }
};

}  // namespace omni

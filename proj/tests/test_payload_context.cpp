#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "omniserve/context.hpp"
#include "omniserve/control.hpp"
#include "omniserve/payload.hpp"

using namespace omni;

TEST_CASE("dtype widths") {
  CHECK(dtype_width(Dtype::U8) == 1);
  CHECK(dtype_width(Dtype::I32) == 4);
  CHECK(dtype_width(Dtype::FIX16) == 2);
}

TEST_CASE("payload wire round-trip") {
  Payload p = Payload::from_i32(std::vector<int32_t>{-1, 0, 7, 1 << 30});
  auto enc = encode_payload(p);
  CHECK(decode_payload(enc) == p);

  Payload u8 = Payload::from_u8({0, 255, 1});
  u8.shape = {3};
  CHECK(decode_payload(encode_payload(u8)) == u8);
}

TEST_CASE("payload zero-length round-trip") {
  Payload p;
  p.dtype = Dtype::I32;
  p.shape = {0};
  CHECK(decode_payload(encode_payload(p)) == p);
  CHECK(p.element_count() == 0);
}

TEST_CASE("payload fuzz round-trip") {
  std::mt19937 rng(11);
  for (int i = 0; i < 500; ++i) {
    Payload p;
    p.dtype = static_cast<Dtype>(rng() % 3);
    uint32_t rank = rng() % 3 + 1;
    uint64_t count = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      uint32_t dim = rng() % 5;
      p.shape.push_back(dim);
      count *= dim;
    }
    p.bytes.resize(count * dtype_width(p.dtype));
    for (auto& b : p.bytes) b = static_cast<uint8_t>(rng());
    CHECK(decode_payload(encode_payload(p)) == p);
  }
}

TEST_CASE("decode rejects truncated buffers") {
  Payload p = Payload::from_i32(std::vector<int32_t>{1, 2, 3});
  auto enc = encode_payload(p);
  enc.pop_back();
  CHECK_THROWS_AS(decode_payload(enc), OmniError);
}

TEST_CASE("context put is write-once with idempotent retries") {
  RequestContext ctx(1);
  Payload a = Payload::from_i32(std::vector<int32_t>{1});
  Payload b = Payload::from_i32(std::vector<int32_t>{2});
  ctx.put("k", a);
  CHECK_NOTHROW(ctx.put("k", a));  // same bytes: allowed
  CHECK_THROWS_AS(ctx.put("k", b), WriteConflict);
  CHECK(ctx.get("k") == a);
  CHECK(ctx.has("k"));
  CHECK_FALSE(ctx.has("missing"));
  CHECK_THROWS_AS(ctx.get("missing"), MissingKey);
}

TEST_CASE("context serialize round-trip preserves bytes") {
  RequestContext ctx(42);
  ctx.put("alpha", Payload::from_u8({1, 2, 3}));
  ctx.put("beta", Payload::from_i32(std::vector<int32_t>{-5}));
  auto bytes = ctx.serialize();
  auto back = RequestContext::deserialize(bytes);
  CHECK(back.request_id() == 42);
  CHECK(back.get("alpha") == ctx.get("alpha"));
  CHECK(back.get("beta") == ctx.get("beta"));
  CHECK(back.serialize() == bytes);
}

TEST_CASE("request status transitions") {
  using S = RequestStatus;
  CHECK(status_transition_allowed(S::QUEUED, S::RUNNING));
  CHECK(status_transition_allowed(S::RUNNING, S::STREAMING));
  CHECK(status_transition_allowed(S::RUNNING, S::DONE));
  CHECK(status_transition_allowed(S::STREAMING, S::DONE));
  CHECK(status_transition_allowed(S::RUNNING, S::FAILED));
  CHECK_FALSE(status_transition_allowed(S::DONE, S::RUNNING));
  CHECK_FALSE(status_transition_allowed(S::QUEUED, S::DONE));
  CHECK_FALSE(status_transition_allowed(S::FAILED, S::DONE));

  RequestContext ctx(1);
  ctx.set_status(S::RUNNING);
  ctx.set_status(S::DONE);
  CHECK_THROWS_AS(ctx.set_status(S::RUNNING), OmniError);
}

TEST_CASE("connector key canonical form") {
  ConnectorKey k{7, "thinker", "talker", "hidden/0"};
  CHECK(k.canonical() == "req:7/edge:thinker->talker/hidden/0");
}

TEST_CASE("control frame round-trip") {
  ControlMessage m;
  m.kind = ControlMessage::Kind::CHUNK_NOTICE;
  m.key = ConnectorKey{3, "a", "b", "t"}.canonical();
  m.request_id = 3;
  m.edge = "a->b";
  m.seq = 9;
  m.locator.kind = Locator::Kind::SHM;
  m.locator.shm_region = "/omni.test";
  m.locator.shm_offset = 128;
  m.locator.shm_length = 64;
  auto frame = encode_control_frame(m);
  auto back = decode_control_frame(frame);
  CHECK(back.kind == m.kind);
  CHECK(back.key == m.key);
  CHECK(back.seq == 9);
  CHECK(back.locator.kind == Locator::Kind::SHM);
  CHECK(back.locator.shm_offset == 128);
}

TEST_CASE("control frame fuzz round-trip") {
  std::mt19937 rng(5);
  for (int i = 0; i < 500; ++i) {
    ControlMessage m;
    m.kind = static_cast<ControlMessage::Kind>(rng() % 5);
    m.request_id = rng();
    std::string from = "s" + std::to_string(rng() % 4);
    std::string to = "d" + std::to_string(rng() % 4);
    m.key = ConnectorKey{m.request_id, from, to,
                         "tag" + std::to_string(rng() % 16)}
                .canonical();
    m.edge = from + "->" + to;
    m.seq = rng();
    m.locator.kind = static_cast<Locator::Kind>(rng() % 3);
    switch (m.locator.kind) {
      case Locator::Kind::INLINE: {
        m.locator.inline_bytes.resize(rng() % 64);
        for (auto& b : m.locator.inline_bytes) b = static_cast<uint8_t>(rng());
        break;
      }
      case Locator::Kind::SHM:
        m.locator.shm_region = "/r" + std::to_string(rng() % 8);
        m.locator.shm_offset = rng();
        m.locator.shm_length = rng();
        break;
      case Locator::Kind::TCP:
        m.locator.tcp_stream_id = rng();
        break;
    }
    auto back = decode_control_frame(encode_control_frame(m));
    CHECK(back == m);
  }
}

TEST_CASE("control frame rejects garbage") {
  std::vector<uint8_t> junk{1, 2, 3};
  CHECK_THROWS_AS(decode_control_frame(junk), OmniError);
}

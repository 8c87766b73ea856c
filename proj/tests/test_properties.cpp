#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>
#include <set>

#include "omniserve/ar_engine.hpp"
#include "omniserve/reference_pipeline.hpp"

using namespace omni;

namespace {

struct Arrival {
  uint64_t rid;
  std::vector<uint8_t> prompt;
  uint32_t seed;
  size_t at_iteration;
};

struct RunTrace {
  std::vector<IterationBatch> batches;
  std::map<uint64_t, SeqState> finals;
  uint64_t max_resident_tokens = 0;
  bool budget_violated = false;
};

// Drives one engine over a scripted arrival schedule, recording every batch
// and checking budget safety at each iteration boundary.
RunTrace run_schedule(const EngineConfig& cfg,
                      const std::vector<Arrival>& arrivals) {
  ArEngine eng("thinker", cfg, ref::make_thinker_model());
  RunTrace trace;
  size_t next = 0, iter = 0;
  uint64_t now = 0;
  while (true) {
    while (next < arrivals.size() && arrivals[next].at_iteration <= iter) {
      ArAdmission a;
      a.sub.request_id = arrivals[next].rid;
      a.sub.prompt = arrivals[next].prompt;
      a.sub.seed = arrivals[next].seed;
      a.ctx = std::make_shared<RequestContext>(arrivals[next].rid);
      eng.admit(std::move(a));
      next++;
    }
    if (!eng.has_work() && next >= arrivals.size()) break;
    if (!eng.begin_iteration(now)) {
      iter++;
      continue;
    }
    uint64_t resident = eng.resident_tokens();
    trace.max_resident_tokens = std::max(trace.max_resident_tokens, resident);
    // Budget safety, modulo the sole-resident overrun exception.
    if (resident > cfg.kv_budget_tokens && eng.resident_count() > 1)
      trace.budget_violated = true;
    now = eng.end_time();
    auto rep = eng.complete_iteration(now);
    trace.batches.push_back(rep.batch);
    for (uint64_t rid : rep.finished) {
      trace.finals[rid] = *eng.finished_seq(rid);
      eng.drop_finished(rid);
    }
    iter++;
  }
  return trace;
}

std::vector<Arrival> random_arrivals(std::mt19937& rng, size_t max_prompt) {
  std::vector<Arrival> out;
  size_t n = rng() % 6 + 1;
  for (size_t i = 0; i < n; ++i) {
    Arrival a;
    a.rid = i + 1;
    a.prompt.resize(rng() % max_prompt + 1);
    for (auto& t : a.prompt) t = static_cast<uint8_t>(rng() % 255 + 1);
    a.seed = rng();
    a.at_iteration = rng() % 8;
    out.push_back(a);
  }
  return out;
}

EngineConfig random_cfg(std::mt19937& rng, size_t max_prompt) {
  EngineConfig cfg;
  cfg.stage = "thinker";
  cfg.max_batch_tokens = rng() % 48 + 8;
  cfg.prefill_chunk = std::min<uint64_t>(cfg.max_batch_tokens, rng() % 16 + 1);
  // Headroom so decode never needs the sole-resident exception: every
  // request fits with its worst-case 64 output tokens.
  cfg.kv_budget_tokens = max_prompt + 64 + rng() % 256;
  cfg.max_resident_requests = rng() % 6 + 1;
  cfg.step_latency_us = 100;
  return cfg;
}

}  // namespace

TEST_CASE("token conservation over random arrival sequences") {
  std::mt19937 rng(101);
  const size_t max_prompt = 40;
  for (int trial = 0; trial < 400; ++trial) {
    auto arrivals = random_arrivals(rng, max_prompt);
    auto cfg = random_cfg(rng, max_prompt);
    auto trace = run_schedule(cfg, arrivals);
    REQUIRE(trace.finals.size() == arrivals.size());
    for (const auto& a : arrivals) {
      const SeqState& s = trace.finals.at(a.rid);
      REQUIRE(s.consumed_prompt == a.prompt.size());
      REQUIRE(s.emitted.size() == s.target_len);
      REQUIRE(s.phase == Phase::FINISHED);
    }
    // No request appears twice in one batch; spans obey the caps.
    for (const auto& b : trace.batches) {
      std::set<uint64_t> seen;
      uint64_t total = 0;
      for (const auto& e : b.entries) {
        REQUIRE(seen.insert(e.request_id).second);
        if (e.phase == Phase::DECODE) REQUIRE(e.token_span == 1);
        if (e.phase == Phase::PREFILL)
          REQUIRE(e.token_span <= cfg.prefill_chunk);
        total += e.token_span;
      }
      REQUIRE(total <= cfg.max_batch_tokens);
    }
  }
}

TEST_CASE("budget safety over random arrival sequences") {
  std::mt19937 rng(202);
  const size_t max_prompt = 40;
  for (int trial = 0; trial < 400; ++trial) {
    auto arrivals = random_arrivals(rng, max_prompt);
    auto cfg = random_cfg(rng, max_prompt);
    auto trace = run_schedule(cfg, arrivals);
    REQUIRE_FALSE(trace.budget_violated);
  }
}

TEST_CASE("batching transparency: batched output equals solo output") {
  std::mt19937 rng(303);
  const size_t max_prompt = 32;
  for (int trial = 0; trial < 150; ++trial) {
    auto arrivals = random_arrivals(rng, max_prompt);
    auto cfg = random_cfg(rng, max_prompt);
    auto batched = run_schedule(cfg, arrivals);
    for (const auto& a : arrivals) {
      auto solo = run_schedule(cfg, {{a.rid, a.prompt, a.seed, 0}});
      REQUIRE(batched.finals.at(a.rid).emitted == solo.finals.at(a.rid).emitted);
      // And both match the brute-force oracle.
      auto oracle = ref::thinker_generate(a.prompt, a.seed);
      REQUIRE(batched.finals.at(a.rid).emitted == oracle.text_tokens);
    }
  }
}

TEST_CASE("schedules are deterministic given identical arrivals") {
  std::mt19937 rng(404);
  const size_t max_prompt = 40;
  for (int trial = 0; trial < 150; ++trial) {
    auto arrivals = random_arrivals(rng, max_prompt);
    auto cfg = random_cfg(rng, max_prompt);
    auto a = run_schedule(cfg, arrivals);
    auto b = run_schedule(cfg, arrivals);
    REQUIRE(a.batches.size() == b.batches.size());
    for (size_t i = 0; i < a.batches.size(); ++i) {
      REQUIRE(a.batches[i].entries.size() == b.batches[i].entries.size());
      for (size_t j = 0; j < a.batches[i].entries.size(); ++j) {
        const auto& x = a.batches[i].entries[j];
        const auto& y = b.batches[i].entries[j];
        REQUIRE(x.request_id == y.request_id);
        REQUIRE(x.phase == y.phase);
        REQUIRE(x.token_span == y.token_span);
      }
    }
  }
}

TEST_CASE("thinker oracle is pure and bounded") {
  std::mt19937 rng(505);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<uint8_t> prompt(rng() % 32 + 1);
    for (auto& t : prompt) t = static_cast<uint8_t>(rng() % 255 + 1);
    uint32_t seed = rng();
    auto a = ref::thinker_generate(prompt, seed);
    auto b = ref::thinker_generate(prompt, seed);
    REQUIRE(a.text_tokens == b.text_tokens);
    REQUIRE(a.text_tokens.size() >= 1);
    REQUIRE(a.text_tokens.size() <= 64);
    for (int32_t t : a.text_tokens) {
      REQUIRE(t >= 1);
      REQUIRE(t <= 255);
    }
    auto codec = ref::talker_generate(a);
    REQUIRE(codec.size() == 4 * a.text_tokens.size());
    for (int32_t c : codec) {
      REQUIRE(c >= 0);
      REQUIRE(c <= 63);
    }
  }
}

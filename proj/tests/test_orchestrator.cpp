#include <catch2/catch_amalgamated.hpp>

#include "omniserve/config.hpp"
#include "omniserve/orchestrator.hpp"
#include "omniserve/reference_pipeline.hpp"

using namespace omni;

namespace {

FunctionRegistry& reg() {
  static FunctionRegistry r = [] {
    FunctionRegistry f;
    ref::register_reference_pipeline(f);
    return f;
  }();
  return r;
}

DeploymentPlan reference_plan(const std::string& server_id) {
  auto plan = load_plan(std::string(OMNI_CONFIG_DIR) + "/reference.json");
  plan.server_id = server_id;
  return plan;
}

Request make_request(uint64_t rid, std::vector<uint8_t> prompt, uint32_t seed,
                     bool stream = true) {
  Request r;
  r.request_id = rid;
  r.prompt_tokens = std::move(prompt);
  r.seed = seed;
  r.stream = stream;
  return r;
}

}  // namespace

TEST_CASE("single request end to end matches the sequential oracle") {
  auto plan = reference_plan("orc1");
  Orchestrator orch(plan, &reg());
  orch.start();
  Request req = make_request(1, {1, 2, 3}, 5);
  auto h = orch.submit_at(req, 0);
  orch.run_until_drained();
  const auto& out = h->wait();
  REQUIRE(out.status == "DONE");

  VirtualClock oc;
  auto expect = ref::monolithic_oracle(req, plan.engines, oc);
  CHECK(out.text_tokens == expect.text_tokens);
  CHECK(out.codec_tokens == expect.codec_tokens);
  CHECK(out.waveform == expect.waveform);
  CHECK(out.codec_tokens.size() == 4 * out.text_tokens.size());
  CHECK(out.waveform.size() == 16 * out.codec_tokens.size());
  orch.shutdown(true);
}

TEST_CASE("talker codec tokens follow the stated formula") {
  // prompt [1] seed 0: thinker emits L=3 tokens; codec token 4j+i =
  // (t_j*7 + sum(H_j) + i) mod 64.
  auto plan = reference_plan("orc2");
  Orchestrator orch(plan, &reg());
  orch.start();
  auto h = orch.submit_at(make_request(1, {1}, 0), 0);
  orch.run_until_drained();
  const auto& out = h->wait();
  REQUIRE(out.status == "DONE");

  std::vector<uint8_t> one{1};
  auto th = ref::thinker_generate(one, 0);
  REQUIRE(out.text_tokens == th.text_tokens);
  for (size_t j = 0; j < th.text_tokens.size(); ++j) {
    int sum = th.hidden[j].component_sum();
    for (int i = 0; i < 4; ++i) {
      int32_t expect = (th.text_tokens[j] * 7 + sum + i) % 64;
      CHECK(out.codec_tokens[4 * j + i] == expect);
    }
  }
  orch.shutdown(true);
}

TEST_CASE("non-streaming requests produce identical bytes") {
  auto plan = reference_plan("orc3");
  Orchestrator orch(plan, &reg());
  orch.start();
  auto hs = orch.submit_at(make_request(1, {9, 9, 9}, 11, true), 0);
  auto hf = orch.submit_at(make_request(2, {9, 9, 9}, 11, false), 0);
  orch.run_until_drained();
  const auto& a = hs->wait();
  const auto& b = hf->wait();
  REQUIRE(a.status == "DONE");
  REQUIRE(b.status == "DONE");
  CHECK(a.text_tokens == b.text_tokens);
  CHECK(a.codec_tokens == b.codec_tokens);
  CHECK(a.waveform == b.waveform);
  orch.shutdown(true);
}

TEST_CASE("streaming requests surface waveform chunks before completion") {
  auto plan = reference_plan("orc4");
  Orchestrator orch(plan, &reg());
  orch.start();
  auto h = orch.submit_at(make_request(1, {1, 2, 3, 4}, 3, true), 0);
  orch.run_until_drained();
  size_t chunks = 0;
  std::vector<int32_t> assembled;
  while (auto c = h->next_chunk()) {
    auto part = c->payload.as_i32();
    assembled.insert(assembled.end(), part.begin(), part.end());
    chunks++;
  }
  const auto& out = h->wait();
  REQUIRE(out.status == "DONE");
  CHECK(chunks >= 2);  // chunked, not one blob
  CHECK(assembled == out.waveform);
  orch.shutdown(true);
}

TEST_CASE("per-stage metrics show overlap between talker and vocoder") {
  auto plan = reference_plan("orc5");
  Orchestrator orch(plan, &reg());
  orch.start();
  auto h = orch.submit_at(make_request(1, {50, 60, 70, 80}, 21, true), 0);
  orch.run_until_drained();
  REQUIRE(h->wait().status == "DONE");
  auto rec = orch.metrics().record(1);
  // First vocoder job is scheduled before the talker finishes.
  CHECK(rec.stages.at("vocoder").first_scheduled_at <
        rec.stages.at("talker").finished_at);
  // And the thinker overlaps the talker the same way.
  CHECK(rec.stages.at("talker").first_scheduled_at <
        rec.stages.at("thinker").finished_at);
  orch.shutdown(true);
}

TEST_CASE("many concurrent requests all finish correctly") {
  auto plan = reference_plan("orc6");
  Orchestrator orch(plan, &reg());
  orch.start();
  std::vector<std::shared_ptr<ResultHandle>> hs;
  std::vector<Request> reqs;
  for (uint64_t i = 1; i <= 24; ++i) {
    auto r = make_request(i, {uint8_t(i), uint8_t(i + 1)}, uint32_t(i * 13),
                          i % 2 == 0);
    reqs.push_back(r);
    hs.push_back(orch.submit_at(r, 0));
  }
  orch.run_until_drained();
  for (size_t i = 0; i < hs.size(); ++i) {
    const auto& out = hs[i]->wait();
    REQUIRE(out.status == "DONE");
    VirtualClock oc;
    auto expect = ref::monolithic_oracle(reqs[i], plan.engines, oc);
    CHECK(out.text_tokens == expect.text_tokens);
    CHECK(out.codec_tokens == expect.codec_tokens);
    CHECK(out.waveform == expect.waveform);
  }
  orch.shutdown(true);
}

TEST_CASE("missing engine config is a startup error naming the stage") {
  auto plan = reference_plan("orc7");
  plan.engines.erase("talker");
  Orchestrator orch(plan, &reg());
  try {
    orch.start();
    FAIL("expected ConfigInvalid");
  } catch (const ConfigInvalid& e) {
    CHECK(std::string(e.what()).find("talker") != std::string::npos);
  }
}

TEST_CASE("invalid graph is rejected at startup") {
  auto plan = reference_plan("orc8");
  plan.graph.edges.push_back({"talker", "thinker", "Thinker2Talker",
                              EdgeMode::FULL, TransportKind::INPROC, 4});
  Orchestrator orch(plan, &reg());
  CHECK_THROWS_AS(orch.start(), ConfigInvalid);
}

TEST_CASE("duplicate tcp endpoints are rejected at startup") {
  auto plan = reference_plan("orc9");
  TransportConfig tc;
  tc.kind = TransportKind::TCP;
  tc.tcp_endpoint = "127.0.0.1:19431";
  plan.transports["thinker->talker"] = tc;
  plan.transports["talker->vocoder"] = tc;
  Orchestrator orch(plan, &reg());
  CHECK_THROWS_AS(orch.start(), PortInUse);
}

TEST_CASE("submit rejects empty prompts and over-budget prompts") {
  auto plan = reference_plan("orc10");
  Orchestrator orch(plan, &reg());
  orch.start();
  orch.serve_async();
  CHECK_THROWS_AS(orch.submit(make_request(1, {}, 0)), Rejected);
  std::vector<uint8_t> huge(9000, 1);
  CHECK_THROWS_AS(orch.submit(make_request(2, huge, 0)), Rejected);
  orch.shutdown(true);
}

TEST_CASE("admission cap overload") {
  auto plan = reference_plan("orc11");
  plan.server.admission_cap = 1;
  Orchestrator orch(plan, &reg());
  orch.start();
  auto h = orch.submit(make_request(1, {1}, 0));
  CHECK_THROWS_AS(orch.submit(make_request(2, {1}, 0)), Overloaded);
  orch.run_until_drained();
  CHECK(h->wait().status == "DONE");
  orch.shutdown(true);
}

TEST_CASE("shutdown without drain fails in-flight requests") {
  auto plan = reference_plan("orc12");
  Orchestrator orch(plan, &reg());
  orch.start();
  auto h = orch.submit_at(make_request(1, {1, 2}, 0), 0);
  auto report = orch.shutdown(false);
  CHECK(report.aborted == 0);  // still queued, not yet in flight
  CHECK(h->wait().status == "FAILED");
}

TEST_CASE("two-stage ar-to-diffusion graph runs end to end") {
  auto plan = load_plan(std::string(OMNI_CONFIG_DIR) + "/ar_dit.json");
  plan.server_id = "orc13";
  Orchestrator orch(plan, &reg());
  orch.start();
  auto h = orch.submit_at(make_request(1, {4, 5}, 9, true), 0);
  orch.run_until_drained();
  const auto& out = h->wait();
  REQUIRE(out.status == "DONE");
  std::vector<uint8_t> prompt{4, 5};
  auto th = ref::thinker_generate(prompt, 9);
  CHECK(out.text_tokens == th.text_tokens);
  CHECK(out.waveform == ref::vocoder_decode(th.text_tokens, 16));
  orch.shutdown(true);
}

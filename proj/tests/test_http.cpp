#include <catch2/catch_amalgamated.hpp>

#include <sstream>
#include <thread>

#include "omniserve/config.hpp"
#include "omniserve/http_service.hpp"
#include "omniserve/reference_pipeline.hpp"

using namespace omni;
using nlohmann::json;

namespace {

FunctionRegistry& reg() {
  static FunctionRegistry r = [] {
    FunctionRegistry f;
    ref::register_reference_pipeline(f);
    return f;
  }();
  return r;
}

std::vector<int32_t> b64_to_i32(const std::string& b64) {
  static const std::string tbl =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::vector<uint8_t> bytes;
  uint32_t acc = 0;
  int bits = 0;
  for (char c : b64) {
    if (c == '=') break;
    acc = (acc << 6) | static_cast<uint32_t>(tbl.find(c));
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      bytes.push_back((acc >> bits) & 0xff);
    }
  }
  std::vector<int32_t> out(bytes.size() / 4);
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<int32_t>(
        uint32_t(bytes[4 * i]) | (uint32_t(bytes[4 * i + 1]) << 8) |
        (uint32_t(bytes[4 * i + 2]) << 16) | (uint32_t(bytes[4 * i + 3]) << 24));
  return out;
}

struct LiveServer {
  Orchestrator orch;
  HttpService svc;
  std::thread th;
  int port;

  LiveServer(DeploymentPlan plan, int port_)
      : orch(std::move(plan), &reg()), svc(orch), port(port_) {
    orch.start();
    orch.serve_async();
    th = std::thread([this] { svc.run("127.0.0.1:" + std::to_string(port)); });
    svc.wait_until_ready();
  }
  ~LiveServer() {
    svc.stop();
    th.join();
    orch.shutdown(false);
  }
};

}  // namespace

TEST_CASE("http generate, health, metrics, and streaming") {
  auto plan = load_plan(std::string(OMNI_CONFIG_DIR) + "/reference.json");
  plan.server_id = "http1";
  LiveServer server(std::move(plan), 18095);
  httplib::Client cli("127.0.0.1", server.port);
  cli.set_read_timeout(30, 0);

  SECTION("health reports every stage") {
    auto res = cli.Get("/v1/health");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    auto h = json::parse(res->body);
    CHECK(h.at("thinker") == "UP");
    CHECK(h.at("talker") == "UP");
    CHECK(h.at("vocoder") == "UP");
  }

  SECTION("empty prompt is a 400") {
    auto res = cli.Post("/v1/generate", json{{"prompt_tokens", json::array()}}.dump(),
                        "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
  }

  SECTION("malformed body is a 400") {
    auto res = cli.Post("/v1/generate", "{not json", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
  }

  SECTION("non-streaming response matches the oracle") {
    json body{{"request_id", 501}, {"prompt_tokens", {1, 2, 3}}, {"seed", 5}};
    auto res = cli.Post("/v1/generate", body.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    auto j = json::parse(res->body);

    std::vector<uint8_t> prompt{1, 2, 3};
    auto th = ref::thinker_generate(prompt, 5);
    auto codec = ref::talker_generate(th);
    CHECK(j.at("text_tokens").get<std::vector<int32_t>>() == th.text_tokens);
    CHECK(j.at("codec_tokens").get<std::vector<int32_t>>() == codec);
    CHECK(b64_to_i32(j.at("waveform_b64")) == ref::vocoder_decode(codec, 16));
    CHECK(j.at("metrics").contains("jct_us"));
  }

  SECTION("streaming response is NDJSON ending in done") {
    json body{{"request_id", 502},
              {"prompt_tokens", {9, 8, 7}},
              {"seed", 1},
              {"stream", true}};
    auto res = cli.Post("/v1/generate", body.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);

    std::istringstream in(res->body);
    std::string line;
    std::vector<json> frames;
    while (std::getline(in, line))
      if (!line.empty()) frames.push_back(json::parse(line));
    REQUIRE(frames.size() >= 2);
    std::vector<int32_t> assembled;
    for (size_t i = 0; i + 1 < frames.size(); ++i) {
      REQUIRE(frames[i].at("type") == "waveform_chunk");
      REQUIRE(frames[i].at("seq") == i);
      auto part = b64_to_i32(frames[i].at("data_b64"));
      assembled.insert(assembled.end(), part.begin(), part.end());
    }
    CHECK(frames.back().at("type") == "done");
    CHECK(frames.back().contains("metrics"));

    std::vector<uint8_t> prompt{9, 8, 7};
    auto th = ref::thinker_generate(prompt, 1);
    CHECK(assembled == ref::vocoder_decode(ref::talker_generate(th), 16));
  }

  SECTION("aggregate metrics count completions") {
    json body{{"request_id", 503}, {"prompt_tokens", {4}}, {"seed", 2}};
    auto res = cli.Post("/v1/generate", body.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    auto m = cli.Get("/v1/metrics");
    REQUIRE(m);
    auto j = json::parse(m->body);
    CHECK(j.at("requests_done").get<uint64_t>() >= 1);
  }
}

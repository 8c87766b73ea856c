#pragma once

#include <atomic>
#include <memory>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "omniserve/orchestrator.hpp"

namespace omni {

namespace detail {

inline std::string base64_encode(const uint8_t* data, size_t len) {
  static const char tbl[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= len; i += 3) {
    uint32_t v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  if (i + 1 == len) {
    uint32_t v = data[i] << 16;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == len) {
    uint32_t v = (data[i] << 16) | (data[i + 1] << 8);
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

// Waveform samples as little-endian int32, then base64.
inline std::string waveform_b64(const std::vector<int32_t>& samples) {
  std::vector<uint8_t> bytes;
  bytes.reserve(samples.size() * 4);
  for (int32_t s : samples) {
    uint32_t u = static_cast<uint32_t>(s);
    bytes.push_back(u & 0xff);
    bytes.push_back((u >> 8) & 0xff);
    bytes.push_back((u >> 16) & 0xff);
    bytes.push_back((u >> 24) & 0xff);
  }
  return base64_encode(bytes.data(), bytes.size());
}

inline std::string payload_b64(const Payload& p) {
  return waveform_b64(p.as_i32());
}

inline nlohmann::json metrics_json(const MetricsRecord& rec) {
  nlohmann::json m;
  m["request_id"] = rec.request_id;
  m["submitted_at"] = rec.submitted_at;
  m["status"] = rec.status;
  m["text_tokens"] = rec.text_token_count;
  m["codec_tokens"] = rec.codec_token_count;
  m["waveform_samples"] = rec.waveform_sample_count;
  if (rec.status == "DONE") {
    m["jct_us"] = jct_us(rec);
    m["ttft_us"] = ttft_us(rec);
    if (rec.waveform_sample_count > 0) m["rtf"] = rtf(rec);
    nlohmann::json stage_tps = nlohmann::json::object();
    for (const auto& [stage, tim] : rec.stages) {
      if (tim.finished_at != kTimeUnset &&
          tim.finished_at > tim.first_scheduled_at && tim.tokens > 0)
        stage_tps[stage] = tps(rec, stage);
    }
    m["tps"] = std::move(stage_tps);
  }
  return m;
}

}  // namespace detail

/// HTTP front end: one server in front of the orchestrator, JSON bodies,
/// NDJSON for streamed waveforms.
class HttpService {
 public:
  explicit HttpService(Orchestrator& orch) : orch_(orch) { install_routes(); }

  /// Blocks serving `host:port` until stop() is called.
  bool run(const std::string& listen) {
    auto colon = listen.rfind(':');
    std::string host = colon == std::string::npos ? listen : listen.substr(0, colon);
    int port = colon == std::string::npos ? 8080 : std::stoi(listen.substr(colon + 1));
    if (!sv_.bind_to_port(host, port)) return false;
    bound_ = true;
    return sv_.listen_after_bind();
  }

  bool wait_until_ready(int timeout_ms = 2000) {
    for (int i = 0; i < timeout_ms / 10; ++i) {
      if (sv_.is_running()) return true;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    return sv_.is_running();
  }

  void stop() { sv_.stop(); }

 private:
  void install_routes() {
    sv_.Post("/v1/generate", [this](const httplib::Request& req,
                                    httplib::Response& res) {
      handle_generate(req, res);
    });
    sv_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json h = nlohmann::json::object();
      for (const auto& [stage, st] : orch_.health()) h[stage] = st;
      res.set_content(h.dump(), "application/json");
    });
    sv_.Get("/v1/metrics", [this](const httplib::Request&, httplib::Response& res) {
      uint64_t done = 0, failed = 0, total = 0;
      for (const auto& rec : orch_.metrics().all()) {
        total++;
        if (rec.status == "DONE") done++;
        if (rec.status == "FAILED") failed++;
      }
      nlohmann::json m{{"requests_seen", total},
                       {"requests_done", done},
                       {"requests_failed", failed}};
      res.set_content(m.dump(), "application/json");
    });
  }

  void handle_generate(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(),
                      "application/json");
      return;
    }
    Request r;
    r.request_id = body.value("request_id", next_id_.fetch_add(1));
    r.seed = body.value("seed", 0u);
    r.stream = body.value("stream", false);
    if (body.contains("prompt_tokens"))
      for (const auto& t : body.at("prompt_tokens"))
        r.prompt_tokens.push_back(static_cast<uint8_t>(t.get<int>()));
    if (r.prompt_tokens.empty()) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", "prompt_tokens must be non-empty"}}.dump(),
                      "application/json");
      return;
    }

    std::shared_ptr<ResultHandle> handle;
    try {
      handle = orch_.submit(std::move(r));
    } catch (const Overloaded& e) {
      res.status = 429;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      return;
    } catch (const OmniError& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      return;
    }

    if (!r.stream && !body.value("stream", false)) {
      const ref::FinalOutput& out = handle->wait();
      if (out.status != "DONE") {
        res.status = 500;
        res.set_content(nlohmann::json{{"error", out.error}}.dump(),
                        "application/json");
        return;
      }
      nlohmann::json j{{"text_tokens", out.text_tokens},
                       {"codec_tokens", out.codec_tokens},
                       {"waveform_b64", detail::waveform_b64(out.waveform)},
                       {"metrics", detail::metrics_json(out.metrics)}};
      res.set_content(j.dump(), "application/json");
      return;
    }

    res.set_chunked_content_provider(
        "application/x-ndjson",
        [handle](size_t, httplib::DataSink& sink) {
          while (auto c = handle->next_chunk()) {
            nlohmann::json line{{"type", "waveform_chunk"},
                                {"seq", c->seq},
                                {"data_b64", detail::payload_b64(c->payload)}};
            std::string s = line.dump() + "\n";
            if (!sink.write(s.data(), s.size())) return false;
          }
          const ref::FinalOutput& out = handle->wait();
          nlohmann::json last =
              out.status == "DONE"
                  ? nlohmann::json{{"type", "done"},
                                   {"metrics", detail::metrics_json(out.metrics)}}
                  : nlohmann::json{{"type", "error"}, {"error", out.error}};
          std::string s = last.dump() + "\n";
          if (!sink.write(s.data(), s.size())) return false;
          sink.done();
          return true;
        });
  }

  Orchestrator& orch_;
  httplib::Server sv_;
  std::atomic<uint64_t> next_id_{1};
  std::atomic<bool> bound_{false};
};

}  // namespace omni

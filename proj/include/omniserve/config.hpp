#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "omniserve/orchestrator.hpp"

namespace omni {

namespace detail {

using nlohmann::json;

inline void expect_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigInvalid(where + ": expected an object");
}

// Strict mode: any key outside the schema is a configuration error.
inline void expect_keys(const json& j, std::initializer_list<const char*> allowed,
                        const std::string& where) {
  expect_object(j, where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) { ok = true; break; }
    if (!ok) throw ConfigInvalid(where + ": unknown key \"" + it.key() + "\"");
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigInvalid(std::string("bad value for \"") + key + "\": " + e.what());
  }
}

template <typename T>
T require(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigInvalid(where + ": missing key \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigInvalid(where + ": bad value for \"" + key + "\": " + e.what());
  }
}

inline StageKind parse_stage_kind(const std::string& s) {
  if (s == "ar") return StageKind::AR;
  if (s == "diffusion") return StageKind::DIFFUSION;
  throw ConfigInvalid("unknown stage kind \"" + s + "\" (want ar|diffusion)");
}

inline EdgeMode parse_edge_mode(const std::string& s) {
  if (s == "full") return EdgeMode::FULL;
  if (s == "streaming") return EdgeMode::STREAMING;
  throw ConfigInvalid("unknown edge mode \"" + s + "\" (want full|streaming)");
}

inline TransportKind parse_transport_kind(const std::string& s) {
  if (s == "inproc") return TransportKind::INPROC;
  if (s == "shm") return TransportKind::SHM;
  if (s == "tcp") return TransportKind::TCP;
  throw ConfigInvalid("unknown transport \"" + s + "\" (want inproc|shm|tcp)");
}

}  // namespace detail

inline DeploymentPlan parse_plan(const nlohmann::json& doc) {
  using detail::expect_keys;
  using detail::get_or;
  using detail::require;
  using nlohmann::json;

  expect_keys(doc, {"graph", "engines", "transports", "server", "clock"}, "config");
  DeploymentPlan plan;

  const json& g = doc.contains("graph") ? doc.at("graph") : json::object();
  expect_keys(g, {"nodes", "edges", "entry", "exits"}, "graph");
  for (const json& n : get_or(g, "nodes", json::array())) {
    expect_keys(n, {"id", "kind", "engine", "preprocess", "forward"}, "graph.nodes[]");
    StageNode node;
    node.id = require<std::string>(n, "id", "graph.nodes[]");
    node.kind = detail::parse_stage_kind(
        get_or<std::string>(n, "kind", "ar"));
    node.engine_config_ref = get_or<std::string>(n, "engine", node.id);
    node.preprocess_ref = get_or<std::string>(n, "preprocess", "");
    node.forward_ref = get_or<std::string>(n, "forward", "");
    plan.graph.nodes.push_back(std::move(node));
  }
  for (const json& e : get_or(g, "edges", json::array())) {
    expect_keys(e, {"from", "to", "transfer", "mode", "transport", "chunk_size"},
                "graph.edges[]");
    TransferEdge edge;
    edge.from = require<std::string>(e, "from", "graph.edges[]");
    edge.to = require<std::string>(e, "to", "graph.edges[]");
    edge.transfer_ref = get_or<std::string>(e, "transfer", "");
    edge.mode = detail::parse_edge_mode(get_or<std::string>(e, "mode", "full"));
    edge.transport =
        detail::parse_transport_kind(get_or<std::string>(e, "transport", "inproc"));
    edge.streaming_chunk_size = get_or<uint32_t>(e, "chunk_size", 4);
    plan.graph.edges.push_back(std::move(edge));
  }
  plan.graph.entry = get_or<std::string>(g, "entry", "");
  for (const json& x : get_or(g, "exits", json::array()))
    plan.graph.exits.push_back(x.get<std::string>());

  const json& engines = get_or(doc, "engines", json::object());
  detail::expect_object(engines, "engines");
  for (auto it = engines.begin(); it != engines.end(); ++it) {
    const json& c = it.value();
    expect_keys(c,
                {"max_batch_tokens", "max_resident_requests", "kv_budget_tokens",
                 "workers", "prefill_chunk", "step_latency_us"},
                "engines." + it.key());
    EngineConfig cfg;
    cfg.stage = it.key();
    cfg.max_batch_tokens = get_or<uint32_t>(c, "max_batch_tokens", cfg.max_batch_tokens);
    cfg.max_resident_requests =
        get_or<uint32_t>(c, "max_resident_requests", cfg.max_resident_requests);
    cfg.kv_budget_tokens = get_or<uint64_t>(c, "kv_budget_tokens", cfg.kv_budget_tokens);
    cfg.workers = get_or<uint32_t>(c, "workers", cfg.workers);
    cfg.prefill_chunk = get_or<uint32_t>(c, "prefill_chunk", cfg.prefill_chunk);
    cfg.step_latency_us = get_or<uint64_t>(c, "step_latency_us", cfg.step_latency_us);
    plan.engines[it.key()] = cfg;
  }

  const json& transports = get_or(doc, "transports", json::object());
  detail::expect_object(transports, "transports");
  for (auto it = transports.begin(); it != transports.end(); ++it) {
    const json& c = it.value();
    expect_keys(c,
                {"kind", "inline_threshold", "shm_region_bytes", "tcp_endpoint",
                 "shm_name", "timeout_ms"},
                "transports." + it.key());
    TransportConfig tc;
    tc.kind = detail::parse_transport_kind(get_or<std::string>(c, "kind", "inproc"));
    tc.inline_threshold = get_or<uint64_t>(c, "inline_threshold", tc.inline_threshold);
    tc.shm_region_bytes = get_or<uint64_t>(c, "shm_region_bytes", tc.shm_region_bytes);
    tc.tcp_endpoint = get_or<std::string>(c, "tcp_endpoint", tc.tcp_endpoint);
    tc.shm_name = get_or<std::string>(c, "shm_name", tc.shm_name);
    tc.default_timeout_ms = get_or<uint64_t>(c, "timeout_ms", tc.default_timeout_ms);
    plan.transports[it.key()] = tc;
  }

  const json& server = get_or(doc, "server", json::object());
  expect_keys(server, {"listen", "admission_cap"}, "server");
  plan.server.listen = get_or<std::string>(server, "listen", plan.server.listen);
  plan.server.admission_cap =
      get_or<uint64_t>(server, "admission_cap", plan.server.admission_cap);

  if (doc.contains("clock")) {
    plan.clock_kind = doc.at("clock").get<std::string>();
    if (plan.clock_kind != "virtual" && plan.clock_kind != "wall")
      throw ConfigInvalid("clock must be \"virtual\" or \"wall\"");
  }
  return plan;
}

/// Loads and parses a deployment config. JSON syntax errors surface as
/// nlohmann parse exceptions; schema errors as ConfigInvalid.
inline DeploymentPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot read config file: " + path);
  nlohmann::json doc = nlohmann::json::parse(in);  // may throw parse_error
  return parse_plan(doc);
}

}  // namespace omni

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omniserve/connector.hpp"
#include "omniserve/context.hpp"
#include "omniserve/graph.hpp"
#include "omniserve/payload.hpp"

namespace omni {

enum class Phase { PREFILL, DECODE, FINISHED };

struct EngineConfig {
  StageId stage;
  uint64_t max_batch_tokens = 256;
  uint64_t max_resident_requests = 64;
  uint64_t kv_budget_tokens = 4096;
  uint64_t workers = 1;
  uint64_t prefill_chunk = 64;
  uint64_t step_latency_us = 1000;

  void check() const {
    if (max_batch_tokens < 1 || max_resident_requests < 1 ||
        kv_budget_tokens < 1 || workers < 1 || prefill_chunk < 1)
      throw ConfigInvalid("engine config fields must be >= 1 (stage " + stage + ")");
    if (prefill_chunk > max_batch_tokens)
      throw ConfigInvalid("prefill_chunk exceeds max_batch_tokens (stage " +
                          stage + ")");
  }
};

// Simulated iteration cost on the clock.
inline uint64_t iteration_cost_us(uint64_t tokens, const EngineConfig& cfg) {
  return (tokens * cfg.step_latency_us + cfg.workers - 1) / cfg.workers;
}

struct SeqState {
  uint64_t request_id = 0;
  Phase phase = Phase::PREFILL;
  std::vector<uint8_t> prompt;
  bool prompt_complete = true;  // false while the prompt still streams in
  size_t consumed_prompt = 0;
  std::vector<int32_t> emitted;
  std::vector<HiddenState> hidden;  // parallel to emitted when the model has them
  uint32_t rng_state = 0;
  size_t target_len = 0;  // 0 = not yet known
};

struct IterationEntry {
  uint64_t request_id = 0;
  Phase phase = Phase::PREFILL;
  uint32_t token_span = 0;
};

struct IterationBatch {
  std::vector<IterationEntry> entries;

  uint64_t total_tokens() const {
    uint64_t n = 0;
    for (const auto& e : entries) n += e.token_span;
    return n;
  }
};

struct DecodeStep {
  int32_t token = 0;
  HiddenState hidden{};
  bool has_hidden = false;
};

/// Step-centric model hooks an AR stage registers under its forward_ref.
struct StageModel {
  // Folds a prefill span into the sequence state.
  std::function<void(RequestContext&, SeqState&, std::span<const uint8_t>)> prefill;
  // Runs once the whole prompt is consumed; must set target_len >= 1.
  std::function<void(RequestContext&, SeqState&)> on_prompt_consumed;
  // Produces exactly one output token.
  std::function<DecodeStep(RequestContext&, SeqState&)> decode;
  // Packs emitted tokens [begin, end) into a chunk payload for this stage's
  // outbound edges.
  std::function<Payload(const SeqState&, size_t, size_t)> pack_chunk;
};

enum class PreprocessStatus { READY, STALL };

// Invoked every iteration before forward; pulls upstream stream data into the
// context/sequence. STALL means the request skips this iteration.
using PreprocessFn =
    std::function<PreprocessStatus(RequestContext&, SeqState&, StreamReceiver*)>;

struct ArSubmission {
  uint64_t request_id = 0;
  std::vector<uint8_t> prompt;
  bool prompt_streams = false;  // prompt arrives via the upstream edge
  uint32_t seed = 0;
};

struct DiffusionWiring {
  uint32_t steps = 4;
  uint32_t samples_per_token = 16;
};

/// What a transfer function sees when an edge fires. FULL edges fire once at
/// upstream finish with the packed final payload; STREAMING edges fire once
/// at wiring time with no payload.
struct TransferEnv {
  RequestContext& ctx;
  const TransferEdge& edge;
  const Request& request;
  std::optional<Payload> upstream_final;

  std::function<void(ArSubmission)> submit_ar;
  std::function<void(DiffusionWiring)> wire_diffusion;
};

using TransferFn = std::function<void(TransferEnv&)>;

class FunctionRegistry final : public FunctionResolver {
 public:
  void register_forward(const std::string& name, StageModel m) {
    forwards_[name] = std::move(m);
  }
  void register_preprocess(const std::string& name, PreprocessFn f) {
    preprocess_[name] = std::move(f);
  }
  void register_transfer(const std::string& name, TransferFn f) {
    transfers_[name] = std::move(f);
  }

  bool has_forward(const std::string& name) const override {
    return forwards_.count(name) != 0;
  }
  bool has_preprocess(const std::string& name) const override {
    return preprocess_.count(name) != 0;
  }
  bool has_transfer(const std::string& name) const override {
    return transfers_.count(name) != 0;
  }

  const StageModel& forward(const std::string& name) const {
    auto it = forwards_.find(name);
    if (it == forwards_.end()) throw ConfigInvalid("unknown forward: " + name);
    return it->second;
  }
  const PreprocessFn& preprocess(const std::string& name) const {
    auto it = preprocess_.find(name);
    if (it == preprocess_.end())
      throw ConfigInvalid("unknown preprocess: " + name);
    return it->second;
  }
  const TransferFn& transfer(const std::string& name) const {
    auto it = transfers_.find(name);
    if (it == transfers_.end()) throw ConfigInvalid("unknown transfer: " + name);
    return it->second;
  }

 private:
  std::map<std::string, StageModel> forwards_;
  std::map<std::string, PreprocessFn> preprocess_;
  std::map<std::string, TransferFn> transfers_;
};

}  // namespace omni

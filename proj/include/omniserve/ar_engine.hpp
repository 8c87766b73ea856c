#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "omniserve/clock.hpp"
#include "omniserve/connector.hpp"
#include "omniserve/context.hpp"
#include "omniserve/errors.hpp"
#include "omniserve/metrics.hpp"
#include "omniserve/registry.hpp"

namespace omni {

/// Where a request's emitted tokens go. STREAMING plans cut chunks as token
/// counts cross multiples of chunk_size; FULL plans send one chunk at finish.
struct EmitPlan {
  std::string edge_key;
  EdgeMode mode = EdgeMode::FULL;
  uint32_t chunk_size = 0;
  StreamSender sender;
  size_t sent_tokens = 0;
  uint32_t next_seq = 0;
};

struct ArAdmission {
  ArSubmission sub;
  std::shared_ptr<RequestContext> ctx;
  std::optional<StreamReceiver> upstream;
  std::vector<EmitPlan> emits;
};

struct StepReport {
  IterationBatch batch;
  uint64_t cost_us = 0;
  std::vector<uint64_t> finished;
  std::vector<std::pair<uint64_t, std::string>> failed;
  uint64_t chunks_emitted = 0;
};

/// Continuous-batching autoregressive engine. Iterations are two-phase so a
/// discrete-event loop can interleave engines: begin_iteration() schedules
/// and runs the forward work at the current instant, complete_iteration()
/// publishes its outputs at the instant the simulated cost has elapsed.
class ArEngine {
 public:
  ArEngine(StageId stage, EngineConfig cfg, StageModel model,
           PreprocessFn preprocess = nullptr, MetricsCollector* metrics = nullptr)
      : stage_(std::move(stage)),
        cfg_(std::move(cfg)),
        model_(std::move(model)),
        preprocess_(std::move(preprocess)),
        metrics_(metrics) {
    cfg_.check();
  }

  const StageId& stage() const { return stage_; }
  const EngineConfig& config() const { return cfg_; }

  void admit(ArAdmission a) {
    if (a.sub.prompt_streams == false &&
        a.sub.prompt.size() > cfg_.kv_budget_tokens)
      throw RejectedTooLarge("prompt of " + std::to_string(a.sub.prompt.size()) +
                             " tokens exceeds kv budget " +
                             std::to_string(cfg_.kv_budget_tokens) + " on stage " +
                             stage_);
    waiting_.push_back(std::move(a));
  }

  bool has_work() const { return !waiting_.empty() || !residents_.empty(); }
  bool computing() const { return computing_; }
  uint64_t end_time() const { return end_time_; }
  size_t resident_count() const { return residents_.size(); }
  size_t waiting_count() const { return waiting_.size(); }

  uint64_t resident_tokens() const {
    uint64_t n = 0;
    for (const auto& r : residents_)
      n += r.seq.prompt.size() + r.seq.emitted.size();
    return n;
  }

  /// Tries to start one iteration at `now`. Returns false when nothing can
  /// run (no admissible work, or every resident is stalled).
  bool begin_iteration(uint64_t now) {
    if (computing_) throw OmniError("begin_iteration while computing");
    admit_waiting();
    run_preprocess();
    pending_ = StepReport{};
    pending_.batch = schedule_iteration();
    // If decode-ready requests are blocked purely by the kv budget, preempt
    // the youngest recomputable resident (recompute-style: its state replays
    // from the seed) and retry, so the oldest request can always finish.
    while (pending_.batch.entries.empty() && decode_blocked_by_budget() &&
           preempt_youngest()) {
      admit_waiting();
      pending_.batch = schedule_iteration();
    }
    if (pending_.batch.entries.empty() && pending_failures_.empty()) return false;
    if (metrics_) {
      for (const auto& e : pending_.batch.entries)
        metrics_->on_stage_scheduled(e.request_id, stage_, now);
    }
    run_batch();
    pending_.cost_us = pending_.batch.total_tokens() > 0
                           ? iteration_cost_us(pending_.batch.total_tokens(), cfg_)
                           : 0;
    computing_ = true;
    end_time_ = now + pending_.cost_us;
    return true;
  }

  /// Publishes the iteration's outputs (chunks, evictions, metrics) at `now`
  /// — the iteration's completion instant.
  StepReport complete_iteration(uint64_t now) {
    if (!computing_) throw OmniError("complete_iteration while idle");
    computing_ = false;
    for (const auto& e : pending_.batch.entries) {
      Resident* r = find_resident(e.request_id);
      if (!r) continue;  // failed during run
      if (metrics_ && e.phase == Phase::DECODE)
        metrics_->on_stage_tokens(e.request_id, stage_, e.token_span, now);
      pending_.chunks_emitted += emit_output(*r);
    }
    // Evict finished requests, budget released with them.
    for (auto it = residents_.begin(); it != residents_.end();) {
      if (it->seq.phase == Phase::FINISHED) {
        if (metrics_) metrics_->on_stage_finished(it->seq.request_id, stage_, now);
        pending_.finished.push_back(it->seq.request_id);
        finished_seqs_.emplace(it->seq.request_id, std::move(it->seq));
        it = residents_.erase(it);
      } else {
        ++it;
      }
    }
    for (auto& f : pending_failures_) pending_.failed.push_back(std::move(f));
    pending_failures_.clear();
    return std::move(pending_);
  }

  // Deterministic policy: decode residents first (request id ascending, span
  // 1), then prefill residents in admission order capped by chunk and budget.
  IterationBatch schedule_iteration() const {
    IterationBatch batch;
    uint64_t budget = cfg_.max_batch_tokens;
    uint64_t kv_headroom = cfg_.kv_budget_tokens > resident_tokens()
                               ? cfg_.kv_budget_tokens - resident_tokens()
                               : 0;
    std::vector<const Resident*> decoders;
    for (const auto& r : residents_)
      if (r.seq.phase == Phase::DECODE && !r.stalled) decoders.push_back(&r);
    std::sort(decoders.begin(), decoders.end(),
              [](const Resident* a, const Resident* b) {
                return a->seq.request_id < b->seq.request_id;
              });
    bool evictable = false;
    if (residents_.size() > 1)
      for (const auto& r : residents_)
        if (!r.prompt_streams) { evictable = true; break; }
    for (const Resident* r : decoders) {
      if (budget == 0) break;
      // A sole resident may overrun the kv budget: with nothing to evict the
      // only alternative is deadlock. The same applies when every resident
      // has a streamed prompt (nothing can be recomputed after eviction); in
      // that case only the oldest decoder proceeds, keeping the overrun
      // minimal while guaranteeing progress.
      if (kv_headroom == 0 && residents_.size() > 1) {
        if (evictable) break;
        if (!batch.entries.empty()) break;
      }
      batch.entries.push_back({r->seq.request_id, Phase::DECODE, 1});
      budget -= 1;
      if (kv_headroom > 0) kv_headroom -= 1;
    }
    for (const auto& r : residents_) {
      if (r.seq.phase != Phase::PREFILL || r.stalled) continue;
      if (budget == 0) break;
      uint64_t remaining_prompt = r.seq.prompt.size() - r.seq.consumed_prompt;
      uint64_t span = std::min({cfg_.prefill_chunk, remaining_prompt, budget});
      if (span == 0) continue;
      batch.entries.push_back(
          {r.seq.request_id, Phase::PREFILL, static_cast<uint32_t>(span)});
      budget -= span;
    }
    return batch;
  }

  /// Sequence state of a finished request (kept until collected).
  const SeqState* finished_seq(uint64_t rid) const {
    auto it = finished_seqs_.find(rid);
    return it == finished_seqs_.end() ? nullptr : &it->second;
  }
  void drop_finished(uint64_t rid) { finished_seqs_.erase(rid); }

  /// Aborts everything resident or queued (non-drain shutdown).
  std::vector<uint64_t> abort_all() {
    std::vector<uint64_t> ids;
    for (auto& r : residents_) ids.push_back(r.seq.request_id);
    for (auto& w : waiting_) ids.push_back(w.sub.request_id);
    residents_.clear();
    waiting_.clear();
    return ids;
  }

 private:
  struct Resident {
    SeqState seq;
    std::shared_ptr<RequestContext> ctx;
    std::optional<StreamReceiver> upstream;
    std::vector<EmitPlan> emits;
    uint32_t seed = 0;
    bool prompt_streams = false;
    bool stalled = false;
  };

  bool decode_blocked_by_budget() const {
    if (resident_tokens() < cfg_.kv_budget_tokens) return false;
    for (const auto& r : residents_)
      if (r.seq.phase == Phase::DECODE && !r.stalled) return true;
    return false;
  }

  // Recompute preemption: the youngest fixed-prompt resident goes back to
  // the head of the waiting queue with its progress reset; the mock models
  // are pure so replay reproduces identical tokens and the emit plans keep
  // their positions.
  bool preempt_youngest() {
    for (auto it = residents_.rbegin(); it != residents_.rend(); ++it) {
      if (it->prompt_streams) continue;
      if (residents_.size() <= 1) return false;
      Resident r = std::move(*it);
      residents_.erase(std::next(it).base());
      r.seq.consumed_prompt = 0;
      r.seq.emitted.clear();
      r.seq.hidden.clear();
      r.seq.rng_state = r.seed;
      r.seq.phase = Phase::PREFILL;
      r.seq.target_len = 0;
      ArAdmission a;
      a.sub.request_id = r.seq.request_id;
      a.sub.prompt = std::move(r.seq.prompt);
      a.sub.prompt_streams = false;
      a.sub.seed = r.seed;
      a.ctx = std::move(r.ctx);
      a.upstream = std::move(r.upstream);
      a.emits = std::move(r.emits);
      waiting_.push_front(std::move(a));
      return true;
    }
    return false;
  }

  Resident* find_resident(uint64_t rid) {
    for (auto& r : residents_)
      if (r.seq.request_id == rid) return &r;
    return nullptr;
  }

  void admit_waiting() {
    // Strict FIFO: a request that does not fit blocks those behind it.
    while (!waiting_.empty()) {
      auto& a = waiting_.front();
      if (residents_.size() >= cfg_.max_resident_requests) break;
      // The watermark keeps a decode reserve once anyone is resident;
      // without it a preempted request is re-admitted the same instant it
      // was evicted and the engine livelocks.
      uint64_t watermark =
          residents_.empty() ? 0 : cfg_.kv_budget_tokens / 16 + 1;
      if (resident_tokens() + a.sub.prompt.size() + watermark >
          cfg_.kv_budget_tokens)
        break;
      Resident r;
      r.seq.request_id = a.sub.request_id;
      r.seq.prompt = std::move(a.sub.prompt);
      r.seq.prompt_complete = !a.sub.prompt_streams;
      r.seq.rng_state = a.sub.seed;
      r.seed = a.sub.seed;
      r.prompt_streams = a.sub.prompt_streams;
      r.ctx = std::move(a.ctx);
      r.upstream = std::move(a.upstream);
      r.emits = std::move(a.emits);
      residents_.push_back(std::move(r));
      waiting_.pop_front();
    }
  }

  void run_preprocess() {
    for (auto& r : residents_) {
      r.stalled = false;
      if (!preprocess_) continue;
      try {
        auto status = preprocess_(*r.ctx, r.seq,
                                  r.upstream ? &*r.upstream : nullptr);
        r.stalled = (status == PreprocessStatus::STALL);
      } catch (const OmniError& e) {
        fail_request(r.seq.request_id, e.what());
      }
    }
    prune_failed();
  }

  void run_batch() {
    for (const auto& e : pending_.batch.entries) {
      Resident* r = find_resident(e.request_id);
      if (!r) continue;
      try {
        if (e.phase == Phase::PREFILL) {
          std::span<const uint8_t> span(r->seq.prompt.data() + r->seq.consumed_prompt,
                                        e.token_span);
          if (model_.prefill) model_.prefill(*r->ctx, r->seq, span);
          r->seq.consumed_prompt += e.token_span;
          if (r->seq.prompt_complete &&
              r->seq.consumed_prompt == r->seq.prompt.size()) {
            model_.on_prompt_consumed(*r->ctx, r->seq);
            if (r->seq.target_len < 1)
              throw ForwardError("model set target_len < 1");
            r->seq.phase = Phase::DECODE;
          }
        } else {
          DecodeStep step = model_.decode(*r->ctx, r->seq);
          r->seq.emitted.push_back(step.token);
          if (step.has_hidden) r->seq.hidden.push_back(step.hidden);
          if (r->seq.emitted.size() == r->seq.target_len)
            r->seq.phase = Phase::FINISHED;
        }
      } catch (const OmniError& err) {
        fail_request(e.request_id, err.what());
      }
    }
    prune_failed();
  }

  size_t emit_output(Resident& r) {
    size_t emitted = 0;
    for (auto& plan : r.emits) {
      if (!plan.sender.valid()) continue;
      if (plan.mode == EdgeMode::STREAMING) {
        while (r.seq.emitted.size() >= plan.sent_tokens + plan.chunk_size) {
          send_chunk(r, plan, plan.sent_tokens, plan.sent_tokens + plan.chunk_size,
                     false);
          plan.sent_tokens += plan.chunk_size;
          emitted++;
        }
        if (r.seq.phase == Phase::FINISHED) {
          if (plan.sent_tokens < r.seq.emitted.size()) {
            send_chunk(r, plan, plan.sent_tokens, r.seq.emitted.size(), false);
            plan.sent_tokens = r.seq.emitted.size();
            emitted++;
          }
          send_chunk(r, plan, plan.sent_tokens, plan.sent_tokens, true);
          emitted++;
        }
      } else if (r.seq.phase == Phase::FINISHED) {
        send_chunk(r, plan, 0, r.seq.emitted.size(), true);
        emitted++;
      }
    }
    return emitted;
  }

  void send_chunk(Resident& r, EmitPlan& plan, size_t begin, size_t end, bool eos) {
    StreamChunk c;
    c.request_id = r.seq.request_id;
    c.seq = plan.next_seq++;
    c.eos = eos;
    c.payload = model_.pack_chunk(r.seq, begin, end);
    plan.sender.send(c);
  }

  void fail_request(uint64_t rid, const std::string& why) {
    pending_failures_.emplace_back(rid, why);
  }

  void prune_failed() {
    for (const auto& [rid, why] : pending_failures_) {
      residents_.erase(std::remove_if(residents_.begin(), residents_.end(),
                                      [r = rid](const Resident& x) {
                                        return x.seq.request_id == r;
                                      }),
                       residents_.end());
    }
  }

  StageId stage_;
  EngineConfig cfg_;
  StageModel model_;
  PreprocessFn preprocess_;
  MetricsCollector* metrics_;

  std::deque<ArAdmission> waiting_;
  std::vector<Resident> residents_;  // admission order
  std::map<uint64_t, SeqState> finished_seqs_;

  bool computing_ = false;
  uint64_t end_time_ = 0;
  StepReport pending_;
  std::vector<std::pair<uint64_t, std::string>> pending_failures_;
};

}  // namespace omni

#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "omniserve/errors.hpp"
#include "omniserve/metrics.hpp"
#include "omniserve/payload.hpp"
#include "omniserve/registry.hpp"

namespace omni {

struct DiffusionJob {
  uint64_t request_id = 0;
  uint32_t chunk_seq = 0;  // upstream codec chunk index; 0 in FULL mode
  Payload input;           // codec tokens, dtype I32, rank 1
  uint32_t steps = 4;      // denoise iterations T; cost only
  uint32_t samples_per_token = 16;
  bool eos = false;
};

// Closed-form denoiser: token c at position p yields samples
// ((c * (s+1)) mod 128) - 64 for s in [0, S). Output bytes are independent
// of T and of how the codec sequence was split into chunks.
inline Payload denoise(const DiffusionJob& job) {
  if (job.input.dtype != Dtype::I32)
    throw BadDtype("diffusion input must be I32 codec tokens");
  if (job.steps < 1) throw OmniError("steps must be >= 1");
  auto tokens = job.input.as_i32();
  std::vector<int32_t> out;
  out.reserve(tokens.size() * job.samples_per_token);
  for (int32_t c : tokens) {
    for (uint32_t s = 0; s < job.samples_per_token; ++s) {
      int64_t v = (static_cast<int64_t>(c) * (s + 1)) % 128;
      if (v < 0) v += 128;
      out.push_back(static_cast<int32_t>(v - 64));
    }
  }
  return Payload::from_i32(out);
}

struct DiffusionOutput {
  uint64_t request_id = 0;
  uint32_t chunk_seq = 0;
  Payload waveform;
  bool eos = false;
};

/// Job-granularity engine for DIFFUSION stage nodes. Same two-phase shape as
/// ArEngine; a batch is charged the max cost over its member jobs.
class DiffusionEngine {
 public:
  using OutputSink = std::function<void(const DiffusionOutput&, uint64_t now_us)>;

  DiffusionEngine(StageId stage, EngineConfig cfg,
                  MetricsCollector* metrics = nullptr)
      : stage_(std::move(stage)), cfg_(std::move(cfg)), metrics_(metrics) {
    cfg_.check();
  }

  const StageId& stage() const { return stage_; }
  const EngineConfig& config() const { return cfg_; }
  void set_output_sink(OutputSink sink) { sink_ = std::move(sink); }

  void submit(DiffusionJob job) { queue_.push_back(std::move(job)); }

  bool has_work() const { return !queue_.empty(); }
  bool computing() const { return computing_; }
  uint64_t end_time() const { return end_time_; }
  size_t queued_jobs() const { return queue_.size(); }

  std::vector<DiffusionJob> batch_jobs(size_t max_jobs) {
    std::vector<DiffusionJob> batch;
    while (!queue_.empty() && batch.size() < max_jobs) {
      batch.push_back(std::move(queue_.front()));
      queue_.pop_front();
    }
    return batch;
  }

  bool begin_iteration(uint64_t now) {
    if (computing_) throw OmniError("begin_iteration while computing");
    auto batch = batch_jobs(cfg_.max_resident_requests);
    if (batch.empty()) return false;
    pending_.clear();
    uint64_t max_cost = 0;
    for (auto& job : batch) {
      if (metrics_)
        metrics_->on_stage_scheduled(job.request_id, stage_, now);
      // Co-execution: the batch costs as much as its slowest member.
      max_cost = std::max(max_cost, iteration_cost_us(job.steps, cfg_));
      DiffusionOutput out;
      out.request_id = job.request_id;
      out.chunk_seq = job.chunk_seq;
      out.waveform = denoise(job);
      out.eos = job.eos;
      pending_.push_back(std::move(out));
    }
    // Deterministic delivery order within a batch.
    std::sort(pending_.begin(), pending_.end(),
              [](const DiffusionOutput& a, const DiffusionOutput& b) {
                if (a.request_id != b.request_id) return a.request_id < b.request_id;
                return a.chunk_seq < b.chunk_seq;
              });
    computing_ = true;
    end_time_ = now + max_cost;
    cost_us_ = max_cost;
    return true;
  }

  uint64_t complete_iteration(uint64_t now) {
    if (!computing_) throw OmniError("complete_iteration while idle");
    computing_ = false;
    for (const auto& out : pending_) {
      if (metrics_) {
        uint64_t samples = out.waveform.element_count();
        if (samples > 0)
          metrics_->on_stage_tokens(out.request_id, stage_, samples, now);
        if (out.eos) metrics_->on_stage_finished(out.request_id, stage_, now);
      }
      if (sink_) sink_(out, now);
    }
    pending_.clear();
    return cost_us_;
  }

  void abort_all() { queue_.clear(); }

 private:
  StageId stage_;
  EngineConfig cfg_;
  MetricsCollector* metrics_;
  OutputSink sink_;
  std::deque<DiffusionJob> queue_;
  bool computing_ = false;
  uint64_t end_time_ = 0;
  uint64_t cost_us_ = 0;
  std::vector<DiffusionOutput> pending_;
};

}  // namespace omni

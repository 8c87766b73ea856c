#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "omniserve/errors.hpp"

namespace omni {

inline constexpr uint64_t kTimeUnset = std::numeric_limits<uint64_t>::max();

struct StageTiming {
  uint64_t first_scheduled_at = kTimeUnset;
  uint64_t first_token_at = kTimeUnset;
  uint64_t finished_at = kTimeUnset;
  uint64_t tokens = 0;
};

/// Per-request event timeline; all timestamps in clock microseconds.
struct MetricsRecord {
  uint64_t request_id = 0;
  uint64_t submitted_at = kTimeUnset;
  std::map<std::string, StageTiming> stages;
  uint64_t first_final_chunk_at = kTimeUnset;
  uint64_t done_at = kTimeUnset;
  uint64_t text_token_count = 0;
  uint64_t codec_token_count = 0;
  uint64_t waveform_sample_count = 0;
  uint32_t sample_rate = 16000;
  std::string status = "DONE";
};

inline uint64_t jct_us(const MetricsRecord& r) {
  if (r.done_at == kTimeUnset || r.submitted_at == kTimeUnset)
    throw IncompleteRecord("jct: record incomplete");
  if (r.done_at < r.submitted_at)
    throw IncompleteRecord("jct: done before submit (clock violation)");
  return r.done_at - r.submitted_at;
}

inline uint64_t ttft_us(const MetricsRecord& r) {
  if (r.first_final_chunk_at == kTimeUnset || r.submitted_at == kTimeUnset)
    throw IncompleteRecord("ttft: record incomplete");
  if (r.first_final_chunk_at < r.submitted_at)
    throw IncompleteRecord("ttft: first chunk before submit");
  return r.first_final_chunk_at - r.submitted_at;
}

inline double rtf(const MetricsRecord& r) {
  if (r.waveform_sample_count == 0) throw NoAudio("rtf: no audio samples");
  double audio_s =
      static_cast<double>(r.waveform_sample_count) / r.sample_rate;
  return (static_cast<double>(jct_us(r)) / 1e6) / audio_s;
}

// Tokens per second from first scheduled iteration to stage finish.
// Queueing time before the first iteration is excluded.
inline double tps(const MetricsRecord& r, const std::string& stage) {
  auto it = r.stages.find(stage);
  if (it == r.stages.end()) throw IncompleteRecord("tps: unknown stage " + stage);
  const auto& t = it->second;
  if (t.finished_at == kTimeUnset || t.first_scheduled_at == kTimeUnset)
    throw IncompleteRecord("tps: stage not finished");
  if (t.finished_at <= t.first_scheduled_at)
    throw IncompleteRecord("tps: zero elapsed time");
  double elapsed_s =
      static_cast<double>(t.finished_at - t.first_scheduled_at) / 1e6;
  return static_cast<double>(t.tokens) / elapsed_s;
}

/// Thread-safe per-request event sink.
class MetricsCollector {
 public:
  void on_submitted(uint64_t rid, uint64_t t) {
    std::lock_guard lk(mu_);
    auto& r = records_[rid];
    r.request_id = rid;
    r.submitted_at = t;
  }

  void on_stage_scheduled(uint64_t rid, const std::string& stage, uint64_t t) {
    std::lock_guard lk(mu_);
    auto& st = records_[rid].stages[stage];
    if (st.first_scheduled_at == kTimeUnset) st.first_scheduled_at = t;
  }

  void on_stage_tokens(uint64_t rid, const std::string& stage, uint64_t n,
                       uint64_t t) {
    std::lock_guard lk(mu_);
    auto& st = records_[rid].stages[stage];
    if (st.first_token_at == kTimeUnset) st.first_token_at = t;
    st.tokens += n;
  }

  void on_stage_finished(uint64_t rid, const std::string& stage, uint64_t t) {
    std::lock_guard lk(mu_);
    records_[rid].stages[stage].finished_at = t;
  }

  void on_final_chunk(uint64_t rid, uint64_t t) {
    std::lock_guard lk(mu_);
    auto& r = records_[rid];
    if (r.first_final_chunk_at == kTimeUnset) r.first_final_chunk_at = t;
  }

  void on_done(uint64_t rid, uint64_t t, const std::string& status) {
    std::lock_guard lk(mu_);
    auto& r = records_[rid];
    r.done_at = t;
    r.status = status;
  }

  void set_counts(uint64_t rid, uint64_t text, uint64_t codec, uint64_t wave) {
    std::lock_guard lk(mu_);
    auto& r = records_[rid];
    r.text_token_count = text;
    r.codec_token_count = codec;
    r.waveform_sample_count = wave;
  }

  MetricsRecord record(uint64_t rid) const {
    std::lock_guard lk(mu_);
    auto it = records_.find(rid);
    if (it == records_.end()) throw IncompleteRecord("no record for request");
    return it->second;
  }

  std::vector<MetricsRecord> all() const {
    std::lock_guard lk(mu_);
    std::vector<MetricsRecord> out;
    out.reserve(records_.size());
    for (const auto& [_, r] : records_) out.push_back(r);
    return out;
  }

 private:
  mutable std::mutex mu_;
  std::map<uint64_t, MetricsRecord> records_;
};

}  // namespace omni

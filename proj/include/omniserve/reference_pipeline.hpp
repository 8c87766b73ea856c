#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "omniserve/clock.hpp"
#include "omniserve/context.hpp"
#include "omniserve/diffusion_engine.hpp"
#include "omniserve/metrics.hpp"
#include "omniserve/registry.hpp"

namespace omni {
namespace ref {

// Mock recurrence shared by the thinker's stepwise engine path and the
// sequential oracle. Pure and trivially replayable from (prompt, seed).
inline uint32_t mix(uint32_t h, uint32_t t) {
  return h * 1000003u + t + 1u;
}

inline uint32_t fold_prompt(std::span<const uint8_t> prompt, uint32_t seed) {
  uint32_t h = seed;
  for (uint8_t tok : prompt) h = mix(h, tok);
  return h;
}

inline uint32_t target_length(uint32_t h_after_prompt) {
  return (h_after_prompt % 64u) + 1u;
}

inline int32_t token_of(uint32_t h) { return static_cast<int32_t>(h % 255u) + 1; }

inline HiddenState hidden_of(uint32_t h) {
  HiddenState hs;
  for (int k = 0; k < 8; ++k) hs.values[k] = (h >> (4 * k)) & 0xF;
  return hs;
}

// Codec fan-out r=4: step j emits c_{4j+i} = (t_j*7 + sum(H_j) + i) mod 64.
inline int32_t codec_token(int32_t text_token, int hidden_sum, int i) {
  return (text_token * 7 + hidden_sum + i) % 64;
}

struct ThinkerOutput {
  std::vector<int32_t> text_tokens;
  std::vector<HiddenState> hidden;
};

inline ThinkerOutput thinker_generate(std::span<const uint8_t> prompt,
                                      uint32_t seed) {
  if (prompt.empty()) throw OmniError("thinker: empty prompt");
  ThinkerOutput out;
  uint32_t h = fold_prompt(prompt, seed);
  uint32_t len = target_length(h);
  for (uint32_t step = 0; step < len; ++step) {
    h = mix(h, step);
    out.text_tokens.push_back(token_of(h));
    out.hidden.push_back(hidden_of(h));
  }
  return out;
}

inline std::vector<int32_t> talker_generate(const ThinkerOutput& th) {
  std::vector<int32_t> codec;
  codec.reserve(th.text_tokens.size() * 4);
  for (size_t j = 0; j < th.text_tokens.size(); ++j) {
    int sum = th.hidden[j].component_sum();
    for (int i = 0; i < 4; ++i)
      codec.push_back(codec_token(th.text_tokens[j], sum, i));
  }
  return codec;
}

inline std::vector<int32_t> vocoder_decode(std::span<const int32_t> codec,
                                           uint32_t samples_per_token = 16) {
  DiffusionJob job;
  job.input = Payload::from_i32(codec);
  job.samples_per_token = samples_per_token;
  return denoise(job).as_i32();
}

// Context key carrying the thinker's j-th (text token, hidden state) pair to
// the talker: 9 raw bytes, [token, h0..h7].
inline std::string hid_key(size_t j) { return "hid/" + std::to_string(j); }

inline Payload pack_hid_row(int32_t token, const HiddenState& h) {
  std::vector<uint8_t> row(9);
  row[0] = static_cast<uint8_t>(token);
  for (int k = 0; k < 8; ++k) row[1 + k] = h.values[k];
  return Payload::from_u8(std::move(row));
}

inline StageModel make_thinker_model() {
  StageModel m;
  m.prefill = [](RequestContext&, SeqState& seq, std::span<const uint8_t> span) {
    for (uint8_t tok : span) seq.rng_state = mix(seq.rng_state, tok);
  };
  m.on_prompt_consumed = [](RequestContext&, SeqState& seq) {
    seq.target_len = target_length(seq.rng_state);
  };
  m.decode = [](RequestContext&, SeqState& seq) {
    seq.rng_state = mix(seq.rng_state, static_cast<uint32_t>(seq.emitted.size()));
    DecodeStep step;
    step.token = token_of(seq.rng_state);
    step.hidden = hidden_of(seq.rng_state);
    step.has_hidden = true;
    return step;
  };
  // Chunk rows of [token, h0..h7], shape {n, 9}.
  m.pack_chunk = [](const SeqState& seq, size_t begin, size_t end) {
    Payload p;
    p.dtype = Dtype::U8;
    p.shape = {static_cast<uint32_t>(end - begin), 9};
    p.bytes.reserve((end - begin) * 9);
    for (size_t i = begin; i < end; ++i) {
      p.bytes.push_back(static_cast<uint8_t>(seq.emitted[i]));
      for (int k = 0; k < 8; ++k) p.bytes.push_back(seq.hidden[i].values[k]);
    }
    return p;
  };
  return m;
}

inline StageModel make_talker_model() {
  StageModel m;
  m.prefill = [](RequestContext&, SeqState&, std::span<const uint8_t>) {
    // Talker conditioning comes from the per-step hidden states; prefill
    // only charges cost for ingesting the thinker's text tokens.
  };
  m.on_prompt_consumed = [](RequestContext&, SeqState& seq) {
    seq.target_len = 4 * seq.prompt.size();
  };
  m.decode = [](RequestContext& ctx, SeqState& seq) {
    size_t m_idx = seq.emitted.size();
    size_t j = m_idx / 4;
    const Payload& row = ctx.get(hid_key(j));
    if (row.bytes.size() != 9) throw ForwardError("bad hidden row");
    int32_t t_j = row.bytes[0];
    if (t_j < 1) throw ForwardError("text token below alphabet floor");
    int sum = 0;
    for (int k = 0; k < 8; ++k) sum += row.bytes[1 + k];
    DecodeStep step;
    step.token = codec_token(t_j, sum, static_cast<int>(m_idx % 4));
    return step;
  };
  m.pack_chunk = [](const SeqState& seq, size_t begin, size_t end) {
    return Payload::from_i32(
        std::span<const int32_t>(seq.emitted.data() + begin, end - begin));
  };
  return m;
}

/// Talker per-iteration preprocess: folds newly streamed thinker rows into
/// the context and the streamed prompt, and reports whether this request can
/// contribute to the current iteration.
inline PreprocessFn make_talker_preprocess() {
  return [](RequestContext& ctx, SeqState& seq,
            StreamReceiver* upstream) -> PreprocessStatus {
    if (upstream) {
      while (auto c = upstream->try_recv()) {
        if (c->payload.shape.size() == 2 && c->payload.shape[1] == 9) {
          size_t rows = c->payload.shape[0];
          for (size_t r = 0; r < rows; ++r) {
            size_t j = seq.prompt.size();
            std::vector<uint8_t> row(c->payload.bytes.begin() + r * 9,
                                     c->payload.bytes.begin() + (r + 1) * 9);
            uint8_t tok = row[0];
            ctx.put(hid_key(j), Payload::from_u8(std::move(row)));
            seq.prompt.push_back(tok);
          }
        }
        if (c->eos) seq.prompt_complete = true;
      }
    }
    if (seq.phase == Phase::PREFILL) {
      if (seq.consumed_prompt < seq.prompt.size()) return PreprocessStatus::READY;
      return seq.prompt_complete ? PreprocessStatus::READY
                                 : PreprocessStatus::STALL;
    }
    if (seq.phase == Phase::DECODE) {
      size_t j = seq.emitted.size() / 4;
      return ctx.has(hid_key(j)) ? PreprocessStatus::READY
                                 : PreprocessStatus::STALL;
    }
    return PreprocessStatus::READY;
  };
}

inline TransferFn make_thinker_to_talker() {
  return [](TransferEnv& env) {
    ArSubmission sub;
    sub.request_id = env.request.request_id;
    sub.seed = env.request.seed;
    if (env.upstream_final) {
      // FULL edge: the whole (token, hidden) table arrives at once.
      const Payload& p = *env.upstream_final;
      if (p.shape.size() != 2 || p.shape[1] != 9)
        throw TransferFnError("Thinker2Talker: unexpected payload shape");
      size_t rows = p.shape[0];
      for (size_t j = 0; j < rows; ++j) {
        std::vector<uint8_t> row(p.bytes.begin() + j * 9,
                                 p.bytes.begin() + (j + 1) * 9);
        sub.prompt.push_back(row[0]);
        env.ctx.put(hid_key(j), Payload::from_u8(std::move(row)));
      }
      sub.prompt_streams = false;
    } else {
      // STREAMING edge: the talker's prompt arrives via preprocess.
      sub.prompt_streams = true;
    }
    env.submit_ar(std::move(sub));
  };
}

inline TransferFn make_talker_to_vocoder(uint32_t steps = 4,
                                         uint32_t samples_per_token = 16) {
  return [steps, samples_per_token](TransferEnv& env) {
    env.wire_diffusion({steps, samples_per_token});
  };
}

/// Self-contained AR stage for two-stage AR-to-diffusion graphs: thinker
/// recurrence, but chunks pack plain I32 tokens a diffusion stage can take.
inline StageModel make_standalone_ar_model() {
  StageModel m = make_thinker_model();
  m.pack_chunk = [](const SeqState& seq, size_t begin, size_t end) {
    return Payload::from_i32(
        std::span<const int32_t>(seq.emitted.data() + begin, end - begin));
  };
  return m;
}

// Registered names mirror the reference pipeline's function table.
inline void register_reference_pipeline(FunctionRegistry& reg,
                                        uint32_t diffusion_steps = 4,
                                        uint32_t samples_per_token = 16) {
  reg.register_forward("thinker_forward", make_thinker_model());
  reg.register_forward("talker_forward", make_talker_model());
  reg.register_forward("ar_forward", make_standalone_ar_model());
  reg.register_preprocess("process_input", make_talker_preprocess());
  reg.register_transfer("Thinker2Talker", make_thinker_to_talker());
  reg.register_transfer("Talker2Vocoder",
                        make_talker_to_vocoder(diffusion_steps, samples_per_token));
}

struct FinalOutput {
  std::vector<int32_t> text_tokens;
  std::vector<int32_t> codec_tokens;
  std::vector<int32_t> waveform;
  MetricsRecord metrics;
  std::string status = "DONE";
  std::string error;
};

/// Sequential single-request baseline: thinker, then talker, then vocoder,
/// no batching or streaming, same per-step costs on the clock.
inline FinalOutput monolithic_oracle(
    const Request& req, const std::map<StageId, EngineConfig>& configs,
    Clock& clock, uint32_t diffusion_steps = 4, uint32_t samples_per_token = 16,
    const StageId& thinker_id = "thinker", const StageId& talker_id = "talker",
    const StageId& vocoder_id = "vocoder") {
  FinalOutput out;
  auto& rec = out.metrics;
  rec.request_id = req.request_id;
  rec.submitted_at = req.submitted_at_us;

  const EngineConfig& th_cfg = configs.at(thinker_id);
  const EngineConfig& ta_cfg = configs.at(talker_id);
  const EngineConfig& vo_cfg = configs.at(vocoder_id);

  auto th = thinker_generate(req.prompt_tokens, req.seed);
  out.text_tokens = th.text_tokens;
  uint64_t t = clock.now_us();
  auto& th_tim = rec.stages[thinker_id];
  th_tim.first_scheduled_at = t;
  clock.advance_by_us(iteration_cost_us(req.prompt_tokens.size(), th_cfg));
  for (size_t i = 0; i < th.text_tokens.size(); ++i) {
    clock.advance_by_us(iteration_cost_us(1, th_cfg));
    if (th_tim.first_token_at == kTimeUnset) th_tim.first_token_at = clock.now_us();
  }
  th_tim.tokens = th.text_tokens.size();
  th_tim.finished_at = clock.now_us();

  out.codec_tokens = talker_generate(th);
  auto& ta_tim = rec.stages[talker_id];
  ta_tim.first_scheduled_at = clock.now_us();
  clock.advance_by_us(iteration_cost_us(th.text_tokens.size(), ta_cfg));
  for (size_t i = 0; i < out.codec_tokens.size(); ++i) {
    clock.advance_by_us(iteration_cost_us(1, ta_cfg));
    if (ta_tim.first_token_at == kTimeUnset) ta_tim.first_token_at = clock.now_us();
  }
  ta_tim.tokens = out.codec_tokens.size();
  ta_tim.finished_at = clock.now_us();

  out.waveform = vocoder_decode(out.codec_tokens, samples_per_token);
  auto& vo_tim = rec.stages[vocoder_id];
  vo_tim.first_scheduled_at = clock.now_us();
  clock.advance_by_us(iteration_cost_us(diffusion_steps, vo_cfg));
  vo_tim.first_token_at = clock.now_us();
  vo_tim.tokens = out.waveform.size();
  vo_tim.finished_at = clock.now_us();

  rec.first_final_chunk_at = clock.now_us();
  rec.done_at = clock.now_us();
  rec.text_token_count = out.text_tokens.size();
  rec.codec_token_count = out.codec_tokens.size();
  rec.waveform_sample_count = out.waveform.size();
  return out;
}

/// Closed-form cost of one isolated monolithic run; the clock-based path
/// must agree with this exactly.
inline uint64_t monolithic_jct_us(const Request& req,
                                  const std::map<StageId, EngineConfig>& configs,
                                  uint32_t diffusion_steps = 4,
                                  const StageId& thinker_id = "thinker",
                                  const StageId& talker_id = "talker",
                                  const StageId& vocoder_id = "vocoder") {
  const EngineConfig& th = configs.at(thinker_id);
  const EngineConfig& ta = configs.at(talker_id);
  const EngineConfig& vo = configs.at(vocoder_id);
  auto thinker = thinker_generate(req.prompt_tokens, req.seed);
  uint64_t L = thinker.text_tokens.size();
  uint64_t total = iteration_cost_us(req.prompt_tokens.size(), th) +
                   L * iteration_cost_us(1, th);
  total += iteration_cost_us(L, ta) + 4 * L * iteration_cost_us(1, ta);
  total += iteration_cost_us(diffusion_steps, vo);
  return total;
}

}  // namespace ref
}  // namespace omni

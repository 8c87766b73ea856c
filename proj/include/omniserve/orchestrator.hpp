#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "omniserve/ar_engine.hpp"
#include "omniserve/clock.hpp"
#include "omniserve/connector.hpp"
#include "omniserve/context.hpp"
#include "omniserve/diffusion_engine.hpp"
#include "omniserve/graph.hpp"
#include "omniserve/metrics.hpp"
#include "omniserve/reference_pipeline.hpp"
#include "omniserve/registry.hpp"

namespace omni {

struct ServerOptions {
  std::string listen = "127.0.0.1:8080";
  uint64_t admission_cap = 256;
};

struct DeploymentPlan {
  StageGraph graph;
  std::map<StageId, EngineConfig> engines;
  std::map<std::string, TransportConfig> transports;  // keyed "from->to"
  std::map<StageId, std::string> placement;           // worker-group labels
  std::string clock_kind = "virtual";
  ServerOptions server;
  std::string server_id = "0";
};

/// Caller-side view of one submitted request.
class ResultHandle {
 public:
  struct WaveChunk {
    uint32_t seq = 0;
    Payload payload;
    bool eos = false;
  };

  /// Blocks until the request reaches DONE or FAILED.
  const ref::FinalOutput& wait() {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return done_; });
    return output_;
  }

  bool is_done() const {
    std::lock_guard lk(mu_);
    return done_;
  }

  /// Pops the next live waveform chunk; nullopt once the stream is closed.
  std::optional<WaveChunk> next_chunk() {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return !chunks_.empty() || chunks_closed_; });
    if (chunks_.empty()) return std::nullopt;
    WaveChunk c = std::move(chunks_.front());
    chunks_.pop_front();
    return c;
  }

 private:
  friend class Orchestrator;

  void push_chunk(WaveChunk c) {
    std::lock_guard lk(mu_);
    chunks_.push_back(std::move(c));
    cv_.notify_all();
  }
  void finish(ref::FinalOutput out) {
    std::lock_guard lk(mu_);
    output_ = std::move(out);
    done_ = true;
    chunks_closed_ = true;
    cv_.notify_all();
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool done_ = false;
  bool chunks_closed_ = false;
  ref::FinalOutput output_;
  std::deque<WaveChunk> chunks_;
};

struct ShutdownReport {
  uint64_t drained = 0;
  uint64_t aborted = 0;
};

/// Control plane: one engine per stage node, per-edge connectors, transfer
/// functions fired on edge crossings, request lifecycle and final-output
/// assembly. Engine execution is pumped by a discrete-event loop so virtual
/// and wall clocks share one code path.
class Orchestrator {
 public:
  Orchestrator(DeploymentPlan plan, const FunctionRegistry* registry,
               std::unique_ptr<Clock> clock = nullptr)
      : plan_(std::move(plan)), registry_(registry) {
    clock_ = clock ? std::move(clock) : make_clock(plan_.clock_kind);
  }

  ~Orchestrator() {
    if (started_) shutdown(false);
  }

  Clock& clock() { return *clock_; }
  MetricsCollector& metrics() { return metrics_; }
  const DeploymentPlan& plan() const { return plan_; }

  /// Builds connectors and engines; throws ConfigInvalid / PortInUse /
  /// EngineSpawnFailed. Safe to call again after a clean shutdown.
  void start() {
    if (started_) throw OmniError("orchestrator already started");
    validate_plan();
    topo_ = topo_order(plan_.graph);
    for (const auto& e : plan_.graph.edges) {
      TransportConfig tc;
      auto it = plan_.transports.find(e.key());
      if (it != plan_.transports.end()) tc = it->second;
      connectors_[e.key()] =
          std::make_unique<Connector>(e.key(), tc, plan_.server_id);
    }
    for (const auto& n : plan_.graph.nodes) {
      const EngineConfig& cfg = plan_.engines.at(n.id);
      try {
        if (n.kind == StageKind::AR) {
          PreprocessFn pre = nullptr;
          if (!n.preprocess_ref.empty()) pre = registry_->preprocess(n.preprocess_ref);
          ar_engines_[n.id] = std::make_unique<ArEngine>(
              n.id, cfg, registry_->forward(n.forward_ref), pre, &metrics_);
        } else {
          auto eng = std::make_unique<DiffusionEngine>(n.id, cfg, &metrics_);
          eng->set_output_sink([this, stage = n.id](const DiffusionOutput& out,
                                                    uint64_t now) {
            on_diffusion_output(stage, out, now);
          });
          diff_engines_[n.id] = std::move(eng);
        }
      } catch (const ConfigInvalid&) {
        throw;
      } catch (const OmniError& e) {
        throw EngineSpawnFailed("stage " + n.id + ": " + e.what());
      }
    }
    auto ar_in_topo = std::vector<StageId>{};
    for (const auto& id : topo_)
      if (plan_.graph.find_node(id)->kind == StageKind::AR)
        ar_in_topo.push_back(id);
    text_stage_ = ar_in_topo.empty() ? StageId{} : ar_in_topo.front();
    codec_stage_ = ar_in_topo.empty() ? StageId{} : ar_in_topo.back();
    started_ = true;
    accepting_ = true;
  }

  /// Spawns the background event loop (service mode). Bench code instead
  /// drives run_until_drained() on the caller's thread.
  void serve_async() {
    if (loop_thread_.joinable()) return;
    loop_running_ = true;
    loop_thread_ = std::thread([this] { loop(); });
  }

  std::map<StageId, std::string> health() const {
    std::map<StageId, std::string> h;
    for (const auto& n : plan_.graph.nodes)
      h[n.id] = started_ ? "UP" : "DOWN";
    return h;
  }

  std::shared_ptr<ResultHandle> submit(Request req) {
    {
      std::lock_guard lk(state_mu_);
      if (!accepting_) throw Rejected("server not accepting requests");
      if (inflight_.size() + submissions_.size() >= plan_.server.admission_cap)
        throw Overloaded("admission cap reached");
      if (req.prompt_tokens.empty()) throw Rejected("empty prompt");
      // Entry-stage size check up front so callers get a synchronous error.
      const auto& entry_cfg = plan_.engines.at(plan_.graph.entry);
      if (req.prompt_tokens.size() > entry_cfg.kv_budget_tokens)
        throw Rejected("prompt exceeds entry-stage kv budget");
    }
    auto handle = std::make_shared<ResultHandle>();
    {
      std::lock_guard lk(state_mu_);
      submissions_.push_back({std::move(req), handle, std::nullopt});
    }
    wake_cv_.notify_all();
    return handle;
  }

  /// Pre-seeded arrival for deterministic benchmarks: the request enters the
  /// pipeline when the virtual clock reaches `at_us`.
  std::shared_ptr<ResultHandle> submit_at(Request req, uint64_t at_us) {
    auto handle = std::make_shared<ResultHandle>();
    std::lock_guard lk(state_mu_);
    submissions_.push_back({std::move(req), handle, at_us});
    return handle;
  }

  const ref::FinalOutput& collect(const std::shared_ptr<ResultHandle>& h) {
    return h->wait();
  }

  /// Synchronous pump until no work remains (arrivals, iterations, in-flight
  /// requests). The deterministic path for benchmarks and tests.
  void run_until_drained() {
    std::lock_guard lk(loop_mu_);
    while (true) {
      if (tick()) continue;
      std::lock_guard slk(state_mu_);
      if (inflight_.empty() && submissions_.empty()) break;
      // In-flight work but no runnable event: the pipeline is wedged.
#ifdef OMNI_DEBUG_STALL
      for (const auto& id : topo_) {
        auto ar = ar_engines_.find(id);
        if (ar != ar_engines_.end())
          fprintf(stderr, "[stall] ar %s computing=%d residents=%zu waiting=%zu\n",
                  id.c_str(), (int)ar->second->computing(),
                  ar->second->resident_count(), ar->second->waiting_count());
        auto df = diff_engines_.find(id);
        if (df != diff_engines_.end())
          fprintf(stderr, "[stall] diff %s computing=%d has_work=%d\n", id.c_str(),
                  (int)df->second->computing(), (int)df->second->has_work());
      }
      for (auto& [rid, f] : inflight_)
        fprintf(stderr,
                "[stall] rid=%llu wirings=%zu parts=%zu expected=%d held=%zu pend=%zu\n",
                (unsigned long long)rid, f.diff_wirings.size(), f.wave_parts.size(),
                f.wave_expected ? (int)*f.wave_expected : -1,
                f.held_receivers.size(), f.pending_receivers.size());
#endif
      fail_all_locked("pipeline stalled: no runnable engine event");
      break;
    }
  }

  void set_on_done(std::function<void(uint64_t rid, uint64_t now_us)> cb) {
    on_done_ = std::move(cb);
  }

  ShutdownReport shutdown(bool drain) {
    ShutdownReport report;
    if (!started_) return report;
    {
      std::lock_guard lk(state_mu_);
      accepting_ = false;
    }
    if (drain) {
      if (loop_thread_.joinable()) {
        // Event loop finishes residents on its own; wait for it to drain.
        std::unique_lock lk(state_mu_);
        drained_cv_.wait(lk, [&] { return inflight_.empty() && submissions_.empty(); });
      } else {
        run_until_drained();
      }
      report.drained = completed_count_;
    } else {
      std::lock_guard lk(loop_mu_);
      std::lock_guard slk(state_mu_);
      report.aborted = inflight_.size();
      fail_all_locked("shutdown");
    }
    stop_loop();
    for (auto& [_, e] : ar_engines_) e->abort_all();
    for (auto& [_, e] : diff_engines_) e->abort_all();
    ar_engines_.clear();
    diff_engines_.clear();
    connectors_.clear();
    started_ = false;
    return report;
  }

 private:
  struct PendingSubmission {
    Request req;
    std::shared_ptr<ResultHandle> handle;
    std::optional<uint64_t> at_us;  // nullopt = as soon as possible
  };

  struct DiffWiring {
    DiffusionWiring params;
    StageId to_stage;
    std::string edge_key;
    bool eos_seen = false;
  };

  struct InFlight {
    Request req;
    std::shared_ptr<RequestContext> ctx;
    std::shared_ptr<ResultHandle> handle;
    std::map<StageId, std::vector<EmitPlan>> stage_plans;
    std::map<std::string, StreamReceiver> pending_receivers;  // handed to AR admission
    std::map<std::string, StreamReceiver> held_receivers;     // orchestrator-consumed
    std::vector<DiffWiring> diff_wirings;
    std::map<std::string, int> transfer_count;
    std::map<StageId, std::vector<int32_t>> stage_tokens;
    std::set<StageId> exits_done;
    std::map<uint32_t, Payload> wave_parts;
    std::optional<uint32_t> wave_expected;
    bool streaming_status = false;
  };

  static std::unique_ptr<Clock> make_clock(const std::string& kind) {
    if (kind == "wall") return std::make_unique<WallClock>();
    if (kind == "virtual") return std::make_unique<VirtualClock>();
    throw ConfigInvalid("unknown clock kind: " + kind);
  }

  void validate_plan() {
    auto violations = validate_graph(plan_.graph, *registry_);
    if (!violations.empty()) {
      std::string msg = "invalid stage graph:";
      for (const auto& v : violations) msg += " " + violation_to_string(v);
      throw ConfigInvalid(msg);
    }
    for (const auto& n : plan_.graph.nodes) {
      auto it = plan_.engines.find(n.id);
      if (it == plan_.engines.end())
        throw ConfigInvalid("missing engine config for stage " + n.id);
      it->second.check();
      if (n.kind == StageKind::DIFFUSION && !plan_.graph.edges_from(n.id).empty())
        throw ConfigInvalid("diffusion stage " + n.id +
                            " cannot have outgoing edges");
    }
    std::set<std::string> endpoints;
    for (const auto& e : plan_.graph.edges) {
      auto it = plan_.transports.find(e.key());
      if (it == plan_.transports.end()) continue;  // defaults to INPROC
      if (it->second.kind == TransportKind::TCP) {
        if (!endpoints.insert(it->second.tcp_endpoint).second)
          throw PortInUse("duplicate tcp endpoint " + it->second.tcp_endpoint);
      }
    }
  }

  // ---- event loop -------------------------------------------------------

  void loop() {
    while (loop_running_) {
      bool progressed;
      {
        std::lock_guard lk(loop_mu_);
        progressed = tick();
      }
      if (!progressed) {
        {
          std::lock_guard slk(state_mu_);
          if (inflight_.empty() && submissions_.empty())
            drained_cv_.notify_all();
        }
        std::unique_lock lk(wake_mu_);
        wake_cv_.wait_for(lk, std::chrono::milliseconds(5));
      }
    }
  }

  void stop_loop() {
    loop_running_ = false;
    wake_cv_.notify_all();
    if (loop_thread_.joinable()) loop_thread_.join();
  }

  /// Processes one event; returns false when nothing can run right now.
  bool tick() {
    uint64_t now = clock_->now_us();
    if (drain_due_submissions(now)) return true;
    pump_diffusion_inflows();

    // Start iterations on every idle engine that can run.
    for (const auto& id : topo_) {
      auto ar = ar_engines_.find(id);
      if (ar != ar_engines_.end() && !ar->second->computing() &&
          ar->second->has_work())
        ar->second->begin_iteration(now);
      auto df = diff_engines_.find(id);
      if (df != diff_engines_.end() && !df->second->computing() &&
          df->second->has_work())
        df->second->begin_iteration(now);
    }

    // Next event: earliest iteration completion or pending arrival.
    uint64_t best = kTimeUnset;
    StageId best_stage;
    bool best_is_diff = false;
    for (const auto& id : topo_) {
      auto ar = ar_engines_.find(id);
      if (ar != ar_engines_.end() && ar->second->computing() &&
          ar->second->end_time() < best) {
        best = ar->second->end_time();
        best_stage = id;
        best_is_diff = false;
      }
      auto df = diff_engines_.find(id);
      if (df != diff_engines_.end() && df->second->computing() &&
          df->second->end_time() < best) {
        best = df->second->end_time();
        best_stage = id;
        best_is_diff = true;
      }
    }
    uint64_t next_arrival = kTimeUnset;
    {
      std::lock_guard lk(state_mu_);
      for (const auto& s : submissions_)
        if (s.at_us && *s.at_us < next_arrival) next_arrival = *s.at_us;
    }
    if (next_arrival < best) {
      clock_->advance_to_us(next_arrival);
      drain_due_submissions(clock_->now_us());
      return true;
    }
    if (best == kTimeUnset) return false;

    clock_->advance_to_us(best);
    uint64_t t = clock_->now_us();
    if (best_is_diff) {
      diff_engines_[best_stage]->complete_iteration(t);
    } else {
      StepReport report = ar_engines_[best_stage]->complete_iteration(t);
      handle_ar_report(best_stage, report, t);
    }
    pump_diffusion_inflows();
    return true;
  }

  bool drain_due_submissions(uint64_t now) {
    std::vector<PendingSubmission> due;
    {
      std::lock_guard lk(state_mu_);
      for (auto it = submissions_.begin(); it != submissions_.end();) {
        if (!it->at_us || *it->at_us <= now) {
          due.push_back(std::move(*it));
          it = submissions_.erase(it);
        } else {
          ++it;
        }
      }
    }
    for (auto& s : due) {
      uint64_t at = s.at_us ? std::max(*s.at_us, now) : now;
      admit_request(std::move(s), at);
    }
    return !due.empty();
  }

  void admit_request(PendingSubmission s, uint64_t now) {
    uint64_t rid = s.req.request_id;
    InFlight fl;
    fl.req = std::move(s.req);
    fl.req.submitted_at_us = now;
    fl.handle = std::move(s.handle);
    fl.ctx = std::make_shared<RequestContext>(rid);
    fl.ctx->set_current_stage(plan_.graph.entry);
    fl.ctx->set_status(RequestStatus::RUNNING);
    metrics_.on_submitted(rid, now);

    InFlight* slot;
    {
      std::lock_guard lk(state_mu_);
      slot = &inflight_.emplace(rid, std::move(fl)).first->second;
    }
    InFlight& f = *slot;

    try {
      // Wire every edge: open the stream pair, build the upstream engine's
      // emit plan, decide who owns the receiving end, and fire STREAMING
      // transfers now (FULL transfers fire at upstream finish).
      std::vector<const TransferEdge*> streaming_to_fire;
      for (const auto& e : plan_.graph.edges) {
        Connector& conn = *connectors_.at(e.key());
        EdgeMode effective = (f.req.stream && e.mode == EdgeMode::STREAMING)
                                 ? EdgeMode::STREAMING
                                 : EdgeMode::FULL;
        EmitPlan plan;
        plan.edge_key = e.key();
        plan.mode = effective;
        plan.chunk_size = e.streaming_chunk_size ? e.streaming_chunk_size : 1;
        plan.sender = conn.open_stream(rid);
        f.stage_plans[e.from].push_back(std::move(plan));

        StreamReceiver recv = conn.subscribe(rid);
        const StageNode* to = plan_.graph.find_node(e.to);
        if (effective == EdgeMode::STREAMING && to->kind == StageKind::AR)
          f.pending_receivers.emplace(e.key(), std::move(recv));
        else
          f.held_receivers.emplace(e.key(), std::move(recv));
        if (effective == EdgeMode::STREAMING) streaming_to_fire.push_back(&e);
      }
      for (const TransferEdge* e : streaming_to_fire)
        apply_transfer(f, *e, std::nullopt);

      ArAdmission adm;
      adm.sub.request_id = rid;
      adm.sub.prompt = f.req.prompt_tokens;
      adm.sub.seed = f.req.seed;
      adm.ctx = f.ctx;
      adm.emits = std::move(f.stage_plans[plan_.graph.entry]);
      ar_engines_.at(plan_.graph.entry)->admit(std::move(adm));
    } catch (const OmniError& e) {
      fail_request(rid, plan_.graph.entry, e.what());
    }
  }

  void apply_transfer(InFlight& f, const TransferEdge& e,
                      std::optional<Payload> upstream_final) {
    int& count = f.transfer_count[e.key()];
    if (count != 0)
      throw TransferFnError("transfer on " + e.key() + " fired twice");
    count++;
    TransferEnv env{*f.ctx, e, f.req, std::move(upstream_final), nullptr, nullptr};
    uint64_t rid = f.req.request_id;
    env.submit_ar = [this, &f, &e, rid](ArSubmission sub) {
      ArAdmission adm;
      sub.request_id = rid;
      adm.sub = std::move(sub);
      adm.ctx = f.ctx;
      auto pr = f.pending_receivers.find(e.key());
      if (pr != f.pending_receivers.end()) {
        adm.upstream = std::move(pr->second);
        f.pending_receivers.erase(pr);
      }
      adm.emits = std::move(f.stage_plans[e.to]);
      ar_engines_.at(e.to)->admit(std::move(adm));
    };
    env.wire_diffusion = [&f, &e](DiffusionWiring w) {
      f.diff_wirings.push_back({w, e.to, e.key(), false});
    };
    try {
      registry_->transfer(e.transfer_ref)(env);
    } catch (const OmniError& err) {
      throw TransferFnError("transfer " + e.transfer_ref + " on " + e.key() +
                            ": " + err.what());
    }
  }

  void pump_diffusion_inflows() {
    std::vector<uint64_t> rids;
    {
      std::lock_guard lk(state_mu_);
      for (auto& [rid, _] : inflight_) rids.push_back(rid);
    }
    for (uint64_t rid : rids) {
      InFlight* f = find_inflight(rid);
      if (!f) continue;
      for (auto& w : f->diff_wirings) {
        if (w.eos_seen) continue;
        auto it = f->held_receivers.find(w.edge_key);
        if (it == f->held_receivers.end()) continue;
        while (auto c = it->second.try_recv()) {
          DiffusionJob job;
          job.request_id = rid;
          job.chunk_seq = c->seq;
          job.input = c->payload;
          job.steps = w.params.steps;
          job.samples_per_token = w.params.samples_per_token;
          job.eos = c->eos;
          diff_engines_.at(w.to_stage)->submit(std::move(job));
          if (c->eos) {
            w.eos_seen = true;
            break;
          }
        }
      }
    }
  }

  void handle_ar_report(const StageId& stage, const StepReport& report,
                        uint64_t now) {
    for (auto [rid, why] : report.failed) fail_request(rid, stage, why);
    for (uint64_t rid : report.finished) {
      InFlight* f = find_inflight(rid);
      ArEngine& eng = *ar_engines_.at(stage);
      if (!f) {
        eng.drop_finished(rid);
        continue;
      }
      const SeqState* seq = eng.finished_seq(rid);
      if (seq) f->stage_tokens[stage] = seq->emitted;
      eng.drop_finished(rid);

      try {
        for (const TransferEdge* e : plan_.graph.edges_from(stage)) {
          EdgeMode effective = (f->req.stream && e->mode == EdgeMode::STREAMING)
                                   ? EdgeMode::STREAMING
                                   : EdgeMode::FULL;
          if (effective != EdgeMode::FULL) continue;
          // The stage's FULL emit plan has just published the single final
          // chunk. For an AR downstream, consume it here and hand it to the
          // transfer; for a diffusion downstream, leave it in the receiver —
          // the inflow pump delivers it to the engine once the transfer has
          // registered the wiring.
          std::optional<Payload> final_payload;
          const StageNode* to = plan_.graph.find_node(e->to);
          if (to->kind == StageKind::AR) {
            auto hr = f->held_receivers.find(e->key());
            if (hr != f->held_receivers.end()) {
              if (auto c = hr->second.try_recv())
                final_payload = std::move(c->payload);
            }
          }
          apply_transfer(*f, *e, std::move(final_payload));
        }
      } catch (const OmniError& e) {
        fail_request(rid, stage, e.what());
        continue;
      }

      if (is_exit(stage)) {
        f->exits_done.insert(stage);
        maybe_finalize(rid, now);
      }
    }
  }

  void on_diffusion_output(const StageId& stage, const DiffusionOutput& out,
                           uint64_t now) {
    InFlight* f = find_inflight(out.request_id);
    if (!f) return;
    f->wave_parts[out.chunk_seq] = out.waveform;
    if (out.eos) f->wave_expected = out.chunk_seq + 1;
    if (is_exit(stage)) {
      if (out.waveform.element_count() > 0 || out.eos)
        metrics_.on_final_chunk(out.request_id, now);
      if (f->req.stream) {
        if (!f->streaming_status) {
          f->streaming_status = true;
          f->ctx->set_status(RequestStatus::STREAMING);
        }
        f->handle->push_chunk({out.chunk_seq, out.waveform, out.eos});
      }
    }
    if (f->wave_expected && f->wave_parts.size() == *f->wave_expected) {
      f->exits_done.insert(stage);
      maybe_finalize(out.request_id, now);
    }
  }

  bool is_exit(const StageId& s) const {
    for (const auto& x : plan_.graph.exits)
      if (x == s) return true;
    return false;
  }

  InFlight* find_inflight(uint64_t rid) {
    std::lock_guard lk(state_mu_);
    auto it = inflight_.find(rid);
    return it == inflight_.end() ? nullptr : &it->second;
  }

  void maybe_finalize(uint64_t rid, uint64_t now) {
    InFlight* f = find_inflight(rid);
    if (!f) return;
    for (const auto& x : plan_.graph.exits)
      if (!f->exits_done.count(x)) return;

    ref::FinalOutput out;
    if (!text_stage_.empty()) out.text_tokens = f->stage_tokens[text_stage_];
    if (!codec_stage_.empty()) out.codec_tokens = f->stage_tokens[codec_stage_];
    for (const auto& [seq, p] : f->wave_parts) {
      auto samples = p.as_i32();
      out.waveform.insert(out.waveform.end(), samples.begin(), samples.end());
    }
    metrics_.set_counts(rid, out.text_tokens.size(), out.codec_tokens.size(),
                        out.waveform.size());
    metrics_.on_done(rid, now, "DONE");
    out.metrics = metrics_.record(rid);
    out.status = "DONE";
    f->ctx->set_status(RequestStatus::DONE);

    auto handle = f->handle;
    cleanup_request(rid);
    {
      std::lock_guard lk(state_mu_);
      inflight_.erase(rid);
      completed_count_++;
    }
    handle->finish(std::move(out));
    if (on_done_) on_done_(rid, now);
    drained_cv_.notify_all();
  }

  void fail_request(uint64_t rid, const StageId& stage, const std::string& why) {
    InFlight* f = find_inflight(rid);
    if (!f) return;
    metrics_.on_done(rid, clock_->now_us(), "FAILED");
    ref::FinalOutput out;
    out.status = "FAILED";
    out.error = "stage " + stage + ": " + why;
    out.metrics = metrics_.record(rid);
    if (f->ctx->status() == RequestStatus::RUNNING ||
        f->ctx->status() == RequestStatus::STREAMING)
      f->ctx->set_status(RequestStatus::FAILED);
    auto handle = f->handle;
    cleanup_request(rid);
    {
      std::lock_guard lk(state_mu_);
      inflight_.erase(rid);
    }
    handle->finish(std::move(out));
    if (on_done_) on_done_(rid, clock_->now_us());
    drained_cv_.notify_all();
  }

  void fail_all_locked(const std::string& why) {
    std::vector<uint64_t> rids;
    for (auto& [rid, _] : inflight_) rids.push_back(rid);
    for (auto& s : submissions_) {
      ref::FinalOutput out;
      out.status = "FAILED";
      out.error = why;
      s.handle->finish(std::move(out));
    }
    submissions_.clear();
    state_mu_.unlock();
    for (uint64_t rid : rids) fail_request(rid, "orchestrator", why);
    state_mu_.lock();
  }

  void cleanup_request(uint64_t rid) {
    for (auto& [_, conn] : connectors_) conn->cleanup(rid);
  }

  DeploymentPlan plan_;
  const FunctionRegistry* registry_;
  std::unique_ptr<Clock> clock_;
  MetricsCollector metrics_;

  std::map<std::string, std::unique_ptr<Connector>> connectors_;
  std::map<StageId, std::unique_ptr<ArEngine>> ar_engines_;
  std::map<StageId, std::unique_ptr<DiffusionEngine>> diff_engines_;
  std::vector<StageId> topo_;
  StageId text_stage_;
  StageId codec_stage_;

  std::mutex loop_mu_;   // serializes tick()
  std::mutex state_mu_;  // guards inflight_ / submissions_ bookkeeping
  std::mutex wake_mu_;
  std::condition_variable wake_cv_;
  std::condition_variable_any drained_cv_;

  std::map<uint64_t, InFlight> inflight_;
  std::deque<PendingSubmission> submissions_;
  std::function<void(uint64_t, uint64_t)> on_done_;

  std::thread loop_thread_;
  std::atomic<bool> loop_running_{false};
  bool started_ = false;
  bool accepting_ = false;
  uint64_t completed_count_ = 0;
};

}  // namespace omni

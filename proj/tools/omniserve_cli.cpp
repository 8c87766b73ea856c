// Operator entry point: validate configs, serve HTTP, run benchmarks.

#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "omniserve/bench.hpp"
#include "omniserve/config.hpp"
#include "omniserve/http_service.hpp"
#include "omniserve/orchestrator.hpp"
#include "omniserve/reference_pipeline.hpp"

namespace {

omni::FunctionRegistry& registry() {
  static omni::FunctionRegistry reg = [] {
    omni::FunctionRegistry r;
    omni::ref::register_reference_pipeline(r);
    return r;
  }();
  return reg;
}

int cmd_validate(const std::string& path) {
  omni::DeploymentPlan plan;
  try {
    plan = omni::load_plan(path);
  } catch (const nlohmann::json::parse_error& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const omni::ConfigInvalid& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 1;
  }
  auto violations = omni::validate_graph(plan.graph, registry());
  for (const auto& v : violations)
    std::cout << omni::violation_to_string(v) << "\n";
  if (!violations.empty()) return 1;
  try {
    for (const auto& n : plan.graph.nodes) {
      auto it = plan.engines.find(n.id);
      if (it == plan.engines.end())
        throw omni::ConfigInvalid("missing engine config for stage " + n.id);
      it->second.check();
    }
  } catch (const omni::ConfigInvalid& e) {
    std::cout << e.what() << "\n";
    return 1;
  }
  std::cout << "ok\n";
  return 0;
}

omni::HttpService* g_service = nullptr;
omni::Orchestrator* g_orch = nullptr;

void on_signal(int) {
  if (g_orch) g_orch->shutdown(true);
  if (g_service) g_service->stop();
}

int cmd_serve(const std::string& path) {
  omni::DeploymentPlan plan;
  try {
    plan = omni::load_plan(path);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  try {
    omni::Orchestrator orch(std::move(plan), &registry());
    orch.start();
    orch.serve_async();
    omni::HttpService svc(orch);
    g_service = &svc;
    g_orch = &orch;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << "listening on " << orch.plan().server.listen << "\n";
    if (!svc.run(orch.plan().server.listen)) {
      std::cerr << "failed to bind " << orch.plan().server.listen << "\n";
      return 1;
    }
    orch.shutdown(true);
    return 0;
  } catch (const omni::OmniError& e) {
    std::cerr << "startup error: " << e.what() << "\n";
    return 1;
  }
}

void print_summary(const omni::bench::BenchReport& rep) {
  std::cout << rep.mode << ": n=" << rep.rows.size()
            << " mean_jct_us=" << rep.mean.jct_us
            << " p50_jct_us=" << rep.p50.jct_us
            << " p95_jct_us=" << rep.p95.jct_us
            << " mean_ttft_us=" << rep.mean.ttft_us
            << " mean_rtf=" << rep.mean.rtf << "\n";
  for (const auto& [stage, share] : rep.stage_share)
    std::cout << "  stage_share " << stage << " = " << share << "\n";
}

int cmd_bench(const std::string& path, uint64_t n, const std::string& arrival,
              double rate, const std::string& mode, uint64_t seed,
              const std::string& out) {
  omni::DeploymentPlan plan;
  try {
    plan = omni::load_plan(path);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  bool has_tcp = false;
  for (const auto& [_, tc] : plan.transports)
    if (tc.kind == omni::TransportKind::TCP) has_tcp = true;
  if (mode != "disaggregated" && has_tcp)
    std::cerr << "warning: monolithic mode runs in-process; configured "
                 "transports are ignored\n";

  omni::bench::WorkloadSpec spec;
  spec.n = n;
  spec.arrival = arrival;
  spec.rate = rate;
  spec.seed = seed;
  auto workload = omni::bench::gen_workload(spec);

  auto write_csv = [&](const omni::bench::BenchReport& rep,
                       const std::string& suffix) {
    if (out.empty()) return;
    std::string fname = out;
    if (!suffix.empty()) {
      auto dot = fname.rfind('.');
      if (dot == std::string::npos) dot = fname.size();
      fname.insert(dot, "." + suffix);
    }
    std::ofstream f(fname, std::ios::binary);
    f << rep.csv;
    std::cout << "wrote " << fname << "\n";
  };

  try {
    if (mode == "both") {
      auto dis = omni::bench::run_bench(plan, registry(), workload, spec,
                                        "disaggregated");
      auto mono = omni::bench::run_bench(plan, registry(), workload, spec,
                                         "monolithic");
      print_summary(dis);
      print_summary(mono);
      double reduction =
          (mono.mean.jct_us - dis.mean.jct_us) / mono.mean.jct_us * 100.0;
      std::cout << "mean JCT reduction: " << reduction << "%\n";
      write_csv(dis, "disaggregated");
      write_csv(mono, "monolithic");
    } else {
      auto rep = omni::bench::run_bench(plan, registry(), workload, spec, mode);
      print_summary(rep);
      write_csv(rep, "");
    }
  } catch (const omni::OmniError& e) {
    std::cerr << "bench failed: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"disaggregated multi-stage serving toolkit"};
  app.require_subcommand(1);

  std::string config_path;

  auto* validate = app.add_subcommand("validate", "check a deployment config");
  validate->add_option("config", config_path, "config JSON path")->required();

  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  serve->add_option("config", config_path, "config JSON path")->required();

  auto* bench = app.add_subcommand("bench", "run the benchmark harness");
  bench->add_option("config", config_path, "config JSON path")->required();
  uint64_t n = 100;
  std::string arrival = "closed-loop";
  double rate = 1.0;
  std::string mode = "disaggregated";
  uint64_t seed = 7;
  std::string out;
  bench->add_option("--requests", n, "number of requests");
  bench->add_option("--arrival", arrival, "closed-loop | poisson");
  bench->add_option("--rate", rate, "poisson arrivals per second");
  bench->add_option("--mode", mode, "disaggregated | monolithic | both");
  bench->add_option("--seed", seed, "workload seed");
  bench->add_option("--out", out, "CSV output path");

  CLI11_PARSE(app, argc, argv);

  if (validate->parsed()) return cmd_validate(config_path);
  if (serve->parsed()) return cmd_serve(config_path);
  if (bench->parsed()) return cmd_bench(config_path, n, arrival, rate, mode, seed, out);
  return 0;
}

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "omniserve/errors.hpp"

namespace omni {

using StageId = std::string;

enum class StageKind { AR, DIFFUSION };
enum class EdgeMode { FULL, STREAMING };
enum class TransportKind { INPROC, SHM, TCP };

struct StageNode {
  StageId id;
  StageKind kind = StageKind::AR;
  std::string engine_config_ref;
  std::string preprocess_ref;  // empty = none; AR only
  std::string forward_ref;
};

struct TransferEdge {
  StageId from;
  StageId to;
  std::string transfer_ref;
  EdgeMode mode = EdgeMode::FULL;
  TransportKind transport = TransportKind::INPROC;
  uint32_t streaming_chunk_size = 0;  // required iff mode == STREAMING

  std::string key() const { return from + "->" + to; }
};

struct StageGraph {
  std::vector<StageNode> nodes;
  std::vector<TransferEdge> edges;
  StageId entry;
  std::vector<StageId> exits;

  const StageNode* find_node(const StageId& id) const {
    for (const auto& n : nodes)
      if (n.id == id) return &n;
    return nullptr;
  }

  std::vector<const TransferEdge*> edges_from(const StageId& id) const {
    std::vector<const TransferEdge*> out;
    for (const auto& e : edges)
      if (e.from == id) out.push_back(&e);
    return out;
  }

  std::vector<const TransferEdge*> edges_to(const StageId& id) const {
    std::vector<const TransferEdge*> out;
    for (const auto& e : edges)
      if (e.to == id) out.push_back(&e);
    return out;
  }
};

struct Violation {
  enum class Kind {
    CycleDetected,
    Unreachable,
    DanglingRef,
    BadEntry,
    BadExit,
    DuplicateEdge,
    DuplicateNode,
    BadEdgeEndpoint,
    SelfEdge,
    BadChunkSize,
    PreprocessOnDiffusion,
  };
  Kind kind;
  std::string subject;  // node or edge name

  bool operator==(const Violation&) const = default;
  bool operator<(const Violation& o) const {
    if (kind != o.kind) return kind < o.kind;
    return subject < o.subject;
  }
};

inline const char* violation_kind_name(Violation::Kind k) {
  switch (k) {
    case Violation::Kind::CycleDetected: return "CycleDetected";
    case Violation::Kind::Unreachable: return "Unreachable";
    case Violation::Kind::DanglingRef: return "DanglingRef";
    case Violation::Kind::BadEntry: return "BadEntry";
    case Violation::Kind::BadExit: return "BadExit";
    case Violation::Kind::DuplicateEdge: return "DuplicateEdge";
    case Violation::Kind::DuplicateNode: return "DuplicateNode";
    case Violation::Kind::BadEdgeEndpoint: return "BadEdgeEndpoint";
    case Violation::Kind::SelfEdge: return "SelfEdge";
    case Violation::Kind::BadChunkSize: return "BadChunkSize";
    case Violation::Kind::PreprocessOnDiffusion: return "PreprocessOnDiffusion";
  }
  return "Unknown";
}

inline std::string violation_to_string(const Violation& v) {
  return std::string(violation_kind_name(v.kind)) + "{" + v.subject + "}";
}

/// Interface the validator uses to check function references; the real
/// registry lives in registry.hpp but graph validation must not depend on it.
struct FunctionResolver {
  virtual ~FunctionResolver() = default;
  virtual bool has_forward(const std::string& name) const = 0;
  virtual bool has_preprocess(const std::string& name) const = 0;
  virtual bool has_transfer(const std::string& name) const = 0;
};

/// Permissive resolver for structure-only validation.
struct AcceptAllResolver final : FunctionResolver {
  bool has_forward(const std::string&) const override { return true; }
  bool has_preprocess(const std::string&) const override { return true; }
  bool has_transfer(const std::string&) const override { return true; }
};

// Returns every violation, sorted by (kind, subject). Empty means valid.
inline std::vector<Violation> validate_graph(
    const StageGraph& g, const FunctionResolver& resolver = AcceptAllResolver{}) {
  std::vector<Violation> out;
  using K = Violation::Kind;

  std::set<StageId> ids;
  for (const auto& n : g.nodes) {
    if (n.id.empty() || !ids.insert(n.id).second)
      out.push_back({K::DuplicateNode, n.id});
  }

  for (const auto& n : g.nodes) {
    // Diffusion nodes run the built-in denoiser and need no forward ref.
    if (n.kind == StageKind::AR && !resolver.has_forward(n.forward_ref))
      out.push_back({K::DanglingRef, n.id + ":" + n.forward_ref});
    if (!n.preprocess_ref.empty()) {
      if (n.kind == StageKind::DIFFUSION)
        out.push_back({K::PreprocessOnDiffusion, n.id});
      else if (!resolver.has_preprocess(n.preprocess_ref))
        out.push_back({K::DanglingRef, n.id + ":" + n.preprocess_ref});
    }
  }

  std::set<std::pair<StageId, StageId>> edge_pairs;
  for (const auto& e : g.edges) {
    if (e.from == e.to) out.push_back({K::SelfEdge, e.key()});
    if (!edge_pairs.insert({e.from, e.to}).second)
      out.push_back({K::DuplicateEdge, e.key()});
    if (!ids.count(e.from) || !ids.count(e.to))
      out.push_back({K::BadEdgeEndpoint, e.key()});
    if (!resolver.has_transfer(e.transfer_ref))
      out.push_back({K::DanglingRef, e.key() + ":" + e.transfer_ref});
    if (e.mode == EdgeMode::STREAMING && e.streaming_chunk_size == 0)
      out.push_back({K::BadChunkSize, e.key()});
  }

  if (!ids.count(g.entry)) {
    out.push_back({K::BadEntry, g.entry});
  } else {
    for (const auto& e : g.edges)
      if (e.to == g.entry) {
        out.push_back({K::BadEntry, g.entry});
        break;
      }
  }
  if (g.exits.empty()) out.push_back({K::BadExit, "<none>"});
  for (const auto& x : g.exits)
    if (!ids.count(x)) out.push_back({K::BadExit, x});

  // Cycle detection via Kahn's algorithm; leftover nodes form cycles.
  std::map<StageId, int> indeg;
  for (const auto& id : ids) indeg[id] = 0;
  for (const auto& e : g.edges)
    if (ids.count(e.from) && ids.count(e.to) && e.from != e.to) indeg[e.to]++;
  std::vector<StageId> frontier;
  for (const auto& [id, d] : indeg)
    if (d == 0) frontier.push_back(id);
  size_t removed = 0;
  while (!frontier.empty()) {
    StageId u = frontier.back();
    frontier.pop_back();
    removed++;
    for (const auto& e : g.edges)
      if (e.from == u && ids.count(e.to) && e.from != e.to && --indeg[e.to] == 0)
        frontier.push_back(e.to);
  }
  if (removed < ids.size()) {
    std::string members;
    for (const auto& [id, d] : indeg)
      if (d > 0) members += (members.empty() ? "" : ",") + id;
    out.push_back({K::CycleDetected, members});
  }

  // Reachability from entry, plus reverse reachability for exits.
  if (ids.count(g.entry)) {
    std::set<StageId> seen{g.entry};
    std::vector<StageId> stack{g.entry};
    while (!stack.empty()) {
      StageId u = stack.back();
      stack.pop_back();
      for (const auto& e : g.edges)
        if (e.from == u && ids.count(e.to) && seen.insert(e.to).second)
          stack.push_back(e.to);
    }
    for (const auto& id : ids)
      if (!seen.count(id)) out.push_back({K::Unreachable, id});
  }

  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Deterministic topological order: Kahn's with lexicographically smallest
// available node first.
inline std::vector<StageId> topo_order(const StageGraph& g) {
  if (!validate_graph(g).empty())
    throw OmniError("topo_order requires a valid graph");
  std::map<StageId, int> indeg;
  for (const auto& n : g.nodes) indeg[n.id] = 0;
  for (const auto& e : g.edges) indeg[e.to]++;
  std::set<StageId> ready;
  for (const auto& [id, d] : indeg)
    if (d == 0) ready.insert(id);
  std::vector<StageId> order;
  while (!ready.empty()) {
    StageId u = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(u);
    for (const auto& e : g.edges)
      if (e.from == u && --indeg[e.to] == 0) ready.insert(e.to);
  }
  return order;
}

}  // namespace omni

#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "gfg/distributions.hpp"
#include "gfg/graph.hpp"

namespace gfg {

/// Flow decision taken at a branch or selection node.
struct Choice {
  long long label = 0;
  std::vector<NodeId> nodes;  // successors chosen by a branch, or the input chosen by a selection
  friend bool operator==(const Choice&, const Choice&) = default;
};

/// One realized execution of a graph.
struct Trace {
  std::map<NodeId, Tensor> values;
  std::vector<NodeId> path;
  std::map<NodeId, Choice> branch_choices;

  bool executed(NodeId id) const { return values.count(id) != 0 || branch_choices.count(id) != 0; }
  double value(NodeId id) const { return values.at(id).item(); }
  friend bool operator==(const Trace&, const Trace&) = default;
};

namespace detail {

inline Tensor to_tensor(const Values& v, const std::vector<std::size_t>& shape) {
  Tensor t;
  t.shape = shape;
  t.data.clear();
  for (const auto& x : v) t.data.push_back(x.value());
  return t;
}

inline void record_choice(const GenerativeFlowGraph& g, NodeId id, const ExecState& s, Trace& t) {
  Choice c;
  c.label = *s.labels[id.value];
  if (g.node(id).kind == NodeKind::Branch) {
    for (auto li : g.out_links(id)) {
      const auto& l = g.links()[li];
      if (l.kind != LinkKind::Influence && l.when == c.label) c.nodes.push_back(l.to);
    }
  } else {
    c.nodes.push_back(selected_input(g, id, c.label, s));
  }
  t.branch_choices[id] = std::move(c);
}

}  // namespace detail

/// Forward simulation in topological order. Observed nodes keep their stored
/// values; parameters take their stored (or initial) values.
inline Trace sample_trace(const GenerativeFlowGraph& g, std::uint64_t seed) {
  Rng rng(seed);
  ExecState s(g.nodes().size());
  Trace t;
  for (NodeId id : g.topological_order()) {
    const Node& n = g.node(id);
    if (is_control(n.kind)) {
      if (!execute_control(g, id, s)) continue;
      detail::record_choice(g, id, s, t);
      if (s.values[id.value]) t.values[id] = detail::to_tensor(*s.values[id.value], n.shape);
      t.path.push_back(id);
      continue;
    }
    if (!should_execute(g, id, s)) continue;
    if (n.kind == NodeKind::Latent) {
      s.values[id.value] = sample_values(n, evaluate_args(g, id, s), rng);
    } else {
      s.values[id.value] = initial_values(n);
    }
    t.values[id] = detail::to_tensor(*s.values[id.value], n.kind == NodeKind::Observed || is_param(n.kind) ? n.value.shape : n.shape);
    t.path.push_back(id);
  }
  return t;
}

/// Rebuilds the execution state of a trace, replaying its recorded values.
inline ExecState replay(const GenerativeFlowGraph& g, const Trace& t) {
  ExecState s(g.nodes().size());
  for (NodeId id : g.topological_order()) {
    const Node& n = g.node(id);
    if (is_control(n.kind)) {
      execute_control(g, id, s);
      continue;
    }
    if (!should_execute(g, id, s)) continue;
    if (n.kind == NodeKind::Latent) {
      const auto it = t.values.find(id);
      if (it == t.values.end()) throw PredicateError("trace has no value for executed latent '" + n.name + "'");
      Values v;
      for (double x : it->second.data) v.emplace_back(x);
      s.values[id.value] = std::move(v);
    } else {
      s.values[id.value] = initial_values(n);
    }
  }
  return s;
}

}  // namespace gfg

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "gfg/autodiff.hpp"
#include "gfg/graph.hpp"
#include "gfg/trace.hpp"

namespace gfg {

/// Factor p_{PaΘ}(target | PaZ) of one latent or observed node.
struct Factor {
  NodeId target;
  std::vector<NodeId> parent_variables;  // latent or observed parents, through selections
  std::vector<NodeId> parent_params;
  std::vector<NodeId> via_detached;      // parents reached over a detached link
};

// ---------------------------------------------------------------------------
// Canonical rendering

namespace detail {

struct NamePart {
  std::string base;
  std::optional<long long> index;
};

inline NamePart split_name(const std::string& name) {
  static const std::regex re(R"(^(.*)\{(-?\d+)\}$)");
  std::smatch m;
  if (std::regex_match(name, m, re)) return {m[1].str(), std::stoll(m[2].str())};
  return {name, std::nullopt};
}

}  // namespace detail

/// Sorts names by base and index and compresses consecutive indices into ranges,
/// e.g. {z_m{1}, z_m{2}, z_m{3}} -> z_m{1;3}.
inline std::vector<std::string> canonical_names(const std::vector<std::string>& names, const std::string& mark = "") {
  std::vector<detail::NamePart> parts;
  for (const auto& n : names) parts.push_back(detail::split_name(n));
  std::sort(parts.begin(), parts.end(), [](const auto& a, const auto& b) {
    if (a.base != b.base) return a.base < b.base;
    return a.index.value_or(-1) < b.index.value_or(-1);
  });
  parts.erase(std::unique(parts.begin(), parts.end(),
                          [](const auto& a, const auto& b) { return a.base == b.base && a.index == b.index; }),
              parts.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < parts.size();) {
    if (!parts[i].index) {
      out.push_back(mark + parts[i].base);
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < parts.size() && parts[j + 1].base == parts[i].base && parts[j + 1].index &&
           *parts[j + 1].index == *parts[j].index + 1)
      ++j;
    if (j == i)
      out.push_back(mark + parts[i].base + "{" + std::to_string(*parts[i].index) + "}");
    else
      out.push_back(mark + parts[i].base + "{" + std::to_string(*parts[i].index) + ";" + std::to_string(*parts[j].index) + "}");
    i = j + 1;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& xs, const std::string& sep = ", ") {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? sep : "") + xs[i];
  return out;
}

/// p_{params}(targets | conditions) with every list already canonical.
inline std::string render_factor(const std::vector<std::string>& targets, const std::vector<std::string>& conditions,
                                 const std::vector<std::string>& params) {
  std::string s = "p";
  if (!params.empty()) s += "_{" + join(params) + "}";
  s += "(" + join(targets);
  if (!conditions.empty()) s += " | " + join(conditions);
  return s + ")";
}

inline std::vector<std::string> names_of(const GenerativeFlowGraph& g, const std::vector<NodeId>& ids) {
  std::vector<std::string> out;
  for (auto id : ids) out.push_back(g.name(id));
  return out;
}

// ---------------------------------------------------------------------------
// Joint factorization

namespace detail {

/// Sources of the value `parent` stands for as seen by a factor; selections are
/// replaced by their inputs. `detached` accumulates over the path.
inline void resolve_parent(const GenerativeFlowGraph& g, NodeId parent, bool detached,
                           std::map<NodeId, bool>& out) {
  const auto& n = g.node(parent);
  if (n.kind == NodeKind::Selection) {
    for (auto li : g.in_links(parent)) {
      const auto& l = g.links()[li];
      if (l.kind == LinkKind::Influence) continue;
      resolve_parent(g, l.from, detached || l.kind == LinkKind::Detached, out);
    }
    return;
  }
  if (n.kind == NodeKind::Branch) return;
  const auto it = out.find(parent);
  if (it == out.end())
    out[parent] = detached;
  else
    it->second = it->second && detached;
}

}  // namespace detail

inline Factor make_factor(const GenerativeFlowGraph& g, NodeId id) {
  std::map<NodeId, bool> parents;
  for (auto li : g.in_links(id)) {
    const auto& l = g.links()[li];
    if (l.kind == LinkKind::Influence) continue;
    detail::resolve_parent(g, l.from, l.kind == LinkKind::Detached, parents);
  }
  Factor f;
  f.target = id;
  for (const auto& [p, detached] : parents) {
    if (is_param(g.node(p).kind))
      f.parent_params.push_back(p);
    else
      f.parent_variables.push_back(p);
    if (detached) f.via_detached.push_back(p);
  }
  return f;
}

/// p_{params}(target | parents) for a single factor; `mark_detached` prefixes detached parents with "~".
inline std::string render(const GenerativeFlowGraph& g, const Factor& f, bool mark_detached = false) {
  std::vector<std::string> vars, vars_d, params, params_d;
  auto detached = [&](NodeId p) { return std::find(f.via_detached.begin(), f.via_detached.end(), p) != f.via_detached.end(); };
  for (auto p : f.parent_variables) (mark_detached && detached(p) ? vars_d : vars).push_back(g.name(p));
  for (auto p : f.parent_params) (mark_detached && detached(p) ? params_d : params).push_back(g.name(p));
  auto cond = canonical_names(vars_d, "~");
  for (auto& s : canonical_names(vars)) cond.push_back(s);
  auto subs = canonical_names(params_d, "~");
  for (auto& s : canonical_names(params)) subs.push_back(s);
  return render_factor({g.name(f.target)}, cond, subs);
}

struct JointFactorization {
  std::vector<Factor> factors;  // topological order

  std::string render(const GenerativeFlowGraph& g) const {
    std::vector<std::string> parts;
    for (const auto& f : factors) parts.push_back(gfg::render(g, f));
    return join(parts, " ");
  }
};

/// One factor per latent and observed node, in topological order.
inline JointFactorization factorize_joint(const GenerativeFlowGraph& g) {
  JointFactorization j;
  for (auto id : g.topological_order())
    if (is_variable(g.node(id).kind)) j.factors.push_back(make_factor(g, id));
  return j;
}

/// Factors of the nodes executed on a trace.
inline JointFactorization factorize_joint(const GenerativeFlowGraph& g, const Trace& t) {
  JointFactorization j;
  for (auto id : t.path)
    if (is_variable(g.node(id).kind)) j.factors.push_back(make_factor(g, id));
  return j;
}

// ---------------------------------------------------------------------------
// Grouped views (abstraction levels)

/// Factor of a group of nodes: p_{params}(targets | external parents).
struct GroupFactor {
  std::vector<NodeId> targets;
  std::vector<NodeId> parents;
  std::vector<NodeId> params;
  std::vector<Factor> atoms;
};

struct GroupedFactorization {
  std::vector<GroupFactor> groups;

  std::string render(const GenerativeFlowGraph& g) const {
    std::vector<std::string> parts;
    for (const auto& gr : groups)
      parts.push_back(render_factor(canonical_names(names_of(g, gr.targets)), canonical_names(names_of(g, gr.parents)),
                                    canonical_names(names_of(g, gr.params))));
    return join(parts, " ");
  }

  /// Rendered atomic factors of every group, sorted.
  std::vector<std::string> atoms(const GenerativeFlowGraph& g) const {
    std::vector<std::string> out;
    for (const auto& gr : groups)
      for (const auto& f : gr.atoms) out.push_back(gfg::render(g, f));
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// Factorization at the granularity of `groups`; variable nodes not listed form singleton groups.
inline GroupedFactorization factorize_grouped(const GenerativeFlowGraph& g, const std::vector<std::vector<NodeId>>& groups) {
  std::map<NodeId, std::size_t> group_of;
  std::vector<std::vector<NodeId>> all = groups;
  for (std::size_t i = 0; i < groups.size(); ++i)
    for (auto id : groups[i]) group_of[id] = i;
  for (auto id : g.topological_order())
    if (is_variable(g.node(id).kind) && !group_of.count(id)) {
      group_of[id] = all.size();
      all.push_back({id});
    }
  std::map<NodeId, std::size_t> position;
  for (std::size_t i = 0; i < g.topological_order().size(); ++i) position[g.topological_order()[i]] = i;

  std::vector<std::pair<std::size_t, GroupFactor>> keyed;
  for (std::size_t gi = 0; gi < all.size(); ++gi) {
    GroupFactor gf;
    std::set<NodeId> parents, params;
    std::size_t first = position.size();
    for (auto id : all[gi]) {
      if (!is_variable(g.node(id).kind)) continue;
      gf.targets.push_back(id);
      first = std::min(first, position.at(id));
      const Factor f = make_factor(g, id);
      for (auto p : f.parent_variables)
        if (!group_of.count(p) || group_of.at(p) != gi) parents.insert(p);
      params.insert(f.parent_params.begin(), f.parent_params.end());
      gf.atoms.push_back(f);
    }
    if (gf.targets.empty()) continue;
    gf.parents.assign(parents.begin(), parents.end());
    gf.params.assign(params.begin(), params.end());
    keyed.emplace_back(first, std::move(gf));
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  GroupedFactorization out;
  for (auto& [_, gf] : keyed) out.groups.push_back(std::move(gf));
  return out;
}

enum class CollectionLevel { Innermost, Outermost };

/// Groups of variable nodes by collection. Plate instances are never merged,
/// since replicated collections are conditionally independent.
inline std::vector<std::vector<NodeId>> collection_groups(const GenerativeFlowGraph& g, CollectionLevel level) {
  std::map<CollectionId, std::vector<NodeId>> by;
  for (auto id : g.topological_order()) {
    auto c = g.node(id).collection;
    if (!c || !is_variable(g.node(id).kind)) continue;
    if (level == CollectionLevel::Outermost)
      while (!g.collection(*c).instance && g.collection(*c).parent) c = g.collection(*c).parent;
    by[*c].push_back(id);
  }
  std::vector<std::vector<NodeId>> out;
  for (auto& [_, v] : by) out.push_back(std::move(v));
  return out;
}

// ---------------------------------------------------------------------------
// Posterior factorization

/// p_{Θ, ~PaΘ}(Z | ~PaZ, X) of one block of nodes joined by generative links.
struct PosteriorBlock {
  std::vector<NodeId> latents;
  std::vector<NodeId> observed;
  std::vector<NodeId> params;
  std::vector<NodeId> frozen_latents;
  std::vector<NodeId> frozen_params;
  std::vector<Factor> atoms;
  bool equals_prior = false;  // no evidence: the block posterior is its prior
};

struct PosteriorFactorization {
  std::vector<PosteriorBlock> blocks;

  std::string render(const GenerativeFlowGraph& g) const {
    std::vector<std::string> parts;
    for (const auto& b : blocks) {
      if (b.equals_prior) {
        for (const auto& f : b.atoms) parts.push_back(gfg::render(g, f, true));
        continue;
      }
      auto cond = canonical_names(names_of(g, b.frozen_latents), "~");
      for (auto& s : canonical_names(names_of(g, b.observed))) cond.push_back(s);
      auto subs = canonical_names(names_of(g, b.frozen_params), "~");
      for (auto& s : canonical_names(names_of(g, b.params))) subs.push_back(s);
      parts.push_back(render_factor(canonical_names(names_of(g, b.latents)), cond, subs));
    }
    return join(parts, " ");
  }
};

namespace detail {

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
  void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

}  // namespace detail

/// Splits the posterior at detached links. Variable nodes and variable parameters
/// joined by generative links share a block; detached sources appear frozen.
inline PosteriorFactorization factorize_posterior(const GenerativeFlowGraph& g) {
  const std::size_t n = g.nodes().size();
  detail::UnionFind uf(n);
  auto joins = [&](NodeId id) {
    const auto k = g.node(id).kind;
    return k != NodeKind::FixedParam;
  };
  for (const auto& l : g.links())
    if (l.kind == LinkKind::Generative && joins(l.from) && joins(l.to)) uf.unite(l.from.value, l.to.value);

  std::map<std::size_t, PosteriorBlock> blocks;
  std::map<std::size_t, std::size_t> first;
  std::map<std::size_t, std::set<NodeId>> own_params, frozen_latents, frozen_params;
  const auto& order = g.topological_order();
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const NodeId id = order[pos];
    const auto& node = g.node(id);
    if (!is_variable(node.kind)) continue;
    const std::size_t root = uf.find(id.value);
    auto& b = blocks[root];
    if (!first.count(root)) first[root] = pos;
    (node.kind == NodeKind::Latent ? b.latents : b.observed).push_back(id);
    const Factor f = make_factor(g, id);
    b.atoms.push_back(f);
    for (auto p : f.parent_params) {
      const bool detached = std::find(f.via_detached.begin(), f.via_detached.end(), p) != f.via_detached.end();
      (detached ? frozen_params : own_params)[root].insert(p);
    }
    for (auto p : f.parent_variables) {
      const bool detached = std::find(f.via_detached.begin(), f.via_detached.end(), p) != f.via_detached.end();
      if (detached && g.node(p).kind == NodeKind::Latent && uf.find(p.value) != root) frozen_latents[root].insert(p);
    }
  }
  std::vector<std::pair<std::size_t, PosteriorBlock>> ordered;
  for (auto& [root, b] : blocks) {
    if (b.latents.empty()) continue;
    for (auto p : own_params[root]) b.params.push_back(p);
    // A frozen latent brings the parameters of its own factor along, frozen.
    for (auto z : frozen_latents[root])
      for (auto p : make_factor(g, z).parent_params) frozen_params[root].insert(p);
    for (auto p : frozen_params[root])
      if (!own_params[root].count(p)) b.frozen_params.push_back(p);
    b.frozen_latents.assign(frozen_latents[root].begin(), frozen_latents[root].end());
    b.equals_prior = b.observed.empty();
    ordered.emplace_back(first[root], std::move(b));
  }
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  PosteriorFactorization out;
  for (auto& [_, b] : ordered) out.blocks.push_back(std::move(b));
  return out;
}

// ---------------------------------------------------------------------------
// Partition for stochastic message passing

struct ParentEdge {
  CollectionId other;
  bool detached = false;    // every link from `other` is detached
  bool via_global = false;  // coupled through a shared global observed node
  friend bool operator==(const ParentEdge&, const ParentEdge&) = default;
};

/// Collections C^a, global observed nodes X_G, and the dependencies between collections.
struct PosteriorPartition {
  std::vector<CollectionId> collections;  // sorted by name
  std::vector<NodeId> global_observed;
  std::map<CollectionId, std::vector<ParentEdge>> parent_map;
  std::map<CollectionId, std::vector<NodeId>> latents;
  std::map<CollectionId, std::vector<NodeId>> observed;
  std::map<CollectionId, std::vector<NodeId>> params;  // variable parameters learned by the collection
  std::vector<NodeId> frozen_params;                   // variable parameters no single collection owns

  std::optional<CollectionId> owner(NodeId id) const {
    for (const auto& [c, v] : latents)
      if (std::find(v.begin(), v.end(), id) != v.end()) return c;
    for (const auto& [c, v] : observed)
      if (std::find(v.begin(), v.end(), id) != v.end()) return c;
    for (const auto& [c, v] : params)
      if (std::find(v.begin(), v.end(), id) != v.end()) return c;
    return std::nullopt;
  }
};

namespace detail {

inline std::vector<NodeId> sorted_by_name(const GenerativeFlowGraph& g, std::vector<NodeId> v) {
  std::sort(v.begin(), v.end(), [&](NodeId a, NodeId b) { return g.name(a) < g.name(b); });
  return v;
}

}  // namespace detail

inline PosteriorPartition partition_for_smp(const GenerativeFlowGraph& g) {
  PosteriorPartition p;
  std::map<NodeId, CollectionId> assigned;
  for (auto id : g.latents()) {
    const auto c = g.outermost(id);
    if (!c) throw UncoveredNodeError("latent '" + g.name(id) + "' lies outside every collection");
    assigned[id] = *c;
  }
  std::set<CollectionId> cols;
  for (const auto& [_, c] : assigned) cols.insert(c);
  p.collections.assign(cols.begin(), cols.end());
  std::sort(p.collections.begin(), p.collections.end(),
            [&](CollectionId a, CollectionId b) { return g.collection(a).name < g.collection(b).name; });

  auto latent_owners = [&](const Factor& f) {
    std::set<CollectionId> s;
    for (auto v : f.parent_variables)
      if (g.node(v).kind == NodeKind::Latent) s.insert(assigned.at(v));
    return s;
  };

  for (auto id : g.observed()) {
    const Factor f = make_factor(g, id);
    const auto owners = latent_owners(f);
    if (owners.size() >= 2) {
      p.global_observed.push_back(id);
      continue;
    }
    std::optional<CollectionId> c = g.outermost(id);
    if (c && !cols.count(*c)) c.reset();
    if (!c && owners.size() == 1) c = *owners.begin();
    if (c) assigned[id] = *c;
  }
  p.global_observed = detail::sorted_by_name(g, p.global_observed);

  for (auto id : g.nodes_of(NodeKind::VariableParam)) {
    std::optional<CollectionId> c = g.outermost(id);
    if (c && !cols.count(*c)) c.reset();
    if (!c) {
      std::set<CollectionId> child_cols;
      bool global_child = false;
      for (auto li : g.out_links(id)) {
        const auto to = g.links()[li].to;
        if (const auto it = assigned.find(to); it != assigned.end())
          child_cols.insert(it->second);
        else
          global_child = true;
      }
      if (child_cols.size() == 1 && !global_child) c = *child_cols.begin();
    }
    if (c)
      assigned[id] = *c;
    else
      p.frozen_params.push_back(id);
  }
  p.frozen_params = detail::sorted_by_name(g, p.frozen_params);

  for (auto c : p.collections) {
    p.latents[c] = {};
    p.observed[c] = {};
    p.params[c] = {};
    p.parent_map[c] = {};
  }
  for (const auto& [id, c] : assigned) {
    const auto k = g.node(id).kind;
    if (k == NodeKind::Latent)
      p.latents[c].push_back(id);
    else if (k == NodeKind::Observed)
      p.observed[c].push_back(id);
    else
      p.params[c].push_back(id);
  }
  for (auto c : p.collections) {
    p.latents[c] = detail::sorted_by_name(g, p.latents[c]);
    p.observed[c] = detail::sorted_by_name(g, p.observed[c]);
    p.params[c] = detail::sorted_by_name(g, p.params[c]);
  }

  // Parent edges: direct dependencies, then couplings through global observed nodes.
  std::map<CollectionId, std::map<CollectionId, ParentEdge>> edges;
  for (const auto& [id, c] : assigned) {
    if (!is_variable(g.node(id).kind)) continue;
    const Factor f = make_factor(g, id);
    auto note = [&](NodeId parent) {
      const auto it = assigned.find(parent);
      if (it == assigned.end() || it->second == c) return;
      const bool detached = std::find(f.via_detached.begin(), f.via_detached.end(), parent) != f.via_detached.end();
      auto [e, fresh] = edges[c].try_emplace(it->second, ParentEdge{it->second, detached, false});
      if (!fresh) e->second.detached = e->second.detached && detached;
    };
    for (auto v : f.parent_variables) note(v);
    for (auto v : f.parent_params) note(v);
  }
  for (auto x : p.global_observed) {
    const auto owners = latent_owners(make_factor(g, x));
    for (auto a : owners)
      for (auto b : owners) {
        if (a == b) continue;
        auto [e, fresh] = edges[a].try_emplace(b, ParentEdge{b, false, true});
        if (!fresh) {
          e->second.via_global = true;
          e->second.detached = false;
        }
      }
  }
  for (auto& [c, m] : edges) {
    std::vector<ParentEdge> v;
    for (auto& [_, e] : m) v.push_back(e);
    std::sort(v.begin(), v.end(), [&](const auto& a, const auto& b) { return g.collection(a.other).name < g.collection(b.other).name; });
    p.parent_map[c] = std::move(v);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Log joint

/// log p of every executed latent and observed node.
inline std::vector<std::pair<NodeId, Scalar>> factor_log_probs(const GenerativeFlowGraph& g, const ExecState& s) {
  std::vector<std::pair<NodeId, Scalar>> out;
  for (auto id : g.topological_order()) {
    const auto& n = g.node(id);
    if (!is_variable(n.kind) || !s.values[id.value]) continue;
    out.emplace_back(id, log_density(n, evaluate_args(g, id, s), *s.values[id.value]));
  }
  return out;
}

/// Sum of the factors executed on the trace (a constant Scalar).
inline Scalar log_joint(const GenerativeFlowGraph& g, const Trace& t) {
  const ExecState s = replay(g, t);
  Scalar total(0.0);
  for (const auto& [_, lp] : factor_log_probs(g, s)) total = Scalar(total.value() + lp.value());
  return total;
}

/// Differentiable log joint: latent values and variable parameters are tape leaves.
struct DifferentiableJoint {
  Scalar value;
  std::map<NodeId, Values> leaves;
  std::map<NodeId, Scalar> terms;  // log p of each executed factor
};

inline DifferentiableJoint log_joint(const GenerativeFlowGraph& g, const Trace& t, Tape& tape) {
  ExecState s = replay(g, t);
  DifferentiableJoint out;
  for (auto id : g.topological_order()) {
    const auto& n = g.node(id);
    if (!s.values[id.value] || !(n.kind == NodeKind::Latent || n.kind == NodeKind::VariableParam)) continue;
    Values leaves;
    for (const auto& x : *s.values[id.value]) leaves.push_back(tape.variable(x.value()));
    s.values[id.value] = leaves;
    out.leaves[id] = std::move(leaves);
  }
  // Selections copy their chosen input, so refresh them from the new leaves.
  for (auto id : g.topological_order())
    if (g.node(id).kind == NodeKind::Selection && s.labels[id.value])
      s.values[id.value] = parent_value(g, id, selected_input(g, id, *s.labels[id.value], s), s);
  std::vector<Scalar> terms;
  for (auto& [id, lp] : factor_log_probs(g, s)) {
    terms.push_back(lp);
    out.terms[id] = lp;
  }
  out.value = terms.empty() ? Scalar(0.0) : sum(terms);
  return out;
}

}  // namespace gfg

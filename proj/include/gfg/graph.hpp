#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gfg/distributions.hpp"
#include "gfg/error.hpp"
#include "gfg/expr.hpp"
#include "gfg/idioms.hpp"
#include "gfg/model.hpp"

namespace gfg {

struct NodeId {
  std::uint32_t value = 0;
  auto operator<=>(const NodeId&) const = default;
};

struct CollectionId {
  std::uint32_t value = 0;
  auto operator<=>(const CollectionId&) const = default;
};

// ---------------------------------------------------------------------------
// Predicates for branch and selection nodes

/// Maps realized condition values to an integer flow label.
using Predicate = std::function<long long(std::span<const double>)>;

class PredicateRegistry {
 public:
  void add(std::string name, Predicate p) { table_[std::move(name)] = std::move(p); }
  bool contains(const std::string& name) const { return table_.count(name) != 0; }

  long long evaluate(const std::string& name, std::span<const double> args) const {
    const auto it = table_.find(name);
    if (it == table_.end()) throw PredicateError("predicate '" + name + "' is not registered");
    for (double v : args)
      if (!std::isfinite(v)) throw PredicateError("predicate '" + name + "' received a non-finite value");
    try {
      return it->second(args);
    } catch (const PredicateError&) {
      throw;
    } catch (const std::exception& e) {
      throw PredicateError("predicate '" + name + "' failed: " + e.what());
    }
  }

  /// positive, negative, nonzero: 1 or 0 on the first argument; argmax: index of the
  /// largest argument; index: the first argument read as an integer label.
  static PredicateRegistry builtin() {
    PredicateRegistry r;
    auto first = [](std::span<const double> a) {
      if (a.empty()) throw PredicateError("predicate needs at least one argument");
      return a[0];
    };
    r.add("positive", [first](std::span<const double> a) -> long long { return first(a) > 0.0 ? 1 : 0; });
    r.add("negative", [first](std::span<const double> a) -> long long { return first(a) < 0.0 ? 1 : 0; });
    r.add("nonzero", [first](std::span<const double> a) -> long long { return first(a) != 0.0 ? 1 : 0; });
    r.add("argmax", [](std::span<const double> a) -> long long {
      if (a.empty()) throw PredicateError("argmax needs at least one argument");
      return static_cast<long long>(std::max_element(a.begin(), a.end()) - a.begin());
    });
    r.add("index", [first](std::span<const double> a) -> long long {
      try {
        return as_index(first(a));
      } catch (const DomainError& e) {
        throw PredicateError(e.what());
      }
    });
    return r;
  }

 private:
  std::map<std::string, Predicate> table_;
};

// ---------------------------------------------------------------------------
// Validation report

enum class IssueKind { Schema, Name, LinkTarget, Subset, CollectionOverlap, Replication, Cycle, Arity, Shape };

inline std::string_view to_string(IssueKind k) {
  switch (k) {
    case IssueKind::Schema: return "SchemaError";
    case IssueKind::Name: return "NameError";
    case IssueKind::LinkTarget: return "LinkTargetError";
    case IssueKind::Subset: return "SubsetError";
    case IssueKind::CollectionOverlap: return "CollectionOverlapError";
    case IssueKind::Replication: return "ReplicationError";
    case IssueKind::Cycle: return "CycleError";
    case IssueKind::Arity: return "ArityError";
    case IssueKind::Shape: return "ShapeError";
  }
  return "?";
}

struct Issue {
  IssueKind kind;
  std::string message;
  std::vector<std::string> subjects;
};

struct ValidationReport {
  std::vector<Issue> issues;

  bool ok() const { return issues.empty(); }
  std::size_t count(IssueKind k) const {
    return static_cast<std::size_t>(std::count_if(issues.begin(), issues.end(), [k](const Issue& i) { return i.kind == k; }));
  }
};

[[noreturn]] inline void throw_issue(const Issue& i) {
  const std::string msg = std::string(to_string(i.kind)) + ": " + i.message;
  switch (i.kind) {
    case IssueKind::Name: throw NameError(msg);
    case IssueKind::LinkTarget: throw LinkTargetError(msg);
    case IssueKind::Subset: throw SubsetError(msg);
    case IssueKind::CollectionOverlap: throw CollectionOverlapError(msg);
    case IssueKind::Replication: throw ReplicationError(msg);
    case IssueKind::Cycle: throw CycleError(msg);
    case IssueKind::Arity: throw ArityError(msg);
    case IssueKind::Shape: throw ShapeError(msg);
    case IssueKind::Schema: break;
  }
  throw ValidationError(msg);
}

// ---------------------------------------------------------------------------
// Plate unrolling

struct Plate {
  std::string index;
  long long start = 0;
  long long count = 0;
  friend bool operator==(const Plate&, const Plate&) = default;
};

struct Unrolled {
  ModelDescription model;
  std::map<std::string, Plate> plates;                   // replicated collection -> plate
  std::map<std::string, std::pair<std::string, long long>> instances;  // instance collection -> (plate, index)
};

/// Expands every replicated collection into index-suffixed node and collection instances.
inline Unrolled unroll(const ModelDescription& in, ValidationReport& report) {
  Unrolled out;
  std::set<std::string> collection_names;
  for (const auto& c : in.collections) collection_names.insert(c.name);

  // member -> (plate collection, plate)
  std::map<std::string, std::pair<std::string, Plate>> replicated;
  for (const auto& c : in.collections) {
    if (!c.replicate) continue;
    if (*c.replicate <= 0) {
      report.issues.push_back({IssueKind::Replication, "collection '" + c.name + "' has non-positive replication " +
                                                            std::to_string(*c.replicate), {c.name}});
      continue;
    }
    Plate p{c.index ? c.index->name : std::string(), c.index ? c.index->start : 0, *c.replicate};
    out.plates[c.name] = p;
    for (const auto& m : c.members) {
      if (collection_names.count(m) != 0) {
        report.issues.push_back(
            {IssueKind::Replication, "replicated collection '" + c.name + "' may only contain nodes, found collection '" + m + "'", {c.name, m}});
        continue;
      }
      if (replicated.count(m) != 0) continue;  // reported as overlap later
      replicated[m] = {c.name, p};
    }
  }
  if (replicated.empty() && out.plates.empty()) {
    out.model = in;
    out.model.idioms.clear();
    return out;
  }

  auto instances_of = [&](const std::string& m) {
    std::vector<std::string> names;
    const auto& p = replicated.at(m).second;
    for (long long i = p.start; i < p.start + p.count; ++i) names.push_back(indexed_name(m, i));
    return names;
  };
  auto vec_of = [&](const std::string& m) {
    std::vector<Expr> parts;
    for (const auto& n : instances_of(m)) parts.push_back(Expr::ref(n));
    return parts.size() == 1 ? parts[0] : Expr::call(Expr::Op::Vec, std::move(parts));
  };

  for (const auto& n : in.nodes) {
    const auto it = replicated.find(n.name);
    if (it == replicated.end()) {
      NodeDesc copy = n;
      for (auto& e : copy.params)
        e = e.rewrite([&](const std::string& r) { return replicated.count(r) ? vec_of(r) : Expr::ref(r); });
      out.model.nodes.push_back(std::move(copy));
      continue;
    }
    const auto& [plate_name, plate] = it->second;
    for (long long i = plate.start; i < plate.start + plate.count; ++i) {
      NodeDesc copy = n;
      copy.name = indexed_name(n.name, i);
      // Values of replicated nodes are stacked along the leading axis.
      auto slice = [&](std::optional<Tensor>& v) {
        if (!v || v->shape.empty() || v->shape.front() != static_cast<std::size_t>(plate.count)) return;
        Tensor row;
        row.shape.assign(v->shape.begin() + 1, v->shape.end());
        const std::size_t width = v->data.size() / v->shape.front();
        const auto first = v->data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i - plate.start) * width);
        row.data.assign(first, first + static_cast<std::ptrdiff_t>(width));
        v = std::move(row);
      };
      slice(copy.value);
      slice(copy.init);
      for (auto& e : copy.params) {
        e = e.rewrite([&](const std::string& r) {
          if (!plate.index.empty() && r == plate.index) return Expr::constant(static_cast<double>(i));
          const auto rt = replicated.find(r);
          if (rt == replicated.end()) return Expr::ref(r);
          if (rt->second.first == plate_name) return Expr::ref(indexed_name(r, i));
          return vec_of(r);
        });
      }
      out.model.nodes.push_back(std::move(copy));
    }
  }

  for (const auto& l : in.links) {
    const auto ft = replicated.find(l.from);
    const auto tt = replicated.find(l.to);
    LinkDesc base = l;
    if (!l.subset.empty()) {
      base.subset.clear();
      for (const auto& s : l.subset) {
        if (replicated.count(s)) {
          for (const auto& n : instances_of(s)) base.subset.push_back(n);
        } else {
          base.subset.push_back(s);
        }
      }
    }
    const bool same_plate = ft != replicated.end() && tt != replicated.end() && ft->second.first == tt->second.first;
    if (same_plate) {
      const auto& p = ft->second.second;
      for (long long i = p.start; i < p.start + p.count; ++i) {
        LinkDesc c = base;
        c.from = indexed_name(l.from, i);
        c.to = indexed_name(l.to, i);
        out.model.links.push_back(std::move(c));
      }
      continue;
    }
    const std::vector<std::string> froms = ft != replicated.end() ? instances_of(l.from) : std::vector<std::string>{l.from};
    const std::vector<std::string> tos = tt != replicated.end() ? instances_of(l.to) : std::vector<std::string>{l.to};
    for (const auto& f : froms)
      for (const auto& t : tos) {
        LinkDesc c = base;
        c.from = f;
        c.to = t;
        out.model.links.push_back(std::move(c));
      }
  }

  for (const auto& c : in.collections) {
    if (!c.replicate || *c.replicate <= 0) {
      out.model.collections.push_back(c);
      continue;
    }
    const auto& p = out.plates.at(c.name);
    CollectionDesc plate{c.name, {}, std::nullopt, std::nullopt};
    for (long long i = p.start; i < p.start + p.count; ++i) {
      const auto inst = indexed_name(c.name, i);
      plate.members.push_back(inst);
      CollectionDesc ci{inst, {}, std::nullopt, std::nullopt};
      for (const auto& m : c.members)
        if (replicated.count(m) && replicated.at(m).first == c.name) ci.members.push_back(indexed_name(m, i));
      out.model.collections.push_back(std::move(ci));
      out.instances[inst] = {c.name, i};
    }
    out.model.collections.push_back(std::move(plate));
  }
  out.model.predicates = in.predicates;
  return out;
}

// ---------------------------------------------------------------------------
// The graph

struct Node {
  NodeId id;
  std::string name;
  NodeKind kind = NodeKind::Latent;
  std::optional<Family> family;
  std::vector<Expr> params;
  Tensor value;  // observed value, fixed value, or initial value of a variable parameter
  std::optional<std::string> predicate;
  bool positive = false;  // variable parameter constrained to (0, inf)
  std::vector<std::size_t> shape;
  std::size_t support = 0;  // number of states of a discrete latent or observed node
  std::optional<CollectionId> collection;  // innermost collection
  std::size_t declaration = 0;

  std::size_t size() const { return shape_size(shape); }
  bool discrete() const { return family && is_discrete(*family); }
};

struct Link {
  NodeId from;
  NodeId to;
  LinkKind kind = LinkKind::Generative;
  std::optional<long long> when;
  std::optional<CollectionId> via_collection;
};

struct Collection {
  CollectionId id;
  std::string name;
  std::vector<NodeId> nodes;  // direct members
  std::vector<CollectionId> children;
  std::optional<CollectionId> parent;
  std::optional<Plate> plate;            // set on a replicated collection
  std::optional<long long> instance;     // set on one instance of a plate
};

class GenerativeFlowGraph;
GenerativeFlowGraph build_graph(const ModelDescription& spec, const PredicateRegistry& predicates);

/// Immutable, validated generative flow graph with plates unrolled.
class GenerativeFlowGraph {
 public:
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Link>& links() const { return links_; }
  const std::vector<Collection>& collections() const { return collections_; }
  const Node& node(NodeId id) const { return nodes_.at(id.value); }
  const Collection& collection(CollectionId id) const { return collections_.at(id.value); }

  std::optional<NodeId> find(const std::string& name) const {
    const auto it = node_index_.find(name);
    if (it == node_index_.end()) return std::nullopt;
    return it->second;
  }
  NodeId id(const std::string& name) const {
    if (auto n = find(name)) return *n;
    throw NameError("no node named '" + name + "'");
  }
  std::optional<CollectionId> find_collection(const std::string& name) const {
    const auto it = collection_index_.find(name);
    if (it == collection_index_.end()) return std::nullopt;
    return it->second;
  }
  CollectionId collection_id(const std::string& name) const {
    if (auto c = find_collection(name)) return *c;
    throw NameError("no collection named '" + name + "'");
  }
  const std::string& name(NodeId id) const { return node(id).name; }

  const std::vector<std::size_t>& in_links(NodeId id) const { return in_.at(id.value); }
  const std::vector<std::size_t>& out_links(NodeId id) const { return out_.at(id.value); }
  const std::vector<NodeId>& topological_order() const { return order_; }

  std::optional<LinkKind> link_kind(NodeId from, NodeId to) const {
    for (auto li : in_links(to))
      if (links_[li].from == from) return links_[li].kind;
    return std::nullopt;
  }

  /// Sources of incoming generative or detached links that carry a value.
  std::vector<NodeId> value_parents(NodeId id) const {
    std::vector<NodeId> out;
    for (auto li : in_links(id)) {
      const auto& l = links_[li];
      if (l.kind != LinkKind::Influence && carries_value(node(l.from).kind)) out.push_back(l.from);
    }
    return out;
  }

  std::vector<NodeId> nodes_of(NodeKind k) const {
    std::vector<NodeId> out;
    for (const auto& n : nodes_)
      if (n.kind == k) out.push_back(n.id);
    return out;
  }
  std::vector<NodeId> latents() const { return nodes_of(NodeKind::Latent); }
  std::vector<NodeId> observed() const { return nodes_of(NodeKind::Observed); }
  std::size_t variable_node_count() const { return latents().size() + observed().size(); }
  std::size_t param_node_count() const {
    return nodes_of(NodeKind::VariableParam).size() + nodes_of(NodeKind::FixedParam).size();
  }

  /// Every node inside `c`, including nested collections.
  std::vector<NodeId> members(CollectionId c) const {
    std::vector<NodeId> out;
    std::function<void(CollectionId)> walk = [&](CollectionId x) {
      const auto& col = collection(x);
      out.insert(out.end(), col.nodes.begin(), col.nodes.end());
      for (auto ch : col.children) walk(ch);
    };
    walk(c);
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Outermost collection containing `id`, if any.
  std::optional<CollectionId> outermost(NodeId id) const {
    auto c = node(id).collection;
    while (c && collection(*c).parent) c = collection(*c).parent;
    return c;
  }

  std::vector<CollectionId> top_level_collections() const {
    std::vector<CollectionId> out;
    for (const auto& c : collections_)
      if (!c.parent) out.push_back(c.id);
    return out;
  }

  /// Description the graph was built from (idioms expanded, plates not unrolled).
  const ModelDescription& description() const { return description_; }
  const PredicateRegistry& predicates() const { return *predicates_; }

  /// Structural fingerprint used for equality of graphs.
  std::string canonical() const {
    nlohmann::json j = {{"nodes", nlohmann::json::array()}, {"links", nlohmann::json::array()},
                        {"collections", nlohmann::json::array()}};
    for (const auto& n : nodes_) {
      nlohmann::json e = node_to_json(NodeDesc{n.name, n.kind, n.family, n.params,
                                               n.kind == NodeKind::Observed || n.kind == NodeKind::FixedParam
                                                   ? std::optional<Tensor>(n.value)
                                                   : std::nullopt,
                                               n.kind == NodeKind::VariableParam ? std::optional<Tensor>(n.value) : std::nullopt,
                                               n.predicate, n.positive ? std::optional<std::string>("positive") : std::nullopt});
      e["collection"] = n.collection ? collection(*n.collection).name : "";
      j["nodes"].push_back(e);
    }
    for (const auto& l : links_) {
      nlohmann::json e = {{"from", name(l.from)}, {"to", name(l.to)}, {"kind", std::string(to_string(l.kind))}};
      if (l.when) e["when"] = *l.when;
      j["links"].push_back(e);
    }
    for (const auto& c : collections_) {
      nlohmann::json e = {{"name", c.name}, {"parent", c.parent ? collection(*c.parent).name : ""}};
      std::vector<std::string> members;
      for (auto n : c.nodes) members.push_back(name(n));
      std::sort(members.begin(), members.end());
      e["nodes"] = members;
      j["collections"].push_back(e);
    }
    for (auto& part : j)
      std::sort(part.begin(), part.end(), [](const nlohmann::json& a, const nlohmann::json& b) { return a.dump() < b.dump(); });
    return j.dump();
  }

  friend bool operator==(const GenerativeFlowGraph& a, const GenerativeFlowGraph& b) { return a.canonical() == b.canonical(); }

 private:
  friend GenerativeFlowGraph build_graph(const ModelDescription&, const PredicateRegistry&);

  std::vector<Node> nodes_;
  std::vector<Link> links_;
  std::vector<Collection> collections_;
  std::map<std::string, NodeId> node_index_;
  std::map<std::string, CollectionId> collection_index_;
  std::vector<std::vector<std::size_t>> in_;
  std::vector<std::vector<std::size_t>> out_;
  std::vector<NodeId> order_;
  ModelDescription description_;
  std::shared_ptr<const PredicateRegistry> predicates_;
};

// ---------------------------------------------------------------------------
// Validation

namespace detail {

/// Everything validation learns about a description, reused to build the graph.
struct Analysis {
  Unrolled unrolled;
  ValidationReport report;
  std::map<std::string, std::size_t> node_index;
  std::map<std::string, std::size_t> collection_index;
  struct FlatLink {
    std::size_t from;
    std::size_t to;
    LinkKind kind;
    std::optional<long long> when;
    std::optional<std::size_t> via_collection;
  };
  std::vector<FlatLink> links;
  std::vector<std::optional<std::size_t>> collection_parent;   // per collection
  std::vector<std::optional<std::size_t>> node_collection;     // innermost, per node
  std::vector<std::size_t> order;
  std::vector<std::vector<std::size_t>> shapes;
  std::vector<std::size_t> support;
  bool acyclic = false;
};

inline void add_issue(Analysis& a, IssueKind k, std::string msg, std::vector<std::string> subjects) {
  a.report.issues.push_back({k, std::move(msg), std::move(subjects)});
}

inline Analysis analyze(const ModelDescription& input, const PredicateRegistry& predicates) {
  Analysis a;
  const ModelDescription expanded = expand_idioms(input);
  a.unrolled = unroll(expanded, a.report);
  const auto& m = a.unrolled.model;

  // Names.
  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    const auto& n = m.nodes[i];
    if (n.name.empty()) add_issue(a, IssueKind::Name, "node with empty name", {});
    if (!a.node_index.emplace(n.name, i).second)
      add_issue(a, IssueKind::Name, "duplicate node name '" + n.name + "'", {n.name});
  }
  for (std::size_t i = 0; i < m.collections.size(); ++i) {
    const auto& c = m.collections[i];
    if (a.node_index.count(c.name))
      add_issue(a, IssueKind::Name, "collection '" + c.name + "' has the same name as a node", {c.name});
    if (!a.collection_index.emplace(c.name, i).second)
      add_issue(a, IssueKind::Name, "duplicate collection name '" + c.name + "'", {c.name});
  }
  const std::set<std::string> declared_predicates(m.predicates.begin(), m.predicates.end());
  for (const auto& p : m.predicates)
    if (!predicates.contains(p)) add_issue(a, IssueKind::Name, "predicate '" + p + "' is not registered", {p});

  // Per-node schema.
  for (const auto& n : m.nodes) {
    const bool var = is_variable(n.kind);
    if (var && !n.distribution)
      add_issue(a, IssueKind::Arity, "node '" + n.name + "' needs a distribution", {n.name});
    if (!var && n.distribution)
      add_issue(a, IssueKind::Schema, "node '" + n.name + "' of kind " + std::string(to_string(n.kind)) + " cannot have a distribution", {n.name});
    if ((n.kind == NodeKind::Observed || n.kind == NodeKind::FixedParam) && !n.value)
      add_issue(a, IssueKind::Schema, "node '" + n.name + "' needs a value", {n.name});
    if (n.kind != NodeKind::Observed && n.kind != NodeKind::FixedParam && n.value)
      add_issue(a, IssueKind::Schema, "node '" + n.name + "' cannot carry a value", {n.name});
    if (n.kind == NodeKind::VariableParam && !n.init)
      add_issue(a, IssueKind::Schema, "variable parameter '" + n.name + "' needs an initial value", {n.name});
    if (n.kind != NodeKind::VariableParam && (n.init || n.constraint))
      add_issue(a, IssueKind::Schema, "only variable parameters take 'init' or 'constraint' ('" + n.name + "')", {n.name});
    if (n.constraint && *n.constraint != "positive")
      add_issue(a, IssueKind::Schema, "unknown constraint '" + *n.constraint + "' on '" + n.name + "'", {n.name});
    if (n.kind == NodeKind::VariableParam && n.init && n.constraint)
      for (double v : n.init->data)
        if (!(v > 0.0)) add_issue(a, IssueKind::Schema, "positive parameter '" + n.name + "' has a non-positive initial value", {n.name});
    if (is_param(n.kind) && !n.params.empty())
      add_issue(a, IssueKind::Schema, "parameter '" + n.name + "' cannot take arguments", {n.name});
    if (is_control(n.kind)) {
      if (!n.predicate) {
        add_issue(a, IssueKind::Schema, "node '" + n.name + "' needs a predicate", {n.name});
      } else if (!predicates.contains(*n.predicate) || !declared_predicates.count(*n.predicate)) {
        add_issue(a, IssueKind::Name, "predicate '" + *n.predicate + "' of '" + n.name + "' is not declared and registered", {n.name, *n.predicate});
      }
    } else if (n.predicate) {
      add_issue(a, IssueKind::Schema, "node '" + n.name + "' cannot have a predicate", {n.name});
    }
  }

  // Collections: membership, nesting and overlap.
  const std::size_t nc = m.collections.size();
  a.collection_parent.assign(nc, std::nullopt);
  std::vector<std::vector<std::size_t>> node_owners(m.nodes.size());
  for (std::size_t ci = 0; ci < nc; ++ci) {
    for (const auto& mem : m.collections[ci].members) {
      if (const auto it = a.node_index.find(mem); it != a.node_index.end()) {
        node_owners[it->second].push_back(ci);
      } else if (const auto ct = a.collection_index.find(mem); ct != a.collection_index.end()) {
        if (ct->second == ci) {
          add_issue(a, IssueKind::CollectionOverlap, "collection '" + mem + "' contains itself", {mem});
        } else if (a.collection_parent[ct->second] && *a.collection_parent[ct->second] != ci) {
          add_issue(a, IssueKind::CollectionOverlap, "collection '" + mem + "' is nested in two collections", {mem});
        } else {
          a.collection_parent[ct->second] = ci;
        }
      } else {
        add_issue(a, IssueKind::Name, "collection '" + m.collections[ci].name + "' lists unknown member '" + mem + "'",
                  {m.collections[ci].name, mem});
      }
    }
  }
  // Nesting must be acyclic.
  for (std::size_t ci = 0; ci < nc; ++ci) {
    std::size_t steps = 0;
    for (auto p = a.collection_parent[ci]; p; p = a.collection_parent[*p]) {
      if (++steps > nc) {
        add_issue(a, IssueKind::CollectionOverlap, "collection nesting of '" + m.collections[ci].name + "' is cyclic", {m.collections[ci].name});
        a.collection_parent[ci].reset();
        break;
      }
    }
  }
  auto is_ancestor = [&](std::size_t anc, std::size_t c) {
    for (auto p = a.collection_parent[c]; p; p = a.collection_parent[*p])
      if (*p == anc) return true;
    return false;
  };
  a.node_collection.assign(m.nodes.size(), std::nullopt);
  for (std::size_t ni = 0; ni < m.nodes.size(); ++ni) {
    const auto& owners = node_owners[ni];
    bool ok = true;
    for (std::size_t x = 0; x < owners.size(); ++x)
      for (std::size_t y = x + 1; y < owners.size(); ++y)
        if (owners[x] == owners[y] || (!is_ancestor(owners[x], owners[y]) && !is_ancestor(owners[y], owners[x]))) ok = false;
    std::optional<std::size_t> innermost;
    for (auto c : owners)
      if (!innermost || is_ancestor(*innermost, c)) innermost = c;
    if (!ok) {
      std::vector<std::string> subjects{m.nodes[ni].name};
      for (auto c : owners) subjects.push_back(m.collections[c].name);
      add_issue(a, IssueKind::CollectionOverlap, "node '" + m.nodes[ni].name + "' belongs to collections that are not nested", subjects);
    }
    a.node_collection[ni] = innermost;
  }

  // Links.
  std::function<void(std::size_t, std::vector<std::size_t>&)> all_members = [&](std::size_t ci, std::vector<std::size_t>& out) {
    for (const auto& mem : m.collections[ci].members) {
      if (const auto it = a.node_index.find(mem); it != a.node_index.end()) out.push_back(it->second);
      else if (const auto ct = a.collection_index.find(mem); ct != a.collection_index.end() && ct->second != ci &&
                                                             a.collection_parent[ct->second] == ci)
        all_members(ct->second, out);
    }
  };
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& l : m.links) {
    const auto to_it = a.node_index.find(l.to);
    if (to_it == a.node_index.end()) {
      add_issue(a, a.collection_index.count(l.to) ? IssueKind::LinkTarget : IssueKind::Name,
                "link target '" + l.to + "' is not a node", {l.from, l.to});
      continue;
    }
    const std::size_t to = to_it->second;
    const NodeKind tk = m.nodes[to].kind;
    std::vector<std::size_t> sources;
    std::optional<std::size_t> via;
    if (const auto it = a.node_index.find(l.from); it != a.node_index.end()) {
      sources.push_back(it->second);
      if (!l.subset.empty())
        add_issue(a, IssueKind::Subset, "subset given on link from node '" + l.from + "'", {l.from, l.to});
    } else if (const auto ct = a.collection_index.find(l.from); ct != a.collection_index.end()) {
      via = ct->second;
      std::vector<std::size_t> mems;
      all_members(ct->second, mems);
      if (l.subset.empty()) {
        for (auto x : mems)
          if (m.nodes[x].kind == NodeKind::Latent || is_param(m.nodes[x].kind)) sources.push_back(x);
      } else {
        for (const auto& s : l.subset) {
          const auto st = a.node_index.find(s);
          if (st == a.node_index.end() || std::find(mems.begin(), mems.end(), st->second) == mems.end()) {
            add_issue(a, IssueKind::Subset, "subset member '" + s + "' is not in collection '" + l.from + "'", {l.from, s});
            continue;
          }
          sources.push_back(st->second);
        }
      }
    } else {
      add_issue(a, IssueKind::Name, "link source '" + l.from + "' does not exist", {l.from, l.to});
      continue;
    }

    if (l.kind == LinkKind::Influence) {
      if (!is_control(tk)) {
        add_issue(a, IssueKind::LinkTarget, "influence link into " + std::string(to_string(tk)) + " node '" + l.to + "'", {l.from, l.to});
        continue;
      }
    } else if (!(is_variable(tk) || is_control(tk))) {
      add_issue(a, IssueKind::LinkTarget, std::string(to_string(l.kind)) + " link into " + std::string(to_string(tk)) + " node '" + l.to + "'",
                {l.from, l.to});
      continue;
    }
    for (auto s : sources) {
      const NodeKind sk = m.nodes[s].kind;
      if (l.kind == LinkKind::Influence && !carries_value(sk)) {
        add_issue(a, IssueKind::LinkTarget, "influence link from branch node '" + m.nodes[s].name + "'", {m.nodes[s].name, l.to});
        continue;
      }
      const bool needs_when = (sk == NodeKind::Branch && l.kind != LinkKind::Influence) ||
                              (tk == NodeKind::Selection && l.kind != LinkKind::Influence);
      if (needs_when && !l.when)
        add_issue(a, IssueKind::Schema, "link '" + m.nodes[s].name + "' -> '" + l.to + "' needs a 'when' label", {m.nodes[s].name, l.to});
      if (!needs_when && l.when)
        add_issue(a, IssueKind::Schema, "link '" + m.nodes[s].name + "' -> '" + l.to + "' cannot carry a 'when' label", {m.nodes[s].name, l.to});
      if (s == to) {
        add_issue(a, IssueKind::Cycle, "self link on '" + l.to + "'", {l.to});
        continue;
      }
      if (!seen.emplace(s, to).second) {
        add_issue(a, IssueKind::Schema, "duplicate link '" + m.nodes[s].name + "' -> '" + l.to + "'", {m.nodes[s].name, l.to});
        continue;
      }
      a.links.push_back({s, to, l.kind, l.when, via});
    }
  }

  // Acyclicity and topological order (declaration order breaks ties).
  const std::size_t nn = m.nodes.size();
  std::vector<std::vector<std::size_t>> succ(nn);
  std::vector<std::size_t> indeg(nn, 0);
  for (const auto& l : a.links) {
    succ[l.from].push_back(l.to);
    ++indeg[l.to];
  }
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < nn; ++i)
    if (indeg[i] == 0) ready.push(i);
  while (!ready.empty()) {
    const auto i = ready.top();
    ready.pop();
    a.order.push_back(i);
    for (auto s : succ[i])
      if (--indeg[s] == 0) ready.push(s);
  }
  a.acyclic = a.order.size() == nn;
  if (!a.acyclic) {
    std::vector<std::string> cyc;
    for (std::size_t i = 0; i < nn; ++i)
      if (indeg[i] > 0) cyc.push_back(m.nodes[i].name);
    std::string msg = "links form a cycle through";
    for (const auto& c : cyc) msg += " '" + c + "'";
    add_issue(a, IssueKind::Cycle, msg, cyc);
  }

  // Arity: argument references must be exactly the value-carrying parents.
  std::vector<std::set<std::string>> value_parents(nn), influence_parents(nn);
  for (const auto& l : a.links) {
    if (l.kind == LinkKind::Influence)
      influence_parents[l.to].insert(m.nodes[l.from].name);
    else if (carries_value(m.nodes[l.from].kind))
      value_parents[l.to].insert(m.nodes[l.from].name);
  }
  for (std::size_t i = 0; i < nn; ++i) {
    const auto& n = m.nodes[i];
    std::set<std::string> refs;
    for (const auto& e : n.params) e.collect_refs(refs);
    for (const auto& r : refs)
      if (!a.node_index.count(r)) add_issue(a, IssueKind::Name, "'" + n.name + "' references unknown node '" + r + "'", {n.name, r});
    if (is_variable(n.kind) && n.distribution) {
      if (n.params.size() != family_arity(*n.distribution))
        add_issue(a, IssueKind::Arity,
                  "'" + n.name + "' has " + std::to_string(n.params.size()) + " arguments, " + std::string(to_string(*n.distribution)) +
                      " takes " + std::to_string(family_arity(*n.distribution)),
                  {n.name});
      if (refs != value_parents[i]) {
        std::string msg = "arguments of '" + n.name + "' reference {";
        for (const auto& r : refs) msg += " " + r;
        msg += " } but its value parents are {";
        for (const auto& r : value_parents[i]) msg += " " + r;
        add_issue(a, IssueKind::Arity, msg + " }", {n.name});
      }
    } else if (is_control(n.kind)) {
      if (n.params.empty()) add_issue(a, IssueKind::Arity, "'" + n.name + "' needs condition arguments", {n.name});
      if (refs != influence_parents[i])
        add_issue(a, IssueKind::Arity, "condition of '" + n.name + "' must reference exactly its influence-link sources", {n.name});
    }
  }

  // Shapes (only meaningful on an acyclic graph with resolved names).
  a.shapes.assign(nn, {});
  a.support.assign(nn, 0);
  if (a.acyclic && a.report.count(IssueKind::Name) == 0 && a.report.count(IssueKind::Arity) == 0) {
    const ShapeLookup shape_of = [&](const std::string& r) { return a.shapes.at(a.node_index.at(r)); };
    for (auto i : a.order) {
      const auto& n = m.nodes[i];
      try {
        switch (n.kind) {
          case NodeKind::FixedParam:
          case NodeKind::Observed:
            if (n.value) a.shapes[i] = n.value->shape;
            break;
          case NodeKind::VariableParam:
            if (n.init) a.shapes[i] = n.init->shape;
            break;
          case NodeKind::Branch:
            for (const auto& e : n.params) infer_size(e, shape_of);
            break;
          case NodeKind::Selection: {
            for (const auto& e : n.params) infer_size(e, shape_of);
            std::optional<std::vector<std::size_t>> s;
            for (const auto& l : a.links) {
              if (l.to != i || l.kind == LinkKind::Influence) continue;
              const auto& ps = a.shapes[l.from];
              if (s && shape_size(*s) != shape_size(ps))
                throw ShapeError("inputs of selection '" + n.name + "' have different sizes");
              s = ps;
              a.support[i] = std::max(a.support[i], a.support[l.from]);
            }
            if (s) a.shapes[i] = *s;
            break;
          }
          case NodeKind::Latent:
            break;
        }
        if (is_variable(n.kind) && n.distribution && n.params.size() == family_arity(*n.distribution)) {
          std::vector<std::size_t> sizes;
          for (const auto& e : n.params) sizes.push_back(infer_size(e, shape_of));
          std::size_t value_size = 1;
          switch (*n.distribution) {
            case Family::Normal:
              value_size = detail::broadcast_size(sizes[0], sizes[1]);
              break;
            case Family::Categorical:
              if (sizes[0] < 1) throw ShapeError("Categorical '" + n.name + "' needs at least one logit");
              a.support[i] = sizes[0];
              break;
            case Family::Bernoulli:
              if (sizes[0] != 1) throw ShapeError("Bernoulli '" + n.name + "' takes a single logit");
              a.support[i] = 2;
              break;
          }
          if (n.kind == NodeKind::Observed) {
            const std::size_t vs = n.value ? n.value->size() : 0;
            if (*n.distribution == Family::Normal) {
              if (value_size != 1 && value_size != vs)
                throw ShapeError("observed '" + n.name + "' has " + std::to_string(vs) + " values but its arguments have size " +
                                 std::to_string(value_size));
            } else if (vs != 1) {
              throw ShapeError("discrete observed '" + n.name + "' must hold a single value");
            }
          } else {
            a.shapes[i] = value_size == 1 ? std::vector<std::size_t>{} : std::vector<std::size_t>{value_size};
          }
        }
      } catch (const ShapeError& e) {
        add_issue(a, IssueKind::Shape, e.what(), {n.name});
      }
    }
  }
  return a;
}

}  // namespace detail

/// Checks every structural invariant and reports all violations.
inline ValidationReport validate(const ModelDescription& spec,
                                 const PredicateRegistry& predicates = PredicateRegistry::builtin()) {
  try {
    return detail::analyze(spec, predicates).report;
  } catch (const ValidationError& e) {
    ValidationReport r;
    r.issues.push_back({IssueKind::Schema, e.what(), {}});
    return r;
  }
}

inline ValidationReport validate(const GenerativeFlowGraph& g) { return validate(g.description(), g.predicates()); }

inline GenerativeFlowGraph build_graph(const ModelDescription& spec, const PredicateRegistry& predicates) {
  detail::Analysis a = detail::analyze(spec, predicates);
  if (!a.report.ok()) throw_issue(a.report.issues.front());
  const auto& m = a.unrolled.model;

  GenerativeFlowGraph g;
  g.description_ = spec.idioms.empty() ? spec : expand_idioms(spec);
  g.predicates_ = std::make_shared<const PredicateRegistry>(predicates);

  for (std::size_t ci = 0; ci < m.collections.size(); ++ci) {
    Collection c;
    c.id = CollectionId{static_cast<std::uint32_t>(ci)};
    c.name = m.collections[ci].name;
    if (a.collection_parent[ci]) c.parent = CollectionId{static_cast<std::uint32_t>(*a.collection_parent[ci])};
    if (const auto it = a.unrolled.plates.find(c.name); it != a.unrolled.plates.end()) c.plate = it->second;
    if (const auto it = a.unrolled.instances.find(c.name); it != a.unrolled.instances.end()) c.instance = it->second.second;
    g.collections_.push_back(std::move(c));
    g.collection_index_[m.collections[ci].name] = CollectionId{static_cast<std::uint32_t>(ci)};
  }
  for (std::size_t ci = 0; ci < m.collections.size(); ++ci)
    if (a.collection_parent[ci]) g.collections_[*a.collection_parent[ci]].children.push_back(CollectionId{static_cast<std::uint32_t>(ci)});

  for (std::size_t i = 0; i < m.nodes.size(); ++i) {
    const auto& d = m.nodes[i];
    Node n;
    n.id = NodeId{static_cast<std::uint32_t>(i)};
    n.name = d.name;
    n.kind = d.kind;
    n.family = d.distribution;
    n.params = d.params;
    if (d.value) n.value = *d.value;
    if (d.init) n.value = *d.init;
    n.predicate = d.predicate;
    n.positive = d.constraint.has_value();
    n.shape = a.shapes[i];
    n.support = a.support[i];
    if (a.node_collection[i]) {
      n.collection = CollectionId{static_cast<std::uint32_t>(*a.node_collection[i])};
      g.collections_[*a.node_collection[i]].nodes.push_back(n.id);
    }
    n.declaration = i;
    g.node_index_[n.name] = n.id;
    g.nodes_.push_back(std::move(n));
  }
  g.in_.assign(g.nodes_.size(), {});
  g.out_.assign(g.nodes_.size(), {});
  for (const auto& l : a.links) {
    Link link;
    link.from = NodeId{static_cast<std::uint32_t>(l.from)};
    link.to = NodeId{static_cast<std::uint32_t>(l.to)};
    link.kind = l.kind;
    link.when = l.when;
    if (l.via_collection) link.via_collection = CollectionId{static_cast<std::uint32_t>(*l.via_collection)};
    g.in_[l.to].push_back(g.links_.size());
    g.out_[l.from].push_back(g.links_.size());
    g.links_.push_back(link);
  }
  for (auto i : a.order) g.order_.push_back(NodeId{static_cast<std::uint32_t>(i)});
  return g;
}

inline GenerativeFlowGraph build_graph(const ModelDescription& spec) { return build_graph(spec, PredicateRegistry::builtin()); }

inline nlohmann::json serialize(const GenerativeFlowGraph& g) { return serialize_model(g.description()); }

/// Merges an idiom instance into a host model and builds the result.
inline GenerativeFlowGraph compose(const ModelDescription& host, const IdiomTemplate& guest, const IdiomInstance& instance) {
  return build_graph(compose_description(host, guest, instance));
}

// ---------------------------------------------------------------------------
// Execution helpers shared by simulation, scoring and inference

/// Realized values during one execution; unexecuted nodes hold no value.
struct ExecState {
  std::vector<std::optional<Values>> values;
  std::vector<std::optional<long long>> labels;  // branch and selection nodes

  explicit ExecState(std::size_t n = 0) : values(n), labels(n) {}
  bool executed(NodeId id) const { return values[id.value].has_value() || labels[id.value].has_value(); }
};

/// Whether `id` runs given the state of its upstream nodes. Selections are resolved separately.
inline bool should_execute(const GenerativeFlowGraph& g, NodeId id, const ExecState& s) {
  const bool selection = g.node(id).kind == NodeKind::Selection;
  for (auto li : g.in_links(id)) {
    const auto& l = g.links()[li];
    if (selection && l.kind != LinkKind::Influence) continue;
    if (!s.executed(l.from)) return false;
    if (g.node(l.from).kind == NodeKind::Branch && l.kind != LinkKind::Influence && s.labels[l.from.value] != l.when) return false;
  }
  return true;
}

/// Reads a parent's value as seen by `child`; detached links cut the gradient.
inline Values parent_value(const GenerativeFlowGraph& g, NodeId child, NodeId parent, const ExecState& s) {
  const auto& v = s.values[parent.value];
  if (!v) throw PredicateError("value of '" + g.name(parent) + "' is unavailable to '" + g.name(child) + "'");
  if (g.link_kind(parent, child) != LinkKind::Detached) return *v;
  Values out;
  out.reserve(v->size());
  for (const auto& x : *v) out.push_back(stop_gradient(x));
  return out;
}

inline std::vector<Values> evaluate_args(const GenerativeFlowGraph& g, NodeId id, const ExecState& s) {
  const ValueLookup lookup = [&](const std::string& r) { return parent_value(g, id, g.id(r), s); };
  const ShapeLookup shapes = [&](const std::string& r) { return g.node(g.id(r)).shape; };
  std::vector<Values> out;
  for (const auto& e : g.node(id).params) out.push_back(evaluate(e, lookup, shapes));
  return out;
}

/// Label of a branch or selection node.
inline long long evaluate_condition(const GenerativeFlowGraph& g, NodeId id, const ExecState& s) {
  const auto args = evaluate_args(g, id, s);
  std::vector<double> flat;
  for (const auto& a : args)
    for (const auto& x : a) flat.push_back(x.value());
  return g.predicates().evaluate(*g.node(id).predicate, flat);
}

/// Input chosen by a selection node for `label`.
inline NodeId selected_input(const GenerativeFlowGraph& g, NodeId id, long long label, const ExecState& s) {
  for (auto li : g.in_links(id)) {
    const auto& l = g.links()[li];
    if (l.kind == LinkKind::Influence || l.when != label) continue;
    if (!s.values[l.from.value]) throw PredicateError("selection '" + g.name(id) + "' chose '" + g.name(l.from) + "', which did not execute");
    return l.from;
  }
  throw PredicateError("selection '" + g.name(id) + "' has no input for label " + std::to_string(label));
}

/// Runs branch or selection node `id`; returns false when it is skipped.
inline bool execute_control(const GenerativeFlowGraph& g, NodeId id, ExecState& s) {
  if (!should_execute(g, id, s)) return false;
  const long long label = evaluate_condition(g, id, s);
  if (g.node(id).kind == NodeKind::Branch) {
    bool any = false;
    for (auto li : g.out_links(id)) {
      const auto& l = g.links()[li];
      any = any || (l.kind != LinkKind::Influence && l.when == label);
    }
    if (!any && !g.out_links(id).empty())
      throw PredicateError("branch '" + g.name(id) + "' has no outgoing flow for label " + std::to_string(label));
    s.labels[id.value] = label;
    return true;
  }
  const NodeId chosen = selected_input(g, id, label, s);
  s.labels[id.value] = label;
  s.values[id.value] = parent_value(g, id, chosen, s);
  return true;
}

/// Parameter values a node carries before inference touches them.
inline Values initial_values(const Node& n) {
  Values out;
  for (double v : n.value.data) out.emplace_back(v);
  return out;
}

/// Summed log density of `v` under the elementwise distribution of node `n`.
inline Scalar log_density(const Node& n, const std::vector<Values>& args, const Values& v) {
  switch (*n.family) {
    case Family::Normal: {
      const auto& loc = args[0];
      const auto& scale = args[1];
      std::vector<Scalar> terms;
      for (std::size_t k = 0; k < v.size(); ++k)
        terms.push_back(log_prob(Normal{loc[loc.size() == 1 ? 0 : k], scale[scale.size() == 1 ? 0 : k]}, v[k]));
      return sum(terms);
    }
    case Family::Categorical:
      return log_prob(Categorical{args[0]}, as_index(v.at(0).value()));
    case Family::Bernoulli:
      return log_prob(Bernoulli{args[0].at(0)}, as_index(v.at(0).value()));
  }
  return Scalar(0.0);
}

/// Draws a value for node `n` from its distribution (no gradient).
inline Values sample_values(const Node& n, const std::vector<Values>& args, Rng& rng) {
  switch (*n.family) {
    case Family::Normal: {
      Values out;
      for (std::size_t k = 0; k < std::max<std::size_t>(n.size(), 1); ++k) {
        const auto& loc = args[0][args[0].size() == 1 ? 0 : k];
        const auto& scale = args[1][args[1].size() == 1 ? 0 : k];
        out.emplace_back(sample(Normal{loc, scale}, rng));
      }
      return out;
    }
    case Family::Categorical:
      return {Scalar(static_cast<double>(sample(Categorical{args[0]}, rng)))};
    case Family::Bernoulli:
      return {Scalar(static_cast<double>(sample(Bernoulli{args[0].at(0)}, rng)))};
  }
  return {};
}

}  // namespace gfg

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfg/distributions.hpp"
#include "gfg/error.hpp"
#include "gfg/expr.hpp"
#include "gfg/tensor.hpp"

namespace gfg {

enum class NodeKind { Latent, Observed, VariableParam, FixedParam, Branch, Selection };
enum class LinkKind { Generative, Detached, Influence };

inline std::string_view to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Latent: return "latent";
    case NodeKind::Observed: return "observed";
    case NodeKind::VariableParam: return "variable_param";
    case NodeKind::FixedParam: return "fixed_param";
    case NodeKind::Branch: return "branch";
    case NodeKind::Selection: return "selection";
  }
  return "?";
}

inline std::string_view to_string(LinkKind k) {
  switch (k) {
    case LinkKind::Generative: return "generative";
    case LinkKind::Detached: return "detached";
    case LinkKind::Influence: return "influence";
  }
  return "?";
}

inline NodeKind node_kind_from_string(std::string_view s) {
  for (auto k : {NodeKind::Latent, NodeKind::Observed, NodeKind::VariableParam, NodeKind::FixedParam, NodeKind::Branch,
                 NodeKind::Selection})
    if (to_string(k) == s) return k;
  throw ParseError("unknown node kind '" + std::string(s) + "'");
}

inline LinkKind link_kind_from_string(std::string_view s) {
  for (auto k : {LinkKind::Generative, LinkKind::Detached, LinkKind::Influence})
    if (to_string(k) == s) return k;
  throw ParseError("unknown link kind '" + std::string(s) + "'");
}

inline bool is_variable(NodeKind k) { return k == NodeKind::Latent || k == NodeKind::Observed; }
inline bool is_param(NodeKind k) { return k == NodeKind::VariableParam || k == NodeKind::FixedParam; }
inline bool is_control(NodeKind k) { return k == NodeKind::Branch || k == NodeKind::Selection; }
/// Kinds whose realized value can feed a distribution argument.
inline bool carries_value(NodeKind k) { return k != NodeKind::Branch; }

/// A distribution family with argument expressions.
struct DistributionSpec {
  Family family = Family::Normal;
  std::vector<Expr> params;
  friend bool operator==(const DistributionSpec&, const DistributionSpec&) = default;
};

struct NodeDesc {
  std::string name;
  NodeKind kind = NodeKind::Latent;
  std::optional<Family> distribution;  // latent and observed nodes
  std::vector<Expr> params;            // distribution or predicate arguments
  std::optional<Tensor> value;         // observed and fixed parameters
  std::optional<Tensor> init;          // variable parameters
  std::optional<std::string> predicate;
  std::optional<std::string> constraint;  // "positive" for variable parameters
  friend bool operator==(const NodeDesc&, const NodeDesc&) = default;
};

struct LinkDesc {
  std::string from;  // node or collection name
  std::string to;
  LinkKind kind = LinkKind::Generative;
  std::vector<std::string> subset;
  std::optional<long long> when;
  friend bool operator==(const LinkDesc&, const LinkDesc&) = default;
};

struct IndexSpec {
  std::string name;
  long long start = 0;
  friend bool operator==(const IndexSpec&, const IndexSpec&) = default;
};

struct CollectionDesc {
  std::string name;
  std::vector<std::string> members;  // node or collection names
  std::optional<IndexSpec> index;
  std::optional<long long> replicate;
  friend bool operator==(const CollectionDesc&, const CollectionDesc&) = default;
};

/// An `idioms` stanza: a named template instantiated with slots and bindings.
struct IdiomDesc {
  std::string idiom;
  std::string prefix;
  std::map<std::string, long long> args;
  std::map<std::string, DistributionSpec> slots;
  std::map<std::string, std::string> bindings;
  std::map<std::string, Tensor> observations;
  friend bool operator==(const IdiomDesc&, const IdiomDesc&) = default;
};

struct ModelDescription {
  std::vector<NodeDesc> nodes;
  std::vector<LinkDesc> links;
  std::vector<CollectionDesc> collections;
  std::vector<std::string> predicates;
  std::vector<IdiomDesc> idioms;
  friend bool operator==(const ModelDescription&, const ModelDescription&) = default;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                                std::string_view where) {
  if (!j.is_object()) throw ParseError(std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (auto a : allowed) known = known || a == key;
    if (!known) throw ParseError("unknown key '" + key + "' in " + std::string(where));
  }
}

inline const nlohmann::json& required(const nlohmann::json& j, const char* key, std::string_view where) {
  if (!j.contains(key)) throw ParseError("missing key '" + std::string(key) + "' in " + std::string(where));
  return j.at(key);
}

inline std::string string_field(const nlohmann::json& j, const char* key, std::string_view where) {
  const auto& v = required(j, key, where);
  if (!v.is_string()) throw ParseError("'" + std::string(key) + "' in " + std::string(where) + " must be a string");
  return v.get<std::string>();
}

inline std::vector<std::string> string_list(const nlohmann::json& j, std::string_view where) {
  if (!j.is_array()) throw ParseError(std::string(where) + " must be a list of strings");
  std::vector<std::string> out;
  for (const auto& e : j) {
    if (!e.is_string()) throw ParseError(std::string(where) + " must be a list of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

inline long long integer_field(const nlohmann::json& j, std::string_view where) {
  if (!j.is_number_integer()) throw ParseError(std::string(where) + " must be an integer");
  return j.get<long long>();
}

inline std::vector<Expr> expr_list(const nlohmann::json& j, std::string_view where) {
  if (!j.is_array()) throw ParseError(std::string(where) + " must be a list of expressions");
  std::vector<Expr> out;
  for (const auto& e : j) out.push_back(Expr::from_json(e));
  return out;
}

inline nlohmann::json expr_list_json(const std::vector<Expr>& es) {
  auto j = nlohmann::json::array();
  for (const auto& e : es) j.push_back(Expr::to_json(e));
  return j;
}

}  // namespace detail

inline DistributionSpec distribution_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"distribution", "params"}, "slot");
  DistributionSpec d;
  d.family = family_from_string(detail::string_field(j, "distribution", "slot"));
  d.params = detail::expr_list(detail::required(j, "params", "slot"), "slot params");
  return d;
}

inline nlohmann::json distribution_to_json(const DistributionSpec& d) {
  return {{"distribution", std::string(to_string(d.family))}, {"params", detail::expr_list_json(d.params)}};
}

inline NodeDesc node_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"name", "kind", "distribution", "params", "value", "init", "predicate", "constraint"},
                              "node");
  NodeDesc n;
  n.name = detail::string_field(j, "name", "node");
  n.kind = node_kind_from_string(detail::string_field(j, "kind", "node '" + n.name + "'"));
  if (j.contains("distribution")) n.distribution = family_from_string(detail::string_field(j, "distribution", "node"));
  if (j.contains("params")) n.params = detail::expr_list(j.at("params"), "params of '" + n.name + "'");
  if (j.contains("value")) n.value = j.at("value").get<Tensor>();
  if (j.contains("init")) n.init = j.at("init").get<Tensor>();
  if (j.contains("predicate")) n.predicate = detail::string_field(j, "predicate", "node");
  if (j.contains("constraint")) n.constraint = detail::string_field(j, "constraint", "node");
  return n;
}

inline nlohmann::json node_to_json(const NodeDesc& n) {
  nlohmann::json j = {{"name", n.name}, {"kind", std::string(to_string(n.kind))}};
  if (n.distribution) j["distribution"] = std::string(to_string(*n.distribution));
  if (!n.params.empty()) j["params"] = detail::expr_list_json(n.params);
  if (n.value) j["value"] = *n.value;
  if (n.init) j["init"] = *n.init;
  if (n.predicate) j["predicate"] = *n.predicate;
  if (n.constraint) j["constraint"] = *n.constraint;
  return j;
}

inline LinkDesc link_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"from", "to", "kind", "subset", "when"}, "link");
  LinkDesc l;
  l.from = detail::string_field(j, "from", "link");
  l.to = detail::string_field(j, "to", "link");
  l.kind = j.contains("kind") ? link_kind_from_string(detail::string_field(j, "kind", "link")) : LinkKind::Generative;
  if (j.contains("subset")) l.subset = detail::string_list(j.at("subset"), "link subset");
  if (j.contains("when")) l.when = detail::integer_field(j.at("when"), "link 'when'");
  return l;
}

inline nlohmann::json link_to_json(const LinkDesc& l) {
  nlohmann::json j = {{"from", l.from}, {"to", l.to}, {"kind", std::string(to_string(l.kind))}};
  if (!l.subset.empty()) j["subset"] = l.subset;
  if (l.when) j["when"] = *l.when;
  return j;
}

inline CollectionDesc collection_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"name", "members", "index", "replicate"}, "collection");
  CollectionDesc c;
  c.name = detail::string_field(j, "name", "collection");
  c.members = detail::string_list(detail::required(j, "members", "collection"), "collection members");
  if (j.contains("index")) {
    const auto& ix = j.at("index");
    if (ix.is_string()) {
      c.index = IndexSpec{ix.get<std::string>(), 0};
    } else {
      detail::reject_unknown_keys(ix, {"name", "start"}, "collection index");
      IndexSpec spec{detail::string_field(ix, "name", "collection index"), 0};
      if (ix.contains("start")) spec.start = detail::integer_field(ix.at("start"), "index start");
      c.index = spec;
    }
  }
  if (j.contains("replicate")) c.replicate = detail::integer_field(j.at("replicate"), "replicate");
  return c;
}

inline nlohmann::json collection_to_json(const CollectionDesc& c) {
  nlohmann::json j = {{"name", c.name}, {"members", c.members}};
  if (c.index) j["index"] = {{"name", c.index->name}, {"start", c.index->start}};
  if (c.replicate) j["replicate"] = *c.replicate;
  return j;
}

inline IdiomDesc idiom_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"idiom", "prefix", "args", "slots", "bindings", "observations"}, "idiom");
  IdiomDesc d;
  d.idiom = detail::string_field(j, "idiom", "idiom");
  if (j.contains("prefix")) d.prefix = detail::string_field(j, "prefix", "idiom");
  if (j.contains("args")) {
    if (!j.at("args").is_object()) throw ParseError("idiom args must be an object");
    for (const auto& [k, v] : j.at("args").items()) d.args[k] = detail::integer_field(v, "idiom arg '" + k + "'");
  }
  if (j.contains("slots")) {
    if (!j.at("slots").is_object()) throw ParseError("idiom slots must be an object");
    for (const auto& [k, v] : j.at("slots").items()) d.slots[k] = distribution_from_json(v);
  }
  if (j.contains("bindings")) {
    if (!j.at("bindings").is_object()) throw ParseError("idiom bindings must be an object");
    for (const auto& [k, v] : j.at("bindings").items()) {
      if (!v.is_string()) throw ParseError("idiom binding '" + k + "' must name a node");
      d.bindings[k] = v.get<std::string>();
    }
  }
  if (j.contains("observations")) {
    if (!j.at("observations").is_object()) throw ParseError("idiom observations must be an object");
    for (const auto& [k, v] : j.at("observations").items()) d.observations[k] = v.get<Tensor>();
  }
  return d;
}

inline nlohmann::json idiom_to_json(const IdiomDesc& d) {
  nlohmann::json j = {{"idiom", d.idiom}};
  if (!d.prefix.empty()) j["prefix"] = d.prefix;
  if (!d.args.empty()) j["args"] = d.args;
  if (!d.slots.empty()) {
    j["slots"] = nlohmann::json::object();
    for (const auto& [k, v] : d.slots) j["slots"][k] = distribution_to_json(v);
  }
  if (!d.bindings.empty()) j["bindings"] = d.bindings;
  if (!d.observations.empty()) {
    j["observations"] = nlohmann::json::object();
    for (const auto& [k, v] : d.observations) j["observations"][k] = v;
  }
  return j;
}

inline ModelDescription parse_model(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"nodes", "links", "collections", "predicates", "idioms"}, "model");
  ModelDescription m;
  auto list = [&](const char* key) -> const nlohmann::json* {
    if (!j.contains(key)) return nullptr;
    if (!j.at(key).is_array()) throw ParseError("'" + std::string(key) + "' must be a list");
    return &j.at(key);
  };
  if (const auto* a = list("nodes"))
    for (const auto& e : *a) m.nodes.push_back(node_from_json(e));
  if (const auto* a = list("links"))
    for (const auto& e : *a) m.links.push_back(link_from_json(e));
  if (const auto* a = list("collections"))
    for (const auto& e : *a) m.collections.push_back(collection_from_json(e));
  if (j.contains("predicates")) m.predicates = detail::string_list(j.at("predicates"), "predicates");
  if (const auto* a = list("idioms"))
    for (const auto& e : *a) m.idioms.push_back(idiom_from_json(e));
  return m;
}

inline nlohmann::json serialize_model(const ModelDescription& m) {
  nlohmann::json j = nlohmann::json::object();
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : m.nodes) j["nodes"].push_back(node_to_json(n));
  j["links"] = nlohmann::json::array();
  for (const auto& l : m.links) j["links"].push_back(link_to_json(l));
  if (!m.collections.empty()) {
    j["collections"] = nlohmann::json::array();
    for (const auto& c : m.collections) j["collections"].push_back(collection_to_json(c));
  }
  if (!m.predicates.empty()) j["predicates"] = m.predicates;
  if (!m.idioms.empty()) {
    j["idioms"] = nlohmann::json::array();
    for (const auto& d : m.idioms) j["idioms"].push_back(idiom_to_json(d));
  }
  return j;
}

inline ModelDescription parse_model_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    return parse_model(j);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed model file: ") + e.what());
  }
}

inline ModelDescription load_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model_text(ss.str());
}

}  // namespace gfg

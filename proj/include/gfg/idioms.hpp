#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gfg/error.hpp"
#include "gfg/model.hpp"

namespace gfg {

/// Name of instance `i` of `base`, e.g. z_m{3}.
inline std::string indexed_name(const std::string& base, long long i) { return base + "{" + std::to_string(i) + "}"; }

/// A free distribution of an idiom and the formal inputs its arguments may use.
struct SlotSignature {
  std::string name;
  std::vector<std::string> inputs;
  bool required = true;
  std::optional<Family> family;  // when the slot must be of one family
};

/// Arguments of one instantiation. Names created by the template are prefixed;
/// bound inputs keep their host names.
struct IdiomInstance {
  std::string prefix;
  std::map<std::string, long long> args;
  std::map<std::string, std::string> bindings;
  std::map<std::string, Tensor> observations;  // local node name -> observed value
};

/// A reusable graph fragment whose distributions are supplied as slots.
struct IdiomTemplate {
  std::string name;
  std::vector<SlotSignature> signature;
  std::map<std::string, DistributionSpec> slots;
  std::vector<std::string> required_inputs;
  std::vector<std::string> optional_inputs;
  std::function<ModelDescription(const IdiomTemplate&, const IdiomInstance&)> builder;
};

namespace detail {

inline void check_slots(const std::string& idiom, const std::vector<SlotSignature>& signature,
                        const std::map<std::string, DistributionSpec>& slots) {
  for (const auto& [name, _] : slots) {
    bool known = false;
    for (const auto& s : signature) known = known || s.name == name;
    if (!known) throw SlotSignatureError(idiom + " idiom has no slot '" + name + "'");
  }
  for (const auto& s : signature) {
    const auto it = slots.find(s.name);
    if (it == slots.end()) {
      if (s.required) throw SlotSignatureError(idiom + " idiom needs slot '" + s.name + "'");
      continue;
    }
    const auto& d = it->second;
    if (s.family && d.family != *s.family)
      throw SlotSignatureError("slot '" + s.name + "' must be " + std::string(to_string(*s.family)));
    if (d.params.size() != family_arity(d.family))
      throw SlotSignatureError("slot '" + s.name + "' gives " + std::to_string(d.params.size()) + " arguments to " +
                               std::string(to_string(d.family)));
    std::set<std::string> refs;
    for (const auto& e : d.params) e.collect_refs(refs);
    for (const auto& r : refs)
      if (std::find(s.inputs.begin(), s.inputs.end(), r) == s.inputs.end())
        throw SlotSignatureError("slot '" + s.name + "' references '" + r + "', which is not one of its inputs");
  }
}

inline long long arg(const IdiomInstance& inst, const std::string& key, long long fallback) {
  const auto it = inst.args.find(key);
  return it == inst.args.end() ? fallback : it->second;
}

/// Adds node `name` drawn from `slot`, wiring a generative link from every actual
/// node behind each formal input the slot's arguments use.
inline void add_slot_node(ModelDescription& d, const std::string& name, NodeKind kind, const DistributionSpec& slot,
                          const std::map<std::string, std::string>& actual) {
  NodeDesc n;
  n.name = name;
  n.kind = kind;
  n.distribution = slot.family;
  std::set<std::string> used;
  for (const auto& e : slot.params) {
    n.params.push_back(e.rewrite([&](const std::string& r) {
      const auto it = actual.find(r);
      if (it == actual.end()) return Expr::ref(r);
      used.insert(it->second);
      return Expr::ref(it->second);
    }));
  }
  for (const auto& u : used) d.links.push_back(LinkDesc{u, name, LinkKind::Generative, {}, std::nullopt});
  d.nodes.push_back(std::move(n));
}

inline void apply_observations(ModelDescription& d, const IdiomInstance& inst) {
  for (const auto& [local, value] : inst.observations) {
    bool found = false;
    for (auto& n : d.nodes) {
      if (n.name != inst.prefix + local) continue;
      if (n.kind != NodeKind::Latent) throw BindingError("idiom node '" + local + "' cannot be observed");
      n.kind = NodeKind::Observed;
      n.value = value;
      found = true;
    }
    if (!found) throw BindingError("idiom creates no node '" + local + "' to observe");
  }
}

/// One transition step: z_a{t-1} from the policy prior, z_s{t} from the transition.
inline void add_transition_step(ModelDescription& d, const IdiomTemplate& t, const std::string& prefix, long long tau,
                                const std::string& prev_state) {
  const auto a = prefix + indexed_name("z_a", tau - 1);
  const auto s = prefix + indexed_name("z_s", tau);
  add_slot_node(d, a, NodeKind::Latent, t.slots.at("policy_prior"), {});
  add_slot_node(d, s, NodeKind::Latent, t.slots.at("transition"), {{"s_prev", prev_state}, {"a", a}});
  d.collections.push_back(CollectionDesc{prefix + indexed_name("step", tau), {s, a}, std::nullopt, std::nullopt});
}

}  // namespace detail

inline const SlotSignature kTransitionSlot{"transition", {"s_prev", "a"}, true, std::nullopt};
inline const SlotSignature kPolicySlot{"policy_prior", {}, true, std::nullopt};

/// Instantiates a template; every required input must be bound.
inline ModelDescription instantiate(const IdiomTemplate& t, const IdiomInstance& inst) {
  for (const auto& in : t.required_inputs)
    if (!inst.bindings.count(in)) throw BindingError(t.name + " idiom input '" + in + "' is unbound");
  for (const auto& [formal, _] : inst.bindings) {
    const bool known = std::find(t.required_inputs.begin(), t.required_inputs.end(), formal) != t.required_inputs.end() ||
                       std::find(t.optional_inputs.begin(), t.optional_inputs.end(), formal) != t.optional_inputs.end();
    if (!known) throw BindingError(t.name + " idiom has no input '" + formal + "'");
  }
  auto d = t.builder(t, inst);
  detail::apply_observations(d, inst);
  return d;
}

/// One step of the state/action chain: {z_s{t}, z_a{t-1}} given the bound state z_s{t-1}.
/// Argument `step` is t (default 1); input `state` is the previous state.
inline IdiomTemplate transition_idiom(std::map<std::string, DistributionSpec> slots) {
  IdiomTemplate t;
  t.name = "transition";
  t.signature = {kTransitionSlot, kPolicySlot};
  detail::check_slots(t.name, t.signature, slots);
  t.slots = std::move(slots);
  t.required_inputs = {"state"};
  t.builder = [](const IdiomTemplate& self, const IdiomInstance& inst) {
    ModelDescription d;
    detail::add_transition_step(d, self, inst.prefix, detail::arg(inst, "step", 1), inst.bindings.at("state"));
    return d;
  };
  return t;
}

/// Simultaneous localisation and mapping over `T` steps and a map of `I` cells.
///
/// Creates z_s{0} (slot `initial`, unless input `state` is bound), a replicated
/// map collection of z_m{1..I}, and per step t the transition collection
/// step{t} plus the percept z_p{t} in percept{t}. The steps are grouped in
/// `trajectory` and the percepts in `perception`.
inline IdiomTemplate slam_idiom(std::map<std::string, DistributionSpec> slots) {
  IdiomTemplate t;
  t.name = "slam";
  t.signature = {kTransitionSlot,
                 kPolicySlot,
                 {"perception", {"s", "a", "m"}, true, std::nullopt},
                 {"map_prior", {"i"}, true, std::nullopt},
                 {"initial", {}, false, std::nullopt}};
  detail::check_slots(t.name, t.signature, slots);
  t.slots = std::move(slots);
  t.optional_inputs = {"state"};
  t.builder = [](const IdiomTemplate& self, const IdiomInstance& inst) {
    const long long T = detail::arg(inst, "T", 1);
    const long long I = detail::arg(inst, "I", 1);
    if (T < 1 || I < 1) throw SlotSignatureError("slam idiom needs T >= 1 and I >= 1");
    const auto& p = inst.prefix;
    ModelDescription d;
    std::string s0;
    if (const auto it = inst.bindings.find("state"); it != inst.bindings.end()) {
      s0 = it->second;
    } else {
      if (!self.slots.count("initial")) throw SlotSignatureError("slam idiom needs an 'initial' slot or a bound 'state'");
      s0 = p + "z_s{0}";
      detail::add_slot_node(d, s0, NodeKind::Latent, self.slots.at("initial"), {});
      d.collections.push_back(CollectionDesc{p + "init", {s0}, std::nullopt, std::nullopt});
    }
    const auto m = p + "z_m";
    detail::add_slot_node(d, m, NodeKind::Latent, self.slots.at("map_prior"), {});
    d.nodes.back().params = [&] {
      std::vector<Expr> ps;
      for (const auto& e : self.slots.at("map_prior").params) ps.push_back(e.rename([&](const std::string& r) { return p + r; }));
      return ps;
    }();
    d.collections.push_back(CollectionDesc{p + "map", {m}, IndexSpec{p + "i", 1}, I});
    CollectionDesc trajectory{p + "trajectory", {}, std::nullopt, std::nullopt};
    CollectionDesc perception{p + "perception", {}, std::nullopt, std::nullopt};
    std::string prev = s0;
    for (long long tau = 1; tau <= T; ++tau) {
      detail::add_transition_step(d, self, p, tau, prev);
      trajectory.members.push_back(d.collections.back().name);
      const auto s = p + indexed_name("z_s", tau);
      const auto a = p + indexed_name("z_a", tau - 1);
      const auto z = p + indexed_name("z_p", tau);
      detail::add_slot_node(d, z, NodeKind::Latent, self.slots.at("perception"), {{"s", s}, {"a", a}, {"m", m}});
      d.collections.push_back(CollectionDesc{p + indexed_name("percept", tau), {z}, std::nullopt, std::nullopt});
      perception.members.push_back(d.collections.back().name);
      prev = s;
    }
    d.collections.push_back(std::move(trajectory));
    d.collections.push_back(std::move(perception));
    return d;
  };
  return t;
}

/// Markov decision process as inference over `T` steps from the bound `state`.
///
/// Per step t = 1..T: the transition collection step{t} = {z_s{t}, z_a{t-1}} and the
/// optimality variable x_O{t-1} | z_s{t-1}, z_a{t-1}, observed at 1.
inline IdiomTemplate mdp_idiom(std::map<std::string, DistributionSpec> slots) {
  IdiomTemplate t;
  t.name = "mdp";
  t.signature = {kTransitionSlot, kPolicySlot, {"optimality", {"s", "a"}, true, Family::Bernoulli}};
  detail::check_slots(t.name, t.signature, slots);
  t.slots = std::move(slots);
  t.required_inputs = {"state"};
  t.builder = [](const IdiomTemplate& self, const IdiomInstance& inst) {
    const long long T = detail::arg(inst, "T", 1);
    if (T < 1) throw SlotSignatureError("mdp idiom needs T >= 1");
    const auto& p = inst.prefix;
    ModelDescription d;
    std::string prev = inst.bindings.at("state");
    for (long long tau = 1; tau <= T; ++tau) {
      detail::add_transition_step(d, self, p, tau, prev);
      const auto a = p + indexed_name("z_a", tau - 1);
      const auto o = p + indexed_name("x_O", tau - 1);
      detail::add_slot_node(d, o, NodeKind::Observed, self.slots.at("optimality"), {{"s", prev}, {"a", a}});
      d.nodes.back().value = Tensor::scalar(1.0);
      prev = p + indexed_name("z_s", tau);
    }
    return d;
  };
  return t;
}

inline IdiomTemplate make_idiom(const std::string& name, std::map<std::string, DistributionSpec> slots) {
  if (name == "transition") return transition_idiom(std::move(slots));
  if (name == "slam") return slam_idiom(std::move(slots));
  if (name == "mdp") return mdp_idiom(std::move(slots));
  throw ParseError("unknown idiom '" + name + "'");
}

inline void merge_into(ModelDescription& host, const ModelDescription& fragment) {
  host.nodes.insert(host.nodes.end(), fragment.nodes.begin(), fragment.nodes.end());
  host.links.insert(host.links.end(), fragment.links.begin(), fragment.links.end());
  host.collections.insert(host.collections.end(), fragment.collections.begin(), fragment.collections.end());
  for (const auto& p : fragment.predicates)
    if (std::find(host.predicates.begin(), host.predicates.end(), p) == host.predicates.end()) host.predicates.push_back(p);
}

/// Names a host description defines, including plate instances.
inline std::set<std::string> defined_names(const ModelDescription& d) {
  std::set<std::string> out;
  for (const auto& n : d.nodes) out.insert(n.name);
  for (const auto& c : d.collections) {
    if (!c.replicate) continue;
    const long long start = c.index ? c.index->start : 0;
    for (const auto& m : c.members)
      for (long long i = start; i < start + *c.replicate; ++i) out.insert(indexed_name(m, i));
  }
  return out;
}

/// Replaces every `idioms` stanza by the fragment it instantiates.
inline ModelDescription expand_idioms(const ModelDescription& in) {
  ModelDescription out = in;
  out.idioms.clear();
  for (const auto& stanza : in.idioms) {
    IdiomInstance inst{stanza.prefix, stanza.args, stanza.bindings, {}};
    for (const auto& [k, v] : stanza.observations) inst.observations[k] = v;
    merge_into(out, instantiate(make_idiom(stanza.idiom, stanza.slots), inst));
  }
  return out;
}

/// Merges `guest` into `host`, binding guest inputs to host nodes. Guest names are
/// prefixed with the instance prefix, or with "<idiom>/" when none is given.
inline ModelDescription compose_description(const ModelDescription& host, const IdiomTemplate& guest, IdiomInstance instance) {
  const ModelDescription base = expand_idioms(host);
  const auto names = defined_names(base);
  for (const auto& [formal, actual] : instance.bindings)
    if (!names.count(actual)) throw BindingError("binding '" + formal + "' refers to unknown host node '" + actual + "'");
  if (instance.prefix.empty()) instance.prefix = guest.name + "/";
  ModelDescription out = base;
  merge_into(out, instantiate(guest, instance));
  return out;
}

}  // namespace gfg

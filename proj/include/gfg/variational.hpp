#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfg/autodiff.hpp"
#include "gfg/distributions.hpp"
#include "gfg/graph.hpp"

namespace gfg {

/// Variational parameters of one latent: Normal(loc, exp(log_scale)) per element,
/// or a categorical distribution over the latent's support.
struct LatentParams {
  Family family = Family::Normal;  // Normal or Categorical
  std::vector<double> loc;
  std::vector<double> log_scale;
  std::vector<double> logits;

  friend bool operator==(const LatentParams&, const LatentParams&) = default;

  std::size_t dimension() const { return loc.size() + log_scale.size() + logits.size(); }
};

/// Mean-field factor q_Φ over the latents one owner is responsible for.
struct VariationalFactor {
  std::string owner;  // collection name; empty for a whole-model factor
  std::map<std::string, LatentParams> latents;

  friend bool operator==(const VariationalFactor&, const VariationalFactor&) = default;

  std::size_t dimension() const {
    std::size_t n = 0;
    for (const auto& [_, p] : latents) n += p.dimension();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> w;
    for (const auto& [_, p] : latents) {
      w.insert(w.end(), p.loc.begin(), p.loc.end());
      w.insert(w.end(), p.log_scale.begin(), p.log_scale.end());
      w.insert(w.end(), p.logits.begin(), p.logits.end());
    }
    return w;
  }

  void assign(const std::vector<double>& w) {
    std::size_t k = 0;
    for (auto& [_, p] : latents)
      for (auto* v : {&p.loc, &p.log_scale, &p.logits})
        for (auto& x : *v) x = w.at(k++);
  }
};

/// Neutral start: means 0, log-scales 0, logits 0.
inline LatentParams init_latent_params(const Node& n) {
  LatentParams p;
  if (n.discrete()) {
    p.family = Family::Categorical;
    p.logits.assign(n.support, 0.0);
  } else {
    p.family = Family::Normal;
    p.loc.assign(std::max<std::size_t>(n.size(), 1), 0.0);
    p.log_scale.assign(std::max<std::size_t>(n.size(), 1), 0.0);
  }
  return p;
}

inline VariationalFactor init_variational(const GenerativeFlowGraph& g, const std::string& owner,
                                          const std::vector<NodeId>& latents) {
  VariationalFactor q;
  q.owner = owner;
  for (auto id : latents) q.latents[g.name(id)] = init_latent_params(g.node(id));
  return q;
}

/// One factor over every latent of the graph.
inline VariationalFactor init_variational(const GenerativeFlowGraph& g) { return init_variational(g, "", g.latents()); }

// ---------------------------------------------------------------------------
// Scalar-level view used while building objectives

struct LatentQ {
  Family family = Family::Normal;
  Values loc, log_scale, logits;
};

/// Parameters as tape leaves (or constants when `tape` is null).
inline LatentQ make_latent_q(const LatentParams& p, Tape* tape, std::vector<Scalar>* leaves = nullptr) {
  LatentQ q;
  q.family = p.family;
  auto lift = [&](const std::vector<double>& src, Values& dst) {
    for (double x : src) {
      dst.push_back(tape ? tape->variable(x) : Scalar(x));
      if (leaves) leaves->push_back(dst.back());
    }
  };
  lift(p.loc, q.loc);
  lift(p.log_scale, q.log_scale);
  lift(p.logits, q.logits);
  return q;
}

inline Scalar log_q(const LatentQ& q, const Values& z) {
  if (q.family == Family::Categorical) return log_prob(Categorical{q.logits}, as_index(z.at(0).value()));
  std::vector<Scalar> terms;
  for (std::size_t k = 0; k < z.size(); ++k) terms.push_back(log_prob(Normal{q.loc[k], exp(q.log_scale[k])}, z[k]));
  return sum(terms);
}

/// Pathwise draw loc + exp(log_scale) * eps.
inline Values rsample_q(const LatentQ& q, Rng& rng) {
  if (q.family != Family::Normal) throw UnsupportedError("reparameterized sampling needs a Normal factor");
  Values z;
  for (std::size_t k = 0; k < q.loc.size(); ++k) z.push_back(rsample(Normal{q.loc[k], exp(q.log_scale[k])}, rng));
  return z;
}

/// Draw carrying no gradient.
inline Values sample_q(const LatentQ& q, Rng& rng) {
  if (q.family == Family::Categorical) return {Scalar(static_cast<double>(sample(Categorical{q.logits}, rng)))};
  Values z;
  for (std::size_t k = 0; k < q.loc.size(); ++k)
    z.emplace_back(q.loc[k].value() + std::exp(q.log_scale[k].value()) * rng.normal());
  return z;
}

/// Marginal probabilities of a categorical factor.
inline std::vector<double> probabilities(const LatentParams& p) {
  std::vector<Scalar> logits(p.logits.begin(), p.logits.end());
  return probabilities(Categorical{logits});
}

inline std::vector<double> stddev(const LatentParams& p) {
  std::vector<double> s;
  for (double x : p.log_scale) s.push_back(std::exp(x));
  return s;
}

// ---------------------------------------------------------------------------
// Serialization (message payloads)

inline void to_json(nlohmann::json& j, const LatentParams& p) {
  j = nlohmann::json{{"family", std::string(to_string(p.family))}};
  if (p.family == Family::Normal) {
    j["loc"] = p.loc;
    j["log_scale"] = p.log_scale;
  } else {
    j["logits"] = p.logits;
  }
}

inline void from_json(const nlohmann::json& j, LatentParams& p) {
  p.family = family_from_string(j.at("family").get<std::string>());
  if (p.family == Family::Normal) {
    p.loc = j.at("loc").get<std::vector<double>>();
    p.log_scale = j.at("log_scale").get<std::vector<double>>();
    if (p.loc.size() != p.log_scale.size()) throw ParseError("loc and log_scale differ in size");
  } else if (p.family == Family::Categorical) {
    p.logits = j.at("logits").get<std::vector<double>>();
    if (p.logits.empty()) throw ParseError("categorical factor needs logits");
  } else {
    throw ParseError("variational factors are Normal or Categorical");
  }
}

inline void to_json(nlohmann::json& j, const VariationalFactor& q) {
  j = nlohmann::json{{"owner", q.owner}, {"latents", q.latents}};
}

inline void from_json(const nlohmann::json& j, VariationalFactor& q) {
  q.owner = j.at("owner").get<std::string>();
  q.latents = j.at("latents").get<std::map<std::string, LatentParams>>();
}

}  // namespace gfg

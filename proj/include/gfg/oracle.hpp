#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "gfg/graph.hpp"

namespace gfg {

/// Exact posterior of a small discrete model. Latents skipped by a branch hold -1.
struct ExactPosterior {
  std::vector<NodeId> latents;
  std::map<std::vector<long long>, double> table;
  double log_evidence = 0.0;  // log p(X); not meaningful for detached-block posteriors

  /// p(z = k) for each latent; the mass of traces where z did not run is excluded.
  std::map<NodeId, std::vector<double>> marginals(const GenerativeFlowGraph& g) const {
    std::map<NodeId, std::vector<double>> out;
    for (std::size_t i = 0; i < latents.size(); ++i) out[latents[i]].assign(g.node(latents[i]).support, 0.0);
    for (const auto& [a, p] : table)
      for (std::size_t i = 0; i < latents.size(); ++i)
        if (a[i] >= 0) out[latents[i]][static_cast<std::size_t>(a[i])] += p;
    return out;
  }

  std::vector<double> marginal(const GenerativeFlowGraph& g, const std::string& name) const {
    return marginals(g).at(g.id(name));
  }

  double total() const {
    double s = 0.0;
    for (const auto& [_, p] : table) s += p;
    return s;
  }
};

struct EnumerationLimits {
  std::size_t max_states = 6;
  std::size_t max_joint = 1000000;
};

namespace detail {

struct EnumState {
  const GenerativeFlowGraph& g;
  const std::vector<NodeId>& order;
  std::map<NodeId, std::size_t> latent_index;
  std::vector<long long> assignment;
  std::vector<double> node_terms;  // log p of each executed variable node
  std::vector<std::pair<std::vector<long long>, std::vector<double>>> rows;
};

inline void enumerate_from(EnumState& st, std::size_t pos, ExecState& s) {
  if (pos == st.order.size()) {
    st.rows.emplace_back(st.assignment, st.node_terms);
    return;
  }
  const NodeId id = st.order[pos];
  const Node& n = st.g.node(id);
  if (is_control(n.kind)) {
    ExecState next = s;
    execute_control(st.g, id, next);
    enumerate_from(st, pos + 1, next);
    return;
  }
  if (!should_execute(st.g, id, s)) {
    enumerate_from(st, pos + 1, s);
    return;
  }
  if (n.kind != NodeKind::Latent) {
    ExecState next = s;
    next.values[id.value] = initial_values(n);
    const double saved = st.node_terms[id.value];
    if (n.kind == NodeKind::Observed)
      st.node_terms[id.value] = log_density(n, evaluate_args(st.g, id, next), *next.values[id.value]).value();
    enumerate_from(st, pos + 1, next);
    st.node_terms[id.value] = saved;
    return;
  }
  const std::size_t li = st.latent_index.at(id);
  for (std::size_t k = 0; k < n.support; ++k) {
    ExecState next = s;
    next.values[id.value] = Values{Scalar(static_cast<double>(k))};
    const double lp = log_density(n, evaluate_args(st.g, id, next), *next.values[id.value]).value();
    if (lp == -INFINITY) continue;
    st.assignment[li] = static_cast<long long>(k);
    st.node_terms[id.value] = lp;
    enumerate_from(st, pos + 1, next);
  }
  st.assignment[li] = -1;
  st.node_terms[id.value] = 0.0;
}

inline double log_sum_exp(const std::vector<double>& xs) {
  double m = -INFINITY;
  for (double x : xs) m = std::max(m, x);
  if (m == -INFINITY) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

/// Blocks of nodes joined by generative links (detached links separate blocks).
inline std::vector<std::size_t> generative_blocks(const GenerativeFlowGraph& g) {
  std::vector<std::size_t> parent(g.nodes().size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& l : g.links())
    if (l.kind == LinkKind::Generative && g.node(l.from).kind != NodeKind::FixedParam)
      parent[find(l.from.value)] = find(l.to.value);
  std::vector<std::size_t> out(g.nodes().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = find(i);
  return out;
}

}  // namespace detail

/// Exact p(Z | X) by summing exp(log joint) over every latent assignment.
///
/// With `respect_detached`, each generative block is normalized conditionally on the
/// latents outside it, which yields the posterior a detached link defines.
inline ExactPosterior enumerate_posterior(const GenerativeFlowGraph& g, const EnumerationLimits& limits = {},
                                          bool respect_detached = false) {
  ExactPosterior post;
  post.latents = g.latents();
  double joint = 1.0;
  for (auto id : post.latents) {
    const Node& n = g.node(id);
    if (!n.discrete()) throw TooLargeError("latent '" + n.name + "' is continuous");
    if (n.support > limits.max_states)
      throw TooLargeError("latent '" + n.name + "' has " + std::to_string(n.support) + " states");
    joint *= static_cast<double>(n.support);
    if (joint > static_cast<double>(limits.max_joint)) throw TooLargeError("joint state space exceeds the limit");
  }
  detail::EnumState st{g, g.topological_order(), {}, std::vector<long long>(post.latents.size(), -1),
                       std::vector<double>(g.nodes().size(), 0.0), {}};
  for (std::size_t i = 0; i < post.latents.size(); ++i) st.latent_index[post.latents[i]] = i;
  ExecState s(g.nodes().size());
  detail::enumerate_from(st, 0, s);
  if (st.rows.empty()) throw DomainError("no assignment has positive probability");

  if (!respect_detached) {
    std::vector<double> logs;
    for (const auto& [_, terms] : st.rows) logs.push_back(std::accumulate(terms.begin(), terms.end(), 0.0));
    post.log_evidence = detail::log_sum_exp(logs);
    for (std::size_t r = 0; r < st.rows.size(); ++r) post.table[st.rows[r].first] += std::exp(logs[r] - post.log_evidence);
    return post;
  }

  const auto block = detail::generative_blocks(g);
  std::set<std::size_t> roots;
  for (const auto& n : g.nodes())
    if (is_variable(n.kind)) roots.insert(block[n.id.value]);
  std::vector<double> logp(st.rows.size(), 0.0);
  for (auto b : roots) {
    std::vector<std::size_t> inside;  // latent positions in block b
    for (std::size_t i = 0; i < post.latents.size(); ++i)
      if (block[post.latents[i].value] == b) inside.push_back(i);
    std::vector<double> w(st.rows.size(), 0.0);
    std::map<std::vector<long long>, std::vector<double>> by_key;
    std::vector<std::vector<long long>> keys(st.rows.size());
    for (std::size_t r = 0; r < st.rows.size(); ++r) {
      for (const auto& n : g.nodes())
        if (is_variable(n.kind) && block[n.id.value] == b) w[r] += st.rows[r].second[n.id.value];
      keys[r] = st.rows[r].first;
      for (auto i : inside) keys[r][i] = -2;
      by_key[keys[r]].push_back(w[r]);
    }
    std::map<std::vector<long long>, double> norm;
    for (const auto& [k, ws] : by_key) norm[k] = detail::log_sum_exp(ws);
    for (std::size_t r = 0; r < st.rows.size(); ++r) logp[r] += w[r] - norm.at(keys[r]);
  }
  for (std::size_t r = 0; r < st.rows.size(); ++r) post.table[st.rows[r].first] += std::exp(logp[r]);
  // Blocks normalized per key leave the joint normalized up to rounding; renormalize.
  const double total = post.total();
  for (auto& [_, p] : post.table) p /= total;
  return post;
}

/// Univariate Gaussian by mean and standard deviation.
struct Gaussian {
  double mean = 0.0;
  double std = 1.0;
};

/// Posterior of mu under prior N(prior) and observations x_i ~ N(mu, sigma).
inline Gaussian conjugate_gaussian_posterior(const Gaussian& prior, double sigma, const std::vector<double>& obs) {
  if (!(sigma > 0.0)) throw DomainError("likelihood noise must be positive");
  if (!(prior.std > 0.0)) throw DomainError("prior std must be positive");
  double precision = 1.0 / (prior.std * prior.std);
  double weighted = prior.mean * precision;
  for (double x : obs) {
    precision += 1.0 / (sigma * sigma);
    weighted += x / (sigma * sigma);
  }
  return {weighted / precision, 1.0 / std::sqrt(precision)};
}

/// log p(x_1..x_n) with mu integrated out.
inline double conjugate_gaussian_log_evidence(const Gaussian& prior, double sigma, const std::vector<double>& obs) {
  double total = 0.0;
  Gaussian cur = prior;
  for (double x : obs) {
    const double var = cur.std * cur.std + sigma * sigma;
    total += -0.5 * std::log(2.0 * M_PI * var) - 0.5 * (x - cur.mean) * (x - cur.mean) / var;
    cur = conjugate_gaussian_posterior(cur, sigma, {x});
  }
  return total;
}

/// Half the L1 distance between two distributions over the same support.
inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size())
    throw SupportMismatchError("supports of size " + std::to_string(p.size()) + " and " + std::to_string(q.size()));
  double d = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) d += std::abs(p[k] - q[k]);
  return 0.5 * d;
}

template <class Key>
double total_variation(const std::map<Key, double>& p, const std::map<Key, double>& q) {
  if (p.size() != q.size()) throw SupportMismatchError("tables have different supports");
  double d = 0.0;
  for (const auto& [k, v] : p) {
    const auto it = q.find(k);
    if (it == q.end()) throw SupportMismatchError("tables have different supports");
    d += std::abs(v - it->second);
  }
  return 0.5 * d;
}

}  // namespace gfg

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfg/factorize.hpp"
#include "gfg/svi.hpp"
#include "gfg/variational.hpp"

namespace gfg {

/// Local inference problem of one collection C^a.
struct SubProblem {
  CollectionId collection;
  std::string name;
  std::vector<NodeId> latents;
  std::vector<NodeId> observed;
  std::vector<NodeId> params;
  std::vector<ParentEdge> parents;
  std::vector<NodeId> child_global_observed;
  std::vector<std::string> dependencies;  // collections whose factors this one reads, sorted
};

inline std::vector<SubProblem> build_subproblems(const PosteriorPartition& p, const GenerativeFlowGraph& g) {
  std::vector<SubProblem> out;
  for (auto c : p.collections) {
    SubProblem sp;
    sp.collection = c;
    sp.name = g.collection(c).name;
    sp.latents = p.latents.at(c);
    sp.observed = p.observed.at(c);
    sp.params = p.params.at(c);
    sp.parents = p.parent_map.at(c);
    const std::set<NodeId> own(sp.latents.begin(), sp.latents.end());
    for (auto x : p.global_observed)
      for (auto v : make_factor(g, x).parent_variables)
        if (own.count(v)) {
          sp.child_global_observed.push_back(x);
          break;
        }
    std::set<std::string> deps;
    for (const auto& e : sp.parents) deps.insert(g.collection(e.other).name);
    sp.dependencies.assign(deps.begin(), deps.end());
    out.push_back(std::move(sp));
  }
  return out;
}

inline std::vector<SubProblem> build_subproblems(const GenerativeFlowGraph& g) {
  return build_subproblems(partition_for_smp(g), g);
}

// ---------------------------------------------------------------------------
// Messages

/// Variational and model parameters a collection publishes after solving.
struct MessagePayload {
  VariationalFactor q;
  ParamStore theta;
  friend bool operator==(const MessagePayload&, const MessagePayload&) = default;
};

struct Message {
  std::string sender;
  std::size_t iteration = 0;
  std::string payload;  // JSON; doubles round-trip exactly
};

inline std::string encode_payload(const MessagePayload& m) {
  return nlohmann::json{{"phi", m.q}, {"theta", m.theta}}.dump();
}

inline MessagePayload decode_payload(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    return {j.at("phi").get<VariationalFactor>(), j.at("theta").get<ParamStore>()};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed message payload: ") + e.what());
  }
}

/// Latest payload received from each collection.
using FrozenMap = std::map<std::string, MessagePayload>;

// ---------------------------------------------------------------------------
// Local objective

/// Local objective of `sp`: own latents drawn from its factor, parents and co-parents
/// of its global children drawn from the frozen factors of their owners.
inline Objective local_objective_spec(const GenerativeFlowGraph& g, const SubProblem& sp, const FrozenMap& frozen) {
  for (const auto& d : sp.dependencies)
    if (!frozen.count(d)) throw MissingMessageError("sub-problem '" + sp.name + "' has no message from '" + d + "'");
  Objective o;
  o.graph = &g;
  o.own = sp.latents;
  std::set<NodeId> scored(sp.latents.begin(), sp.latents.end());
  scored.insert(sp.observed.begin(), sp.observed.end());
  scored.insert(sp.child_global_observed.begin(), sp.child_global_observed.end());
  for (auto id : g.topological_order())
    if (scored.count(id)) o.scored.push_back(id);
  o.learned = sp.params;
  for (const auto& [owner, m] : frozen) {
    if (owner == sp.name) continue;
    for (const auto& [name, p] : m.q.latents) o.frozen[name] = p;
  }
  return o;
}

namespace detail {

inline ParamStore merged_theta(const GenerativeFlowGraph& g, const SubProblem& sp, const FrozenMap& frozen,
                               const ParamStore& own) {
  ParamStore theta = initial_params(g);
  for (const auto& [owner, m] : frozen)
    if (owner != sp.name)
      for (const auto& [k, v] : m.theta) theta[k] = v;
  for (auto id : sp.params)
    if (const auto it = own.find(g.name(id)); it != own.end()) theta[g.name(id)] = it->second;
  return theta;
}

inline ParamStore own_theta(const GenerativeFlowGraph& g, const SubProblem& sp, const ParamStore& theta) {
  ParamStore out;
  for (auto id : sp.params) out[g.name(id)] = theta.at(g.name(id));
  return out;
}

}  // namespace detail

inline VariationalFactor init_variational(const GenerativeFlowGraph& g, const SubProblem& sp) {
  return init_variational(g, sp.name, sp.latents);
}

/// Monte-Carlo estimate of the local dual objective for fixed own parameters.
inline ElboEstimate local_objective(const GenerativeFlowGraph& g, const SubProblem& sp, const FrozenMap& frozen,
                                    const VariationalFactor& q, const SviConfig& cfg, const ParamStore& theta = {}) {
  cfg.check();
  const Objective o = local_objective_spec(g, sp, frozen);
  const ObjectiveEvaluator ev(o, Estimator::Auto);
  Rng rng(cfg.seed);
  const Estimate e = ev.run(q, detail::merged_theta(g, sp, frozen, theta), rng, cfg.mc_samples, {}, false);
  return {e.objective, e.std_error};
}

struct SolveResult {
  MessagePayload payload;
  double objective = 0.0;
};

/// Fits the sub-problem's factor and parameters by SVI on its local objective.
inline SolveResult solve_subproblem(const GenerativeFlowGraph& g, const SubProblem& sp, const FrozenMap& frozen,
                                    const VariationalFactor& q0, const ParamStore& theta0, const SviConfig& cfg) {
  const Objective o = local_objective_spec(g, sp, frozen);
  const FitResult r = fit(o, q0, detail::merged_theta(g, sp, frozen, theta0), cfg);
  SolveResult out;
  out.payload.q = r.q;
  out.payload.q.owner = sp.name;
  out.payload.theta = detail::own_theta(g, sp, r.theta);
  out.objective = r.elbo_raw.empty() ? 0.0 : r.elbo_raw.back();
  return out;
}

struct MarginalLikelihood {
  double estimate = 1.0;
  double std_error = 0.0;
};

/// Estimate of p(X_G | ...) for the global children of `sp`: own latents from their
/// prior, other latents from frozen factors. Diagnostic only.
inline MarginalLikelihood approx_marginal_likelihood(const GenerativeFlowGraph& g, const SubProblem& sp,
                                                     const FrozenMap& frozen, std::size_t n, std::uint64_t seed = 0,
                                                     const ParamStore& theta = {}) {
  if (sp.child_global_observed.empty() || n == 0) return {};
  Objective o = local_objective_spec(g, sp, frozen);
  o.scored = sp.child_global_observed;
  // Own latents are drawn from their prior, so their ancestors are needed too.
  o.scored.insert(o.scored.end(), sp.latents.begin(), sp.latents.end());
  const std::set<NodeId> needed = detail::needed_nodes(g, o);
  const std::set<NodeId> own(sp.latents.begin(), sp.latents.end());
  const ParamStore th = detail::merged_theta(g, sp, frozen, theta);
  Rng rng(seed);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t m = 0; m < n; ++m) {
    ExecState s(g.nodes().size());
    double log_w = 0.0;
    for (auto id : g.topological_order()) {
      if (!needed.count(id)) continue;
      const Node& node = g.node(id);
      if (is_control(node.kind)) {
        execute_control(g, id, s);
        continue;
      }
      if (node.kind == NodeKind::Latent) {
        if (own.count(id)) {
          if (!should_execute(g, id, s)) continue;
          s.values[id.value] = sample_values(node, evaluate_args(g, id, s), rng);
        } else {
          const auto it = o.frozen.find(node.name);
          if (it == o.frozen.end()) throw MissingMessageError("no frozen factor for '" + node.name + "'");
          s.values[id.value] = sample_q(make_latent_q(it->second, nullptr), rng);
        }
        continue;
      }
      if (node.kind == NodeKind::VariableParam && th.count(node.name)) {
        Values v;
        for (double x : th.at(node.name)) v.emplace_back(x);
        s.values[id.value] = std::move(v);
      } else {
        s.values[id.value] = initial_values(node);
      }
      if (std::find(sp.child_global_observed.begin(), sp.child_global_observed.end(), id) != sp.child_global_observed.end() &&
          should_execute(g, id, s))
        log_w += log_density(node, evaluate_args(g, id, s), *s.values[id.value]).value();
    }
    const double w = std::exp(log_w);
    sum += w;
    sum_sq += w * w;
  }
  const double nn = static_cast<double>(n);
  MarginalLikelihood out;
  out.estimate = sum / nn;
  out.std_error = n > 1 ? std::sqrt(std::max(0.0, (sum_sq - nn * out.estimate * out.estimate) / (nn - 1.0)) / nn) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Scheduling

/// Seed of one sub-problem solve: a hash of (seed, collection, sweep).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view collection, std::size_t sweep) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t x) {
    for (int k = 0; k < 8; ++k) {
      h ^= (x >> (8 * k)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  mix(seed);
  for (unsigned char c : collection) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  mix(static_cast<std::uint64_t>(sweep));
  h += 0x9e3779b97f4a7c15ULL;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return h ^ (h >> 31);
}

enum class SchedulerMode { Serial, Parallel };

struct SchedulerConfig {
  SchedulerMode mode = SchedulerMode::Serial;
  std::size_t sweeps_max = 20;
  double convergence_eps = 1e-3;
  SviConfig svi;
  bool barrier = true;  // parallel mode: synchronize workers after every sweep

  void check() const {
    if (!(convergence_eps > 0.0)) throw ConfigError("convergence_eps must be positive");
    if (sweeps_max == 0) throw ConfigError("sweeps_max must be at least 1");
    svi.check();
  }
};

struct SweepRecord {
  std::size_t sweep = 0;
  std::vector<std::string> solved;
  double max_change = 0.0;
  std::size_t messages = 0;
  std::size_t bytes = 0;
};

struct SmpResult {
  std::map<std::string, VariationalFactor> phi;
  std::map<std::string, ParamStore> theta;
  std::map<std::string, double> objective;
  std::vector<SweepRecord> sweeps;
  std::vector<Message> messages;
  std::vector<std::string> warnings;
  bool converged = false;
  std::string status;  // "converged" or "max-sweeps"
  std::uint64_t seed = 0;

  std::size_t sweep_count() const { return sweeps.size(); }
  std::size_t bytes_sent() const {
    std::size_t b = 0;
    for (const auto& m : messages) b += m.payload.size();
    return b;
  }
};

namespace detail {

inline double max_abs_change(const MessagePayload& a, const MessagePayload& b) {
  double d = 0.0;
  const auto wa = a.q.flatten(), wb = b.q.flatten();
  for (std::size_t k = 0; k < std::min(wa.size(), wb.size()); ++k) d = std::max(d, std::abs(wa[k] - wb[k]));
  for (const auto& [k, v] : a.theta)
    if (const auto it = b.theta.find(k); it != b.theta.end())
      for (std::size_t j = 0; j < std::min(v.size(), it->second.size()); ++j) d = std::max(d, std::abs(v[j] - it->second[j]));
  return d;
}

/// Blocking FIFO used as a worker channel.
template <class T>
class Channel {
 public:
  void push(T v) {
    {
      std::lock_guard lock(mu_);
      q_.push_back(std::move(v));
    }
    cv_.notify_one();
  }
  T pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !q_.empty(); });
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }
  std::optional<T> try_pop() {
    std::lock_guard lock(mu_);
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
};

struct Task {
  bool stop = false;
  std::size_t sweep = 0;
  bool solve = false;
  std::vector<Message> inbox;  // messages published in the previous sweep
};

struct Reply {
  std::size_t index = 0;
  std::string payload;
  double objective = 0.0;
  std::string error;
};

/// Solves one sub-problem from encoded messages; shared by both modes.
inline Reply solve_encoded(const GenerativeFlowGraph& g, const SubProblem& sp, const FrozenMap& frozen,
                           const SchedulerConfig& cfg, std::size_t sweep, std::size_t index) {
  SviConfig svi = cfg.svi;
  svi.seed = derive_seed(cfg.svi.seed, sp.name, sweep);
  const auto& self = frozen.at(sp.name);
  const SolveResult r = solve_subproblem(g, sp, frozen, self.q, self.theta, svi);
  return {index, encode_payload(r.payload), r.objective, {}};
}

}  // namespace detail

/// Message passing over the sub-problems with Jacobi sweeps: every solve in sweep s
/// reads the messages published up to sweep s-1, so serial and barrier-parallel runs agree bit for bit.
inline SmpResult run_message_passing(const GenerativeFlowGraph& g, const std::vector<SubProblem>& sps,
                                     const SchedulerConfig& cfg) {
  cfg.check();
  if (sps.empty()) throw ConfigError("message passing needs at least one sub-problem");
  SmpResult res;
  res.seed = cfg.svi.seed;

  FrozenMap state;  // decoded latest payloads
  for (const auto& sp : sps) {
    MessagePayload m{init_variational(g, sp), {}};
    for (auto id : sp.params) m.theta[g.name(id)] = g.node(id).value.data;
    state[sp.name] = decode_payload(encode_payload(m));
  }

  auto finish = [&](bool converged) {
    res.converged = converged;
    res.status = converged ? "converged" : "max-sweeps";
    if (!converged)
      res.warnings.push_back("NonConvergenceWarning: no convergence within " + std::to_string(cfg.sweeps_max) +
                             " sweeps");
    for (const auto& [name, m] : state) {
      res.phi[name] = m.q;
      res.theta[name] = m.theta;
    }
  };

  if (cfg.mode == SchedulerMode::Parallel && !cfg.barrier) {
    // Workers run freely and read whatever messages have arrived.
    const std::size_t n = sps.size();
    std::vector<detail::Channel<Message>> inboxes(n);
    std::vector<FrozenMap> views(n, state);
    std::vector<std::vector<Message>> sent(n);
    std::vector<char> settled(n, 0);
    std::vector<std::string> errors(n);
    std::vector<std::thread> workers;
    for (std::size_t i = 0; i < n; ++i)
      workers.emplace_back([&, i] {
        try {
          for (std::size_t s = 1; s <= cfg.sweeps_max; ++s) {
            while (auto m = inboxes[i].try_pop()) views[i][m->sender] = decode_payload(m->payload);
            const auto r = detail::solve_encoded(g, sps[i], views[i], cfg, s, i);
            const auto next = decode_payload(r.payload);
            const double change = detail::max_abs_change(views[i][sps[i].name], next);
            views[i][sps[i].name] = next;
            Message msg{sps[i].name, s, r.payload};
            sent[i].push_back(msg);
            for (std::size_t j = 0; j < n; ++j)
              if (j != i) inboxes[j].push(msg);
            if (change < cfg.convergence_eps) {
              settled[i] = 1;
              break;
            }
          }
        } catch (const std::exception& e) {
          errors[i] = e.what();
        }
      });
    for (auto& t : workers) t.join();
    for (std::size_t i = 0; i < n; ++i) {
      if (!errors[i].empty()) throw Error("worker '" + sps[i].name + "' failed: " + errors[i]);
      state[sps[i].name] = views[i][sps[i].name];
      for (auto& m : sent[i]) res.messages.push_back(std::move(m));
    }
    std::size_t longest = 0;
    for (const auto& s : sent) longest = std::max(longest, s.size());
    for (std::size_t s = 1; s <= longest; ++s) {
      SweepRecord rec;
      rec.sweep = s;
      for (const auto& m : res.messages)
        if (m.iteration == s) {
          rec.solved.push_back(m.sender);
          ++rec.messages;
          rec.bytes += m.payload.size();
        }
      res.sweeps.push_back(rec);
    }
    finish(std::all_of(settled.begin(), settled.end(), [](char c) { return c != 0; }));
    return res;
  }

  // Barrier-synchronized workers (parallel) or in-line solves (serial).
  const bool parallel = cfg.mode == SchedulerMode::Parallel;
  const std::size_t n = sps.size();
  std::vector<detail::Channel<detail::Task>> tasks(parallel ? n : 0);
  detail::Channel<detail::Reply> replies;
  std::vector<std::thread> workers;
  if (parallel) {
    for (std::size_t i = 0; i < n; ++i)
      workers.emplace_back([&, i, view = state]() mutable {
        for (;;) {
          detail::Task t = tasks[i].pop();
          if (t.stop) return;
          try {
            for (const auto& m : t.inbox) view[m.sender] = decode_payload(m.payload);
            replies.push(t.solve ? detail::solve_encoded(g, sps[i], view, cfg, t.sweep, i) : detail::Reply{i, {}, 0.0, {}});
          } catch (const std::exception& e) {
            replies.push({i, {}, 0.0, e.what()});
          }
        }
      });
  }
  auto shutdown = [&] {
    for (auto& t : tasks) t.push({true, 0, false, {}});
    for (auto& w : workers) w.join();
    workers.clear();
  };

  std::set<std::string> changed_last;
  std::vector<Message> last_messages;
  bool converged = false;
  try {
    for (std::size_t sweep = 1; sweep <= cfg.sweeps_max; ++sweep) {
      std::vector<std::size_t> pending;
      for (std::size_t i = 0; i < n; ++i) {
        bool p = sweep == 1;
        for (const auto& d : sps[i].dependencies) p = p || changed_last.count(d) != 0;
        if (p) pending.push_back(i);
      }
      std::vector<detail::Reply> out(n);
      if (parallel) {
        // Every worker absorbs the last sweep's messages; pending ones also solve.
        for (std::size_t i = 0; i < n; ++i) {
          const bool solve = std::find(pending.begin(), pending.end(), i) != pending.end();
          tasks[i].push({false, sweep, solve, last_messages});
        }
        for (std::size_t k = 0; k < n; ++k) {
          auto r = replies.pop();
          if (!r.error.empty()) throw Error("worker '" + sps[r.index].name + "' failed: " + r.error);
          out[r.index] = std::move(r);
        }
      } else {
        for (auto i : pending) out[i] = detail::solve_encoded(g, sps[i], state, cfg, sweep, i);
      }

      SweepRecord rec;
      rec.sweep = sweep;
      std::set<std::string> changed;
      std::vector<Message> published;
      for (auto i : pending) {
        const auto next = decode_payload(out[i].payload);
        const double change = detail::max_abs_change(state[sps[i].name], next);
        rec.max_change = std::max(rec.max_change, change);
        if (!(next == state[sps[i].name])) changed.insert(sps[i].name);
        state[sps[i].name] = next;
        res.objective[sps[i].name] = out[i].objective;
        rec.solved.push_back(sps[i].name);
        Message m{sps[i].name, sweep, out[i].payload};
        rec.bytes += m.payload.size();
        ++rec.messages;
        published.push_back(m);
        res.messages.push_back(std::move(m));
      }
      res.sweeps.push_back(rec);
      bool any_pending = false;
      for (const auto& sp : sps)
        for (const auto& d : sp.dependencies) any_pending = any_pending || changed.count(d) != 0;
      changed_last = std::move(changed);
      last_messages = std::move(published);
      if (!any_pending || rec.max_change < cfg.convergence_eps) {
        converged = true;
        break;
      }
    }
  } catch (...) {
    shutdown();
    throw;
  }
  shutdown();
  finish(converged);
  return res;
}

/// Re-executes every recorded message serially and checks it is reproduced bit for bit.
inline bool verify_message_log(const GenerativeFlowGraph& g, const std::vector<SubProblem>& sps,
                               const SchedulerConfig& cfg, const SmpResult& res) {
  FrozenMap state;
  for (const auto& sp : sps) {
    MessagePayload m{init_variational(g, sp), {}};
    for (auto id : sp.params) m.theta[g.name(id)] = g.node(id).value.data;
    state[sp.name] = decode_payload(encode_payload(m));
  }
  std::size_t k = 0;
  while (k < res.messages.size()) {
    const std::size_t sweep = res.messages[k].iteration;
    std::vector<const Message*> batch;
    while (k < res.messages.size() && res.messages[k].iteration == sweep) batch.push_back(&res.messages[k++]);
    for (const Message* m : batch) {
      const auto it = std::find_if(sps.begin(), sps.end(), [&](const SubProblem& sp) { return sp.name == m->sender; });
      if (it == sps.end()) return false;
      const auto r = detail::solve_encoded(g, *it, state, cfg, sweep, 0);
      if (r.payload != m->payload) return false;
    }
    for (const Message* m : batch) state[m->sender] = decode_payload(m->payload);
  }
  return true;
}

}  // namespace gfg

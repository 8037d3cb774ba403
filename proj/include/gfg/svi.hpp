#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gfg/autodiff.hpp"
#include "gfg/distributions.hpp"
#include "gfg/graph.hpp"
#include "gfg/variational.hpp"

namespace gfg {

/// Natural-scale values of variable parameters, keyed by node name.
using ParamStore = std::map<std::string, std::vector<double>>;

inline ParamStore initial_params(const GenerativeFlowGraph& g) {
  ParamStore theta;
  for (auto id : g.nodes_of(NodeKind::VariableParam)) theta[g.name(id)] = g.node(id).value.data;
  return theta;
}

// ---------------------------------------------------------------------------
// Configuration

/// Step size rule: constant rate, or a * l^(-kappa) at step l = 1, 2, ...
struct Schedule {
  enum class Kind { Constant, RobbinsMonro };
  Kind kind = Kind::Constant;
  double a = 1e-2;
  double kappa = 1.0;

  static Schedule constant(double rate) { return {Kind::Constant, rate, 0.0}; }
  static Schedule robbins_monro(double a, double kappa) { return {Kind::RobbinsMonro, a, kappa}; }

  double rate(std::size_t step) const {
    if (kind == Kind::Constant) return a;
    return a * std::pow(static_cast<double>(std::max<std::size_t>(step, 1)), -kappa);
  }
};

/// True iff the schedule satisfies sum rho = inf and sum rho^2 < inf.
inline bool validate_robbins_monro(const Schedule& s) {
  if (s.kind == Schedule::Kind::Constant) return false;
  return s.a > 0.0 && s.kappa > 0.5 && s.kappa <= 1.0;
}

enum class OptimizerKind { Sga, Adam };

/// Gradient estimator for latents of the fitted factor. Auto uses the
/// reparameterization trick for Normal latents and REINFORCE for discrete ones.
enum class Estimator { Auto, Reparam, Reinforce };

struct SviConfig {
  std::size_t steps = 1000;
  std::size_t mc_samples = 8;
  Schedule schedule = Schedule::constant(1e-2);
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  Estimator estimator = Estimator::Auto;
  bool baseline = true;
  double baseline_decay = 0.9;
  bool learn_params = true;
  double tail_average = 0.2;     // report the mean iterate over this final fraction of steps
  bool record_iterates = false;

  void check() const {
    if (mc_samples == 0) throw ConfigError("mc_samples must be at least 1");
    if (!(schedule.a > 0.0) || !std::isfinite(schedule.a)) throw ConfigError("learning rate must be positive");
    if (schedule.kind == Schedule::Kind::RobbinsMonro && !validate_robbins_monro(schedule))
      throw ConfigError("Robbins-Monro schedule needs kappa in (0.5, 1]");
    if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) throw ConfigError("baseline_decay must lie in [0, 1)");
    if (!(tail_average >= 0.0 && tail_average <= 1.0)) throw ConfigError("tail_average must lie in [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Optimizers

/// Plain stochastic gradient ascent: W + rho * grad.
inline std::vector<double> sga_step(const std::vector<double>& w, const std::vector<double>& grad, double rho) {
  if (w.size() != grad.size()) throw ShapeError("parameter and gradient sizes differ");
  std::vector<double> out(w.size());
  for (std::size_t k = 0; k < w.size(); ++k) out[k] = w[k] + rho * grad[k];
  return out;
}

/// Ascent with bias-corrected first and second moments.
class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::vector<double> step(const std::vector<double>& w, const std::vector<double>& grad, double rho) {
    if (w.size() != m_.size() || grad.size() != m_.size()) throw ShapeError("parameter and gradient sizes differ");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<double> out(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) {
      m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * grad[k];
      v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * grad[k] * grad[k];
      out[k] = w[k] + rho * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + eps_);
    }
    return out;
  }

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Objectives

/// What one dual objective draws, scores and learns.
///
/// `own` latents are drawn from the fitted factor; any other latent the scored
/// nodes depend on is drawn from `frozen` and carries no gradient.
struct Objective {
  const GenerativeFlowGraph* graph = nullptr;
  std::vector<NodeId> own;
  std::vector<NodeId> scored;
  std::vector<NodeId> learned;  // variable parameters, sorted by name
  std::map<std::string, LatentParams> frozen;
};

/// Ordinary ELBO of the whole model: every latent owned, every variable node scored.
inline Objective joint_objective(const GenerativeFlowGraph& g) {
  Objective o;
  o.graph = &g;
  o.own = g.latents();
  for (auto id : g.topological_order())
    if (is_variable(g.node(id).kind)) o.scored.push_back(id);
  o.learned = g.nodes_of(NodeKind::VariableParam);
  std::sort(o.learned.begin(), o.learned.end(), [&](NodeId a, NodeId b) { return g.name(a) < g.name(b); });
  return o;
}

namespace detail {

/// Nodes whose values the objective needs: scored and owned nodes plus their upstream
/// sources. Unscored latents are drawn from a variational factor, so their own parents are not needed.
inline std::set<NodeId> needed_nodes(const GenerativeFlowGraph& g, const Objective& o) {
  const std::set<NodeId> scored(o.scored.begin(), o.scored.end());
  std::set<NodeId> seen(o.scored.begin(), o.scored.end());
  seen.insert(o.own.begin(), o.own.end());
  std::vector<NodeId> stack(seen.begin(), seen.end());
  while (!stack.empty()) {
    const NodeId id = stack.back();
    stack.pop_back();
    const auto k = g.node(id).kind;
    if (!scored.count(id) && (k == NodeKind::Latent || k == NodeKind::Observed)) continue;
    for (auto li : g.in_links(id)) {
      const NodeId from = g.links()[li].from;
      if (seen.insert(from).second) stack.push_back(from);
    }
  }
  return seen;
}

/// Nodes downstream of `z` through generative and influence links (detached links block).
inline std::set<NodeId> score_descendants(const GenerativeFlowGraph& g, NodeId z) {
  std::set<NodeId> seen{z};
  std::vector<NodeId> stack{z};
  while (!stack.empty()) {
    const NodeId id = stack.back();
    stack.pop_back();
    for (auto li : g.out_links(id)) {
      const auto& l = g.links()[li];
      if (l.kind == LinkKind::Detached) continue;
      if (seen.insert(l.to).second) stack.push_back(l.to);
    }
  }
  return seen;
}

inline double unconstrain(double v, bool positive) {
  if (!positive) return v;
  if (!(v > 0.0)) throw DomainError("positive parameter has non-positive value " + std::to_string(v));
  return std::log(v);
}

}  // namespace detail

/// Monte-Carlo value and gradient of an objective.
struct Estimate {
  double objective = 0.0;  // mean of log p - log q
  double std_error = 0.0;
  std::vector<double> grad;  // d surrogate / d [flatten(q), unconstrained learned params]
  std::map<NodeId, double> signal;  // mean learning signal of each score-function latent
};

/// Evaluates an objective for fixed Φ and Θ, drawing `mc` samples from `rng`.
class ObjectiveEvaluator {
 public:
  ObjectiveEvaluator(const Objective& o, Estimator est) : o_(o), g_(*o.graph), estimator_(est) {
    needed_ = detail::needed_nodes(g_, o_);
    own_.insert(o.own.begin(), o.own.end());
    scored_.insert(o.scored.begin(), o.scored.end());
    for (auto z : o.own) {
      if (uses_score(z)) descendants_[z] = detail::score_descendants(g_, z);
    }
    for (auto id : needed_)
      if (g_.node(id).kind == NodeKind::Latent && !own_.count(id) && !o.frozen.count(g_.name(id)))
        throw MissingMessageError("no variational factor for latent '" + g_.name(id) + "'");
  }

  bool uses_score(NodeId z) const {
    if (estimator_ == Estimator::Reinforce) return true;
    if (g_.node(z).discrete()) {
      if (estimator_ == Estimator::Reparam)
        throw UnsupportedError("reparameterized gradient requested for discrete latent '" + g_.name(z) + "'");
      return true;
    }
    return false;
  }

  Estimate run(const VariationalFactor& q, const ParamStore& theta, Rng& rng, std::size_t mc,
               const std::map<NodeId, double>& baselines, bool with_grad) const {
    Estimate e;
    const std::size_t dim = q.dimension() + learned_dimension();
    if (with_grad) e.grad.assign(dim, 0.0);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t m = 0; m < mc; ++m) {
      Tape tape;
      Tape* tp = with_grad ? &tape : nullptr;
      std::vector<Scalar> leaves;
      std::map<std::string, LatentQ> own_q;
      for (const auto& [name, p] : q.latents) own_q[name] = make_latent_q(p, tp, &leaves);
      std::map<NodeId, Values> learned;
      for (auto id : o_.learned) {
        const Node& n = g_.node(id);
        const auto it = theta.find(n.name);
        const std::vector<double>& natural = it != theta.end() ? it->second : n.value.data;
        Values v;
        for (double x : natural) {
          const Scalar u = tp ? tp->variable(detail::unconstrain(x, n.positive)) : Scalar(detail::unconstrain(x, n.positive));
          leaves.push_back(u);
          v.push_back(n.positive ? exp(u) : u);
        }
        learned[id] = std::move(v);
      }

      ExecState s(g_.nodes().size());
      std::vector<std::pair<NodeId, Scalar>> logp;
      std::map<NodeId, Scalar> logq;
      for (NodeId id : g_.topological_order()) {
        if (!needed_.count(id)) continue;
        const Node& n = g_.node(id);
        if (is_control(n.kind)) {
          execute_control(g_, id, s);
          continue;
        }
        if (scored_.count(id) && !should_execute(g_, id, s)) continue;
        switch (n.kind) {
          case NodeKind::Latent:
            if (own_.count(id)) {
              const auto qi = own_q.find(n.name);
              if (qi == own_q.end()) throw OwnershipError("factor does not cover latent '" + n.name + "'");
              const LatentQ& lq = qi->second;
              Values z = descendants_.count(id) ? sample_q(lq, rng) : rsample_q(lq, rng);
              logq[id] = log_q(lq, z);
              s.values[id.value] = std::move(z);
            } else {
              const LatentQ lq = make_latent_q(o_.frozen.at(n.name), nullptr);
              s.values[id.value] = sample_q(lq, rng);
            }
            break;
          case NodeKind::VariableParam:
            if (const auto it = learned.find(id); it != learned.end()) {
              s.values[id.value] = it->second;
            } else if (const auto t = theta.find(n.name); t != theta.end()) {
              Values v;
              for (double x : t->second) v.emplace_back(x);
              s.values[id.value] = std::move(v);
            } else {
              s.values[id.value] = initial_values(n);
            }
            break;
          default:
            s.values[id.value] = initial_values(n);
        }
        if (scored_.count(id)) logp.emplace_back(id, log_density(n, evaluate_args(g_, id, s), *s.values[id.value]));
      }

      std::vector<Scalar> terms;
      for (const auto& [_, lp] : logp) terms.push_back(lp);
      for (const auto& [_, lq] : logq) terms.push_back(-lq);
      const Scalar l = terms.empty() ? Scalar(0.0) : gfg::sum(terms);
      std::vector<Scalar> surrogate{l};
      for (const auto& [z, desc] : descendants_) {
        const auto qz = logq.find(z);
        if (qz == logq.end()) continue;
        double signal = -qz->second.value();
        for (const auto& [id, lp] : logp)
          if (desc.count(id)) signal += lp.value();
        e.signal[z] += signal / static_cast<double>(mc);
        const auto b = baselines.find(z);
        const double centered = signal - (b == baselines.end() ? 0.0 : b->second);
        surrogate.push_back(Scalar(centered) * qz->second);
      }
      sum += l.value();
      sum_sq += l.value() * l.value();
      if (with_grad) {
        const Scalar total = gfg::sum(surrogate);
        const Gradient gr = backward(total);
        for (std::size_t k = 0; k < leaves.size(); ++k) e.grad[k] += gr.wrt(leaves[k]) / static_cast<double>(mc);
      }
    }
    const double n = static_cast<double>(mc);
    e.objective = sum / n;
    const double var = mc > 1 ? std::max(0.0, (sum_sq - n * e.objective * e.objective) / (n - 1.0)) : 0.0;
    e.std_error = std::sqrt(var / n);
    return e;
  }

  std::size_t learned_dimension() const {
    std::size_t k = 0;
    for (auto id : o_.learned) k += g_.node(id).value.data.size();
    return k;
  }

  const Objective& objective() const { return o_; }

 private:
  const Objective& o_;
  const GenerativeFlowGraph& g_;
  Estimator estimator_;
  std::set<NodeId> needed_, own_, scored_;
  std::map<NodeId, std::set<NodeId>> descendants_;
};

// ---------------------------------------------------------------------------
// Public estimators

namespace detail {

inline VariationalFactor merge_factors(const GenerativeFlowGraph& g, const std::vector<VariationalFactor>& qs) {
  VariationalFactor all;
  for (const auto& q : qs)
    for (const auto& [name, p] : q.latents) {
      const auto id = g.find(name);
      if (!id || g.node(*id).kind != NodeKind::Latent) throw OwnershipError("factor '" + q.owner + "' covers unknown latent '" + name + "'");
      if (!all.latents.emplace(name, p).second) throw OwnershipError("latent '" + name + "' is owned by two factors");
    }
  for (auto id : g.latents())
    if (!all.latents.count(g.name(id))) throw OwnershipError("latent '" + g.name(id) + "' is owned by no factor");
  return all;
}

}  // namespace detail

struct ElboEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// E_q[log p(Z, X) - log q(Z)] estimated with cfg.mc_samples draws.
inline ElboEstimate elbo_estimate(const GenerativeFlowGraph& g, const std::vector<VariationalFactor>& qs,
                                  const SviConfig& cfg, const ParamStore& theta = {}) {
  cfg.check();
  const VariationalFactor q = detail::merge_factors(g, qs);
  const Objective o = joint_objective(g);
  const ObjectiveEvaluator ev(o, Estimator::Auto);
  Rng rng(cfg.seed);
  const Estimate e = ev.run(q, theta, rng, cfg.mc_samples, {}, false);
  return {e.objective, e.std_error};
}

inline ElboEstimate elbo_estimate(const GenerativeFlowGraph& g, const VariationalFactor& q, const SviConfig& cfg,
                                  const ParamStore& theta = {}) {
  return elbo_estimate(g, std::vector<VariationalFactor>{q}, cfg, theta);
}

/// Gradient estimate shaped like the parameters it differentiates.
struct GradientEstimate {
  double objective = 0.0;
  VariationalFactor d_phi;
  ParamStore d_theta;  // with respect to unconstrained values (log for positive parameters)
};

namespace detail {

inline GradientEstimate shape_gradient(const GenerativeFlowGraph& g, const Objective& o, const VariationalFactor& q,
                                       const Estimate& e) {
  GradientEstimate out;
  out.objective = e.objective;
  out.d_phi = q;
  const std::size_t nq = q.dimension();
  out.d_phi.assign(std::vector<double>(e.grad.begin(), e.grad.begin() + static_cast<std::ptrdiff_t>(nq)));
  std::size_t k = nq;
  for (auto id : o.learned) {
    auto& v = out.d_theta[g.name(id)];
    for (std::size_t j = 0; j < g.node(id).value.data.size(); ++j) v.push_back(e.grad[k++]);
  }
  return out;
}

inline GradientEstimate gradient(const GenerativeFlowGraph& g, const VariationalFactor& q, const SviConfig& cfg,
                                 Estimator est, const std::map<NodeId, double>& baselines, const ParamStore& theta) {
  cfg.check();
  const VariationalFactor all = merge_factors(g, {q});
  const Objective o = joint_objective(g);
  const ObjectiveEvaluator ev(o, est);
  Rng rng(cfg.seed);
  return shape_gradient(g, o, all, ev.run(all, theta, rng, cfg.mc_samples, baselines, true));
}

}  // namespace detail

/// Pathwise gradient; every latent must be continuous.
inline GradientEstimate grad_reparam(const GenerativeFlowGraph& g, const VariationalFactor& q, const SviConfig& cfg,
                                     const ParamStore& theta = {}) {
  return detail::gradient(g, q, cfg, Estimator::Reparam, {}, theta);
}

/// Score-function gradient for Φ, centered by `baselines` (latent name -> value); pathwise for Θ.
inline GradientEstimate grad_reinforce(const GenerativeFlowGraph& g, const VariationalFactor& q, const SviConfig& cfg,
                                       const std::map<std::string, double>& baselines = {},
                                       const ParamStore& theta = {}) {
  std::map<NodeId, double> b;
  for (const auto& [name, v] : baselines) b[g.id(name)] = v;
  return detail::gradient(g, q, cfg, Estimator::Reinforce, b, theta);
}

// ---------------------------------------------------------------------------
// Fitting

struct FitResult {
  VariationalFactor q;
  ParamStore theta;
  std::vector<double> elbo_raw;    // per-step estimate
  std::vector<double> elbo_trace;  // running best of an exponential moving average
  std::vector<std::vector<double>> iterates;  // raw parameter vectors, when recorded
  std::size_t steps = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<double> monotone_smooth(const std::vector<double>& raw, double decay = 0.95) {
  std::vector<double> out;
  double ema = 0.0, best = -INFINITY;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    ema = k == 0 ? raw[k] : decay * ema + (1.0 - decay) * raw[k];
    best = std::max(best, ema);
    out.push_back(best);
  }
  return out;
}

}  // namespace detail

/// Stochastic gradient ascent on the objective from (q0, theta0).
inline FitResult fit(const Objective& o, const VariationalFactor& q0, const ParamStore& theta0, const SviConfig& cfg) {
  cfg.check();
  const GenerativeFlowGraph& g = *o.graph;
  const ObjectiveEvaluator ev(o, cfg.estimator);
  FitResult r;
  r.q = q0;
  r.theta = theta0;
  r.seed = cfg.seed;
  for (auto id : g.nodes_of(NodeKind::VariableParam))
    if (!r.theta.count(g.name(id))) r.theta[g.name(id)] = g.node(id).value.data;

  const std::size_t nq = q0.dimension();
  std::vector<double> w = q0.flatten();
  for (auto id : o.learned)
    for (double x : r.theta.at(g.name(id))) w.push_back(detail::unconstrain(x, g.node(id).positive));

  auto unpack = [&](const std::vector<double>& v) {
    r.q.assign(std::vector<double>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(nq)));
    std::size_t k = nq;
    for (auto id : o.learned) {
      auto& t = r.theta[g.name(id)];
      for (auto& x : t) {
        x = g.node(id).positive ? std::exp(v[k]) : v[k];
        ++k;
      }
    }
  };

  Rng rng(cfg.seed);
  Adam adam(w.size());
  std::map<NodeId, double> baselines;
  const auto tail = static_cast<std::size_t>(std::floor(cfg.tail_average * static_cast<double>(cfg.steps)));
  std::vector<double> tail_sum(w.size(), 0.0);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    Estimate e;
    try {
      e = ev.run(r.q, r.theta, rng, cfg.mc_samples, baselines, true);
    } catch (const DomainError& err) {
      throw DivergenceError("iterate left the support at step " + std::to_string(step) + ": " + err.what());
    }
    if (!std::isfinite(e.objective))
      throw DivergenceError("objective became non-finite at step " + std::to_string(step));
    r.elbo_raw.push_back(e.objective);
    if (!cfg.learn_params) std::fill(e.grad.begin() + static_cast<std::ptrdiff_t>(nq), e.grad.end(), 0.0);
    for (double gk : e.grad)
      if (!std::isfinite(gk)) throw DivergenceError("gradient became non-finite at step " + std::to_string(step));
    if (cfg.baseline)
      for (const auto& [z, sig] : e.signal) {
        const auto it = baselines.find(z);
        baselines[z] = it == baselines.end() ? sig : cfg.baseline_decay * it->second + (1.0 - cfg.baseline_decay) * sig;
      }
    const double rho = cfg.schedule.rate(step);
    w = cfg.optimizer == OptimizerKind::Adam ? adam.step(w, e.grad, rho) : sga_step(w, e.grad, rho);
    for (double x : w)
      if (!std::isfinite(x)) throw DivergenceError("iterate became non-finite at step " + std::to_string(step));
    unpack(w);
    if (cfg.record_iterates) r.iterates.push_back(w);
    if (step + tail > cfg.steps)
      for (std::size_t k = 0; k < w.size(); ++k) tail_sum[k] += w[k];
    r.steps = step;
  }
  if (tail > 1) {
    for (auto& x : tail_sum) x /= static_cast<double>(tail);
    unpack(tail_sum);
  }
  r.elbo_trace = detail::monotone_smooth(r.elbo_raw);
  return r;
}

inline FitResult fit(const GenerativeFlowGraph& g, const VariationalFactor& q0, const SviConfig& cfg,
                     const ParamStore& theta0 = {}) {
  const VariationalFactor q = detail::merge_factors(g, {q0});
  const Objective o = joint_objective(g);
  return fit(o, q, theta0, cfg);
}

inline FitResult fit(const GenerativeFlowGraph& g, const SviConfig& cfg) { return fit(g, init_variational(g), cfg); }

}  // namespace gfg

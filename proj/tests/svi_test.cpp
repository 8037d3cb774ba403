#include <chrono>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "gfg/gfg.hpp"

namespace {

gfg::GenerativeFlowGraph model(const std::string& file) {
  return gfg::build_graph(gfg::load_model_file(std::string(GFG_MODELS_DIR) + "/" + file));
}

// ELBO of q = N(m, s) on the conjugate model z ~ N(0, 1), x = 2 ~ N(z, 1), in closed form.
double conjugate_elbo(double m, double s) {
  return -std::log(2.0 * M_PI) - 0.5 * (m * m + s * s) - 0.5 * ((2.0 - m) * (2.0 - m) + s * s) +
         0.5 * std::log(2.0 * M_PI * M_E * s * s);
}

gfg::VariationalFactor normal_q(const gfg::GenerativeFlowGraph& g, const std::string& name, double m, double s) {
  auto q = gfg::init_variational(g);
  q.latents.at(name).loc = {m};
  q.latents.at(name).log_scale = {std::log(s)};
  return q;
}

struct BatchMean {
  std::vector<double> mean, se;
};

// Mean and standard error of a vector-valued estimator over independent batches.
template <class F>
BatchMean batch_mean(std::size_t batches, F&& draw) {
  std::vector<std::vector<double>> xs;
  for (std::size_t b = 0; b < batches; ++b) xs.push_back(draw(b));
  BatchMean out;
  const std::size_t d = xs.front().size();
  out.mean.assign(d, 0.0);
  out.se.assign(d, 0.0);
  for (const auto& x : xs)
    for (std::size_t k = 0; k < d; ++k) out.mean[k] += x[k] / static_cast<double>(batches);
  for (const auto& x : xs)
    for (std::size_t k = 0; k < d; ++k) out.se[k] += (x[k] - out.mean[k]) * (x[k] - out.mean[k]);
  for (auto& v : out.se) v = std::sqrt(v / static_cast<double>(batches - 1) / static_cast<double>(batches));
  return out;
}

}  // namespace

TEST(Schedule, RobbinsMonroValidation) {
  EXPECT_TRUE(gfg::validate_robbins_monro(gfg::Schedule::robbins_monro(1.0, 1.0)));
  EXPECT_TRUE(gfg::validate_robbins_monro(gfg::Schedule::robbins_monro(0.5, 0.75)));
  EXPECT_TRUE(gfg::validate_robbins_monro(gfg::Schedule::robbins_monro(1.0, 0.5001)));
  EXPECT_FALSE(gfg::validate_robbins_monro(gfg::Schedule::robbins_monro(1.0, 0.5)));
  EXPECT_FALSE(gfg::validate_robbins_monro(gfg::Schedule::robbins_monro(1.0, 1.5)));
  EXPECT_FALSE(gfg::validate_robbins_monro(gfg::Schedule::constant(1e-2)));
  EXPECT_DOUBLE_EQ(gfg::Schedule::robbins_monro(2.0, 1.0).rate(4), 0.5);
}

TEST(SviConfig, RejectsInvalidSettings) {
  gfg::SviConfig c;
  c.mc_samples = 0;
  EXPECT_THROW(c.check(), gfg::ConfigError);
  c = {};
  c.schedule = gfg::Schedule::robbins_monro(1.0, 0.5);
  EXPECT_THROW(c.check(), gfg::ConfigError);
  c = {};
  c.schedule = gfg::Schedule::constant(-1.0);
  EXPECT_THROW(c.check(), gfg::ConfigError);
}

TEST(Optimizers, SgaStepAndAdamDirection) {
  EXPECT_EQ(gfg::sga_step({1.0, 2.0}, {0.5, -1.0}, 0.1), (std::vector<double>{1.05, 1.9}));
  gfg::Adam adam(2);
  const auto w = adam.step({0.0, 0.0}, {3.0, -0.01}, 0.1);
  EXPECT_NEAR(w[0], 0.1, 1e-6);  // first Adam step has magnitude rho regardless of scale
  EXPECT_NEAR(w[1], -0.1, 1e-4);
}

TEST(Svi, ConjugateRecovery) {
  const auto g = model("conjugate.json");
  const auto exact = gfg::conjugate_gaussian_posterior({0.0, 1.0}, 1.0, {2.0});
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    gfg::SviConfig cfg;
    cfg.steps = 5000;
    cfg.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = gfg::fit(g, cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& q = r.q.latents.at("z");
    EXPECT_NEAR(q.loc[0], exact.mean, 0.05) << "seed " << seed;
    EXPECT_NEAR(gfg::stddev(q)[0], exact.std, 0.05) << "seed " << seed;
    EXPECT_LT(secs, 10.0);
  }
}

TEST(Svi, ParameterLearningReachesMaximumLikelihood) {
  std::vector<double> data;
  gfg::Rng rng(123);
  for (int i = 0; i < 100; ++i) data.push_back(3.0 + rng.normal());
  const double sample_mean = std::accumulate(data.begin(), data.end(), 0.0) / 100.0;
  nlohmann::json j = {
      {"nodes",
       {{{"name", "theta"}, {"kind", "variable_param"}, {"init", 0.0}},
        {{"name", "x"}, {"kind", "observed"}, {"distribution", "Normal"}, {"params", {"theta", 1.0}}, {"value", data}}}},
      {"links", {{{"from", "theta"}, {"to", "x"}}}},
      {"collections", {{{"name", "data"}, {"members", {"x"}}, {"index", {{"name", "i"}, {"start", 1}}}, {"replicate", 100}}}}};
  const auto g = gfg::build_graph(gfg::parse_model(j));
  ASSERT_EQ(g.observed().size(), 100u);
  gfg::SviConfig cfg;
  cfg.steps = 3000;
  cfg.mc_samples = 1;
  cfg.schedule = gfg::Schedule::constant(0.05);
  const auto r = gfg::fit(g, cfg);
  EXPECT_NEAR(r.theta.at("theta")[0], sample_mean, 1e-3);
}

TEST(Svi, ZeroStepsReturnsInitialParameters) {
  const auto g = model("detached_pair.json");
  auto q0 = gfg::init_variational(g);
  q0.latents.at("z_a").loc = {0.7};
  gfg::SviConfig cfg;
  cfg.steps = 0;
  const auto r = gfg::fit(g, q0, cfg, {{"theta_a", {0.25}}});
  EXPECT_EQ(r.q.flatten(), q0.flatten());
  EXPECT_EQ(r.theta.at("theta_a"), std::vector<double>{0.25});
  EXPECT_EQ(r.theta.at("theta_b"), std::vector<double>{0.0});
  EXPECT_TRUE(r.elbo_trace.empty());
}

TEST(Svi, SameSeedSameResult) {
  const auto g = model("coupled_discrete.json");
  gfg::SviConfig cfg;
  cfg.steps = 200;
  cfg.seed = 9;
  const auto a = gfg::fit(g, cfg);
  const auto b = gfg::fit(g, cfg);
  EXPECT_EQ(a.q.flatten(), b.q.flatten());
  EXPECT_EQ(a.elbo_raw, b.elbo_raw);
}

TEST(Svi, ElboTraceIsMonotone) {
  const auto g = model("conjugate.json");
  gfg::SviConfig cfg;
  cfg.steps = 500;
  const auto r = gfg::fit(g, cfg);
  ASSERT_EQ(r.elbo_trace.size(), 500u);
  for (std::size_t k = 1; k < r.elbo_trace.size(); ++k) EXPECT_GE(r.elbo_trace[k], r.elbo_trace[k - 1]);
}

TEST(Svi, ElboEstimateMatchesClosedForm) {
  const auto g = model("conjugate.json");
  gfg::SviConfig cfg;
  cfg.mc_samples = 100000;
  for (auto [m, s] : {std::pair{0.0, 1.0}, std::pair{1.0, 0.7}, std::pair{-0.5, 2.0}}) {
    const auto e = gfg::elbo_estimate(g, normal_q(g, "z", m, s), cfg);
    EXPECT_NEAR(e.mean, conjugate_elbo(m, s), 3.0 * e.std_error + 1e-12);
  }
}

TEST(Svi, LowerBoundOnEnumerableAndConjugateModels) {
  struct Case {
    const char* file;
    double log_evidence;
  };
  const std::vector<Case> cases{
      {"conjugate.json", gfg::conjugate_gaussian_log_evidence({0.0, 1.0}, 1.0, {2.0})},
      {"coupled_discrete.json", gfg::enumerate_posterior(model("coupled_discrete.json")).log_evidence},
      {"detached_discrete.json", gfg::enumerate_posterior(model("detached_discrete.json")).log_evidence},
      {"mdp_discrete.json", gfg::enumerate_posterior(model("mdp_discrete.json")).log_evidence},
      {"branching.json", gfg::enumerate_posterior(model("branching.json")).log_evidence}};
  for (const auto& c : cases) {
    const auto g = model(c.file);
    gfg::SviConfig cfg;
    cfg.steps = 2000;
    const auto r = gfg::fit(g, cfg);
    gfg::SviConfig eval;
    eval.mc_samples = 20000;
    eval.seed = 77;
    const auto e = gfg::elbo_estimate(g, r.q, eval, r.theta);
    EXPECT_LE(e.mean, c.log_evidence + 3.0 * e.std_error) << c.file;
  }
}

TEST(Svi, ReparamGradientIsUnbiased) {
  const auto g = model("conjugate.json");
  const double m = 0.3, s = 0.8;
  const auto q = normal_q(g, "z", m, s);
  const auto est = batch_mean(200, [&](std::size_t b) {
    gfg::SviConfig cfg;
    cfg.mc_samples = 100;
    cfg.seed = 1000 + b;
    const auto gr = gfg::grad_reparam(g, q, cfg);
    return gr.d_phi.flatten();
  });
  // Layout of a Normal factor: loc then log_scale.
  EXPECT_NEAR(est.mean[0], -m + (2.0 - m), 3.0 * est.se[0]);
  EXPECT_NEAR(est.mean[1], 1.0 - 2.0 * s * s, 3.0 * est.se[1]);
}

TEST(Svi, ReinforceMatchesReparamOnContinuousModel) {
  const auto g = model("conjugate.json");
  const auto q = normal_q(g, "z", -0.4, 1.3);
  auto run = [&](bool reinforce) {
    return batch_mean(100, [&](std::size_t b) {
      gfg::SviConfig cfg;
      cfg.mc_samples = 1000;
      cfg.seed = (reinforce ? 50000 : 90000) + b;
      return (reinforce ? gfg::grad_reinforce(g, q, cfg) : gfg::grad_reparam(g, q, cfg)).d_phi.flatten();
    });
  };
  const auto a = run(false), b = run(true);
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_NEAR(a.mean[k], b.mean[k], 3.0 * std::hypot(a.se[k], b.se[k])) << "component " << k;
}

TEST(Svi, ReinforceMatchesEnumeratedGradient) {
  const auto g = model("coupled_discrete.json");
  auto q = gfg::init_variational(g);
  q.latents.at("z_a").logits = {0.0, 0.4};
  q.latents.at("z_b").logits = {-0.1, 0.4, 0.0};
  // Exact ELBO by summing over both latents, differentiated by central differences.
  const auto post = gfg::enumerate_posterior(g);
  auto exact_elbo = [&](const gfg::VariationalFactor& f) {
    const auto pa = gfg::probabilities(f.latents.at("z_a"));
    const auto pb = gfg::probabilities(f.latents.at("z_b"));
    double elbo = 0.0;
    for (const auto& [assignment, p] : post.table) {
      const double qa = pa[static_cast<std::size_t>(assignment[0])], qb = pb[static_cast<std::size_t>(assignment[1])];
      elbo += qa * qb * (std::log(p) + post.log_evidence - std::log(qa * qb));
    }
    return elbo;
  };
  std::vector<double> fd;
  const auto w = q.flatten();
  for (std::size_t k = 0; k < w.size(); ++k) {
    auto plus = w, minus = w;
    plus[k] += 1e-6;
    minus[k] -= 1e-6;
    auto qp = q, qm = q;
    qp.assign(plus);
    qm.assign(minus);
    fd.push_back((exact_elbo(qp) - exact_elbo(qm)) / 2e-6);
  }
  const auto est = batch_mean(100, [&](std::size_t b) {
    gfg::SviConfig cfg;
    cfg.mc_samples = 1000;
    cfg.seed = 7000 + b;
    return gfg::grad_reinforce(g, q, cfg).d_phi.flatten();
  });
  for (std::size_t k = 0; k < fd.size(); ++k) EXPECT_NEAR(est.mean[k], fd[k], 3.0 * est.se[k]) << "component " << k;
}

TEST(Svi, DeterministicTapeGradientMatchesCentralDifferences) {
  const auto g = model("detached_pair.json");
  const auto t = gfg::sample_trace(g, 4);
  gfg::Tape tape;
  const auto dj = gfg::log_joint(g, t, tape);
  const auto grad = tape.backward(dj.value);
  // z_a is excluded: its detached child contributes no gradient by construction.
  for (const char* name : {"z_b", "theta_a", "theta_b"}) {
    const auto id = g.id(name);
    auto shifted = [&](double h) {
      if (g.node(id).kind == gfg::NodeKind::Latent) {
        gfg::Trace u = t;
        u.values.at(id).data[0] += h;
        return gfg::log_joint(g, u).value();
      }
      auto d = gfg::load_model_file(std::string(GFG_MODELS_DIR) + "/detached_pair.json");
      for (auto& n : d.nodes)
        if (n.name == name) n.init->data[0] += h;
      return gfg::log_joint(gfg::build_graph(d), t).value();
    };
    const double fd = (shifted(1e-5) - shifted(-1e-5)) / 2e-5;
    const double ad = grad.wrt(dj.leaves.at(id)[0]);
    EXPECT_LE(std::abs(ad - fd), 1e-4 * std::max(1.0, std::abs(fd))) << name;
  }
}

TEST(Svi, RobbinsMonroSgaConverges) {
  const auto g = model("conjugate.json");
  gfg::SviConfig cfg;
  cfg.optimizer = gfg::OptimizerKind::Sga;
  cfg.schedule = gfg::Schedule::robbins_monro(1.0, 1.0);
  cfg.steps = 20000;
  cfg.mc_samples = 64;
  cfg.record_iterates = true;
  cfg.seed = 3;
  const auto r = gfg::fit(g, cfg);
  const std::size_t from = cfg.steps - cfg.steps / 10;
  for (std::size_t k = 0; k < 2; ++k) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t i = from; i < r.iterates.size(); ++i) {
      lo = std::min(lo, r.iterates[i][k]);
      hi = std::max(hi, r.iterates[i][k]);
    }
    EXPECT_LT(hi - lo, 1e-3) << "component " << k;
  }
  EXPECT_NEAR(r.q.latents.at("z").loc[0], 1.0, 0.05);
}

TEST(Svi, ExactPosteriorIsStationary) {
  const auto g = model("conjugate.json");
  const auto exact = gfg::conjugate_gaussian_posterior({0.0, 1.0}, 1.0, {2.0});
  gfg::SviConfig cfg;
  cfg.steps = 2000;
  cfg.seed = 5;
  const auto r = gfg::fit(g, normal_q(g, "z", exact.mean, exact.std), cfg);
  EXPECT_NEAR(r.q.latents.at("z").loc[0], exact.mean, 0.03);
  EXPECT_NEAR(gfg::stddev(r.q.latents.at("z"))[0], exact.std, 0.03);
}

TEST(Svi, DivergenceIsReported) {
  const auto g = model("conjugate.json");
  gfg::SviConfig cfg;
  cfg.optimizer = gfg::OptimizerKind::Sga;
  cfg.schedule = gfg::Schedule::constant(1e6);
  cfg.steps = 200;
  EXPECT_THROW(gfg::fit(g, cfg), gfg::DivergenceError);
}

TEST(Svi, OwnershipAndEstimatorErrors) {
  const auto g = model("coupled_discrete.json");
  auto q = gfg::init_variational(g);
  gfg::SviConfig cfg;
  EXPECT_THROW(gfg::elbo_estimate(g, std::vector<gfg::VariationalFactor>{q, q}, cfg), gfg::OwnershipError);
  auto partial = q;
  partial.latents.erase("z_b");
  EXPECT_THROW(gfg::elbo_estimate(g, partial, cfg), gfg::OwnershipError);
  EXPECT_THROW(gfg::grad_reparam(g, q, cfg), gfg::UnsupportedError);
}

TEST(Variational, JsonRoundTrip) {
  const auto g = model("coupled_discrete.json");
  auto q = gfg::init_variational(g);
  q.latents.at("z_b").logits = {0.25, -1.5, 3.0};
  const nlohmann::json j = q;
  const auto back = j.get<gfg::VariationalFactor>();
  EXPECT_EQ(back.flatten(), q.flatten());
  EXPECT_EQ(back.owner, q.owner);
}

TEST(Optimizers, SgaExamples) {
  EXPECT_EQ(gfg::sga_step({0.0}, {1.0}, 0.1), std::vector<double>{0.1});
  EXPECT_EQ(gfg::sga_step({0.3, -2.0}, {0.0, 0.0}, 0.5), (std::vector<double>{0.3, -2.0}));
  const auto twice = gfg::sga_step(gfg::sga_step({1.0}, {0.5}, 0.25), {0.5}, 0.25);
  EXPECT_DOUBLE_EQ(twice[0], 1.0 + 2.0 * 0.25 * 0.5);
}

TEST(Svi, ElboAtExactPosteriorIsLogEvidence) {
  const auto g = model("conjugate.json");
  gfg::SviConfig cfg;
  cfg.mc_samples = 1000;
  const auto e = gfg::elbo_estimate(g, normal_q(g, "z", 1.0, std::sqrt(0.5)), cfg);
  // x is marginally N(0, 2).
  const double log_evidence = -0.5 * std::log(2.0 * M_PI * 2.0) - 2.0 * 2.0 / (2.0 * 2.0);
  EXPECT_NEAR(e.mean, log_evidence, 1e-9);
  EXPECT_LT(e.std_error, 1e-6);
}

TEST(Svi, ElboAtPriorIsLogEvidenceMinusKl) {
  const auto g = model("conjugate.json");
  gfg::SviConfig cfg;
  cfg.mc_samples = 200000;
  const auto e = gfg::elbo_estimate(g, normal_q(g, "z", 0.0, 1.0), cfg);
  const double log_evidence = -0.5 * std::log(4.0 * M_PI) - 1.0;
  // KL(N(0, 1) || N(1, 1/2)) = log(s2/s1) + (s1^2 + (m1 - m2)^2) / (2 s2^2) - 1/2.
  const double kl = std::log(std::sqrt(0.5)) + (1.0 + 1.0) / (2.0 * 0.5) - 0.5;
  EXPECT_LT(e.mean, log_evidence);
  EXPECT_NEAR(e.mean, log_evidence - kl, 3.0 * e.std_error);
}

TEST(Svi, ElboIsZeroWhenQEqualsPriorWithoutData) {
  nlohmann::json j = {{"nodes",
                       {{{"name", "z"}, {"kind", "latent"}, {"distribution", "Normal"}, {"params", {0.5, 2.0}}},
                        {{"name", "c"}, {"kind", "latent"}, {"distribution", "Categorical"}, {"params", {{0.1, -0.4, 0.9}}}}}}};
  const auto g = gfg::build_graph(gfg::parse_model(j));
  auto q = normal_q(g, "z", 0.5, 2.0);
  q.latents.at("c").logits = {0.1, -0.4, 0.9};
  gfg::SviConfig cfg;
  cfg.mc_samples = 1000;
  const auto e = gfg::elbo_estimate(g, q, cfg);
  EXPECT_NEAR(e.mean, 0.0, 1e-12);
}

TEST(Svi, ReparamGradientMatchesCommonRandomNumberDifferences) {
  const auto g = model("conjugate.json");
  gfg::SviConfig cfg;
  cfg.mc_samples = 1000;
  cfg.seed = 31;
  const double m = -0.3, s = 0.9, h = 1e-5;
  const double plus = gfg::elbo_estimate(g, normal_q(g, "z", m + h, s), cfg).mean;
  const double minus = gfg::elbo_estimate(g, normal_q(g, "z", m - h, s), cfg).mean;
  const double fd = (plus - minus) / (2.0 * h);
  const double pathwise = gfg::grad_reparam(g, normal_q(g, "z", m, s), cfg).d_phi.flatten()[0];
  EXPECT_LT(std::abs(pathwise - fd), 1e-3 * std::abs(fd));
}

namespace {

// z ~ Bernoulli(logit 0.3), x = 1 ~ Bernoulli(logit [1.2, -0.8][z]).
gfg::GenerativeFlowGraph single_bernoulli() {
  return gfg::build_graph(gfg::parse_model(nlohmann::json{
      {"nodes",
       {{{"name", "z"}, {"kind", "latent"}, {"distribution", "Bernoulli"}, {"params", {0.3}}},
        {{"name", "x"}, {"kind", "observed"}, {"distribution", "Bernoulli"},
         {"params", {{"table", {1.2, -0.8}, "z"}}}, {"value", 1}}}},
      {"links", {{{"from", "z"}, {"to", "x"}}}}}));
}

double log_sigmoid(double x) { return -std::log1p(std::exp(-x)); }

}  // namespace

TEST(Svi, ReinforceMatchesExactBernoulliGradient) {
  const auto g = single_bernoulli();
  auto q = gfg::init_variational(g);
  q.latents.at("z").logits = {0.2, -0.5};
  const auto pq = gfg::probabilities(q.latents.at("z"));
  // f_k = log p(z = k, x = 1) - log q_k; dELBO/dlogit_j = q_j (f_j - E_q f).
  const double f[2] = {log_sigmoid(-0.3) + log_sigmoid(1.2) - std::log(pq[0]),
                       log_sigmoid(0.3) + log_sigmoid(-0.8) - std::log(pq[1])};
  const double mean_f = pq[0] * f[0] + pq[1] * f[1];
  const auto est = batch_mean(100, [&](std::size_t b) {
    gfg::SviConfig cfg;
    cfg.mc_samples = 1000;
    cfg.seed = 300 + b;
    return gfg::grad_reinforce(g, q, cfg).d_phi.flatten();
  });
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(est.mean[k], pq[k] * (f[k] - mean_f), 3.0 * est.se[k]) << k;
}

TEST(Svi, ReinforceBaselineKeepsMeanAndCutsVariance) {
  const auto g = single_bernoulli();
  auto q = gfg::init_variational(g);
  q.latents.at("z").logits = {0.2, -0.5};
  gfg::SviConfig probe;
  probe.mc_samples = 100000;
  const double elbo = gfg::elbo_estimate(g, q, probe).mean;
  auto run = [&](double b) {
    return batch_mean(20000, [&](std::size_t k) {
      gfg::SviConfig cfg;
      cfg.mc_samples = 1;
      cfg.seed = 900 + k;
      return gfg::grad_reinforce(g, q, cfg, {{"z", b}}).d_phi.flatten();
    });
  };
  const auto off = run(0.0), on = run(elbo);
  EXPECT_NEAR(off.mean[0], on.mean[0], 3.0 * std::hypot(off.se[0], on.se[0]));
  EXPECT_LT(on.se[0], off.se[0]);
}

TEST(Svi, ScoreFunctionHasZeroMeanForConstantObjective) {
  nlohmann::json j = {{"nodes", {{{"name", "c"}, {"kind", "latent"}, {"distribution", "Categorical"}, {"params", {{0.1, -0.4, 0.9}}}}}}};
  const auto g = gfg::build_graph(gfg::parse_model(j));
  auto q = gfg::init_variational(g);
  q.latents.at("c").logits = {0.1, -0.4, 0.9};
  const auto est = batch_mean(100, [&](std::size_t b) {
    gfg::SviConfig cfg;
    cfg.mc_samples = 1000;
    cfg.seed = 40 + b;
    return gfg::grad_reinforce(g, q, cfg).d_phi.flatten();
  });
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(est.mean[k], 0.0, 3.0 * est.se[k]) << k;
}

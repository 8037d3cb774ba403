#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "gfg/gfg.hpp"

namespace {

gfg::GenerativeFlowGraph model(const std::string& file) {
  return gfg::build_graph(gfg::load_model_file(std::string(GFG_MODELS_DIR) + "/" + file));
}

gfg::GenerativeFlowGraph from_text(const std::string& text) { return gfg::build_graph(gfg::parse_model_text(text)); }

double logit(double p) { return std::log(p / (1.0 - p)); }

std::vector<double> softmax(std::vector<double> l) {
  const double m = *std::max_element(l.begin(), l.end());
  double s = 0.0;
  for (auto& x : l) s += (x = std::exp(x - m));
  for (auto& x : l) x /= s;
  return l;
}

double normal_cdf(double x, double mu, double sigma) { return 0.5 * std::erfc(-(x - mu) / (sigma * std::sqrt(2.0))); }

}  // namespace

TEST(Enumerate, FairCoinWithoutEvidence) {
  const auto g = from_text(R"({"nodes": [{"name": "z", "kind": "latent", "distribution": "Bernoulli", "params": [0.0]}]})");
  const auto post = gfg::enumerate_posterior(g);
  EXPECT_NEAR(post.marginal(g, "z")[0], 0.5, 1e-15);
  EXPECT_NEAR(post.marginal(g, "z")[1], 0.5, 1e-15);
  EXPECT_NEAR(post.log_evidence, 0.0, 1e-15);
}

TEST(Enumerate, BayesRuleByHand) {
  nlohmann::json j = nlohmann::json::parse(R"({
    "nodes": [
      {"name": "z", "kind": "latent", "distribution": "Bernoulli", "params": [0.0]},
      {"name": "x", "kind": "observed", "distribution": "Bernoulli", "params": [["table", [0, 0], "z"]], "value": 1}
    ],
    "links": [{"from": "z", "to": "x"}]
  })");
  j["nodes"][1]["params"][0][1] = {logit(0.1), logit(0.9)};
  const auto g = gfg::build_graph(gfg::parse_model(j));
  const auto post = gfg::enumerate_posterior(g);
  EXPECT_NEAR(post.marginal(g, "z")[1], 0.9, 1e-12);
  EXPECT_NEAR(post.log_evidence, std::log(0.5), 1e-12);
}

TEST(Enumerate, IndependentLatentsFactorize) {
  const auto g = from_text(R"({"nodes": [
    {"name": "a", "kind": "latent", "distribution": "Bernoulli", "params": [0.4]},
    {"name": "b", "kind": "latent", "distribution": "Categorical", "params": [[0.0, 1.0, -1.0]]},
    {"name": "c", "kind": "latent", "distribution": "Categorical", "params": [[0.3, 0.2, 0.1, 0.0]]}
  ]})");
  const auto post = gfg::enumerate_posterior(g);
  const auto m = post.marginals(g);
  for (const auto& [assignment, p] : post.table) {
    double product = 1.0;
    for (std::size_t i = 0; i < post.latents.size(); ++i) product *= m.at(post.latents[i])[static_cast<std::size_t>(assignment[i])];
    EXPECT_NEAR(p, product, 1e-14);
  }
  EXPECT_EQ(post.table.size(), 2u * 3u * 4u);
}

TEST(Enumerate, NormalizesOnEveryEnumerableBundledModel) {
  for (const auto& e : std::filesystem::directory_iterator(GFG_MODELS_DIR)) {
    const auto g = gfg::build_graph(gfg::load_model_file(e.path().string()));
    for (bool detached : {false, true}) {
      try {
        EXPECT_NEAR(gfg::enumerate_posterior(g, {}, detached).total(), 1.0, 1e-10) << e.path();
      } catch (const gfg::TooLargeError&) {
      }
    }
  }
}

TEST(Enumerate, EvidenceMatchesHandSummation) {
  const auto g = model("coupled_discrete.json");
  // Tables copied from the model file.
  const double prior_a = 0.2;
  const std::vector<double> prior_b{0.0, 0.2, -0.1};
  const std::vector<double> lik_a{1.0, -1.0};
  const double lik_g[2][3] = {{0.3, 0.0, -0.3}, {-0.1, 0.2, 0.4}};
  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const auto pb = softmax(prior_b);
  double evidence = 0.0;
  std::vector<double> post_a(2, 0.0);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 3; ++b) {
      const double w = (a ? sigmoid(prior_a) : 1 - sigmoid(prior_a)) * pb[b] * sigmoid(lik_a[a]) *
                       softmax({b == 0 ? 1.0 : 0.0, b == 1 ? 1.0 : 0.0, b == 2 ? 1.0 : 0.0})[1] * sigmoid(lik_g[a][b]);
      evidence += w;
      post_a[a] += w;
    }
  const auto post = gfg::enumerate_posterior(g);
  EXPECT_NEAR(post.log_evidence, std::log(evidence), 1e-12);
  EXPECT_NEAR(post.marginal(g, "z_a")[1], post_a[1] / evidence, 1e-12);
}

TEST(Enumerate, RespectDetachedNormalizesEachBlock) {
  const auto g = model("detached_discrete.json");
  const std::vector<double> prior_a{0.0, 0.3, -0.2};
  const double lik_a[3][3] = {{1.2, 0.0, -0.6}, {0.0, 1.0, 0.0}, {-0.6, 0.0, 1.2}};
  const double trans[3][3] = {{0.4, 0.0, -0.2}, {0.0, 0.3, 0.0}, {-0.2, 0.0, 0.4}};
  const double lik_b[3][2] = {{1.0, 0.0}, {0.0, 0.5}, {-0.5, 1.0}};
  const auto pa = softmax(prior_a);
  std::vector<double> qa(3);
  for (int a = 0; a < 3; ++a) qa[a] = pa[a] * softmax({lik_a[a][0], lik_a[a][1], lik_a[a][2]})[2];
  const double za = std::accumulate(qa.begin(), qa.end(), 0.0);
  for (auto& x : qa) x /= za;
  std::vector<double> qb(3, 0.0);
  for (int a = 0; a < 3; ++a) {
    std::vector<double> cond(3);
    const auto pb = softmax({trans[a][0], trans[a][1], trans[a][2]});
    for (int b = 0; b < 3; ++b) cond[b] = pb[b] * softmax({lik_b[b][0], lik_b[b][1]})[0];
    const double zb = std::accumulate(cond.begin(), cond.end(), 0.0);
    for (int b = 0; b < 3; ++b) qb[b] += qa[a] * cond[b] / zb;
  }
  const auto post = gfg::enumerate_posterior(g, {}, true);
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(post.marginal(g, "z_a")[k], qa[k], 1e-12);
    EXPECT_NEAR(post.marginal(g, "z_b")[k], qb[k], 1e-12);
  }
  // Without detachment, evidence on x_b flows back into z_a.
  EXPECT_GT(gfg::total_variation(gfg::enumerate_posterior(g).marginal(g, "z_a"), qa), 1e-3);
}

TEST(Enumerate, BranchSkipsUnexecutedLatents) {
  const auto g = model("branching.json");
  const auto post = gfg::enumerate_posterior(g);
  const auto m = post.marginals(g);
  const double p0 = m.at(g.id("z"))[0];
  EXPECT_NEAR(std::accumulate(m.at(g.id("u0")).begin(), m.at(g.id("u0")).end(), 0.0), p0, 1e-12);
  EXPECT_NEAR(std::accumulate(m.at(g.id("u1")).begin(), m.at(g.id("u1")).end(), 0.0), 1.0 - p0, 1e-12);
}

TEST(Enumerate, RejectsIneligibleModels) {
  EXPECT_THROW(gfg::enumerate_posterior(model("conjugate.json")), gfg::TooLargeError);
  const auto g = from_text(R"({"nodes": [
    {"name": "a", "kind": "latent", "distribution": "Categorical", "params": [[0, 0, 0, 0, 0, 0, 0]]}]})");
  EXPECT_THROW(gfg::enumerate_posterior(g), gfg::TooLargeError);
  EXPECT_THROW(gfg::enumerate_posterior(model("coupled_discrete.json"), {6, 5}), gfg::TooLargeError);
}

TEST(Conjugate, ClosedFormUpdate) {
  const auto post = gfg::conjugate_gaussian_posterior({0.0, 1.0}, 1.0, {2.0});
  EXPECT_NEAR(post.mean, 1.0, 1e-15);
  EXPECT_NEAR(post.std, 1.0 / std::sqrt(2.0), 1e-15);
  const auto prior = gfg::conjugate_gaussian_posterior({0.3, 2.0}, 1.0, {});
  EXPECT_EQ(prior.mean, 0.3);
  EXPECT_EQ(prior.std, 2.0);
  EXPECT_NEAR(gfg::conjugate_gaussian_posterior({0.0, 1.0}, 1e-6, {1.7}).mean, 1.7, 1e-4);
  EXPECT_THROW(gfg::conjugate_gaussian_posterior({0.0, 1.0}, 0.0, {1.0}), gfg::DomainError);
}

TEST(Conjugate, SequentialUpdateEqualsBatch) {
  const std::vector<double> obs{0.4, -1.0, 2.5, 0.7};
  gfg::Gaussian cur{0.5, 1.5};
  for (double x : obs) cur = gfg::conjugate_gaussian_posterior(cur, 0.8, {x});
  const auto batch = gfg::conjugate_gaussian_posterior({0.5, 1.5}, 0.8, obs);
  EXPECT_NEAR(cur.mean, batch.mean, 1e-12);
  EXPECT_NEAR(cur.std, batch.std, 1e-12);
}

TEST(Conjugate, LogEvidenceIsMarginalDensity) {
  // x ~ N(0, sqrt(1 + 1)) once z is integrated out.
  const double expected = -0.5 * std::log(2.0 * M_PI * 2.0) - 0.5 * 4.0 / 2.0;
  EXPECT_NEAR(gfg::conjugate_gaussian_log_evidence({0.0, 1.0}, 1.0, {2.0}), expected, 1e-12);
  EXPECT_NEAR(expected, -2.2655, 1e-4);
}

TEST(Conjugate, AgreesWithEnumerationOnFineGrid) {
  const double step = 0.01;
  const int half = 800;  // +-8 prior standard deviations
  std::vector<double> grid, logits;
  for (int k = -half; k <= half; ++k) {
    grid.push_back(k * step);
    logits.push_back(-0.5 * (k * step) * (k * step));
  }
  nlohmann::json j = {
      {"nodes",
       {{{"name", "z"}, {"kind", "latent"}, {"distribution", "Categorical"}, {"params", {logits}}},
        {{"name", "x"}, {"kind", "observed"}, {"distribution", "Normal"}, {"params", {{"table", grid, "z"}, 1.0}}, {"value", 2.0}}}},
      {"links", {{{"from", "z"}, {"to", "x"}}}}};
  const auto g = gfg::build_graph(gfg::parse_model(j));
  const auto post = gfg::enumerate_posterior(g, {grid.size(), 1000000});
  const auto exact = gfg::conjugate_gaussian_posterior({0.0, 1.0}, 1.0, {2.0});
  std::vector<double> binned;
  for (double c : grid) binned.push_back(normal_cdf(c + step / 2, exact.mean, exact.std) - normal_cdf(c - step / 2, exact.mean, exact.std));
  EXPECT_LT(gfg::total_variation(post.marginal(g, "z"), binned), 0.01);
}

TEST(TotalVariation, Examples) {
  EXPECT_EQ(gfg::total_variation(std::vector<double>{0.3, 0.7}, std::vector<double>{0.3, 0.7}), 0.0);
  EXPECT_EQ(gfg::total_variation(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}), 1.0);
  EXPECT_NEAR(gfg::total_variation(std::vector<double>{0.6, 0.4}, std::vector<double>{0.5, 0.5}), 0.1, 1e-15);
  EXPECT_THROW(gfg::total_variation(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}), gfg::SupportMismatchError);
  const std::map<int, double> p{{0, 0.5}, {1, 0.5}}, q{{0, 0.5}, {2, 0.5}};
  EXPECT_THROW(gfg::total_variation(p, q), gfg::SupportMismatchError);
  EXPECT_EQ(gfg::total_variation(p, p), 0.0);
}

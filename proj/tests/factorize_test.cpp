#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "gfg/gfg.hpp"

namespace {

gfg::GenerativeFlowGraph model(const std::string& file) {
  return gfg::build_graph(gfg::load_model_file(std::string(GFG_MODELS_DIR) + "/" + file));
}

std::vector<std::string> joint_atoms(const gfg::GenerativeFlowGraph& g) {
  std::vector<std::string> out;
  for (const auto& f : gfg::factorize_joint(g).factors) out.push_back(gfg::render(g, f));
  std::sort(out.begin(), out.end());
  return out;
}

// Atomic product: initial state, map cells, then per step the policy, transition and percept.
constexpr const char* kSlamAtomic =
    "p(z_s{0}) p(z_m{1}) p(z_m{2}) p(z_m{3}) "
    "p(z_a{0}) p(z_s{1} | z_a{0}, z_s{0}) p(z_p{1} | z_a{0}, z_m{1;3}, z_s{1}) "
    "p(z_a{1}) p(z_s{2} | z_a{1}, z_s{1}) p(z_p{2} | z_a{1}, z_m{1;3}, z_s{2})";

// Per-step collections {z_s, z_a} with the percept conditioned on map and step.
constexpr const char* kSlamPerStep =
    "p(z_s{0}) p(z_m{1}) p(z_m{2}) p(z_m{3}) "
    "p(z_a{0}, z_s{1} | z_s{0}) p(z_p{1} | z_a{0}, z_m{1;3}, z_s{1}) "
    "p(z_a{1}, z_s{2} | z_s{1}) p(z_p{2} | z_a{1}, z_m{1;3}, z_s{2})";

// Whole trajectory and whole perception sequence as single factors.
constexpr const char* kSlamTrajectory =
    "p(z_s{0}) p(z_m{1}) p(z_m{2}) p(z_m{3}) "
    "p(z_a{0;1}, z_s{1;2} | z_s{0}) p(z_p{1;2} | z_a{0;1}, z_m{1;3}, z_s{1;2})";

}  // namespace

TEST(CanonicalNames, CompressesConsecutiveIndices) {
  EXPECT_EQ(gfg::canonical_names({"z{3}", "a", "z{1}", "z{2}", "z{5}"}),
            (std::vector<std::string>{"a", "z{1;3}", "z{5}"}));
  EXPECT_EQ(gfg::canonical_names({"x{2}", "x{2}"}), (std::vector<std::string>{"x{2}"}));
  EXPECT_EQ(gfg::canonical_names({"b", "a"}, "~"), (std::vector<std::string>{"~a", "~b"}));
  EXPECT_EQ(gfg::render_factor({"z"}, {"x", "y"}, {"t"}), "p_{t}(z | x, y)");
  EXPECT_EQ(gfg::render_factor({"z"}, {}, {}), "p(z)");
}

TEST(Factorize, ConjugateModel) {
  const auto g = model("conjugate.json");
  EXPECT_EQ(gfg::factorize_joint(g).render(g), "p_{mu0, sigma0}(z) p(x | z)");
  EXPECT_EQ(gfg::factorize_posterior(g).render(g), "p_{mu0, sigma0}(z | x)");
}

TEST(Factorize, DetachedLinkJointKeepsTheDependency) {
  const auto g = model("detached_pair.json");
  EXPECT_EQ(gfg::factorize_joint(g).render(g), "p_{theta_a}(z_a) p(x_a | z_a) p_{theta_b}(z_b | z_a) p(x_b | z_b)");
}

TEST(Factorize, DetachedLinkSplitsThePosterior) {
  const auto g = model("detached_pair.json");
  const auto post = gfg::factorize_posterior(g);
  EXPECT_EQ(post.render(g), "p_{theta_a}(z_a | x_a) p_{~theta_a, theta_b}(z_b | ~z_a, x_b)");
  ASSERT_EQ(post.blocks.size(), 2u);
  EXPECT_EQ(post.blocks[1].frozen_latents, std::vector<gfg::NodeId>{g.id("z_a")});
}

TEST(Factorize, BlockWithoutEvidenceEqualsItsPrior) {
  const auto g = gfg::build_graph(gfg::parse_model_text(R"({
    "nodes": [
      {"name": "z_a", "kind": "latent", "distribution": "Normal", "params": [0.0, 1.0]},
      {"name": "x_a", "kind": "observed", "distribution": "Normal", "params": ["z_a", 1.0], "value": 0.5},
      {"name": "z_b", "kind": "latent", "distribution": "Normal", "params": ["z_a", 1.0]}
    ],
    "links": [{"from": "z_a", "to": "x_a"}, {"from": "z_a", "to": "z_b", "kind": "detached"}]
  })"));
  EXPECT_EQ(gfg::factorize_posterior(g).render(g), "p(z_a | x_a) p(z_b | ~z_a)");
}

TEST(Factorize, CoupledCollectionsShareOnePosteriorBlock) {
  const auto g = model("coupled_gaussian.json");
  EXPECT_EQ(gfg::factorize_posterior(g).render(g), "p(z_a, z_b | x_a, x_b, x_g)");
}

TEST(Factorize, SelectionsResolveToTheirInputs) {
  const auto g = model("branching.json");
  EXPECT_EQ(gfg::factorize_joint(g).render(g), "p(z) p(u0) p(u1) p(y | u0, u1)");
}

TEST(Factorize, TraceFactorizationKeepsExecutedNodesOnly) {
  const auto g = model("branching.json");
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto t = gfg::sample_trace(g, seed);
    const auto text = gfg::factorize_joint(g, t).render(g);
    const bool zero = t.value(g.id("z")) == 0.0;
    EXPECT_EQ(text.find("p(u0)") != std::string::npos, zero) << text;
    EXPECT_EQ(text.find("p(u1)") != std::string::npos, !zero) << text;
  }
}

TEST(Factorize, SlamGoldens) {
  const auto g = model("slam_toy.json");
  EXPECT_EQ(gfg::factorize_joint(g).render(g), kSlamAtomic);
  EXPECT_EQ(gfg::factorize_grouped(g, gfg::collection_groups(g, gfg::CollectionLevel::Innermost)).render(g), kSlamPerStep);
  EXPECT_EQ(gfg::factorize_grouped(g, gfg::collection_groups(g, gfg::CollectionLevel::Outermost)).render(g), kSlamTrajectory);
}

TEST(Factorize, AbstractionLevelsShareAtomicFactors) {
  for (const char* file : {"slam_toy.json", "slam_mdp.json", "detached_pair.json", "coupled_discrete.json"}) {
    const auto g = model(file);
    const auto atoms = joint_atoms(g);
    for (auto level : {gfg::CollectionLevel::Innermost, gfg::CollectionLevel::Outermost})
      EXPECT_EQ(gfg::factorize_grouped(g, gfg::collection_groups(g, level)).atoms(g), atoms) << file;
  }
}

TEST(Partition, GlobalObservedCouplesCollections) {
  const auto g = model("coupled_gaussian.json");
  const auto p = gfg::partition_for_smp(g);
  ASSERT_EQ(p.collections.size(), 2u);
  EXPECT_EQ(p.global_observed, std::vector<gfg::NodeId>{g.id("x_g")});
  const auto a = g.collection_id("A"), b = g.collection_id("B");
  ASSERT_EQ(p.parent_map.at(a).size(), 1u);
  EXPECT_EQ(p.parent_map.at(a)[0].other, b);
  EXPECT_TRUE(p.parent_map.at(a)[0].via_global);
  EXPECT_FALSE(p.parent_map.at(a)[0].detached);
  EXPECT_EQ(p.observed.at(a), std::vector<gfg::NodeId>{g.id("x_a")});
}

TEST(Partition, DetachedParentIsOneWay) {
  const auto g = model("detached_pair.json");
  const auto p = gfg::partition_for_smp(g);
  const auto a = g.collection_id("A"), b = g.collection_id("B");
  EXPECT_TRUE(p.parent_map.at(a).empty());
  ASSERT_EQ(p.parent_map.at(b).size(), 1u);
  EXPECT_TRUE(p.parent_map.at(b)[0].detached);
  EXPECT_EQ(p.params.at(a), std::vector<gfg::NodeId>{g.id("theta_a")});
  EXPECT_EQ(p.owner(g.id("theta_b")), b);
}

TEST(Partition, InvariantToDeclarationOrder) {
  for (const char* file : {"coupled_gaussian.json", "detached_pair.json", "slam_mdp.json"}) {
    auto d = gfg::load_model_file(std::string(GFG_MODELS_DIR) + "/" + file);
    const auto g0 = gfg::build_graph(d);
    const auto p0 = gfg::partition_for_smp(g0);
    std::mt19937 rng(17);
    for (int k = 0; k < 3; ++k) {
      auto shuffled = gfg::expand_idioms(d);
      std::shuffle(shuffled.nodes.begin(), shuffled.nodes.end(), rng);
      std::shuffle(shuffled.collections.begin(), shuffled.collections.end(), rng);
      const auto g1 = gfg::build_graph(shuffled);
      const auto p1 = gfg::partition_for_smp(g1);
      auto names = [](const gfg::GenerativeFlowGraph& g, const gfg::PosteriorPartition& p) {
        std::vector<std::string> out;
        for (auto c : p.collections) {
          std::string line = g.collection(c).name + ":";
          for (auto id : p.latents.at(c)) line += " " + g.name(id);
          for (auto id : p.observed.at(c)) line += " " + g.name(id);
          for (const auto& e : p.parent_map.at(c))
            line += " <" + g.collection(e.other).name + (e.detached ? "d" : "") + (e.via_global ? "g" : "");
          out.push_back(line);
        }
        for (auto id : p.global_observed) out.push_back("global " + g.name(id));
        return out;
      };
      EXPECT_EQ(names(g1, p1), names(g0, p0)) << file;
    }
  }
}

TEST(Partition, LatentOutsideCollectionsIsRejected) {
  const auto g = gfg::build_graph(gfg::parse_model_text(R"({
    "nodes": [{"name": "z", "kind": "latent", "distribution": "Normal", "params": [0.0, 1.0]}]
  })"));
  EXPECT_THROW(gfg::partition_for_smp(g), gfg::UncoveredNodeError);
}

TEST(LogJoint, MatchesIndependentDensity) {
  const auto g = model("conjugate.json");
  gfg::Trace t = gfg::sample_trace(g, 3);
  const double z = t.value(g.id("z"));
  const double expected = -std::log(2.0 * M_PI) - 0.5 * z * z - 0.5 * (2.0 - z) * (2.0 - z);
  EXPECT_NEAR(gfg::log_joint(g, t).value(), expected, 1e-12);
  gfg::Tape tape;
  const auto dj = gfg::log_joint(g, t, tape);
  EXPECT_NEAR(dj.value.value(), expected, 1e-12);
  EXPECT_NEAR(tape.backward(dj.value).wrt(dj.leaves.at(g.id("z"))[0]), -z + (2.0 - z), 1e-12);
}

TEST(LogJoint, DetachedLinkBlocksGradient) {
  const auto g = model("detached_pair.json");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto t = gfg::sample_trace(g, seed);
    gfg::Tape tape;
    const auto dj = gfg::log_joint(g, t, tape);
    const gfg::Scalar block_b = dj.terms.at(g.id("z_b")) + dj.terms.at(g.id("x_b"));
    const auto grad = tape.backward(block_b);
    EXPECT_EQ(grad.wrt(dj.leaves.at(g.id("z_a"))[0]), 0.0);
    EXPECT_EQ(grad.wrt(dj.leaves.at(g.id("theta_a"))[0]), 0.0);
    EXPECT_NE(grad.wrt(dj.leaves.at(g.id("theta_b"))[0]), 0.0);
  }
}

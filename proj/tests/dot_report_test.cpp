#include <regex>

#include <gtest/gtest.h>

#include "gfg/gfg.hpp"

namespace {

gfg::GenerativeFlowGraph model(const std::string& file) {
  return gfg::build_graph(gfg::load_model_file(std::string(GFG_MODELS_DIR) + "/" + file));
}

std::size_t count(const std::string& text, const std::string& pattern) {
  const std::regex re(pattern);
  return static_cast<std::size_t>(std::distance(std::sregex_iterator(text.begin(), text.end(), re), std::sregex_iterator()));
}

constexpr const char* kConjugateDot = R"(digraph GFG {
  rankdir=TB;
  subgraph "cluster_C" {
    label="C";
    style=rounded;
    "z" [shape=circle, style=solid];
    "x" [shape=circle, style=filled, fillcolor=gray75];
  }
  "mu0" [shape=square, style=filled, fillcolor=gray75];
  "sigma0" [shape=square, style=filled, fillcolor=gray75];
  "mu0" -> "z" [style=solid];
  "sigma0" -> "z" [style=solid];
  "z" -> "x" [style=solid];
}
)";

}  // namespace

TEST(Dot, ConjugateGolden) {
  const auto dot = gfg::render_dot(model("conjugate.json"));
  EXPECT_EQ(dot, kConjugateDot);
  EXPECT_EQ(count(dot, R"(shape=circle, style=solid)"), 1u);
  EXPECT_EQ(count(dot, R"(shape=circle, style=filled)"), 1u);
  EXPECT_EQ(count(dot, R"(shape=square)"), 2u);
  EXPECT_EQ(count(dot, R"(-> "[^"]+" \[style=solid\])"), 3u);
}

TEST(Dot, DetachedEdgeIsLabeled) {
  const auto dot = gfg::render_dot(model("detached_pair.json"));
  EXPECT_NE(dot.find(R"("z_a" -> "z_b" [style=solid, arrowhead=odotnormal, label="detached"])"), std::string::npos) << dot;
  EXPECT_EQ(count(dot, "detached"), 1u);
  EXPECT_EQ(count(dot, R"(shape=square, style=solid)"), 2u);
}

TEST(Dot, EmptyGraph) {
  const auto dot = gfg::render_dot(gfg::build_graph(gfg::ModelDescription{}));
  EXPECT_EQ(dot, "digraph GFG {\n}\n");
  EXPECT_TRUE(gfg::validate_dot(dot).ok);
}

TEST(Dot, PlatesBranchesAndInfluence) {
  const auto slam = gfg::render_dot(model("slam_toy.json"));
  EXPECT_NE(slam.find(R"(label="map [i = 1..3]")"), std::string::npos);
  EXPECT_NE(slam.find(R"(style="rounded,bold")"), std::string::npos);
  const auto br = gfg::render_dot(model("branching.json"));
  EXPECT_EQ(count(br, "shape=diamond"), 1u);
  EXPECT_EQ(count(br, "shape=invtrapezium"), 1u);
  EXPECT_GE(count(br, "style=dashed"), 1u);
  EXPECT_NE(br.find(R"(taillabel="0")"), std::string::npos);
}

TEST(Dot, EveryBundledModelRendersValidDot) {
  for (const char* file : {"conjugate.json", "detached_pair.json", "coupled_gaussian.json", "detached_discrete.json",
                           "coupled_discrete.json", "branching.json", "mdp_discrete.json", "slam_toy.json", "slam_mdp.json"}) {
    const auto g = model(file);
    const auto dot = gfg::render_dot(g);
    const auto check = gfg::validate_dot(dot);
    EXPECT_TRUE(check.ok) << file << ": " << check.message;
    EXPECT_EQ(dot, gfg::render_dot(g)) << file;
    EXPECT_EQ(count(dot, " -> "), g.links().size()) << file;
  }
}

TEST(DotValidator, RejectsMalformedInput) {
  EXPECT_TRUE(gfg::validate_dot("graph { a -- b; }").ok);
  EXPECT_TRUE(gfg::validate_dot("strict digraph G { a -> b -> c [color=red]; subgraph s { d } }").ok);
  EXPECT_FALSE(gfg::validate_dot("digraph G { a -> b ").ok);
  EXPECT_FALSE(gfg::validate_dot("digraph G { a -- b }").ok);
  EXPECT_FALSE(gfg::validate_dot("graph G { a -> b }").ok);
  EXPECT_FALSE(gfg::validate_dot("digraph G { a [label=\"x] }").ok);
  EXPECT_FALSE(gfg::validate_dot("digraph G { a [label=] }").ok);
  EXPECT_FALSE(gfg::validate_dot("tree G { }").ok);
  EXPECT_FALSE(gfg::validate_dot("digraph G { } }").ok);
  const auto bad = gfg::validate_dot("digraph G {\n a;\n b -> ;\n}");
  EXPECT_FALSE(bad.ok);
  EXPECT_EQ(bad.line, 3u);
}

TEST(Report, SviFields) {
  const auto g = model("conjugate.json");
  gfg::SviConfig cfg;
  cfg.steps = 300;
  cfg.seed = 12;
  const auto j = gfg::fit_report(gfg::fit(g, cfg), cfg);
  EXPECT_EQ(j["kind"], "svi");
  EXPECT_EQ(j["seed"], 12);
  EXPECT_EQ(j["steps"], 300);
  EXPECT_EQ(j["posterior"]["z"]["family"], "Normal");
  EXPECT_EQ(j["posterior"]["z"]["mean"].size(), 1u);
  EXPECT_EQ(j["posterior"]["z"]["std"].size(), 1u);
  EXPECT_FALSE(j["elbo_trace"].empty());
  EXPECT_TRUE(j["final_elbo"].is_number());
}

TEST(Report, ConvergedSmpRun) {
  const auto g = model("detached_pair.json");
  gfg::SchedulerConfig cfg;
  cfg.svi.steps = 300;
  const auto sps = gfg::build_subproblems(g);
  const auto j = gfg::smp_report(gfg::run_message_passing(g, sps, cfg), cfg);
  EXPECT_EQ(j["kind"], "smp");
  EXPECT_EQ(j["status"], "converged");
  EXPECT_EQ(j["sweeps"], 2);
  EXPECT_EQ(j["messages"], 3);
  EXPECT_GT(j["bytes"].get<std::size_t>(), 0u);
  EXPECT_TRUE(j["collections"].contains("A"));
  EXPECT_TRUE(j["collections"].contains("B"));
  EXPECT_EQ(j["collections"]["A"]["posterior"]["z_a"]["family"], "Normal");
  EXPECT_TRUE(j["collections"]["A"]["params"].contains("theta_a"));
  EXPECT_TRUE(j["warnings"].empty());
}

TEST(Report, MaxSweepsCarriesWarning) {
  const auto g = model("coupled_gaussian.json");
  gfg::SchedulerConfig cfg;
  cfg.svi.steps = 100;
  cfg.sweeps_max = 2;
  cfg.convergence_eps = 1e-12;
  const auto j = gfg::smp_report(gfg::run_message_passing(g, gfg::build_subproblems(g), cfg), cfg);
  EXPECT_EQ(j["status"], "max-sweeps");
  ASSERT_EQ(j["warnings"].size(), 1u);
  EXPECT_NE(j["warnings"][0].get<std::string>().find("NonConvergenceWarning"), std::string::npos);
  const auto text = gfg::render_text(j);
  EXPECT_NE(text.find("status: max-sweeps"), std::string::npos);
  EXPECT_NE(text.find("NonConvergenceWarning"), std::string::npos);
}

TEST(Report, ByteIdenticalAcrossRuns) {
  const auto g = model("coupled_discrete.json");
  gfg::SchedulerConfig cfg;
  cfg.svi.steps = 200;
  cfg.svi.seed = 4;
  cfg.sweeps_max = 3;
  auto run = [&] { return gfg::smp_report(gfg::run_message_passing(g, gfg::build_subproblems(g), cfg), cfg); };
  const auto a = run(), b = run();
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(gfg::render_text(a), gfg::render_text(b));
}

TEST(Report, TextRendering) {
  gfg::ReportJson j;
  j["kind"] = "svi";
  j["seed"] = 3;
  j["value"] = 0.125;
  j["list"] = {1.5, 2.0};
  j["nested"]["inner"] = "x";
  EXPECT_EQ(gfg::render_text(j), "kind: svi\nseed: 3\nvalue: 0.125\nlist: [1.5 2]\nnested:\n  inner: x\n");
}

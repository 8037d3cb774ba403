// Builds the SLAM + MDP composition, prints its factorizations at three levels of
// abstraction, and runs stochastic message passing over its node collections.

#include <iostream>

#include "gfg/gfg.hpp"

int main(int argc, char** argv) {
  const std::string path = argc > 1 ? argv[1] : std::string(GFG_MODELS_DIR) + "/slam_mdp.json";
  const auto g = gfg::build_graph(gfg::load_model_file(path));

  std::cout << "atomic:\n  " << gfg::factorize_joint(g).render(g) << "\n";
  std::cout << "per step:\n  "
            << gfg::factorize_grouped(g, gfg::collection_groups(g, gfg::CollectionLevel::Innermost)).render(g) << "\n";
  std::cout << "per component:\n  "
            << gfg::factorize_grouped(g, gfg::collection_groups(g, gfg::CollectionLevel::Outermost)).render(g) << "\n";

  gfg::SchedulerConfig cfg;
  cfg.sweeps_max = 6;
  cfg.svi.steps = 1000;
  cfg.svi.seed = 7;
  const auto subproblems = gfg::build_subproblems(g);
  std::cout << "\n" << subproblems.size() << " sub-problems\n";
  const auto result = gfg::run_message_passing(g, subproblems, cfg);
  std::cout << gfg::render_text(gfg::smp_report(result, cfg));
}

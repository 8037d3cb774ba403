// gfg: validate, factorize, render and run inference on generative flow graph models.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "gfg/gfg.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

struct Output {
  std::string path;
  std::string format = "text";

  void emit(const std::string& text) const {
    if (path.empty()) {
      std::cout << text;
      return;
    }
    std::ofstream out(path);
    if (!out) throw gfg::Error("cannot write '" + path + "'");
    out << text;
  }

  void emit(const gfg::ReportJson& j) const { emit(format == "json" ? j.dump(2) + "\n" : gfg::render_text(j)); }
};

struct SviFlags {
  std::size_t steps = 2000;
  std::size_t mc_samples = 8;
  double lr = 1e-2;
  std::string schedule = "constant";
  double kappa = 1.0;
  std::string optimizer = "adam";
  bool fix_params = false;

  void add(CLI::App* app) {
    app->add_option("--steps", steps, "SVI steps")->check(CLI::NonNegativeNumber);
    app->add_option("--mc-samples", mc_samples, "Monte Carlo samples per step")->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "learning rate (a in a * l^-kappa for robbins-monro)")->check(CLI::PositiveNumber);
    app->add_option("--schedule", schedule, "step size schedule")->check(CLI::IsMember({"constant", "robbins-monro"}));
    app->add_option("--kappa", kappa, "Robbins-Monro decay exponent");
    app->add_option("--optimizer", optimizer, "optimizer")->check(CLI::IsMember({"adam", "sga"}));
    app->add_flag("--fix-params", fix_params, "hold variable parameters at their initial values");
  }

  gfg::SviConfig config(std::uint64_t seed) const {
    gfg::SviConfig c;
    c.steps = steps;
    c.mc_samples = mc_samples;
    c.schedule = schedule == "constant" ? gfg::Schedule::constant(lr) : gfg::Schedule::robbins_monro(lr, kappa);
    c.optimizer = optimizer == "adam" ? gfg::OptimizerKind::Adam : gfg::OptimizerKind::Sga;
    c.learn_params = !fix_params;
    c.seed = seed;
    c.check();
    return c;
  }
};

gfg::GenerativeFlowGraph load(const std::string& path) { return gfg::build_graph(gfg::load_model_file(path)); }

std::string format_probs(const std::vector<double>& p) {
  std::ostringstream os;
  os.precision(10);
  for (std::size_t k = 0; k < p.size(); ++k) os << (k ? " " : "") << p[k];
  return os.str();
}

int cmd_validate(const std::string& path) {
  const auto desc = gfg::load_model_file(path);
  const auto report = gfg::validate(desc);
  if (report.ok()) {
    std::cout << "valid\n";
    return kOk;
  }
  for (const auto& issue : report.issues) std::cout << gfg::to_string(issue.kind) << ": " << issue.message << "\n";
  return kInvalid;
}

int cmd_factorize(const std::string& path, const std::string& view, const Output& out) {
  const auto g = load(path);
  std::string text;
  if (view == "joint") text = gfg::factorize_joint(g).render(g);
  else if (view == "posterior") text = gfg::factorize_posterior(g).render(g);
  else if (view == "inner") text = gfg::factorize_grouped(g, gfg::collection_groups(g, gfg::CollectionLevel::Innermost)).render(g);
  else text = gfg::factorize_grouped(g, gfg::collection_groups(g, gfg::CollectionLevel::Outermost)).render(g);
  out.emit(text + "\n");
  return kOk;
}

int cmd_render(const std::string& path, const Output& out) {
  out.emit(gfg::render_dot(load(path)));
  return kOk;
}

int cmd_svi(const std::string& path, const SviFlags& flags, std::uint64_t seed, const Output& out) {
  const auto g = load(path);
  const auto cfg = flags.config(seed);
  const auto result = gfg::fit(g, cfg);
  auto report = gfg::fit_report(result, cfg);
  report["model"] = path;
  out.emit(report);
  return kOk;
}

int cmd_smp(const std::string& path, const SviFlags& flags, std::uint64_t seed, const std::string& mode,
            std::size_t sweeps, double eps, bool unbounded, const Output& out) {
  const auto g = load(path);
  gfg::SchedulerConfig cfg;
  cfg.mode = mode == "parallel" ? gfg::SchedulerMode::Parallel : gfg::SchedulerMode::Serial;
  cfg.sweeps_max = sweeps;
  cfg.convergence_eps = eps;
  cfg.barrier = !unbounded;
  cfg.svi = flags.config(seed);
  cfg.check();
  const auto result = gfg::run_message_passing(g, gfg::build_subproblems(g), cfg);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  auto report = gfg::smp_report(result, cfg);
  report["model"] = path;
  out.emit(report);
  return kOk;
}

int cmd_oracle(const std::string& path, bool respect_detached, const Output& out) {
  const auto g = load(path);
  const auto post = gfg::enumerate_posterior(g, {}, respect_detached);
  gfg::ReportJson j;
  j["kind"] = "oracle";
  j["model"] = path;
  if (!respect_detached) j["log_evidence"] = post.log_evidence;
  gfg::ReportJson m = gfg::ReportJson::object();
  for (const auto& [id, p] : post.marginals(g)) m[g.name(id)] = p;
  j["marginals"] = m;
  if (out.format == "json") {
    out.emit(j);
    return kOk;
  }
  std::ostringstream os;
  os.precision(10);
  if (!respect_detached) os << "log_evidence: " << post.log_evidence << "\n";
  for (const auto& [id, p] : post.marginals(g)) os << g.name(id) << ": " << format_probs(p) << "\n";
  out.emit(os.str());
  return kOk;
}

int cmd_report(const std::string& path, const Output& out) {
  std::ifstream in(path);
  if (!in) throw gfg::Error("cannot open report '" + path + "'");
  gfg::ReportJson j;
  try {
    j = gfg::ReportJson::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw gfg::ParseError(std::string("report is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("kind")) throw gfg::ParseError("not a gfg report");
  out.emit(j);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative flow graph toolkit"};
  app.require_subcommand(1);
  std::string model;
  std::uint64_t seed = 0;
  Output out;
  SviFlags svi;

  auto add_common = [&](CLI::App* sub, bool with_format) {
    sub->add_option("model", model, "model file (JSON)")->required();
    sub->add_option("--out,-o", out.path, "write output to this file instead of stdout");
    if (with_format) sub->add_option("--format", out.format, "output format")->check(CLI::IsMember({"text", "json"}));
  };

  auto* validate = app.add_subcommand("validate", "check a model against the graph invariants");
  add_common(validate, false);

  std::string view = "joint";
  auto* factorize = app.add_subcommand("factorize", "print a symbolic factorization");
  add_common(factorize, false);
  factorize->add_option("--view", view, "joint, posterior, or collection grouping (inner, outer)")
      ->check(CLI::IsMember({"joint", "posterior", "inner", "outer"}));

  auto* render = app.add_subcommand("render", "emit Graphviz DOT");
  add_common(render, false);

  auto* infer_svi = app.add_subcommand("infer-svi", "fit a mean-field posterior by stochastic variational inference");
  add_common(infer_svi, true);
  infer_svi->add_option("--seed", seed, "random seed");
  svi.add(infer_svi);

  std::string mode = "serial";
  std::size_t sweeps = 20;
  double eps = 1e-3;
  bool unbounded = false;
  auto* infer_smp = app.add_subcommand("infer-smp", "stochastic message passing over node collections");
  add_common(infer_smp, true);
  infer_smp->add_option("--seed", seed, "random seed");
  infer_smp->add_option("--mode", mode, "scheduler")->check(CLI::IsMember({"serial", "parallel"}));
  infer_smp->add_option("--sweeps", sweeps, "maximum sweeps")->check(CLI::PositiveNumber);
  infer_smp->add_option("--eps", eps, "convergence threshold on parameter change")->check(CLI::PositiveNumber);
  infer_smp->add_flag("--unbounded-staleness", unbounded, "parallel workers do not wait for each other");
  svi.add(infer_smp);

  bool respect_detached = false;
  auto* oracle = app.add_subcommand("oracle", "exact posterior marginals by enumeration");
  add_common(oracle, true);
  oracle->add_flag("--respect-detached", respect_detached, "normalize blocks separated by detached links");

  auto* report = app.add_subcommand("report", "render a JSON report as text");
  report->add_option("report", model, "report file written with --format json")->required();
  report->add_option("--out,-o", out.path, "write output to this file instead of stdout");
  report->add_option("--format", out.format, "output format")->check(CLI::IsMember({"text", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kRuntime;
  }

  try {
    if (*validate) return cmd_validate(model);
    if (*factorize) return cmd_factorize(model, view, out);
    if (*render) return cmd_render(model, out);
    if (*infer_svi) return cmd_svi(model, svi, seed, out);
    if (*infer_smp) return cmd_smp(model, svi, seed, mode, sweeps, eps, unbounded, out);
    if (*oracle) return cmd_oracle(model, respect_detached, out);
    if (*report) return cmd_report(model, out);
  } catch (const gfg::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const gfg::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const gfg::SlotSignatureError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const gfg::BindingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kRuntime;
}

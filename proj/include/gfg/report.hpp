#pragma once

#include <cstdio>
#include <string>

#include <nlohmann/json.hpp>

#include "gfg/smp.hpp"
#include "gfg/svi.hpp"

namespace gfg {

using ReportJson = nlohmann::ordered_json;

inline ReportJson latent_report(const LatentParams& p) {
  ReportJson j;
  if (p.family == Family::Normal) {
    j["family"] = "Normal";
    j["mean"] = p.loc;
    j["std"] = stddev(p);
  } else {
    j["family"] = "Categorical";
    j["probs"] = probabilities(p);
  }
  return j;
}

inline ReportJson factor_report(const VariationalFactor& q) {
  ReportJson j = ReportJson::object();
  for (const auto& [name, p] : q.latents) j[name] = latent_report(p);
  return j;
}

inline ReportJson fit_report(const FitResult& r, const SviConfig& cfg) {
  ReportJson j;
  j["kind"] = "svi";
  j["seed"] = cfg.seed;
  j["steps"] = r.steps;
  j["mc_samples"] = cfg.mc_samples;
  j["posterior"] = factor_report(r.q);
  j["params"] = r.theta;
  j["final_elbo"] = r.elbo_trace.empty() ? 0.0 : r.elbo_trace.back();
  ReportJson trace = ReportJson::array();
  const std::size_t stride = std::max<std::size_t>(1, r.elbo_trace.size() / 20);
  for (std::size_t k = 0; k < r.elbo_trace.size(); k += stride) trace.push_back({{"step", k + 1}, {"elbo", r.elbo_trace[k]}});
  j["elbo_trace"] = trace;
  return j;
}

inline ReportJson smp_report(const SmpResult& r, const SchedulerConfig& cfg) {
  ReportJson j;
  j["kind"] = "smp";
  j["seed"] = cfg.svi.seed;
  j["mode"] = cfg.mode == SchedulerMode::Serial ? "serial" : "parallel";
  j["status"] = r.status;
  j["sweeps"] = r.sweep_count();
  j["messages"] = r.messages.size();
  j["bytes"] = r.bytes_sent();
  ReportJson cols = ReportJson::object();
  for (const auto& [name, q] : r.phi) {
    ReportJson c;
    c["posterior"] = factor_report(q);
    c["params"] = r.theta.count(name) ? ReportJson(r.theta.at(name)) : ReportJson::object();
    if (r.objective.count(name)) c["objective"] = r.objective.at(name);
    cols[name] = c;
  }
  j["collections"] = cols;
  ReportJson log = ReportJson::array();
  for (const auto& s : r.sweeps)
    log.push_back({{"sweep", s.sweep}, {"solved", s.solved}, {"max_change", s.max_change}, {"messages", s.messages},
                   {"bytes", s.bytes}});
  j["sweep_log"] = log;
  j["warnings"] = r.warnings;
  return j;
}

namespace detail {

inline std::string fmt_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline void render_text(const ReportJson& j, int depth, std::string& out) {
  const std::string pad(static_cast<std::size_t>(depth) * 2, ' ');
  auto scalar = [](const ReportJson& v) -> std::string {
    if (v.is_number_float()) return fmt_number(v.get<double>());
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
  };
  auto flat = [&](const ReportJson& v) {
    if (!v.is_array()) return false;
    for (const auto& x : v)
      if (x.is_structured()) return false;
    return true;
  };
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& v = it.value();
    const std::string key = j.is_object() ? it.key() : "-";
    if (flat(v)) {
      std::string line;
      for (const auto& x : v) line += (line.empty() ? "" : " ") + scalar(x);
      out += pad + key + ": [" + line + "]\n";
    } else if (v.is_structured()) {
      out += pad + key + ":\n";
      render_text(v, depth + 1, out);
    } else {
      out += pad + key + ": " + scalar(v) + "\n";
    }
  }
}

}  // namespace detail

/// Indented human-readable form of a report.
inline std::string render_text(const ReportJson& j) {
  std::string out;
  detail::render_text(j, 0, out);
  return out;
}

}  // namespace gfg

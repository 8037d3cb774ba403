#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gfg/autodiff.hpp"
#include "gfg/error.hpp"
#include "gfg/tensor.hpp"

namespace gfg {

/// Seeded random source. Each solver owns one; never shared across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return std::generate_canonical<double, 53>(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

enum class Family { Normal, Categorical, Bernoulli };

inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::Normal: return "Normal";
    case Family::Categorical: return "Categorical";
    case Family::Bernoulli: return "Bernoulli";
  }
  return "?";
}

inline Family family_from_string(std::string_view s) {
  if (s == "Normal") return Family::Normal;
  if (s == "Categorical") return Family::Categorical;
  if (s == "Bernoulli") return Family::Bernoulli;
  throw ParseError("unknown distribution family '" + std::string(s) + "'");
}

/// Number of distribution arguments each family takes.
inline std::size_t family_arity(Family f) { return f == Family::Normal ? 2 : 1; }
inline bool is_discrete(Family f) { return f != Family::Normal; }

struct Normal {
  Scalar loc;
  Scalar scale;
};

struct Categorical {
  std::vector<Scalar> logits;
};

struct Bernoulli {
  Scalar logit;
};

using Distribution = std::variant<Normal, Categorical, Bernoulli>;

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2*pi)

inline Scalar log_prob(const Normal& d, const Scalar& v) {
  if (!(d.scale.value() > 0.0)) throw DomainError("Normal scale must be positive, got " + std::to_string(d.scale.value()));
  if (!std::isfinite(v.value())) throw DomainError("Normal value must be finite");
  const Scalar z = (v - d.loc) / d.scale;
  return Scalar(-kHalfLog2Pi) - log(d.scale) - Scalar(0.5) * z * z;
}

inline Scalar log_prob(const Categorical& d, long long k) {
  if (k < 0 || static_cast<std::size_t>(k) >= d.logits.size())
    throw DomainError("Categorical value " + std::to_string(k) + " outside support of size " +
                      std::to_string(d.logits.size()));
  for (const auto& l : d.logits)
    if (!std::isfinite(l.value())) throw DomainError("Categorical logits must be finite");
  return d.logits[static_cast<std::size_t>(k)] - log_sum_exp(d.logits);
}

inline Scalar log_prob(const Bernoulli& d, long long k) {
  if (k != 0 && k != 1) throw DomainError("Bernoulli value must be 0 or 1, got " + std::to_string(k));
  if (!std::isfinite(d.logit.value())) throw DomainError("Bernoulli logit must be finite");
  return k == 1 ? -softplus(-d.logit) : -softplus(d.logit);
}

/// Log probability of a value; discrete families require integer-valued `v`.
inline Scalar log_prob(const Distribution& d, const Scalar& v) {
  return std::visit(
      [&](const auto& dist) -> Scalar {
        using D = std::decay_t<decltype(dist)>;
        if constexpr (std::is_same_v<D, Normal>)
          return log_prob(dist, v);
        else
          return log_prob(dist, as_index(v.value()));
      },
      d);
}

inline std::vector<double> probabilities(const Categorical& d) {
  double m = -INFINITY;
  for (const auto& l : d.logits) m = std::max(m, l.value());
  std::vector<double> p;
  double total = 0.0;
  for (const auto& l : d.logits) {
    p.push_back(std::exp(l.value() - m));
    total += p.back();
  }
  for (auto& x : p) x /= total;
  return p;
}

inline double sample(const Normal& d, Rng& rng) {
  if (!(d.scale.value() > 0.0)) throw DomainError("Normal scale must be positive");
  return d.loc.value() + d.scale.value() * rng.normal();
}

inline long long sample(const Categorical& d, Rng& rng) {
  const auto p = probabilities(d);
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (u < acc) return static_cast<long long>(k);
  }
  return static_cast<long long>(p.size() - 1);
}

inline long long sample(const Bernoulli& d, Rng& rng) {
  const double p1 = 1.0 / (1.0 + std::exp(-d.logit.value()));
  return rng.uniform() < p1 ? 1 : 0;
}

inline double sample(const Distribution& d, Rng& rng) {
  return std::visit([&](const auto& dist) { return static_cast<double>(sample(dist, rng)); }, d);
}

/// Location-scale draw mu + sigma * eps with the noise supplied by the caller.
inline Scalar rsample(const Normal& d, double eps) {
  if (!(d.scale.value() > 0.0)) throw DomainError("Normal scale must be positive");
  return d.loc + d.scale * Scalar(eps);
}

inline Scalar rsample(const Normal& d, Rng& rng) { return rsample(d, rng.normal()); }

inline Scalar rsample(const Distribution& d, Rng& rng) {
  if (const auto* n = std::get_if<Normal>(&d)) return rsample(*n, rng);
  throw UnsupportedError("reparameterized sampling is only defined for the Normal family");
}

/// KL(q || p) for two univariate normals.
inline Scalar kl_normal(const Normal& q, const Normal& p) {
  if (!(q.scale.value() > 0.0) || !(p.scale.value() > 0.0)) throw DomainError("KL requires positive scales");
  const Scalar d = q.loc - p.loc;
  return log(p.scale / q.scale) + (q.scale * q.scale + d * d) / (Scalar(2.0) * p.scale * p.scale) - Scalar(0.5);
}

}  // namespace gfg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gfg/error.hpp"

namespace gfg {

class Tape;

/// A real value, optionally recorded on a tape for reverse-mode differentiation.
///
/// Scalars without a tape are constants. Mixing scalars from two different
/// tapes in one operation is a logic error.
class Scalar {
 public:
  Scalar() = default;
  Scalar(double v) : value_(v) {}  // NOLINT: implicit constants keep formulas readable

  double value() const { return value_; }
  Tape* tape() const { return tape_; }
  std::int64_t index() const { return index_; }
  bool on_tape() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Scalar(double v, Tape* t, std::int64_t i) : value_(v), tape_(t), index_(i) {}

  double value_ = 0.0;
  Tape* tape_ = nullptr;
  std::int64_t index_ = -1;
};

/// Adjoints of one output with respect to every record of a tape.
class Gradient {
 public:
  Gradient() = default;
  explicit Gradient(std::vector<double> adjoints) : adjoints_(std::move(adjoints)) {}

  /// d(output)/d(x); zero for constants and records the output does not depend on.
  double wrt(const Scalar& x) const {
    if (!x.on_tape() || x.index() < 0 || static_cast<std::size_t>(x.index()) >= adjoints_.size()) return 0.0;
    return adjoints_[static_cast<std::size_t>(x.index())];
  }

  std::span<const double> adjoints() const { return adjoints_; }

 private:
  std::vector<double> adjoints_;
};

/// Append-only record of primitive operations. Records only reference
/// earlier records, so a single reverse sweep computes the gradient.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Scalar variable(double v) {
    records_.push_back({edges_.size(), edges_.size()});
    return {v, this, static_cast<std::int64_t>(records_.size() - 1)};
  }

  std::size_t size() const { return records_.size(); }

  void clear() {
    records_.clear();
    edges_.clear();
  }

  /// Records a value computed from `inputs` with local partials `partials`.
  /// Inputs that are constants are skipped; if none is on a tape, the result is a constant.
  static Scalar record(double v, std::span<const Scalar> inputs, std::span<const double> partials) {
    Tape* tape = nullptr;
    for (const auto& in : inputs) {
      if (!in.on_tape()) continue;
      if (tape != nullptr && tape != in.tape()) throw std::logic_error("scalars from different tapes combined");
      tape = in.tape();
    }
    if (tape == nullptr) return Scalar(v);
    const std::size_t begin = tape->edges_.size();
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!inputs[k].on_tape()) continue;
      tape->edges_.push_back({inputs[k].index(), partials[k]});
    }
    tape->records_.push_back({begin, tape->edges_.size()});
    return {v, tape, static_cast<std::int64_t>(tape->records_.size() - 1)};
  }

  Gradient backward(const Scalar& output) const {
    if (output.tape() != this) throw std::logic_error("backward called on a scalar from another tape");
    std::vector<double> adj(records_.size(), 0.0);
    adj[static_cast<std::size_t>(output.index())] = 1.0;
    for (std::size_t r = static_cast<std::size_t>(output.index()) + 1; r-- > 0;) {
      const double a = adj[r];
      if (a == 0.0) continue;
      for (std::size_t e = records_[r].begin; e < records_[r].end; ++e)
        adj[static_cast<std::size_t>(edges_[e].input)] += a * edges_[e].partial;
    }
    return Gradient(std::move(adj));
  }

 private:
  struct Record {
    std::size_t begin;
    std::size_t end;
  };
  struct Edge {
    std::int64_t input;
    double partial;
  };
  std::vector<Record> records_;
  std::vector<Edge> edges_;
};

/// Gradient of `output`; a constant output has an all-zero gradient.
inline Gradient backward(const Scalar& output) {
  if (!output.on_tape()) return Gradient();
  return output.tape()->backward(output);
}

namespace detail {
inline Scalar unary(double v, const Scalar& a, double da) {
  const Scalar in[1] = {a};
  const double p[1] = {da};
  return Tape::record(v, in, p);
}
inline Scalar binary(double v, const Scalar& a, double da, const Scalar& b, double db) {
  const Scalar in[2] = {a, b};
  const double p[2] = {da, db};
  return Tape::record(v, in, p);
}
}  // namespace detail

inline Scalar operator+(const Scalar& a, const Scalar& b) { return detail::binary(a.value() + b.value(), a, 1.0, b, 1.0); }
inline Scalar operator-(const Scalar& a, const Scalar& b) { return detail::binary(a.value() - b.value(), a, 1.0, b, -1.0); }
inline Scalar operator*(const Scalar& a, const Scalar& b) {
  return detail::binary(a.value() * b.value(), a, b.value(), b, a.value());
}
inline Scalar operator/(const Scalar& a, const Scalar& b) {
  if (b.value() == 0.0) throw DomainError("division by zero");
  const double inv = 1.0 / b.value();
  return detail::binary(a.value() * inv, a, inv, b, -a.value() * inv * inv);
}
inline Scalar operator-(const Scalar& a) { return detail::unary(-a.value(), a, -1.0); }
inline Scalar& operator+=(Scalar& a, const Scalar& b) { return a = a + b; }
inline Scalar& operator-=(Scalar& a, const Scalar& b) { return a = a - b; }
inline Scalar& operator*=(Scalar& a, const Scalar& b) { return a = a * b; }

inline Scalar add(const Scalar& a, const Scalar& b) { return a + b; }
inline Scalar sub(const Scalar& a, const Scalar& b) { return a - b; }
inline Scalar mul(const Scalar& a, const Scalar& b) { return a * b; }
inline Scalar div(const Scalar& a, const Scalar& b) { return a / b; }
inline Scalar neg(const Scalar& a) { return -a; }

inline Scalar exp(const Scalar& a) {
  const double v = std::exp(a.value());
  return detail::unary(v, a, v);
}

inline Scalar log(const Scalar& a) {
  if (!(a.value() > 0.0)) throw DomainError("log of non-positive value " + std::to_string(a.value()));
  return detail::unary(std::log(a.value()), a, 1.0 / a.value());
}

inline Scalar pow(const Scalar& base, const Scalar& exponent) {
  const double x = base.value();
  const double y = exponent.value();
  if (x < 0.0 && std::round(y) != y) throw DomainError("pow of negative base with non-integer exponent");
  if (x == 0.0 && y < 0.0) throw DomainError("pow of zero with negative exponent");
  const double v = std::pow(x, y);
  const double dx = (y == 0.0) ? 0.0 : y * std::pow(x, y - 1.0);
  const double dy = (x > 0.0) ? v * std::log(x) : 0.0;
  return detail::binary(v, base, dx, exponent, dy);
}

inline Scalar sqrt(const Scalar& a) {
  if (!(a.value() > 0.0)) throw DomainError("sqrt of non-positive value");
  const double v = std::sqrt(a.value());
  return detail::unary(v, a, 0.5 / v);
}

inline Scalar tanh(const Scalar& a) {
  const double v = std::tanh(a.value());
  return detail::unary(v, a, 1.0 - v * v);
}

/// log(1 + exp(a)), evaluated without overflow.
inline Scalar softplus(const Scalar& a) {
  const double x = a.value();
  const double v = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  const double s = 1.0 / (1.0 + std::exp(-x));
  return detail::unary(v, a, s);
}

inline Scalar sigmoid(const Scalar& a) {
  const double s = 1.0 / (1.0 + std::exp(-a.value()));
  return detail::unary(s, a, s * (1.0 - s));
}

inline Scalar sum(std::span<const Scalar> xs) {
  double v = 0.0;
  for (const auto& x : xs) v += x.value();
  const std::vector<double> ones(xs.size(), 1.0);
  return Tape::record(v, xs, ones);
}

inline Scalar log_sum_exp(std::span<const Scalar> xs) {
  if (xs.empty()) throw DomainError("log_sum_exp of an empty set");
  double m = xs[0].value();
  for (const auto& x : xs) m = std::max(m, x.value());
  if (!std::isfinite(m)) throw DomainError("log_sum_exp of non-finite values");
  double total = 0.0;
  for (const auto& x : xs) total += std::exp(x.value() - m);
  std::vector<double> partials;
  partials.reserve(xs.size());
  for (const auto& x : xs) partials.push_back(std::exp(x.value() - m) / total);
  return Tape::record(m + std::log(total), xs, partials);
}

/// Same value as `x`; the backward pass propagates nothing into `x`.
inline Scalar stop_gradient(const Scalar& x) { return Scalar(x.value()); }

}  // namespace gfg

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfg/error.hpp"

namespace gfg {

/// Dense real tensor of rank 0, 1 or 2, stored row-major.
///
/// Discrete values are integer-valued rank-0 tensors.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() : data{0.0} {}

  static Tensor scalar(double v) {
    Tensor t;
    t.data = {v};
    return t;
  }

  static Tensor vector(std::vector<double> v) {
    Tensor t;
    t.shape = {v.size()};
    t.data = std::move(v);
    return t;
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    if (rows * cols != v.size()) throw ShapeError("matrix data does not match its shape");
    Tensor t;
    t.shape = {rows, cols};
    t.data = std::move(v);
    return t;
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  double item() const { return data.at(0); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline void to_json(nlohmann::json& j, const Tensor& t) {
  switch (t.rank()) {
    case 0:
      j = t.data[0];
      break;
    case 1:
      j = t.data;
      break;
    default: {
      j = nlohmann::json::array();
      for (std::size_t r = 0; r < t.shape[0]; ++r) {
        std::vector<double> row(t.data.begin() + static_cast<std::ptrdiff_t>(r * t.shape[1]),
                                t.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * t.shape[1]));
        j.push_back(row);
      }
    }
  }
}

/// True when `j` is a number or a (nested, rank <= 2) array of numbers.
inline bool is_numeric_json(const nlohmann::json& j) {
  if (j.is_number()) return true;
  if (!j.is_array() || j.empty()) return false;
  for (const auto& e : j) {
    if (e.is_number()) continue;
    if (!e.is_array() || e.empty()) return false;
    for (const auto& f : e)
      if (!f.is_number()) return false;
  }
  return true;
}

inline void from_json(const nlohmann::json& j, Tensor& t) {
  if (j.is_number()) {
    t = Tensor::scalar(j.get<double>());
    return;
  }
  if (!is_numeric_json(j)) throw ParseError("expected a number or a numeric array of rank <= 2, got " + j.dump());
  if (j[0].is_number()) {
    std::vector<double> v;
    for (const auto& e : j) {
      if (!e.is_number()) throw ParseError("ragged numeric array: " + j.dump());
      v.push_back(e.get<double>());
    }
    t = Tensor::vector(std::move(v));
    return;
  }
  const std::size_t cols = j[0].size();
  std::vector<double> v;
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != cols) throw ParseError("ragged numeric array: " + j.dump());
    for (const auto& e : row) v.push_back(e.get<double>());
  }
  t = Tensor::matrix(j.size(), cols, std::move(v));
}

/// Reads an integer-valued element; throws DomainError when the value is not integral.
inline long long as_index(double v) {
  const double r = std::round(v);
  if (!std::isfinite(v) || std::abs(v - r) > 1e-9)
    throw DomainError("expected an integer-valued quantity, got " + std::to_string(v));
  return static_cast<long long>(r);
}

}  // namespace gfg

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfg/autodiff.hpp"
#include "gfg/error.hpp"
#include "gfg/tensor.hpp"

namespace gfg {

/// Argument expression of a distribution.
///
/// JSON form: a number or numeric array is a constant, a string references a
/// node by name, and an array whose head is a string is an operator call,
/// e.g. `["add", "z", 1.0]`. All values are flat vectors; elementwise
/// operators broadcast size-1 operands.
///
///   add sub mul div pow         elementwise binary
///   neg exp log tanh sqrt
///   sigmoid logit softplus      elementwise unary
///   sum                         reduces to size 1
///   vec a b ...                 concatenation
///   table T i [j]               row/element of T selected by integer-valued indices
///   at v i                      element i of v
class Expr {
 public:
  enum class Op { Const, Ref, Add, Sub, Mul, Div, Pow, Neg, Exp, Log, Tanh, Sqrt, Sigmoid, Logit, Softplus, Sum, Vec, Table, At };

  Expr() = default;

  static Expr constant(Tensor t) {
    Expr e;
    e.op_ = Op::Const;
    e.constant_ = std::move(t);
    return e;
  }
  static Expr constant(double v) { return constant(Tensor::scalar(v)); }
  static Expr ref(std::string name) {
    Expr e;
    e.op_ = Op::Ref;
    e.name_ = std::move(name);
    return e;
  }
  static Expr call(Op op, std::vector<Expr> args) {
    Expr e;
    e.op_ = op;
    e.args_ = std::move(args);
    e.check_arity();
    return e;
  }

  Op op() const { return op_; }
  const std::string& name() const { return name_; }
  const Tensor& value() const { return constant_; }
  const std::vector<Expr>& args() const { return args_; }

  /// Names of all referenced nodes.
  void collect_refs(std::set<std::string>& out) const {
    if (op_ == Op::Ref) out.insert(name_);
    for (const auto& a : args_) a.collect_refs(out);
  }

  std::set<std::string> refs() const {
    std::set<std::string> out;
    collect_refs(out);
    return out;
  }

  /// Copy with every reference rewritten by `f`.
  Expr rewrite(const std::function<Expr(const std::string&)>& f) const {
    if (op_ == Op::Ref) return f(name_);
    Expr e = *this;
    for (auto& a : e.args_) a = a.rewrite(f);
    return e;
  }

  Expr rename(const std::function<std::string(const std::string&)>& f) const {
    return rewrite([&](const std::string& n) { return Expr::ref(f(n)); });
  }

  friend bool operator==(const Expr&, const Expr&) = default;

  static std::string_view op_name(Op op) {
    for (const auto& [name, o] : op_table())
      if (o == op) return name;
    return op == Op::Const ? "const" : "ref";
  }

  static nlohmann::json to_json(const Expr& e) {
    if (e.op_ == Op::Const) {
      nlohmann::json j;
      gfg::to_json(j, e.constant_);
      return j;
    }
    if (e.op_ == Op::Ref) return e.name_;
    nlohmann::json j = nlohmann::json::array({std::string(op_name(e.op_))});
    for (const auto& a : e.args_) j.push_back(to_json(a));
    return j;
  }

  static Expr from_json(const nlohmann::json& j) {
    if (j.is_string()) return ref(j.get<std::string>());
    if (is_numeric_json(j)) return constant(j.get<Tensor>());
    if (!j.is_array() || j.empty() || !j[0].is_string()) throw ParseError("malformed expression: " + j.dump());
    const auto name = j[0].get<std::string>();
    const auto it = op_table().find(name);
    if (it == op_table().end()) throw ParseError("unknown expression operator '" + name + "'");
    std::vector<Expr> args;
    for (std::size_t k = 1; k < j.size(); ++k) args.push_back(from_json(j[k]));
    return call(it->second, std::move(args));
  }

 private:
  static const std::map<std::string, Op, std::less<>>& op_table() {
    static const std::map<std::string, Op, std::less<>> table = {
        {"add", Op::Add},   {"sub", Op::Sub},       {"mul", Op::Mul},         {"div", Op::Div},
        {"pow", Op::Pow},   {"neg", Op::Neg},       {"exp", Op::Exp},         {"log", Op::Log},
        {"tanh", Op::Tanh}, {"sqrt", Op::Sqrt},     {"sigmoid", Op::Sigmoid}, {"logit", Op::Logit},
        {"softplus", Op::Softplus}, {"sum", Op::Sum}, {"vec", Op::Vec},       {"table", Op::Table},
        {"at", Op::At}};
    return table;
  }

  void check_arity() const {
    const std::size_t n = args_.size();
    bool ok = true;
    switch (op_) {
      case Op::Add: case Op::Sub: case Op::Mul: case Op::Div: case Op::Pow: case Op::At:
        ok = n == 2;
        break;
      case Op::Neg: case Op::Exp: case Op::Log: case Op::Tanh: case Op::Sqrt:
      case Op::Sigmoid: case Op::Logit: case Op::Softplus: case Op::Sum:
        ok = n == 1;
        break;
      case Op::Vec:
        ok = n >= 1;
        break;
      case Op::Table:
        ok = n == 2 || n == 3;
        break;
      default:
        break;
    }
    if (!ok) throw ParseError("wrong number of operands for '" + std::string(op_name(op_)) + "'");
  }

  Op op_ = Op::Const;
  Tensor constant_;
  std::string name_;
  std::vector<Expr> args_;
};

using Values = std::vector<Scalar>;

namespace detail {

inline std::size_t broadcast_size(std::size_t a, std::size_t b) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ShapeError("operands of sizes " + std::to_string(a) + " and " + std::to_string(b) + " do not broadcast");
}

template <class F>
Values elementwise(const Values& a, const Values& b, F f) {
  const std::size_t n = broadcast_size(a.size(), b.size());
  Values out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.push_back(f(a[a.size() == 1 ? 0 : k], b[b.size() == 1 ? 0 : k]));
  return out;
}

template <class F>
Values map(const Values& a, F f) {
  Values out;
  out.reserve(a.size());
  for (const auto& x : a) out.push_back(f(x));
  return out;
}

inline std::size_t checked_index(const Scalar& s, std::size_t bound) {
  const long long k = as_index(s.value());
  if (k < 0 || static_cast<std::size_t>(k) >= bound)
    throw DomainError("index " + std::to_string(k) + " out of range [0, " + std::to_string(bound) + ")");
  return static_cast<std::size_t>(k);
}

/// Shape of a table source: a constant tensor or a referenced node value.
struct TableView {
  std::vector<std::size_t> shape;
  Values data;
};

}  // namespace detail

/// Looks up the current value of a referenced node (flattened).
using ValueLookup = std::function<Values(const std::string&)>;
/// Looks up (size, shape) of a referenced node without evaluating it.
using ShapeLookup = std::function<std::vector<std::size_t>(const std::string&)>;

inline std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

/// Evaluates an expression; differentiable through every operator except index selection.
inline Values evaluate(const Expr& e, const ValueLookup& lookup, const ShapeLookup& shapes) {
  using Op = Expr::Op;
  const auto& a = e.args();
  switch (e.op()) {
    case Op::Const: {
      Values out;
      for (double v : e.value().data) out.emplace_back(v);
      return out;
    }
    case Op::Ref: return lookup(e.name());
    case Op::Add: return detail::elementwise(evaluate(a[0], lookup, shapes), evaluate(a[1], lookup, shapes), [](auto x, auto y) { return x + y; });
    case Op::Sub: return detail::elementwise(evaluate(a[0], lookup, shapes), evaluate(a[1], lookup, shapes), [](auto x, auto y) { return x - y; });
    case Op::Mul: return detail::elementwise(evaluate(a[0], lookup, shapes), evaluate(a[1], lookup, shapes), [](auto x, auto y) { return x * y; });
    case Op::Div: return detail::elementwise(evaluate(a[0], lookup, shapes), evaluate(a[1], lookup, shapes), [](auto x, auto y) { return x / y; });
    case Op::Pow: return detail::elementwise(evaluate(a[0], lookup, shapes), evaluate(a[1], lookup, shapes), [](auto x, auto y) { return pow(x, y); });
    case Op::Neg: return detail::map(evaluate(a[0], lookup, shapes), [](auto x) { return -x; });
    case Op::Exp: return detail::map(evaluate(a[0], lookup, shapes), [](auto x) { return exp(x); });
    case Op::Log: return detail::map(evaluate(a[0], lookup, shapes), [](auto x) { return log(x); });
    case Op::Tanh: return detail::map(evaluate(a[0], lookup, shapes), [](auto x) { return tanh(x); });
    case Op::Sqrt: return detail::map(evaluate(a[0], lookup, shapes), [](auto x) { return sqrt(x); });
    case Op::Sigmoid: return detail::map(evaluate(a[0], lookup, shapes), [](auto x) { return sigmoid(x); });
    case Op::Logit:
      return detail::map(evaluate(a[0], lookup, shapes), [](auto x) {
        if (!(x.value() > 0.0 && x.value() < 1.0)) throw DomainError("logit argument outside (0, 1)");
        return log(x / (Scalar(1.0) - x));
      });
    case Op::Softplus: return detail::map(evaluate(a[0], lookup, shapes), [](auto x) { return softplus(x); });
    case Op::Sum: {
      const auto v = evaluate(a[0], lookup, shapes);
      return {sum(v)};
    }
    case Op::Vec: {
      Values out;
      for (const auto& arg : a) {
        auto v = evaluate(arg, lookup, shapes);
        out.insert(out.end(), v.begin(), v.end());
      }
      return out;
    }
    case Op::At: {
      const auto v = evaluate(a[0], lookup, shapes);
      const auto i = evaluate(a[1], lookup, shapes);
      if (i.size() != 1) throw ShapeError("'at' index must have size 1");
      return {v[detail::checked_index(i[0], v.size())]};
    }
    case Op::Table: {
      std::vector<std::size_t> shape;
      Values data;
      if (a[0].op() == Op::Const) {
        shape = a[0].value().shape;
        data = evaluate(a[0], lookup, shapes);
      } else if (a[0].op() == Op::Ref) {
        shape = shapes(a[0].name());
        data = lookup(a[0].name());
      } else {
        throw ShapeError("'table' source must be a constant or a node reference");
      }
      const std::size_t nidx = a.size() - 1;
      if (nidx > shape.size()) throw ShapeError("'table' has more indices than dimensions");
      std::size_t offset = 0;
      std::size_t stride = shape_size(shape);
      for (std::size_t d = 0; d < nidx; ++d) {
        const auto iv = evaluate(a[1 + d], lookup, shapes);
        if (iv.size() != 1) throw ShapeError("'table' index must have size 1");
        stride /= shape[d];
        offset += detail::checked_index(iv[0], shape[d]) * stride;
      }
      return Values(data.begin() + static_cast<std::ptrdiff_t>(offset),
                    data.begin() + static_cast<std::ptrdiff_t>(offset + stride));
    }
  }
  return {};
}

/// Static output size of an expression; throws ShapeError on broadcast mismatch.
inline std::size_t infer_size(const Expr& e, const ShapeLookup& shapes) {
  using Op = Expr::Op;
  const auto& a = e.args();
  switch (e.op()) {
    case Op::Const: return e.value().size();
    case Op::Ref: return shape_size(shapes(e.name()));
    case Op::Add: case Op::Sub: case Op::Mul: case Op::Div: case Op::Pow:
      return detail::broadcast_size(infer_size(a[0], shapes), infer_size(a[1], shapes));
    case Op::Sum: infer_size(a[0], shapes); return 1;
    case Op::Vec: {
      std::size_t n = 0;
      for (const auto& arg : a) n += infer_size(arg, shapes);
      return n;
    }
    case Op::At:
      infer_size(a[0], shapes);
      if (infer_size(a[1], shapes) != 1) throw ShapeError("'at' index must have size 1");
      return 1;
    case Op::Table: {
      std::vector<std::size_t> shape;
      if (a[0].op() == Op::Const)
        shape = a[0].value().shape;
      else if (a[0].op() == Op::Ref)
        shape = shapes(a[0].name());
      else
        throw ShapeError("'table' source must be a constant or a node reference");
      const std::size_t nidx = a.size() - 1;
      if (nidx > shape.size()) throw ShapeError("'table' has more indices than dimensions");
      for (std::size_t d = 1; d < a.size(); ++d)
        if (infer_size(a[d], shapes) != 1) throw ShapeError("'table' index must have size 1");
      std::size_t n = 1;
      for (std::size_t d = nidx; d < shape.size(); ++d) n *= shape[d];
      return n;
    }
    default: return infer_size(a[0], shapes);
  }
}

}  // namespace gfg

#pragma once

#include <cctype>
#include <sstream>
#include <string>
#include <vector>

#include "gfg/graph.hpp"

namespace gfg {

namespace detail {

inline std::string dot_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

inline std::string node_style(const Node& n) {
  switch (n.kind) {
    case NodeKind::Latent: return "shape=circle, style=solid";
    case NodeKind::Observed: return "shape=circle, style=filled, fillcolor=gray75";
    case NodeKind::VariableParam: return "shape=square, style=solid";
    case NodeKind::FixedParam: return "shape=square, style=filled, fillcolor=gray75";
    case NodeKind::Branch: return "shape=diamond, style=solid";
    case NodeKind::Selection: return "shape=invtrapezium, style=solid";
  }
  return "";
}

inline std::string edge_style(const Link& l) {
  std::string s;
  switch (l.kind) {
    case LinkKind::Generative: s = "style=solid"; break;
    case LinkKind::Detached: s = "style=solid, arrowhead=odotnormal, label=\"detached\""; break;
    case LinkKind::Influence: s = "style=dashed"; break;
  }
  if (l.when) s += ", taillabel=\"" + std::to_string(*l.when) + "\"";
  return s;
}

inline void emit_collection(const GenerativeFlowGraph& g, CollectionId c, int depth, std::ostringstream& os) {
  const Collection& col = g.collection(c);
  const std::string pad(static_cast<std::size_t>(depth) * 2, ' ');
  os << pad << "subgraph " << dot_quote("cluster_" + col.name) << " {\n";
  std::string label = col.name;
  if (col.plate) {
    const auto& p = *col.plate;
    label += " [" + p.index + " = " + std::to_string(p.start) + ".." + std::to_string(p.start + p.count - 1) + "]";
  }
  os << pad << "  label=" << dot_quote(label) << ";\n";
  os << pad << "  style=" << (col.plate ? "\"rounded,bold\"" : "rounded") << ";\n";
  for (auto id : col.nodes) os << pad << "  " << dot_quote(g.name(id)) << " [" << node_style(g.node(id)) << "];\n";
  for (auto child : col.children) emit_collection(g, child, depth + 1, os);
  os << pad << "}\n";
}

}  // namespace detail

/// Graphviz rendering: circles for variables, squares for parameters (filled when
/// observed or fixed), dashed influence links, labeled detached links, clusters for collections.
inline std::string render_dot(const GenerativeFlowGraph& g) {
  std::ostringstream os;
  os << "digraph GFG {\n";
  if (!g.nodes().empty()) os << "  rankdir=TB;\n";
  for (auto c : g.top_level_collections()) detail::emit_collection(g, c, 1, os);
  for (const auto& n : g.nodes())
    if (!n.collection) os << "  " << detail::dot_quote(n.name) << " [" << detail::node_style(n) << "];\n";
  for (const auto& l : g.links())
    os << "  " << detail::dot_quote(g.name(l.from)) << " -> " << detail::dot_quote(g.name(l.to)) << " ["
       << detail::edge_style(l) << "];\n";
  os << "}\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// DOT syntax check

struct DotCheck {
  bool ok = true;
  std::string message;
  std::size_t line = 0;
};

namespace detail {

class DotParser {
 public:
  explicit DotParser(const std::string& text) { tokenize(text); }

  DotCheck run() {
    try {
      if (!error_.empty()) return {false, error_, err_line_};
      graph();
      if (pos_ != toks_.size()) fail("trailing input");
      return {};
    } catch (const ParseError& e) {
      return {false, e.what(), pos_ < toks_.size() ? toks_[pos_].line : (toks_.empty() ? 0 : toks_.back().line)};
    }
  }

 private:
  enum class T { Id, Punct };
  struct Tok {
    T kind;
    std::string text;
    std::size_t line;
  };

  void tokenize(const std::string& s) {
    std::size_t i = 0, line = 1;
    auto at_line_start = [&](std::size_t k) {
      while (k > 0 && (s[k - 1] == ' ' || s[k - 1] == '\t')) --k;
      return k == 0 || s[k - 1] == '\n';
    };
    while (i < s.size()) {
      const char c = s[i];
      if (c == '\n') {
        ++line;
        ++i;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++i;
      } else if (c == '/' && i + 1 < s.size() && s[i + 1] == '/') {
        while (i < s.size() && s[i] != '\n') ++i;
      } else if (c == '#' && at_line_start(i)) {
        while (i < s.size() && s[i] != '\n') ++i;
      } else if (c == '/' && i + 1 < s.size() && s[i + 1] == '*') {
        const auto end = s.find("*/", i + 2);
        if (end == std::string::npos) return set_error("unterminated comment", line);
        for (std::size_t k = i; k < end; ++k) line += s[k] == '\n';
        i = end + 2;
      } else if (c == '"') {
        std::string v;
        ++i;
        bool closed = false;
        while (i < s.size()) {
          if (s[i] == '\\' && i + 1 < s.size()) {
            v += s[i + 1];
            i += 2;
            continue;
          }
          if (s[i] == '"') {
            closed = true;
            ++i;
            break;
          }
          line += s[i] == '\n';
          v += s[i++];
        }
        if (!closed) return set_error("unterminated string", line);
        toks_.push_back({T::Id, v, line});
      } else if (c == '-' && i + 1 < s.size() && (s[i + 1] == '>' || s[i + 1] == '-')) {
        toks_.push_back({T::Punct, s.substr(i, 2), line});
        i += 2;
      } else if (std::string("{}[];=,:").find(c) != std::string::npos) {
        toks_.push_back({T::Punct, std::string(1, c), line});
        ++i;
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_' || static_cast<unsigned char>(c) >= 0x80) {
        const std::size_t b = i;
        while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_' ||
                                static_cast<unsigned char>(s[i]) >= 0x80))
          ++i;
        toks_.push_back({T::Id, s.substr(b, i - b), line});
      } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-') {
        const std::size_t b = i;
        if (s[i] == '-') ++i;
        bool digits = false, dot = false;
        while (i < s.size() && (std::isdigit(static_cast<unsigned char>(s[i])) || (s[i] == '.' && !dot))) {
          dot = dot || s[i] == '.';
          digits = digits || s[i] != '.';
          ++i;
        }
        if (!digits) return set_error("malformed numeral", line);
        toks_.push_back({T::Id, s.substr(b, i - b), line});
      } else {
        return set_error(std::string("unexpected character '") + c + "'", line);
      }
    }
  }

  void set_error(std::string msg, std::size_t line) {
    error_ = std::move(msg);
    err_line_ = line;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(msg + (pos_ < toks_.size() ? " near '" + toks_[pos_].text + "'" : " at end of input"));
  }

  bool peek(const char* p) const { return pos_ < toks_.size() && toks_[pos_].kind == T::Punct && toks_[pos_].text == p; }
  bool peek_keyword(const char* k) const {
    if (pos_ >= toks_.size() || toks_[pos_].kind != T::Id) return false;
    std::string t = toks_[pos_].text;
    for (auto& ch : t) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return t == k;
  }
  bool peek_id() const { return pos_ < toks_.size() && toks_[pos_].kind == T::Id; }
  void expect(const char* p) {
    if (!peek(p)) fail(std::string("expected '") + p + "'");
    ++pos_;
  }
  void id() {
    if (!peek_id()) fail("expected identifier");
    ++pos_;
  }

  void graph() {
    if (peek_keyword("strict")) ++pos_;
    if (peek_keyword("digraph")) {
      directed_ = true;
    } else if (!peek_keyword("graph")) {
      fail("expected 'graph' or 'digraph'");
    }
    ++pos_;
    if (peek_id()) ++pos_;
    expect("{");
    stmt_list();
    expect("}");
  }

  void stmt_list() {
    while (!peek("}")) {
      if (pos_ >= toks_.size()) fail("unterminated statement list");
      stmt();
      if (peek(";")) ++pos_;
    }
  }

  void stmt() {
    if (peek_keyword("graph") || peek_keyword("node") || peek_keyword("edge")) {
      ++pos_;
      attr_list(true);
      return;
    }
    if (peek_keyword("subgraph") || peek("{")) {
      subgraph();
      edge_rhs();
      return;
    }
    id();
    if (peek("=")) {
      ++pos_;
      id();
      return;
    }
    port();
    const bool edge = edge_rhs();
    (void)edge;
    attr_list(false);
  }

  void subgraph() {
    if (peek_keyword("subgraph")) {
      ++pos_;
      if (peek_id()) ++pos_;
    }
    expect("{");
    stmt_list();
    expect("}");
  }

  void port() {
    if (!peek(":")) return;
    ++pos_;
    id();
    if (peek(":")) {
      ++pos_;
      id();
    }
  }

  bool edge_rhs() {
    bool any = false;
    while (peek("->") || peek("--")) {
      if (peek("->") != directed_) fail(directed_ ? "undirected edge in digraph" : "directed edge in graph");
      ++pos_;
      if (peek_keyword("subgraph") || peek("{")) {
        subgraph();
      } else {
        id();
        port();
      }
      any = true;
    }
    if (any) attr_list(false);
    return any;
  }

  void attr_list(bool required) {
    if (!peek("[")) {
      if (required) fail("expected attribute list");
      return;
    }
    while (peek("[")) {
      ++pos_;
      while (!peek("]")) {
        id();
        expect("=");
        id();
        if (peek(",") || peek(";")) ++pos_;
      }
      expect("]");
    }
  }

  std::vector<Tok> toks_;
  std::size_t pos_ = 0;
  bool directed_ = false;
  std::string error_;
  std::size_t err_line_ = 0;
};

}  // namespace detail

/// Checks `text` against the DOT grammar (graph structure and attribute syntax only).
inline DotCheck validate_dot(const std::string& text) { return detail::DotParser(text).run(); }

}  // namespace gfg

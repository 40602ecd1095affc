#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ssm {

/// Raised by parse_expr; `position` is a 0-based character offset into the input.
class ExprSyntaxError : public std::runtime_error {
 public:
  ExprSyntaxError(const std::string& message, std::size_t position);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

enum class Op : std::uint8_t {
  Const,
  Sym,
  Add,
  Sub,
  Mul,
  Div,
  Pow,
  Neg,
  Sin,
  Cos,
  Exp,
  Log,
  Min,
  Max,
  // if_lt(a, b, x, y) evaluates to x when a < b, y otherwise.
  IfLess,
};

/// Immutable rate-expression tree. Nodes are shared, so copies are cheap.
///
/// The grammar is closed under differentiation: every operator has a
/// derivative expressible with the same operators (min/max/if_lt
/// differentiate piecewise).
class Expr {
 public:
  Expr();  // constant zero

  static Expr constant(double value);
  static Expr symbol(std::string name);
  static Expr unary(Op op, Expr arg);
  static Expr binary(Op op, Expr lhs, Expr rhs);
  static Expr if_less(Expr a, Expr b, Expr then_value, Expr else_value);

  Op op() const { return node_->op; }
  double value() const { return node_->value; }
  const std::string& name() const { return node_->name; }
  std::span<const Expr> args() const { return node_->args; }

  bool is_constant() const { return op() == Op::Const; }
  bool is_constant(double v) const { return op() == Op::Const && value() == v; }

 private:
  struct Node {
    Op op = Op::Const;
    double value = 0.0;
    std::string name;
    std::vector<Expr> args;
  };
  explicit Expr(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

// Simplifying constructors: fold constants and drop neutral elements.
Expr operator+(const Expr& a, const Expr& b);
Expr operator-(const Expr& a, const Expr& b);
Expr operator*(const Expr& a, const Expr& b);
Expr operator/(const Expr& a, const Expr& b);
Expr operator-(const Expr& a);
Expr pow(const Expr& a, const Expr& b);
Expr sin(const Expr& a);
Expr cos(const Expr& a);
Expr exp(const Expr& a);
Expr log(const Expr& a);
Expr min(const Expr& a, const Expr& b);
Expr max(const Expr& a, const Expr& b);

Expr parse_expr(std::string_view text);
std::string to_string(const Expr& e);

/// Exact symbolic derivative. A symbol that does not occur yields constant zero.
Expr differentiate(const Expr& e, std::string_view symbol);

std::set<std::string> free_symbols(const Expr& e);
std::size_t node_count(const Expr& e);

/// Tree-walking evaluation against a name->value map. Unknown symbols throw.
double evaluate(const Expr& e, const std::map<std::string, double, std::less<>>& binding);

/// Name -> slot assignment used when compiling expressions for fast evaluation.
class SymbolTable {
 public:
  std::size_t add(const std::string& name);
  void alias(const std::string& name, std::size_t slot);
  bool contains(std::string_view name) const;
  std::size_t slot(std::string_view name) const;
  std::size_t size() const { return size_; }

 private:
  std::map<std::string, std::size_t, std::less<>> slots_;
  std::size_t size_ = 0;
};

/// Postfix bytecode over a flat binding array. Evaluation is re-entrant:
/// the stack lives on the caller's frame, so one CompiledExpr may be shared
/// across threads.
class CompiledExpr {
 public:
  CompiledExpr() = default;
  CompiledExpr(const Expr& e, const SymbolTable& symbols);

  double operator()(std::span<const double> binding) const;
  bool is_constant_zero() const { return code_.size() == 1 && code_[0].op == Op::Const && code_[0].value == 0.0; }

 private:
  struct Instr {
    Op op;
    std::uint32_t slot;
    double value;
  };
  void emit(const Expr& e, const SymbolTable& symbols, std::size_t depth);
  std::vector<Instr> code_{{Op::Const, 0, 0.0}};
  std::size_t max_depth_ = 1;
};

}  // namespace ssm

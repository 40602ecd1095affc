#include "ssm/expr.hpp"

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace ssm {

ExprSyntaxError::ExprSyntaxError(const std::string& message, std::size_t position)
    : std::runtime_error(message + " at position " + std::to_string(position)), position_(position) {}

Expr::Expr() : node_(std::make_shared<const Node>()) {}

Expr Expr::constant(double value) {
  Node n;
  n.op = Op::Const;
  n.value = value;
  return Expr(std::make_shared<const Node>(std::move(n)));
}

Expr Expr::symbol(std::string name) {
  Node n;
  n.op = Op::Sym;
  n.name = std::move(name);
  return Expr(std::make_shared<const Node>(std::move(n)));
}

Expr Expr::unary(Op op, Expr arg) {
  Node n;
  n.op = op;
  n.args = {std::move(arg)};
  return Expr(std::make_shared<const Node>(std::move(n)));
}

Expr Expr::binary(Op op, Expr lhs, Expr rhs) {
  Node n;
  n.op = op;
  n.args = {std::move(lhs), std::move(rhs)};
  return Expr(std::make_shared<const Node>(std::move(n)));
}

Expr Expr::if_less(Expr a, Expr b, Expr then_value, Expr else_value) {
  Node n;
  n.op = Op::IfLess;
  n.args = {std::move(a), std::move(b), std::move(then_value), std::move(else_value)};
  return Expr(std::make_shared<const Node>(std::move(n)));
}

namespace {

bool structurally_equal(const Expr& a, const Expr& b) {
  if (a.op() != b.op()) return false;
  switch (a.op()) {
    case Op::Const:
      return a.value() == b.value();
    case Op::Sym:
      return a.name() == b.name();
    default:
      break;
  }
  auto aa = a.args();
  auto ba = b.args();
  if (aa.size() != ba.size()) return false;
  for (std::size_t i = 0; i < aa.size(); ++i)
    if (!structurally_equal(aa[i], ba[i])) return false;
  return true;
}

}  // namespace

Expr operator+(const Expr& a, const Expr& b) {
  if (a.is_constant() && b.is_constant()) return Expr::constant(a.value() + b.value());
  if (a.is_constant(0.0)) return b;
  if (b.is_constant(0.0)) return a;
  if (b.op() == Op::Neg) return a - b.args()[0];
  return Expr::binary(Op::Add, a, b);
}

Expr operator-(const Expr& a, const Expr& b) {
  if (a.is_constant() && b.is_constant()) return Expr::constant(a.value() - b.value());
  if (b.is_constant(0.0)) return a;
  if (a.is_constant(0.0)) return -b;
  if (b.op() == Op::Neg) return a + b.args()[0];
  return Expr::binary(Op::Sub, a, b);
}

Expr operator*(const Expr& a, const Expr& b) {
  if (a.is_constant() && b.is_constant()) return Expr::constant(a.value() * b.value());
  if (a.is_constant(0.0) || b.is_constant(0.0)) return Expr::constant(0.0);
  if (a.is_constant(1.0)) return b;
  if (b.is_constant(1.0)) return a;
  if (a.is_constant(-1.0)) return -b;
  if (b.is_constant(-1.0)) return -a;
  return Expr::binary(Op::Mul, a, b);
}

Expr operator/(const Expr& a, const Expr& b) {
  if (a.is_constant() && b.is_constant() && b.value() != 0.0) return Expr::constant(a.value() / b.value());
  if (a.is_constant(0.0)) return Expr::constant(0.0);
  if (b.is_constant(1.0)) return a;
  return Expr::binary(Op::Div, a, b);
}

Expr operator-(const Expr& a) {
  if (a.is_constant()) return Expr::constant(-a.value());
  if (a.op() == Op::Neg) return a.args()[0];
  return Expr::unary(Op::Neg, a);
}

Expr pow(const Expr& a, const Expr& b) {
  if (a.is_constant() && b.is_constant()) return Expr::constant(std::pow(a.value(), b.value()));
  if (b.is_constant(0.0)) return Expr::constant(1.0);
  if (b.is_constant(1.0)) return a;
  return Expr::binary(Op::Pow, a, b);
}

Expr sin(const Expr& a) {
  if (a.is_constant()) return Expr::constant(std::sin(a.value()));
  return Expr::unary(Op::Sin, a);
}

Expr cos(const Expr& a) {
  if (a.is_constant()) return Expr::constant(std::cos(a.value()));
  return Expr::unary(Op::Cos, a);
}

Expr exp(const Expr& a) {
  if (a.is_constant()) return Expr::constant(std::exp(a.value()));
  return Expr::unary(Op::Exp, a);
}

Expr log(const Expr& a) {
  if (a.is_constant() && a.value() > 0.0) return Expr::constant(std::log(a.value()));
  return Expr::unary(Op::Log, a);
}

Expr min(const Expr& a, const Expr& b) {
  if (a.is_constant() && b.is_constant()) return Expr::constant(std::min(a.value(), b.value()));
  return Expr::binary(Op::Min, a, b);
}

Expr max(const Expr& a, const Expr& b) {
  if (a.is_constant() && b.is_constant()) return Expr::constant(std::max(a.value(), b.value()));
  return Expr::binary(Op::Max, a, b);
}

namespace {

Expr if_less_simplified(const Expr& a, const Expr& b, const Expr& x, const Expr& y) {
  if (a.is_constant() && b.is_constant()) return a.value() < b.value() ? x : y;
  if (structurally_equal(x, y)) return x;
  return Expr::if_less(a, b, x, y);
}

// ---------------------------------------------------------------- parser

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  Expr parse() {
    Expr e = parse_sum();
    skip_space();
    if (pos_ != text_.size()) throw ExprSyntaxError("unexpected character '" + std::string(1, text_[pos_]) + "'", pos_);
    return e;
  }

 private:
  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_space();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) {
      skip_space();
      if (pos_ >= text_.size()) throw ExprSyntaxError(std::string("expected '") + c + "' but input ended", pos_);
      throw ExprSyntaxError(std::string("expected '") + c + "'", pos_);
    }
  }

  Expr parse_sum() {
    Expr lhs = parse_product();
    for (;;) {
      if (accept('+'))
        lhs = Expr::binary(Op::Add, lhs, parse_product());
      else if (accept('-'))
        lhs = Expr::binary(Op::Sub, lhs, parse_product());
      else
        return lhs;
    }
  }

  Expr parse_product() {
    Expr lhs = parse_power();
    for (;;) {
      if (accept('*'))
        lhs = Expr::binary(Op::Mul, lhs, parse_power());
      else if (accept('/'))
        lhs = Expr::binary(Op::Div, lhs, parse_power());
      else
        return lhs;
    }
  }

  // Unary minus binds tighter than '^'; '^' is right-associative.
  Expr parse_power() {
    Expr base = parse_unary();
    if (accept('^')) return Expr::binary(Op::Pow, base, parse_power());
    return base;
  }

  Expr parse_unary() {
    if (accept('-')) {
      Expr arg = parse_unary();
      if (arg.is_constant()) return Expr::constant(-arg.value());
      return Expr::unary(Op::Neg, arg);
    }
    if (accept('+')) return parse_unary();
    return parse_primary();
  }

  Expr parse_primary() {
    skip_space();
    if (pos_ >= text_.size()) throw ExprSyntaxError("unexpected end of expression", pos_);
    char c = text_[pos_];
    if (c == '(') {
      ++pos_;
      Expr e = parse_sum();
      expect(')');
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t start = pos_;
      while (pos_ < text_.size() &&
             (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
        ++pos_;
      std::string ident(text_.substr(start, pos_ - start));
      skip_space();
      if (pos_ < text_.size() && text_[pos_] == '(') {
        ++pos_;
        return parse_call(ident, start);
      }
      if (ident == "pi") return Expr::constant(std::numbers::pi);
      return Expr::symbol(ident);
    }
    throw ExprSyntaxError("unexpected character '" + std::string(1, c) + "'", pos_);
  }

  Expr parse_number() {
    std::size_t start = pos_;
    while (pos_ < text_.size() && (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.')) ++pos_;
    if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
      std::size_t save = pos_;
      ++pos_;
      if (pos_ < text_.size() && (text_[pos_] == '+' || text_[pos_] == '-')) ++pos_;
      if (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
      } else {
        pos_ = save;
      }
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, v);
    if (ec != std::errc() || ptr != text_.data() + pos_) throw ExprSyntaxError("malformed number", start);
    return Expr::constant(v);
  }

  Expr parse_call(const std::string& fn, std::size_t at) {
    std::vector<Expr> args;
    if (!accept(')')) {
      do {
        args.push_back(parse_sum());
      } while (accept(','));
      expect(')');
    }
    auto arity = [&](std::size_t n) {
      if (args.size() != n)
        throw ExprSyntaxError(fn + "() takes " + std::to_string(n) + " argument(s), got " + std::to_string(args.size()),
                              at);
    };
    if (fn == "sin") { arity(1); return Expr::unary(Op::Sin, args[0]); }
    if (fn == "cos") { arity(1); return Expr::unary(Op::Cos, args[0]); }
    if (fn == "exp") { arity(1); return Expr::unary(Op::Exp, args[0]); }
    if (fn == "log") { arity(1); return Expr::unary(Op::Log, args[0]); }
    if (fn == "pow") { arity(2); return Expr::binary(Op::Pow, args[0], args[1]); }
    if (fn == "min") { arity(2); return Expr::binary(Op::Min, args[0], args[1]); }
    if (fn == "max") { arity(2); return Expr::binary(Op::Max, args[0], args[1]); }
    if (fn == "if_lt") { arity(4); return Expr::if_less(args[0], args[1], args[2], args[3]); }
    throw ExprSyntaxError("unknown function '" + fn + "'", at);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------- printer

int precedence(const Expr& e) {
  switch (e.op()) {
    case Op::Add:
    case Op::Sub:
      return 1;
    case Op::Mul:
    case Op::Div:
      return 2;
    case Op::Pow:
      return 3;
    case Op::Neg:
      return 4;
    case Op::Const:
      return e.value() < 0.0 ? 4 : 5;
    default:
      return 5;
  }
}

std::string format_number(double v) {
  if (v == std::numbers::pi) return "pi";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s(buf);
  // Shorter representation when it round-trips.
  for (int digits = 1; digits < 17; ++digits) {
    char shorter[32];
    std::snprintf(shorter, sizeof shorter, "%.*g", digits, v);
    double back = 0.0;
    std::from_chars(shorter, shorter + std::char_traits<char>::length(shorter), back);
    if (back == v) return shorter;
  }
  return s;
}

void print(const Expr& e, std::string& out);

void print_wrapped(const Expr& e, bool wrap, std::string& out) {
  if (wrap) out += '(';
  print(e, out);
  if (wrap) out += ')';
}

void print_call(const char* name, const Expr& e, std::string& out) {
  out += name;
  out += '(';
  bool first = true;
  for (const auto& a : e.args()) {
    if (!first) out += ", ";
    first = false;
    print(a, out);
  }
  out += ')';
}

void print(const Expr& e, std::string& out) {
  auto args = e.args();
  switch (e.op()) {
    case Op::Const:
      out += format_number(e.value());
      return;
    case Op::Sym:
      out += e.name();
      return;
    case Op::Add:
    case Op::Sub: {
      print_wrapped(args[0], precedence(args[0]) < 1, out);
      out += e.op() == Op::Add ? " + " : " - ";
      print_wrapped(args[1], precedence(args[1]) <= 1, out);
      return;
    }
    case Op::Mul:
    case Op::Div: {
      print_wrapped(args[0], precedence(args[0]) < 2, out);
      out += e.op() == Op::Mul ? "*" : "/";
      print_wrapped(args[1], precedence(args[1]) <= 2, out);
      return;
    }
    case Op::Pow: {
      print_wrapped(args[0], precedence(args[0]) <= 3, out);
      out += "^";
      print_wrapped(args[1], precedence(args[1]) < 3, out);
      return;
    }
    case Op::Neg:
      out += "-";
      print_wrapped(args[0], precedence(args[0]) < 5, out);
      return;
    case Op::Sin: print_call("sin", e, out); return;
    case Op::Cos: print_call("cos", e, out); return;
    case Op::Exp: print_call("exp", e, out); return;
    case Op::Log: print_call("log", e, out); return;
    case Op::Min: print_call("min", e, out); return;
    case Op::Max: print_call("max", e, out); return;
    case Op::IfLess: print_call("if_lt", e, out); return;
  }
}

void collect_symbols(const Expr& e, std::set<std::string>& out) {
  if (e.op() == Op::Sym) out.insert(e.name());
  for (const auto& a : e.args()) collect_symbols(a, out);
}

double apply(Op op, double a, double b) {
  switch (op) {
    case Op::Add: return a + b;
    case Op::Sub: return a - b;
    case Op::Mul: return a * b;
    case Op::Div: return a / b;
    case Op::Pow: return std::pow(a, b);
    case Op::Min: return std::min(a, b);
    case Op::Max: return std::max(a, b);
    default: return 0.0;
  }
}

double apply(Op op, double a) {
  switch (op) {
    case Op::Neg: return -a;
    case Op::Sin: return std::sin(a);
    case Op::Cos: return std::cos(a);
    case Op::Exp: return std::exp(a);
    case Op::Log: return std::log(a);
    default: return 0.0;
  }
}

}  // namespace

Expr parse_expr(std::string_view text) { return Parser(text).parse(); }

std::string to_string(const Expr& e) {
  std::string out;
  print(e, out);
  return out;
}

Expr differentiate(const Expr& e, std::string_view s) {
  auto args = e.args();
  switch (e.op()) {
    case Op::Const:
      return Expr::constant(0.0);
    case Op::Sym:
      return Expr::constant(e.name() == s ? 1.0 : 0.0);
    case Op::Add:
      return differentiate(args[0], s) + differentiate(args[1], s);
    case Op::Sub:
      return differentiate(args[0], s) - differentiate(args[1], s);
    case Op::Neg:
      return -differentiate(args[0], s);
    case Op::Mul: {
      const Expr& f = args[0];
      const Expr& g = args[1];
      return differentiate(f, s) * g + f * differentiate(g, s);
    }
    case Op::Div: {
      const Expr& f = args[0];
      const Expr& g = args[1];
      Expr df = differentiate(f, s);
      Expr dg = differentiate(g, s);
      return df / g - (f * dg) / pow(g, Expr::constant(2.0));
    }
    case Op::Pow: {
      const Expr& f = args[0];
      const Expr& g = args[1];
      Expr df = differentiate(f, s);
      Expr dg = differentiate(g, s);
      if (dg.is_constant(0.0)) return g * pow(f, g - Expr::constant(1.0)) * df;
      return pow(f, g) * (dg * log(f) + g * df / f);
    }
    case Op::Sin:
      return cos(args[0]) * differentiate(args[0], s);
    case Op::Cos:
      return -(sin(args[0]) * differentiate(args[0], s));
    case Op::Exp:
      return exp(args[0]) * differentiate(args[0], s);
    case Op::Log:
      return differentiate(args[0], s) / args[0];
    case Op::Min:
      return if_less_simplified(args[0], args[1], differentiate(args[0], s), differentiate(args[1], s));
    case Op::Max:
      return if_less_simplified(args[0], args[1], differentiate(args[1], s), differentiate(args[0], s));
    case Op::IfLess:
      return if_less_simplified(args[0], args[1], differentiate(args[2], s), differentiate(args[3], s));
  }
  return Expr::constant(0.0);
}

std::set<std::string> free_symbols(const Expr& e) {
  std::set<std::string> out;
  collect_symbols(e, out);
  return out;
}

std::size_t node_count(const Expr& e) {
  std::size_t n = 1;
  for (const auto& a : e.args()) n += node_count(a);
  return n;
}

double evaluate(const Expr& e, const std::map<std::string, double, std::less<>>& binding) {
  auto args = e.args();
  switch (e.op()) {
    case Op::Const:
      return e.value();
    case Op::Sym: {
      auto it = binding.find(e.name());
      if (it == binding.end()) throw std::out_of_range("unbound symbol '" + e.name() + "'");
      return it->second;
    }
    case Op::IfLess:
      return evaluate(args[0], binding) < evaluate(args[1], binding) ? evaluate(args[2], binding)
                                                                      : evaluate(args[3], binding);
    default:
      break;
  }
  if (args.size() == 1) return apply(e.op(), evaluate(args[0], binding));
  return apply(e.op(), evaluate(args[0], binding), evaluate(args[1], binding));
}

// ---------------------------------------------------------------- symbols

std::size_t SymbolTable::add(const std::string& name) {
  auto [it, inserted] = slots_.emplace(name, size_);
  if (inserted) ++size_;
  return it->second;
}

void SymbolTable::alias(const std::string& name, std::size_t slot) { slots_[name] = slot; }

bool SymbolTable::contains(std::string_view name) const { return slots_.find(name) != slots_.end(); }

std::size_t SymbolTable::slot(std::string_view name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw std::out_of_range("unknown symbol '" + std::string(name) + "'");
  return it->second;
}

// ---------------------------------------------------------------- bytecode

CompiledExpr::CompiledExpr(const Expr& e, const SymbolTable& symbols) {
  code_.clear();
  max_depth_ = 0;
  emit(e, symbols, 0);
}

void CompiledExpr::emit(const Expr& e, const SymbolTable& symbols, std::size_t depth) {
  std::size_t d = depth;
  for (const auto& a : e.args()) emit(a, symbols, d++);
  Instr ins{e.op(), 0, 0.0};
  if (e.op() == Op::Const) ins.value = e.value();
  if (e.op() == Op::Sym) ins.slot = static_cast<std::uint32_t>(symbols.slot(e.name()));
  code_.push_back(ins);
  max_depth_ = std::max(max_depth_, std::max(d, depth + 1));
}

double CompiledExpr::operator()(std::span<const double> binding) const {
  constexpr std::size_t kInline = 64;
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wmaybe-uninitialized"
  std::array<double, kInline> inline_stack;  // every slot is written before it is read
  std::vector<double> heap_stack;
  double* st = inline_stack.data();
  if (max_depth_ > kInline) {
    heap_stack.resize(max_depth_);
    st = heap_stack.data();
  }
  std::size_t sp = 0;
  for (const auto& ins : code_) {
    switch (ins.op) {
      case Op::Const:
        st[sp++] = ins.value;
        break;
      case Op::Sym:
        st[sp++] = binding[ins.slot];
        break;
      case Op::Add: --sp; st[sp - 1] += st[sp]; break;
      case Op::Sub: --sp; st[sp - 1] -= st[sp]; break;
      case Op::Mul: --sp; st[sp - 1] *= st[sp]; break;
      case Op::Div: --sp; st[sp - 1] /= st[sp]; break;
      case Op::Pow: --sp; st[sp - 1] = std::pow(st[sp - 1], st[sp]); break;
      case Op::Min: --sp; st[sp - 1] = std::min(st[sp - 1], st[sp]); break;
      case Op::Max: --sp; st[sp - 1] = std::max(st[sp - 1], st[sp]); break;
      case Op::Neg: st[sp - 1] = -st[sp - 1]; break;
      case Op::Sin: st[sp - 1] = std::sin(st[sp - 1]); break;
      case Op::Cos: st[sp - 1] = std::cos(st[sp - 1]); break;
      case Op::Exp: st[sp - 1] = std::exp(st[sp - 1]); break;
      case Op::Log: st[sp - 1] = std::log(st[sp - 1]); break;
      case Op::IfLess:
        sp -= 3;
        st[sp - 1] = st[sp - 1] < st[sp] ? st[sp + 1] : st[sp + 2];
        break;
    }
  }
  return st[0];
#pragma GCC diagnostic pop
}

}  // namespace ssm

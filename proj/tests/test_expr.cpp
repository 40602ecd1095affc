#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "ssm/expr.hpp"

using namespace ssm;

namespace {

using Binding = std::map<std::string, double, std::less<>>;

double central_difference(const Expr& e, Binding b, const std::string& sym) {
  double x = b.at(sym);
  double h = 1e-6 * std::max(1.0, std::abs(x));
  b[sym] = x + h;
  double up = evaluate(e, b);
  b[sym] = x - h;
  double down = evaluate(e, b);
  return (up - down) / (2.0 * h);
}

}  // namespace

TEST_SUITE("expr") {
  TEST_CASE("seasonal forcing expression parses with the expected free symbols") {
    Expr e = parse_expr("r0*(1+e_amp*sin(2*pi*(t/365+phi)))*mu_d");
    CHECK(free_symbols(e) == std::set<std::string>{"e_amp", "mu_d", "phi", "r0", "t"});
    Binding b{{"r0", 2.0}, {"e_amp", 0.0}, {"t", 10.0}, {"phi", 0.3}, {"mu_d", 0.25}};
    CHECK(evaluate(e, b) == doctest::Approx(0.5));
  }

  TEST_CASE("constant zero") {
    Expr e = parse_expr("0");
    CHECK(e.is_constant(0.0));
    CHECK(free_symbols(e).empty());
  }

  TEST_CASE("frequency-dependent force of infection") {
    Binding b{{"beta", 0.5}, {"I", 10.0}, {"N", 100.0}};
    CHECK(evaluate(parse_expr("beta*I/N"), b) == doctest::Approx(0.05));
  }

  TEST_CASE("precedence: unary minus binds tighter than pow, pow tighter than products") {
    Binding b{{"x", 3.0}};
    CHECK(evaluate(parse_expr("2*x^2"), b) == doctest::Approx(18.0));
    CHECK(evaluate(parse_expr("1+2*3-4/2"), b) == doctest::Approx(5.0));
    CHECK(evaluate(parse_expr("-x^2"), b) == doctest::Approx(9.0));
    CHECK(evaluate(parse_expr("2^3^2"), b) == doctest::Approx(512.0));
    CHECK(evaluate(parse_expr("min(x, 2) + max(x, 2)"), b) == doctest::Approx(5.0));
    CHECK(evaluate(parse_expr("if_lt(x, 4, 1, 2)"), b) == doctest::Approx(1.0));
  }

  TEST_CASE("syntax errors carry a position") {
    try {
      parse_expr("beta*(I+");
      FAIL("expected a syntax error");
    } catch (const ExprSyntaxError& e) {
      CHECK(e.position() == 8);
    }
    CHECK_THROWS_AS(parse_expr("abs(x)"), ExprSyntaxError);
    CHECK_THROWS_AS(parse_expr("2 3"), ExprSyntaxError);
    CHECK_THROWS_AS(parse_expr(""), ExprSyntaxError);
  }

  TEST_CASE("derivatives of simple forms") {
    Expr e = parse_expr("beta*I/N");
    Binding b{{"beta", 0.7}, {"I", 12.0}, {"N", 300.0}};
    CHECK(evaluate(differentiate(e, "I"), b) == doctest::Approx(0.7 / 300.0));
    CHECK(evaluate(differentiate(parse_expr("sin(t)"), "t"), {{"t", 0.4}}) == doctest::Approx(std::cos(0.4)));
    CHECK(differentiate(e, "gamma").is_constant(0.0));
  }

  TEST_CASE("SEIR infection propensity derivative against central differences") {
    Expr e = parse_expr("beta*I/N*S");
    Binding b{{"beta", 0.6}, {"I", 20.0}, {"N", 1000.0}, {"S", 900.0}};
    double sym = evaluate(differentiate(e, "beta"), b);
    double fd = central_difference(e, b, "beta");
    CHECK(std::abs(sym - fd) <= 1e-6 * std::abs(fd));
  }

  TEST_CASE("random expressions: derivative matches finite differences, print/parse is identity") {
    const std::vector<std::string> forms{
        "a*exp(-b*x)+c",  "log(1+x^2)*sin(a*x)", "x^a/(b+x)",     "cos(x)*cos(x)+sin(x)^2",
        "max(x, a)*b",    "min(a*x, b+x)",       "-x/(1+exp(-x))", "a*(1+b*sin(2*pi*(x/365+c)))*x/1000",
        "(x-a)^3 - x*b"};
    std::mt19937_64 gen(17);
    std::uniform_real_distribution<double> u(0.2, 2.0);
    for (const auto& f : forms) {
      Expr e = parse_expr(f);
      Expr round = parse_expr(to_string(e));
      for (int k = 0; k < 100; ++k) {
        Binding b{{"a", u(gen)}, {"b", u(gen)}, {"c", u(gen)}, {"x", u(gen)}};
        CHECK(evaluate(round, b) == doctest::Approx(evaluate(e, b)).epsilon(1e-12));
        for (const char* s : {"a", "b", "x"}) {
          double fd = central_difference(e, b, s);
          double sym = evaluate(differentiate(e, s), b);
          // min/max kinks are measure zero; skip points that straddle one
          if (std::abs(fd) > 1e-8) CHECK(std::abs(sym - fd) <= 1e-6 * std::abs(fd) + 1e-9);
        }
      }
    }
  }

  TEST_CASE("differentiation is linear") {
    Expr f = parse_expr("x^3*sin(y)");
    Expr g = parse_expr("exp(x*y)");
    Expr combo = Expr::constant(2.5) * f + g;
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int k = 0; k < 100; ++k) {
      Binding b{{"x", u(gen)}, {"y", u(gen)}};
      double lhs = evaluate(differentiate(combo, "x"), b);
      double rhs = 2.5 * evaluate(differentiate(f, "x"), b) + evaluate(differentiate(g, "x"), b);
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
  }

  TEST_CASE("compiled evaluation agrees with the tree walk") {
    SymbolTable st;
    st.add("S");
    st.add("I");
    st.add("beta");
    st.add("N");
    st.alias("pop", st.slot("N"));
    Expr e = parse_expr("beta*S*I/pop + min(S, I) - if_lt(I, S, 1, 0)");
    CompiledExpr c(e, st);
    std::vector<double> b{900.0, 30.0, 0.4, 1000.0};
    Binding m{{"S", 900.0}, {"I", 30.0}, {"beta", 0.4}, {"pop", 1000.0}};
    CHECK(c(b) == doctest::Approx(evaluate(e, m)));
    CHECK(CompiledExpr().is_constant_zero());
  }

  TEST_CASE("deeply nested expressions compile past the inline stack") {
    std::string text = "x";
    for (int i = 0; i < 100; ++i) text = "(1+" + text + ")";
    SymbolTable st;
    st.add("x");
    CompiledExpr c(parse_expr(text), st);
    std::vector<double> b{1.0};
    CHECK(c(b) == doctest::Approx(101.0));
  }
}

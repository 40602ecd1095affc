#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssm/simulate.hpp"
#include "support.hpp"

using namespace ssm;

namespace {

Engine sir_engine() { return Engine(load_model(testing::source_path("models/sir-psr.json"))); }

ParamVector sir_theta(const Engine& e, double N, double I0, double beta = 0.5, double gamma = 0.25) {
  return parameter_vector(e.model(), {{"N", N}, {"I0", I0}, {"beta", beta}, {"gamma", gamma}});
}

const char* kDeath = R"({"ssm_model": 1, "compartments": ["A"],
  "parameters": [{"name": "A0", "role": "initial-condition", "compartment": "A"}, {"name": "g"}],
  "reactions": [{"from": "A", "rate": "g", "accumulators": ["deaths"]}]})";

const char* kCompeting = R"({"ssm_model": 1, "compartments": ["A", "B", "C"],
  "parameters": [{"name": "A0", "role": "initial-condition", "compartment": "A"}, {"name": "r1"}, {"name": "r2"}],
  "reactions": [{"from": "A", "to": "B", "rate": "r1"}, {"from": "A", "to": "C", "rate": "r2"}]})";

double sum_z(const Engine& e, const StateVector& s) {
  return std::accumulate(s.x.begin(), s.x.begin() + static_cast<std::ptrdiff_t>(e.n_compartments()), 0.0);
}

struct Moments {
  double mean = 0.0, var = 0.0;
  std::size_t n = 0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  m.n = v.size();
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(v.size() - 1);
  return m;
}

}  // namespace

TEST_SUITE("simulate") {
  TEST_CASE("SIR drift by hand") {
    Engine e = sir_engine();
    ParamVector th = sir_theta(e, 1000, 10);
    StateVector s = e.initial_state(th, 0.0);
    CHECK(s.x[0] == 990.0);
    auto d = e.drift(s, th);
    CHECK(d[0] == doctest::Approx(-4.95));
    CHECK(d[1] == doctest::Approx(2.45));
    CHECK(d[2] == doctest::Approx(2.5));
    CHECK(d[3] == doctest::Approx(4.95));  // incidence accumulator
  }

  TEST_CASE("disease-free equilibrium has zero drift") {
    Engine e = sir_engine();
    ParamVector th = sir_theta(e, 1000, 0);
    auto d = e.drift(e.initial_state(th, 0.0), th);
    for (double v : d) CHECK(v == 0.0);
  }

  TEST_CASE("plague drift without seasonality is constant-R0 SI drift") {
    Engine e(load_model(testing::source_path("models/plague.json")));
    ParamVector th = parameter_vector(e.model(), {{"N", 1000}, {"I0", 20}, {"r0", 3}, {"e_amp", 0},
                                                  {"phi", 0.2}, {"inf_period", 4}, {"rep", 0.5}});
    StateVector s = e.initial_state(th, 0.0);
    for (double t : {0.0, 40.0, 200.0}) {
      s.t = t;
      auto d = e.drift(s, th);
      double inf = 3.0 * 0.25 * 20.0 * 980.0 / 1000.0;
      CHECK(d[0] == doctest::Approx(-inf));
      CHECK(d[1] == doctest::Approx(inf - 0.25 * 20.0));
    }
  }

  TEST_CASE("a model without reactions only advances time") {
    Engine e(parse_model(R"({"ssm_model": 1, "compartments": ["A"],
      "parameters": [{"name": "A0", "role": "initial-condition", "compartment": "A"}]})"));
    ParamVector th = parameter_vector(e.model(), {{"A0", 7}});
    StateVector s = ode_integrate(e, e.initial_state(th, 0.0), th, 5.0, 0.1);
    CHECK(s.t == 5.0);
    CHECK(s.x[0] == 7.0);
  }

  TEST_CASE("RK4 against the closed-form logistic curve, with fourth-order convergence") {
    Engine e = sir_engine();
    // gamma = 0 reduces SIR infection to logistic growth of I
    ParamVector th = sir_theta(e, 1000, 5, 0.4, 0.0);
    auto logistic = [](double t) { return 1000.0 / (1.0 + (1000.0 / 5.0 - 1.0) * std::exp(-0.4 * t)); };
    StateVector s = ode_integrate(e, e.initial_state(th, 0.0), th, 20.0, 1e-3);
    CHECK(std::abs(s.x[1] - logistic(20.0)) <= 1e-8 * logistic(20.0));
    double e1 = std::abs(ode_integrate(e, e.initial_state(th, 0.0), th, 20.0, 0.4).x[1] - logistic(20.0));
    double e2 = std::abs(ode_integrate(e, e.initial_state(th, 0.0), th, 20.0, 0.2).x[1] - logistic(20.0));
    CHECK(e1 / e2 > 12.0);
    CHECK(e1 / e2 < 20.0);
  }

  TEST_CASE("SIR final size agrees with the final-size relation") {
    Engine e = sir_engine();
    const double N = 1000, I0 = 10, R0 = 2.0;
    ParamVector th = sir_theta(e, N, I0, 0.5, 0.25);
    StateVector s = ode_integrate(e, e.initial_state(th, 0.0), th, 600.0, 0.01);
    // S_inf = S0 exp(-R0 (N - S_inf) / N), solved by Newton
    double S0 = N - I0, x = 0.2 * N;
    for (int i = 0; i < 100; ++i) {
      double f = x - S0 * std::exp(-R0 * (N - x) / N);
      double df = 1.0 - S0 * std::exp(-R0 * (N - x) / N) * R0 / N;
      x -= f / df;
    }
    CHECK(std::abs(s.x[0] - x) <= 1e-6 * x);
  }

  TEST_CASE("ODE domain violations name the compartment") {
    Engine e(parse_model(R"({"ssm_model": 1, "compartments": ["A"],
      "parameters": [{"name": "A0", "role": "initial-condition", "compartment": "A"}],
      "reactions": [{"effect": {"A": -1}, "source": "EXTERNAL", "absolute_outflow": true, "rate": "5"}]})"));
    ParamVector th = parameter_vector(e.model(), {{"A0", 1}});
    CHECK_THROWS_WITH_AS(ode_integrate(e, e.initial_state(th, 0.0), th, 1.0, 0.01), doctest::Contains("A"),
                         DomainError);
  }

  TEST_CASE("closed models conserve the total population under every formalism") {
    Engine e = sir_engine();
    ParamVector th = sir_theta(e, 100000, 100);
    const StateVector s0 = e.initial_state(th, 0.0);
    REQUIRE(e.model().conserves_population);
    StateVector ode = ode_integrate(e, s0, th, 60.0, 0.1);
    CHECK(std::abs(sum_z(e, ode) - 1e5) <= 1e-9 * 1e5);
    for (Formalism f : {Formalism::Sde, Formalism::Psr, Formalism::Jump}) {
      Rng rng = Rng::stream(5, {static_cast<std::uint64_t>(f)});
      StepDiagnostics diag;
      StateVector s = propagate(e, s0, th, f == Formalism::Jump ? 5.0 : 60.0, 0.1, f, rng, {}, &diag);
      if (f == Formalism::Sde && diag.clamp_events == 0)
        CHECK(std::abs(sum_z(e, s) - 1e5) <= 1e-9 * 1e5);
      if (f != Formalism::Sde) CHECK(sum_z(e, s) == 1e5);
    }
  }

  TEST_CASE("SDE step without noise equals an Euler step bitwise") {
    Engine e = sir_engine();
    ParamVector th = sir_theta(e, 1000, 10);
    StateVector s = e.initial_state(th, 0.0);
    Rng rng(1);
    StateVector a = sde_step(e, s, th, 0.1, rng, NoiseOptions{false, false});
    StateVector b = euler_step(e, s, th, 0.1);
    CHECK(a.x == b.x);
    CHECK(a.t == b.t);
  }

  TEST_CASE("SIR demographic dispersion") {
    Engine e = sir_engine();
    ParamVector th = sir_theta(e, 1000, 10);
    StateVector s = e.initial_state(th, 0.0);
    DispersionAssembly d = e.assemble_dispersion(s, th, true, false);
    Eigen::MatrixXd L(3, 2);
    L << -1, 0, 1, -1, 0, 1;
    CHECK(d.L.isApprox(L));
    CHECK(d.Qd(0, 0) == doctest::Approx(0.5 * 990 * 10 / 1000.0));
    CHECK(d.Qd(1, 1) == doctest::Approx(0.25 * 10));
    CHECK(d.Qd(0, 1) == 0.0);
    DispersionAssembly none = e.assemble_dispersion(s, th, false, false);
    CHECK(none.L.size() == 0);
    CHECK(none.Q.size() == 0);
  }

  TEST_CASE("dengue dispersion: group factorisation and rank") {
    Engine e(load_model(testing::source_path("models/dengue-2strain.json")));
    ParamVector th = parameter_vector(e.model(), {{"N", 100000}, {"I1_0", 30}, {"I2_0", 20}, {"beta", 0.5},
                                                  {"e_amp", 0.2}, {"phi", 0.1}, {"psi", 1.5}, {"iota", 1e-5},
                                                  {"gamma", 0.14}, {"alpha", 0.01}, {"sigma", 0.3}, {"rep", 0.2}});
    StateVector s = e.initial_state(th, 3.0);
    s.x[5] = 400;  // S1
    s.x[6] = 300;  // S2
    s.x[7] = 5;    // I12
    s.x[8] = 7;    // I21
    DispersionAssembly d = e.assemble_dispersion(s, th, true, true);
    CHECK(d.L.cols() == static_cast<Eigen::Index>(e.n_reactions() + 4));
    CHECK(d.Qe.isApprox(d.Lg * d.Qg * d.Lg.transpose(), 1e-15));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(d.Qe);
    int rank = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
      if (es.eigenvalues()(i) > 1e-10 * es.eigenvalues().maxCoeff()) ++rank;
    CHECK(rank == 2);
    // L Q L' equals the direct construction on the compartments
    Eigen::MatrixXd LQL = d.L * d.Q * d.L.transpose();
    Eigen::MatrixXd full = e.diffusion_covariance(s, th, {});
    const auto c = static_cast<Eigen::Index>(e.n_compartments());
    CHECK((LQL - full.topLeftCorner(c, c)).norm() <= 1e-12 * std::max(1.0, full.norm()));
    CHECK(LQL.isApprox(LQL.transpose()));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ps(LQL);
    CHECK(ps.eigenvalues().minCoeff() >= -1e-9 * ps.eigenvalues().maxCoeff());
  }

  TEST_CASE("single noisy reaction in its own group") {
    Engine e(parse_model(R"({"ssm_model": 1, "compartments": ["A"],
      "parameters": [{"name": "A0", "role": "initial-condition", "compartment": "A"}, {"name": "g"}, {"name": "sigma"}],
      "reactions": [{"from": "A", "rate": "g", "white_noise": {"sd": "sigma"}}]})"));
    ParamVector th = parameter_vector(e.model(), {{"A0", 50}, {"g", 0.2}, {"sigma", 0.3}});
    DispersionAssembly d = e.assemble_dispersion(e.initial_state(th, 0.0), th, false, true);
    REQUIRE(d.Qe.rows() == 1);
    CHECK(d.Qe(0, 0) == doctest::Approx(std::pow(0.3 * 0.2 * 50, 2)));
  }

  TEST_CASE("SDE pure death: moments of the Euler-Maruyama chain") {
    Engine e(parse_model(kDeath));
    ParamVector th = parameter_vector(e.model(), {{"A0", 1000}, {"g", 1}});
    const double h = 0.01;
    const int steps = 100;
    // moment recursion of the discretised linear SDE
    double m = 1000, v = 0;
    for (int i = 0; i < steps; ++i) {
      v = (1 - h) * (1 - h) * v + h * m;
      m *= 1 - h;
    }
    std::vector<double> z;
    for (std::uint64_t k = 0; k < 10000; ++k) {
      Rng rng = Rng::stream(7, {k});
      StateVector s = propagate(e, e.initial_state(th, 0.0), th, 1.0, h, Formalism::Sde, rng);
      z.push_back(s.x[0]);
    }
    Moments mo = moments(z);
    CHECK(std::abs(mo.mean - m) < 4.0 * std::sqrt(v / 1e4));
    CHECK(std::abs(mo.var - v) < 4.0 * v * std::sqrt(2.0 / 1e4));
    CHECK(std::abs(m - 1000 * std::exp(-1.0)) < 0.01 * m);
  }

  TEST_CASE("demographic variance shrinks with population size") {
    Engine e = sir_engine();
    auto var_of_fraction = [&](double N) {
      ParamVector th = sir_theta(e, N, 0.01 * N);
      std::vector<double> i;
      for (std::uint64_t k = 0; k < 10000; ++k) {
        Rng rng = Rng::stream(13, {static_cast<std::uint64_t>(N), k});
        StateVector s = propagate(e, e.initial_state(th, 0.0), th, 10.0, 0.1, Formalism::Sde, rng);
        i.push_back(s.x[1] / N);
      }
      return moments(i).var;
    };
    double ratio = var_of_fraction(1e4) / var_of_fraction(1e6);
    CHECK(ratio >= 70.0);
    CHECK(ratio <= 140.0);
  }

  TEST_CASE("PSR with zero rates leaves the state unchanged") {
    Engine e(parse_model(kDeath));
    ParamVector th = parameter_vector(e.model(), {{"A0", 25}, {"g", 0}});
    Rng rng(3);
    StateVector s = psr_step(e, e.initial_state(th, 0.0), th, 0.5, rng);
    CHECK(s.x[0] == 25.0);
    CHECK(s.x[1] == 0.0);
  }

  TEST_CASE("PSR pure death: single-event frequency") {
    Engine e(parse_model(kDeath));
    ParamVector th = parameter_vector(e.model(), {{"A0", 10}, {"g", 0.1}});
    const double dt = 0.01, p = 1.0 - std::exp(-0.1 * dt);
    const double p1 = 10 * p * std::pow(1 - p, 9);
    Rng rng(21);
    const StateVector s0 = e.initial_state(th, 0.0);
    int ones = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i)
      if (psr_step(e, s0, th, dt, rng).x[1] == 1.0) ++ones;
    double f = static_cast<double>(ones) / n;
    CHECK(std::abs(f - p1) < 3.0 * std::sqrt(p1 * (1 - p1) / n));
    CHECK(p1 == doctest::Approx(0.1 * 10 * dt).epsilon(0.02));
  }

  TEST_CASE("PSR competing exits split in proportion to the rates") {
    Engine e(parse_model(kCompeting));
    ParamVector th = parameter_vector(e.model(), {{"A0", 1000}, {"r1", 0.3}, {"r2", 0.1}});
    const StateVector s0 = e.initial_state(th, 0.0);
    const double q = 1.0 - std::exp(-0.4);
    const double p1 = q * 0.75, p2 = q * 0.25;
    std::vector<double> b, c;
    for (std::uint64_t k = 0; k < 5000; ++k) {
      Rng rng = Rng::stream(2, {k});
      StateVector s = psr_step(e, s0, th, 1.0, rng);
      b.push_back(s.x[1]);
      c.push_back(s.x[2]);
      CHECK(s.x[0] + s.x[1] + s.x[2] == 1000.0);
    }
    CHECK(std::abs(moments(b).mean - 1000 * p1) < 4.0 * std::sqrt(1000 * p1 * (1 - p1) / 5000));
    CHECK(std::abs(moments(c).mean - 1000 * p2) < 4.0 * std::sqrt(1000 * p2 * (1 - p2) / 5000));
    // cross-check the split against exact jump-process simulation over the same unit interval
    std::vector<double> gb, gc;
    for (std::uint64_t k = 0; k < 5000; ++k) {
      Rng rng = Rng::stream(4, {k});
      StateVector s = propagate(e, s0, th, 1.0, 1.0, Formalism::Jump, rng);
      gb.push_back(s.x[1]);
      gc.push_back(s.x[2]);
    }
    double ratio_psr = moments(b).mean / moments(c).mean;
    double ratio_ssa = moments(gb).mean / moments(gc).mean;
    CHECK(ratio_psr == doctest::Approx(3.0).epsilon(0.03));
    CHECK(ratio_ssa == doctest::Approx(3.0).epsilon(0.03));
  }

  TEST_CASE("PSR event means approach propensity times dt") {
    Engine e(parse_model(kDeath));
    ParamVector th = parameter_vector(e.model(), {{"A0", 1000}, {"g", 1}});
    const StateVector s0 = e.initial_state(th, 0.0);
    for (double dt : {1e-3, 1e-4}) {
      Rng rng(99);
      double sum = 0.0;
      const int n = 20000;
      for (int i = 0; i < n; ++i) sum += psr_step(e, s0, th, dt, rng).x[1];
      double mean = sum / n, expect = 1000 * (1 - std::exp(-dt));
      CHECK(std::abs(mean - expect) < 4.0 * std::sqrt(expect / n));
      CHECK(expect / (1000 * dt) == doctest::Approx(1.0).epsilon(dt));
    }
  }

  TEST_CASE("Gamma time increments have mean dt and sd sigma sqrt(dt)") {
    const double dt = 0.1, sigma = 0.4;
    Rng rng(8);
    std::vector<double> g;
    for (int i = 0; i < 100000; ++i) g.push_back(rng.gamma(dt / (sigma * sigma), sigma * sigma));
    Moments m = moments(g);
    double sd = sigma * std::sqrt(dt);
    CHECK(std::abs(m.mean - dt) < 3.0 * sd / std::sqrt(1e5));
    CHECK(std::abs(std::sqrt(m.var) - sd) < 0.02 * sd);
  }

  TEST_CASE("noise groups share one Gamma draw: same-group reactions fire together more often") {
    const char* text = R"({"ssm_model": 1, "compartments": ["A", "B", "C", "D"],
      "parameters": [{"name": "A0", "role": "initial-condition", "compartment": "A"},
                     {"name": "B0", "role": "initial-condition", "compartment": "B"}, {"name": "sigma"}],
      "reactions": [{"from": "A", "to": "C", "rate": "0.5", "white_noise": {"group": "g", "sd": "sigma"}},
                    {"from": "B", "to": "D", "rate": "0.5", "white_noise": {"group": "%s", "sd": "sigma"}}]})";
    auto correlation = [&](const char* group) {
      char buf[1024];
      std::snprintf(buf, sizeof buf, text, group);
      Engine e(parse_model(buf));
      ParamVector th = parameter_vector(e.model(), {{"A0", 1000}, {"B0", 1000}, {"sigma", 0.8}});
      const StateVector s0 = e.initial_state(th, 0.0);
      std::vector<double> a, b;
      Rng rng(6);
      for (int i = 0; i < 4000; ++i) {
        StateVector s = psr_step(e, s0, th, 0.1, rng);
        a.push_back(s.x[2]);
        b.push_back(s.x[3]);
      }
      Moments ma = moments(a), mb = moments(b);
      double cov = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) cov += (a[i] - ma.mean) * (b[i] - mb.mean);
      cov /= static_cast<double>(a.size() - 1);
      return cov / std::sqrt(ma.var * mb.var);
    };
    CHECK(correlation("g") > 0.5);
    CHECK(std::abs(correlation("h")) < 0.1);
  }

  TEST_CASE("Gillespie waiting times are exponential (KS at 1%)") {
    Engine e(parse_model(kDeath));
    ParamVector th = parameter_vector(e.model(), {{"A0", 4}, {"g", 0.5}});
    const StateVector s0 = e.initial_state(th, 0.0);
    const double a = 2.0;
    Rng rng(31);
    std::vector<double> w;
    for (int i = 0; i < 10000; ++i) w.push_back(gillespie_step(e, s0, th, rng).elapsed);
    std::sort(w.begin(), w.end());
    double d = 0.0;
    const double n = static_cast<double>(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      double F = 1.0 - std::exp(-a * w[i]);
      d = std::max({d, std::abs(F - static_cast<double>(i) / n), std::abs(F - static_cast<double>(i + 1) / n)});
    }
    CHECK(d < 1.628 / std::sqrt(n));
  }

  TEST_CASE("Gillespie picks reactions in proportion to propensity") {
    Engine e(parse_model(kCompeting));
    ParamVector th = parameter_vector(e.model(), {{"A0", 10}, {"r1", 0.2}, {"r2", 0.1}});
    const StateVector s0 = e.initial_state(th, 0.0);
    Rng rng(77);
    int first = 0;
    const int n = 30000;
    for (int i = 0; i < n; ++i) {
      JumpResult r = gillespie_step(e, s0, th, rng);
      REQUIRE(r.reaction.has_value());
      if (*r.reaction == 0) ++first;
    }
    double f = static_cast<double>(first) / n;
    CHECK(std::abs(f - 2.0 / 3.0) < 3.0 * std::sqrt(2.0 / 9.0 / n));
  }

  TEST_CASE("Gillespie without positive propensity returns infinite elapsed time") {
    Engine e(parse_model(kDeath));
    ParamVector th = parameter_vector(e.model(), {{"A0", 0}, {"g", 1}});
    Rng rng(1);
    JumpResult r = gillespie_step(e, e.initial_state(th, 0.0), th, rng);
    CHECK(std::isinf(r.elapsed));
    CHECK_FALSE(r.reaction.has_value());
    JumpResult capped = gillespie_step(e, e.initial_state(th, 0.0), th, rng, 0.5);
    CHECK(capped.elapsed == 0.5);
  }

  TEST_CASE("small SIR: Gillespie and PSR ensemble means agree") {
    Engine e = sir_engine();
    ParamVector th = sir_theta(e, 100, 5, 0.6, 0.2);
    const std::vector<double> checkpoints{5, 10, 15, 20, 30};
    auto ensemble = [&](Formalism f, double dt, std::uint64_t seed) {
      std::vector<std::vector<double>> out(checkpoints.size());
      for (std::uint64_t k = 0; k < 1000; ++k) {
        Rng rng = Rng::stream(seed, {k});
        StateVector s = e.initial_state(th, 0.0);
        for (std::size_t c = 0; c < checkpoints.size(); ++c) {
          s = propagate(e, s, th, checkpoints[c], dt, f, rng);
          out[c].push_back(s.x[1]);
        }
      }
      return out;
    };
    auto ssa = ensemble(Formalism::Jump, 1.0, 1);
    auto psr = ensemble(Formalism::Psr, 0.01, 2);
    for (std::size_t c = 0; c < checkpoints.size(); ++c) {
      Moments a = moments(ssa[c]), b = moments(psr[c]);
      double se = std::sqrt(a.var / 1000 + b.var / 1000);
      CHECK(std::abs(a.mean - b.mean) < 3.5 * se);
    }
  }

  TEST_CASE("identical seeds give identical trajectories") {
    Engine e(load_model(testing::source_path("models/dengue-2strain.json")));
    ParamVector th = parameter_vector(e.model(), {{"N", 100000}, {"I1_0", 30}, {"I2_0", 20}, {"beta", 0.5},
                                                  {"e_amp", 0.2}, {"phi", 0.1}, {"psi", 1.5}, {"iota", 1e-5},
                                                  {"gamma", 0.14}, {"alpha", 0.01}, {"sigma", 0.3}, {"rep", 0.2}});
    for (Formalism f : {Formalism::Sde, Formalism::Psr, Formalism::Jump}) {
      Rng r1 = Rng::stream(42, {1, 2}), r2 = Rng::stream(42, {1, 2});
      double end = f == Formalism::Jump ? 2.0 : 30.0;
      StateVector a = propagate(e, e.initial_state(th, 0.0), th, end, 0.1, f, r1);
      StateVector b = propagate(e, e.initial_state(th, 0.0), th, end, 0.1, f, r2);
      CHECK(a.x == b.x);
    }
  }

  TEST_CASE("drift Jacobian matches central differences") {
    Engine e(load_model(testing::source_path("models/seir-h1n1.json")));
    ParamVector th = parameter_vector(e.model(), {{"N", 100000}, {"E0", 50}, {"I0", 40}, {"R0_init", 1000},
                                                  {"beta0", 0.6}, {"vol", 0.1}, {"k", 0.5}, {"gamma", 0.3},
                                                  {"rep", 0.1}, {"tau", 0.1}});
    StateVector s = e.initial_state(th, 2.0);
    Eigen::MatrixXd J = e.drift_jacobian(s, th);
    for (std::size_t j = 0; j < e.dim(); ++j) {
      StateVector up = s, down = s;
      double h = 1e-6 * std::max(1.0, std::abs(s.x[j]));
      up.x[j] += h;
      down.x[j] -= h;
      auto du = e.drift(up, th), dd = e.drift(down, th);
      for (std::size_t i = 0; i < e.dim(); ++i) {
        double fd = (du[i] - dd[i]) / (2 * h);
        CHECK(std::abs(J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - fd) <=
              1e-6 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

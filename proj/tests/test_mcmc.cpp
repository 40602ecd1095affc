#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "ssm/mcmc.hpp"
#include "ssm/stages.hpp"
#include "support.hpp"

using namespace ssm;

namespace {

TargetValue std_normal(const Eigen::VectorXd& u) { return {-0.5 * u.squaredNorm(), 0.0, 0.0}; }

}  // namespace

TEST_SUITE("mcmc") {
  TEST_CASE("ESS of independent draws is close to N") {
    std::mt19937_64 gen(1);
    std::normal_distribution<double> z;
    std::vector<double> x(10000);
    for (double& v : x) v = z(gen);
    double e = ess(x);
    CHECK(e >= 8000);
    CHECK(e <= 10500);
  }

  TEST_CASE("ESS of an AR(1) chain follows the closed form") {
    std::mt19937_64 gen(2);
    std::normal_distribution<double> z;
    std::vector<double> x(100000);
    double v = 0.0;
    for (double& s : x) s = v = 0.9 * v + z(gen);
    double ratio = ess(x) / static_cast<double>(x.size());
    double expect = 0.1 / 1.9;
    CHECK(ratio > expect / 1.5);
    CHECK(ratio < expect * 1.5);
  }

  TEST_CASE("ESS of a constant series is small, positive and finite") {
    std::vector<double> x(500, 3.0);
    double e = ess(x);
    CHECK(e > 0.0);
    CHECK(e < 1.0);
  }

  TEST_CASE("ESS is finite, non-negative and at most 1.05 N for shuffled inputs") {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u;
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> x(200 + 50 * rep);
      for (double& v : x) v = std::pow(u(gen), 3);
      std::shuffle(x.begin(), x.end(), gen);
      double e = ess(x);
      CHECK(std::isfinite(e));
      CHECK(e >= 0.0);
      CHECK(e <= 1.05 * static_cast<double>(x.size()));
    }
  }

  TEST_CASE("vanishing proposal accepts almost everything") {
    RwmOptions o;
    o.iterations = 2000;
    o.adapt = false;
    o.seed = 4;
    RwmResult r = rwm_chain(std_normal, Eigen::VectorXd::Zero(2), 1e-14 * Eigen::MatrixXd::Identity(2, 2), o);
    ChainSummary s = summarize(r.trace, 0.0);
    CHECK(s.acceptance_rate > 0.99);
  }

  TEST_CASE("non-finite proposals are rejected") {
    auto half = [](const Eigen::VectorXd& u) {
      if (u(0) < 0.0) return TargetValue{-std::numeric_limits<double>::infinity(), 0.0, 0.0};
      return TargetValue{-0.5 * u.squaredNorm(), 0.0, 0.0};
    };
    RwmOptions o;
    o.iterations = 3000;
    o.seed = 9;
    Eigen::VectorXd u0(1);
    u0 << 0.5;
    RwmResult r = rwm_chain(half, u0, Eigen::MatrixXd::Identity(1, 1), o);
    for (const auto& row : r.trace.rows) CHECK(row.u(0) >= 0.0);
  }

  TEST_CASE("the incumbent's likelihood is never re-estimated") {
    std::mt19937_64 noise(5);
    std::normal_distribution<double> z;
    auto noisy = [&](const Eigen::VectorXd& u) { return TargetValue{-0.5 * u.squaredNorm() + z(noise), 0.0, 0.0}; };
    RwmOptions o;
    o.iterations = 2000;
    o.seed = 6;
    RwmResult r = rwm_chain(noisy, Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), o);
    for (std::size_t i = 1; i < r.trace.rows.size(); ++i) {
      const auto& row = r.trace.rows[i];
      const auto& prev = r.trace.rows[i - 1];
      if (!row.accepted) {
        CHECK(row.log_likelihood == prev.log_likelihood);
        CHECK(row.u == prev.u);
      }
    }
  }

  TEST_CASE("adaptive chain on a correlated Gaussian") {
    Eigen::Matrix2d cov;
    cov << 2.0, 0.9, 0.9, 1.0;
    Eigen::Matrix2d prec = cov.inverse();
    auto target = [&](const Eigen::VectorXd& u) { return TargetValue{-0.5 * u.dot(prec * u), 0.0, 0.0}; };
    RwmOptions o;
    o.iterations = 20000;
    o.seed = 10;
    RwmResult r = rwm_chain(target, Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), o);
    ChainSummary s = summarize(r.trace);
    CHECK(s.acceptance_rate > 0.15);
    CHECK(s.acceptance_rate < 0.35);
    CHECK((s.covariance_u - cov).norm() / cov.norm() < 0.25);
    CHECK(r.final_lambda > 0.0);
  }

  TEST_CASE("acceptance flags are consistent with repeated values") {
    RwmOptions o;
    o.iterations = 1000;
    o.seed = 11;
    RwmResult r = rwm_chain(std_normal, Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3), o);
    for (std::size_t i = 1; i < r.trace.rows.size(); ++i)
      if (r.trace.rows[i].accepted) CHECK(r.trace.rows[i].u != r.trace.rows[i - 1].u);
  }

  TEST_CASE("trace CSV round trip") {
    RwmOptions o;
    o.iterations = 50;
    o.seed = 12;
    RwmResult r = rwm_chain(std_normal, Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), o);
    r.trace.names = {"a", "b"};
    std::stringstream ss;
    r.trace.write_csv(ss);
    CHECK(ss.str().rfind("iteration,a,b,log_likelihood,log_prior,accepted\n", 0) == 0);
    Trace back = Trace::read_csv(ss);
    REQUIRE(back.rows.size() == r.trace.rows.size());
    CHECK(back.names == r.trace.names);
    for (std::size_t i = 0; i < back.rows.size(); ++i) {
      CHECK(back.rows[i].theta == r.trace.rows[i].theta);
      CHECK(back.rows[i].log_likelihood == r.trace.rows[i].log_likelihood);
      CHECK(back.rows[i].accepted == r.trace.rows[i].accepted);
    }
  }

  TEST_CASE("summaries discard the burn-in") {
    Trace t;
    t.names = {"x"};
    for (std::size_t i = 0; i < 100; ++i) {
      TraceRow row;
      row.iteration = i;
      row.u = row.theta = Eigen::VectorXd::Constant(1, i < 10 ? 1000.0 : 1.0);
      row.accepted = true;
      t.rows.push_back(row);
    }
    ChainSummary s = summarize(t);
    CHECK(s.burn_in == 10);
    CHECK(s.mean_theta(0) == doctest::Approx(1.0));
  }

  TEST_CASE("Kalman MCMC trace: priors recompute and the document carries a covariance") {
    Problem p(parse_model(testing::kOuModel), DataSet{});
    testing::OuParams q;
    p.data = parse_data(testing::simulate_ou(q, 25, 4).csv(), p.model());
    p.dt = 0.1;
    ThetaDocument in = ThetaDocument::parse(R"({"ssm_theta": 1, "values": {"x0": 0, "mu": 0.2, "kappa": 0.6, "s": 1.1, "r": 0.25}})");
    StageOptions o;
    o.iterations = 1500;
    o.seed = 3;
    Trace t;
    ThetaDocument out = run_kmcmc(p, in, o, &t);
    REQUIRE(t.rows.size() == 1500);
    for (const auto& row : t.rows) {
      ParamVector nat = in.parameters(p.model());
      for (std::size_t k = 0; k < t.names.size(); ++k)
        nat[p.model().parameter_index(t.names[k])] = row.theta(static_cast<Eigen::Index>(k));
      CHECK(row.log_prior == doctest::Approx(p.space.log_prior(nat)).epsilon(1e-10));
    }
    auto cov = out.covariance();
    REQUIRE(cov.has_value());
    CHECK(cov->parameters == std::vector<std::string>{"mu", "kappa", "s"});
    CHECK(out.provenance().back().stage == "kmcmc");
  }
}

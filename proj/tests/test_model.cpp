#include <doctest.h>

#include <random>

#include "ssm/model.hpp"
#include "support.hpp"

using namespace ssm;

namespace {

std::string with_reactions(const std::string& reactions) {
  return R"({"ssm_model": 1, "compartments": ["S", "I", "R"], "population_size": "N",
    "parameters": [{"name": "N"}, {"name": "beta", "prior": {"dist": "uniform", "lower": 0, "upper": 2}},
                   {"name": "gamma", "prior": {"dist": "lognormal", "meanlog": -1, "sdlog": 0.5}}],
    "reactions": )" +
         reactions + "}";
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("plague SI model") {
    ModelSpec m = load_model(testing::source_path("models/plague.json"));
    REQUIRE(m.compartments.size() == 2);
    REQUIRE(m.reactions.size() == 2);
    CHECK(m.reactions[0].effect == std::vector<int>{-1, 1});
    CHECK(m.reactions[1].effect == std::vector<int>{0, -1});
    CHECK(m.reactions[0].source == 0);
    CHECK(m.reactions[1].source == 1);
    CHECK_FALSE(m.conserves_population);
  }

  TEST_CASE("SEIR model with a diffusing contact rate") {
    ModelSpec m = load_model(testing::source_path("models/seir-h1n1.json"));
    CHECK(m.compartments.size() == 4);
    CHECK(m.reactions.size() == 3);
    REQUIRE(m.diffusions.size() == 1);
    CHECK(m.diffusions[0].transform.kind == TransformKind::Log);
    CHECK(m.conserves_population);
  }

  TEST_CASE("dengue model: four noisy reactions in two groups") {
    ModelSpec m = load_model(testing::source_path("models/dengue-2strain.json"));
    CHECK(m.compartments.size() == 10);
    REQUIRE(m.noise_groups.size() == 2);
    CHECK(m.noise_groups[0].reactions.size() == 2);
    CHECK(m.noise_groups[1].reactions.size() == 2);
  }

  TEST_CASE("a model with no reactions is accepted") {
    ModelSpec m = parse_model(testing::kOuModel);
    CHECK(m.reactions.empty());
    CHECK(m.compartments.empty());
    CHECK(m.diffusions.size() == 1);
  }

  TEST_CASE("stoichiometry columns equal the effect maps in order") {
    for (const auto& name : testing::shipped_models()) {
      ModelSpec m = load_model(testing::source_path("models/" + name));
      Eigen::MatrixXd L = m.stoichiometry();
      REQUIRE(L.cols() == static_cast<Eigen::Index>(m.reactions.size()));
      for (std::size_t k = 0; k < m.reactions.size(); ++k)
        for (std::size_t i = 0; i < m.compartments.size(); ++i)
          CHECK(L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) == m.reactions[k].effect[i]);
    }
  }

  TEST_CASE("validation errors") {
    using doctest::Contains;
    CHECK_THROWS_WITH_AS(parse_model(with_reactions(R"([{"from": "S", "to": "I", "rate": "beta*Q/N"}])")),
                         Contains("Q"), ModelError);
    CHECK_THROWS_WITH_AS(parse_model(R"({"ssm_model": 1, "compartments": ["S", "S"]})"), Contains("duplicate"),
                         ModelError);
    CHECK_THROWS_WITH_AS(parse_model(with_reactions(R"([{"effect": {"S": 0}, "rate": "1"}])")),
                         Contains("empty effect"), ModelError);
    CHECK_THROWS_WITH_AS(parse_model(with_reactions(R"([{"effect": {"S": -1, "I": -1, "R": 2}, "rate": "1"}])")),
                         Contains("ambiguous"), ModelError);
    CHECK_THROWS_WITH_AS(parse_model(R"({"ssm_model": 1, "parameters": [
        {"name": "p", "transform": "log", "prior": {"dist": "normal", "mean": 0, "sd": 1}}]})"),
                         Contains("p"), ModelError);
    CHECK_THROWS_WITH_AS(parse_model(R"({"ssm_model": 1, "parameters": [
        {"name": "p", "transform": {"type": "scaled_logit", "lower": 3, "upper": 1}}]})"),
                         Contains("lower < upper"), ModelError);
    CHECK_THROWS_AS(parse_model(R"({"ssm_model": 2})"), ModelError);
    CHECK_THROWS_AS(parse_model("{not json"), ModelError);
  }

  TEST_CASE("explicit source resolves ambiguity; inflow defaults to the external source") {
    ModelSpec m = parse_model(with_reactions(R"([
      {"effect": {"S": -1, "I": -1, "R": 2}, "source": "I", "rate": "beta"},
      {"to": "S", "rate": "gamma"}])"));
    CHECK(m.reactions[0].source == 1);
    CHECK(m.reactions[1].is_external());
  }

  TEST_CASE("transforms") {
    Transform log{TransformKind::Log};
    CHECK(log.forward(1.0) == 0.0);
    Transform sl{TransformKind::ScaledLogit, 1.0, 7.0};
    CHECK(sl.forward(4.0) == doctest::Approx(0.0));
    CHECK_FALSE(sl.in_domain(7.0));
    Transform lg{TransformKind::Logit};
    CHECK(lg.inverse(-50.0) > 0.0);
    CHECK(lg.inverse(50.0) <= 1.0);
  }

  TEST_CASE("forward and inverse transforms round-trip over prior draws") {
    ModelSpec m = parse_model(R"({"ssm_model": 1, "parameters": [
      {"name": "u", "prior": {"dist": "uniform", "lower": 1, "upper": 7}},
      {"name": "ln", "prior": {"dist": "lognormal", "meanlog": 0, "sdlog": 1}},
      {"name": "nm", "prior": {"dist": "normal", "mean": 3, "sd": 2}},
      {"name": "p", "transform": "logit", "prior": {"dist": "uniform", "lower": 0, "upper": 1}},
      {"name": "fixed"}]})");
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> uu(1.0, 7.0), up(0.0, 1.0);
    std::lognormal_distribution<double> ln(0.0, 1.0);
    std::normal_distribution<double> nm(3.0, 2.0);
    for (int k = 0; k < 100; ++k) {
      std::map<std::string, double> v{{"u", uu(gen)}, {"ln", ln(gen)}, {"nm", nm(gen)}, {"p", up(gen)}, {"fixed", 5}};
      Eigen::VectorXd x = transform_theta(m, v);
      CHECK(x.size() == 4);
      auto back = inverse_transform_theta(m, x, {{"fixed", 5}});
      for (const auto& [name, value] : v) CHECK(back.at(name) == doctest::Approx(value).epsilon(1e-12));
    }
    CHECK_THROWS_AS(transform_theta(m, {{"u", 8.0}, {"ln", 1.0}, {"nm", 0.0}, {"p", 0.5}, {"fixed", 5}}), ModelError);
  }

  TEST_CASE("parameter space log prior and Jacobian") {
    ModelSpec m = parse_model(with_reactions("[]"));
    ParameterSpace space(m);
    CHECK(space.dimension() == 2);
    ParamVector theta = parameter_vector(m, {{"N", 100}, {"beta", 0.5}, {"gamma", 0.3}});
    double expect = std::log(0.5) + m.parameters[2].prior.log_density(0.3);
    CHECK(space.log_prior(theta) == doctest::Approx(expect));
    // lognormal via log transform: d natural / d transformed = x
    double jac = std::log(0.3) + std::log((0.5 - 0.0) * (2.0 - 0.5) / 2.0);
    CHECK(space.log_jacobian(theta) == doctest::Approx(jac));
    Eigen::VectorXd u = space.to_transformed(theta);
    ParamVector back = space.to_natural(u, theta);
    CHECK(back[1] == doctest::Approx(0.5));
    CHECK(back[2] == doctest::Approx(0.3));
  }
}

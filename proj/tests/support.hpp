#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <numbers>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Dense>

#include "ssm/model.hpp"
#include "ssm/observe.hpp"

namespace testing {

inline std::string source_path(const std::string& rel) { return std::string(SSM_SOURCE_DIR) + "/" + rel; }

inline std::string read_text(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline const std::vector<std::string>& shipped_models() {
  static const std::vector<std::string> names{"plague.json", "seir-h1n1.json", "dengue-2strain.json", "sir-psr.json"};
  return names;
}

// Scalar Ornstein-Uhlenbeck state seen through Gaussian noise:
//   dx = -kappa (x - mu) dt + s dB,  y = x + e,  e ~ N(0, r).
inline const char* kOuModel = R"json({
  "ssm_model": 1,
  "compartments": [],
  "parameters": [
    {"name": "x0", "prior": {"dist": "dirac"}},
    {"name": "mu", "prior": {"dist": "normal", "mean": 0, "sd": 2}},
    {"name": "kappa", "prior": {"dist": "uniform", "lower": 0.01, "upper": 5}},
    {"name": "s", "prior": {"dist": "uniform", "lower": 0.01, "upper": 5}},
    {"name": "r", "prior": {"dist": "dirac"}}
  ],
  "diffusions": [
    {"name": "x", "transform": "identity", "drift": "-kappa*(x-mu)", "volatility": "s", "initial": "x0"}
  ],
  "observations": [
    {"name": "y", "distribution": "normal", "observed": "x", "variance": "r"}
  ]
})json";

// Same process with only the mean level free, for conjugate checks.
inline std::string ou_mean_model() {
  std::string m = kOuModel;
  for (const std::string name : {"kappa", "s"}) {
    std::string head = "{\"name\": \"" + name + "\", \"prior\": ";
    auto pos = m.find(head) + head.size();
    auto end = m.find('}', pos) + 1;
    m.replace(pos, end - pos, R"({"dist": "dirac"})");
  }
  return m;
}

struct OuParams {
  double x0 = 0.0, mu = 0.0, kappa = 0.5, s = 1.0, r = 0.25;
};

inline ssm::ParamVector ou_vector(const ssm::ModelSpec& m, const OuParams& p) {
  return ssm::parameter_vector(m, {{"x0", p.x0}, {"mu", p.mu}, {"kappa", p.kappa}, {"s", p.s}, {"r", p.r}});
}

struct Series {
  std::vector<double> t, y;
  std::string csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "time,stream,value\n";
    for (std::size_t i = 0; i < t.size(); ++i) out << t[i] << ",y," << y[i] << '\n';
    return out.str();
  }
};

/// Exact OU transitions at unit spacing.
inline Series simulate_ou(const OuParams& p, std::size_t n, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  Series s;
  double x = p.x0;
  const double a = std::exp(-p.kappa);
  const double q = p.s * p.s * (1.0 - a * a) / (2.0 * p.kappa);
  for (std::size_t i = 1; i <= n; ++i) {
    x = p.mu + a * (x - p.mu) + std::sqrt(q) * z(gen);
    s.t.push_back(static_cast<double>(i));
    s.y.push_back(x + std::sqrt(p.r) * z(gen));
  }
  return s;
}

/// Scalar Kalman filter for x' = mu + a (x - mu) + N(0, q), started at a known x0.
inline double kalman_loglik(const Series& d, double x0, double mu, double a, double q, double r) {
  double m = x0, P = 0.0, ll = 0.0;
  for (double y : d.y) {
    m = mu + a * (m - mu);
    P = a * a * P + q;
    double S = P + r;
    double v = y - m;
    ll += -0.5 * (std::log(2.0 * std::numbers::pi * S) + v * v / S);
    double K = P / S;
    m += K * v;
    P *= 1.0 - K;
  }
  return ll;
}

/// Continuous-time OU transition over unit spacing.
inline double ou_exact_loglik(const Series& d, const OuParams& p) {
  double a = std::exp(-p.kappa);
  return kalman_loglik(d, p.x0, p.mu, a, p.s * p.s * (1.0 - a * a) / (2.0 * p.kappa), p.r);
}

/// The same chain after k Euler-Maruyama substeps of length 1/k.
inline double ou_euler_loglik(const Series& d, const OuParams& p, int k) {
  double h = 1.0 / k, b = 1.0 - p.kappa * h, a = 1.0, q = 0.0;
  for (int i = 0; i < k; ++i) {
    q = b * b * q + p.s * p.s * h;
    a *= b;
  }
  return kalman_loglik(d, p.x0, p.mu, a, q, p.r);
}

struct Gaussian {
  double mean = 0.0, sd = 0.0;
};

/// Posterior of a scalar whose log-likelihood is exactly quadratic, under a normal prior.
template <class F>
Gaussian quadratic_posterior(F loglik, double prior_mean, double prior_sd) {
  double h = 0.5;
  double l0 = loglik(0.0), lp = loglik(h), lm = loglik(-h);
  double curvature = (lp - 2.0 * l0 + lm) / (h * h);  // -precision of the likelihood
  double slope = (lp - lm) / (2.0 * h);
  double prec = -curvature + 1.0 / (prior_sd * prior_sd);
  double mean = (slope + prior_mean / (prior_sd * prior_sd)) / prec;
  return {mean, 1.0 / std::sqrt(prec)};
}

struct CliResult {
  int status = -1;
  std::string out, err;
};

/// Run the ssm binary through the shell with `input` on stdin.
inline CliResult run_cli(const std::string& args, const std::string& input = "") {
  namespace fs = std::filesystem;
  static int counter = 0;
  fs::path dir = fs::temp_directory_path() / ("ssm_cli_test_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  std::string tag = std::to_string(counter++);
  fs::path in = dir / ("in" + tag), out = dir / ("out" + tag), err = dir / ("err" + tag);
  std::ofstream(in) << input;
  std::string cmd = std::string(SSM_BINARY) + " " + args + " < " + in.string() + " > " + out.string() + " 2> " +
                    err.string();
  int rc = std::system(cmd.c_str());
  CliResult r;
  r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  r.out = read_text(out.string());
  r.err = read_text(err.string());
  fs::remove(in);
  fs::remove(out);
  fs::remove(err);
  return r;
}

}  // namespace testing

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "ssm/filters.hpp"
#include "ssm/model.hpp"

namespace ssm {

struct NelderMeadOptions {
  std::size_t max_iter = 2000;
  double xtol = 1e-8;   // stop when every vertex is this close to the best (infinity norm)
  double ftol = 1e-12;  // or the value spread is below ftol * max(1, |best|) within sqrt(xtol)
  double step = 0.1;    // initial displacement along each coordinate
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double value = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> best_trace;  // best value after each iteration
};

/// Maximises `objective` (non-finite values count as -inf). Coefficients
/// alpha=1, gamma=2, rho=-1/2, sigma=1/2.
NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& objective, const Eigen::VectorXd& x0,
                             const NelderMeadOptions& opts = {});

struct MifOptions {
  std::size_t iterations = 30;
  std::size_t particles = 500;
  double cooling = 0.975;     // a
  double rejuvenation = 2.0;  // b
  std::size_t lag = 0;        // 0 = round(0.75 n)
  Formalism formalism = Formalism::Psr;
  double dt = 0.0;
  double t0 = 0.0;
  std::uint64_t seed = 0;
  NoiseOptions noise{};
};

struct MifResult {
  ParamVector theta;                     // natural scale, final iterate
  std::vector<Eigen::VectorXd> iterates;  // transformed free parameters, theta^(1)..theta^(M+1)
  std::vector<bool> failed;
  std::vector<double> log_likelihood;  // perturbed-filter estimate per iteration
};

/// Iterated filtering with the prior folded into the particle weights.
/// `perturbation_sd` is indexed like ParameterSpace::indices() (transformed scale);
/// free initial-condition parameters are smoothed at the fixed lag instead of
/// being updated by the parameter rule.
MifResult mif(const Engine& engine, const ParameterSpace& space, const ParamVector& theta0, const DataSet& data,
              const Eigen::VectorXd& perturbation_sd, const MifOptions& opts);

}  // namespace ssm

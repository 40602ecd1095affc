#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "ssm/filters.hpp"
#include "ssm/mcmc.hpp"
#include "ssm/model.hpp"
#include "ssm/observe.hpp"
#include "ssm/optimize.hpp"
#include "ssm/simulate.hpp"
#include "ssm/theta.hpp"

namespace ssm {

/// Everything a pipeline stage needs besides the theta document.
/// Not copyable: the parameter space points into the engine's model.
struct Problem {
  Problem(ModelSpec model, DataSet data, double dt = 0.0, double t0 = 0.0);
  Problem(const Problem&) = delete;
  Problem& operator=(const Problem&) = delete;

  Engine engine;
  DataSet data;
  ParameterSpace space;
  double dt;  // integration step; default a tenth of the smallest observation gap
  double t0;
  NoiseOptions noise{};

  const ModelSpec& model() const { return engine.model(); }
};

struct StageOptions {
  std::size_t iterations = 1000;
  std::size_t particles = 500;
  std::uint64_t seed = 0;
  Formalism formalism = Formalism::Psr;
  bool timestamp = false;
  // simplex
  double simplex_step = 0.1;
  double simplex_tol = 1e-8;
  // mcmc
  double burn_fraction = 0.1;
  std::optional<bool> adapt;  // unset: stage default
  double cooling = 0.999;
  double default_sd = 0.1;  // proposal / perturbation sd when the document has none
  std::size_t thin = 10;    // path output
  // mif
  double mif_cooling = 0.975;
  double mif_rejuvenation = 2.0;
  std::size_t mif_lag = 0;
};

/// Log-likelihoods that map domain and numerical failures to -inf.
double safe_ode_log_likelihood(const Problem& p, const ParamVector& theta);
double safe_ekf_log_likelihood(const Problem& p, const ParamVector& theta);
double safe_smc_log_likelihood(const Problem& p, const ParamVector& theta, std::size_t particles, Formalism f,
                               std::uint64_t seed, SmcResult* out = nullptr);

ThetaDocument run_smc(const Problem& p, const ThetaDocument& in, const StageOptions& opts, SmcResult* out = nullptr);
ThetaDocument run_kalman(const Problem& p, const ThetaDocument& in, const StageOptions& opts,
                         EkfResult* out = nullptr);

/// Nelder-Mead on log-likelihood + log-prior; `kalman` selects the EKF objective over the ODE one.
ThetaDocument run_simplex(const Problem& p, const ThetaDocument& in, const StageOptions& opts, bool kalman,
                          NelderMeadResult* out = nullptr);

ThetaDocument run_mif(const Problem& p, const ThetaDocument& in, const StageOptions& opts, MifResult* out = nullptr);

ThetaDocument run_kmcmc(const Problem& p, const ThetaDocument& in, const StageOptions& opts, Trace* trace = nullptr);

/// `paths`, when given, receives the incumbent sampled path every `opts.thin` iterations.
ThetaDocument run_pmcmc(const Problem& p, const ThetaDocument& in, const StageOptions& opts, Trace* trace = nullptr,
                        std::ostream* paths = nullptr);

}  // namespace ssm

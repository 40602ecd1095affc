#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ssm/observe.hpp"
#include "ssm/simulate.hpp"

namespace ssm {

/// Systematic resampling of normalised weights with a single uniform u in [0, 1).
std::vector<std::size_t> systematic_resample(std::span<const double> weights, std::size_t n, double u);
std::vector<std::size_t> systematic_resample(std::span<const double> weights, Rng& rng);

/// log(sum(exp(v))) without overflow; -inf when every entry is -inf.
double log_sum_exp(std::span<const double> v);

/// Default integration step: a tenth of the smallest gap between observations.
double default_dt(const DataSet& data);

struct SmcOptions {
  std::size_t particles = 512;
  Formalism formalism = Formalism::Psr;
  double dt = 0.0;  // 0 = default_dt(data)
  double t0 = 0.0;
  std::uint64_t seed = 0;
  NoiseOptions noise{};
  // Resample when ESS < threshold * J. 1 resamples at every observation.
  double resample_threshold = 1.0;
  bool keep_path = true;
  bool keep_summaries = false;
};

struct SmcResult {
  double log_likelihood = 0.0;
  std::vector<StateVector> path;              // x_0, x_1..x_n, sampled by ancestral tracing
  std::vector<Eigen::VectorXd> filtered_mean;  // weighted mean after each assimilation
  std::vector<double> ess;
  std::size_t clamp_events = 0;
  bool degenerate = false;
};

SmcResult smc_filter(const Engine& engine, const ParamVector& theta, const DataSet& data, const SmcOptions& opts);

struct EkfOptions {
  double dt = 0.0;
  double t0 = 0.0;
  NoiseOptions noise{};
  bool keep_beliefs = false;
};

struct EkfResult {
  double log_likelihood = 0.0;
  std::vector<Eigen::VectorXd> means;  // after each assimilation, before the accumulator reset
  std::vector<Eigen::MatrixXd> covariances;
};

/// Continuous-discrete EKF on the diffusion approximation.
EkfResult ekf_filter(const Engine& engine, const ParamVector& theta, const DataSet& data, const EkfOptions& opts);

/// Log-likelihood of the data along the deterministic (RK4) trajectory.
/// Throws DomainError when the trajectory leaves the domain.
double ode_log_likelihood(const Engine& engine, const ParamVector& theta, const DataSet& data, double dt, double t0);

}  // namespace ssm

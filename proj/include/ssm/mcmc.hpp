#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ssm {

/// Target evaluated at a transformed point. The chain targets
/// log_likelihood + log_prior + log_jacobian.
struct TargetValue {
  double log_likelihood = 0.0;
  double log_prior = 0.0;
  double log_jacobian = 0.0;

  double total() const { return log_likelihood + log_prior + log_jacobian; }
};

using LogTarget = std::function<TargetValue(const Eigen::VectorXd& u)>;

struct TraceRow {
  std::size_t iteration = 0;
  Eigen::VectorXd u;      // transformed
  Eigen::VectorXd theta;  // natural scale
  double log_likelihood = 0.0;
  double log_prior = 0.0;
  bool accepted = false;
};

struct Trace {
  std::vector<std::string> names;
  std::vector<TraceRow> rows;

  void write_csv(std::ostream& out) const;
  static Trace read_csv(std::istream& in);
};

struct RwmOptions {
  std::size_t iterations = 1000;
  bool adapt = true;
  std::size_t adapt_until = std::numeric_limits<std::size_t>::max();  // adaptation stops at this iteration
  double cooling = 0.999;       // a in lambda <- lambda * exp(a^i (rate - target))
  double mixture = 0.05;        // probability of proposing from Sigma0
  std::size_t window = 100;     // acceptance-rate window
  double target_rate = 0.234;
  double lambda0 = 1.0;
  std::size_t empirical_floor = 0;  // iterations before Sigma_emp is used; 0 = 10 d
  std::uint64_t seed = 0;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> to_natural;  // defaults to identity
  std::function<void(std::size_t iteration, bool accepted)> after_step;
};

struct RwmResult {
  Trace trace;
  double final_lambda = 1.0;
  Eigen::MatrixXd empirical_covariance;  // over all states visited
};

/// Adaptive random-walk Metropolis in transformed space. The likelihood of
/// the incumbent is stored and never re-evaluated.
RwmResult rwm_chain(const LogTarget& target, const Eigen::VectorXd& u0, const Eigen::MatrixXd& sigma0,
                    const RwmOptions& opts);

/// Effective sample size with the lag sum truncated before the first
/// autocorrelation below 0.05.
double ess(std::span<const double> samples);

struct ChainSummary {
  std::size_t burn_in = 0;
  double acceptance_rate = 0.0;
  Eigen::VectorXd mean_u, mean_theta;
  Eigen::MatrixXd covariance_u;
  std::vector<double> ess;
};

ChainSummary summarize(const Trace& trace, double burn_fraction = 0.1);

}  // namespace ssm

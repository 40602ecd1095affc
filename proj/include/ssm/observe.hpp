#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ssm/simulate.hpp"

namespace ssm {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Datum {
  std::size_t stream = 0;       // index into ModelSpec::observations
  std::optional<double> value;  // empty = missing
};

/// All data sharing one timestamp.
struct ObservationTime {
  double t = 0.0;
  std::vector<Datum> data;
};

struct DataSet {
  std::vector<ObservationTime> times;

  std::size_t size() const { return times.size(); }
  bool empty() const { return times.empty(); }
  /// Smallest positive gap between consecutive observation times (0 if fewer than two).
  double min_interval() const;
  double last_time() const { return times.empty() ? 0.0 : times.back().t; }
};

/// Parse `time,stream,value` CSV text and validate it against the model.
DataSet parse_data(const std::string& csv_text, const ModelSpec& model);
DataSet load_data(const std::string& path, const ModelSpec& model);

/// log p(y | x, theta) for one stream; `binding` must hold the bound state and parameters.
double log_density(const Engine& engine, std::size_t stream, double y, std::span<const double> binding);

/// Draw y ~ p(y | x, theta); counts for the discrete families.
double sample_observation(const Engine& engine, std::size_t stream, std::span<const double> binding, Rng& rng);

/// Closed-form densities, exposed for tests.
double poisson_log_pmf(double y, double mean);
double discretized_normal_log_pmf(double y, double mean, double variance);
double normal_log_pdf(double y, double mean, double variance);
double binomial_log_pmf(double y, double trials, double p);

struct LinearizedObservation {
  double h = 0.0;
  Eigen::VectorXd gradient;
  double variance = 0.0;
};

/// h(x), its gradient with respect to x and the observation variance R at h.
LinearizedObservation linearized_observation(const Engine& engine, std::size_t stream, const StateVector& s,
                                             const ParamVector& theta);

/// Sum of log densities of the non-missing data at one time.
double log_density_at(const Engine& engine, const ObservationTime& obs, std::span<const double> binding);

}  // namespace ssm

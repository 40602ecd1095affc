#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "ssm/stages.hpp"

namespace ssm {

inline constexpr std::array<double, 5> kForecastLevels{0.025, 0.25, 0.5, 0.75, 0.975};

struct ForecastOptions {
  double horizon = 0.0;
  std::size_t trajectories = 100;
  Formalism formalism = Formalism::Psr;
  std::uint64_t seed = 0;
  std::size_t particles = 200;  // conditioning filter for stochastic formalisms
  double step = 0.0;            // output spacing; 0 = smallest observation gap (or 1)
};

struct ForecastRow {
  double t = 0.0;
  std::size_t stream = 0;
  std::array<double, 5> q{};
};

struct ForecastSample {
  std::size_t trajectory = 0;
  double t = 0.0;
  std::vector<double> values;  // one per stream
};

struct ForecastResult {
  std::vector<ForecastRow> quantiles;
  std::vector<ForecastSample> raw;
};

/// Linear-interpolation sample quantile (type 7); sorts `v` in place.
double quantile(std::vector<double>& v, double level);

/// Simulate past the last observation. Each trajectory draws its parameters
/// uniformly from `draws` and, for stochastic formalisms, starts from a state
/// sampled by a particle filter conditioned on the data.
ForecastResult forecast(const Problem& p, std::span<const ParamVector> draws, const ForecastOptions& opts);

void write_forecast_csv(std::ostream& out, const Problem& p, const ForecastResult& r);
void write_forecast_raw_csv(std::ostream& out, const Problem& p, const ForecastResult& r);

}  // namespace ssm

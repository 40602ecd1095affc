#include "ssm/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace ssm {

double quantile(std::vector<double>& v, double level) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  double h = (static_cast<double>(v.size()) - 1.0) * level;
  auto lo = static_cast<std::size_t>(std::floor(h));
  std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

ForecastResult forecast(const Problem& p, std::span<const ParamVector> draws, const ForecastOptions& opts) {
  if (draws.empty()) throw std::invalid_argument("forecast needs at least one parameter set");
  if (opts.trajectories == 0) throw std::invalid_argument("forecast needs at least one trajectory");
  const auto& e = p.engine;
  const std::size_t S = e.model().observations.size();
  double step = opts.step > 0.0 ? opts.step : p.data.min_interval();
  if (!(step > 0.0)) step = 1.0;
  const double t_start = p.data.empty() ? p.t0 : p.data.last_time();
  const auto n_out = static_cast<std::size_t>(std::max(0.0, std::ceil(opts.horizon / step - 1e-9)));

  ForecastResult res;
  std::vector<std::vector<std::vector<double>>> samples(n_out, std::vector<std::vector<double>>(S));
  Workspace ws;
  for (std::size_t k = 0; k < opts.trajectories; ++k) {
    Rng pick = Rng::stream(opts.seed, {kTagForecast, k, 0});
    const ParamVector& theta =
        draws[std::min(draws.size() - 1, static_cast<std::size_t>(pick.uniform() * static_cast<double>(draws.size())))];

    StateVector s;
    if (p.data.empty()) {
      s = e.initial_state(theta, p.t0);
    } else if (opts.formalism == Formalism::Ode) {
      s = e.initial_state(theta, p.t0);
      Rng unused(0);
      for (const auto& obs : p.data.times) {
        propagate(e, s, theta, obs.t, p.dt, Formalism::Ode, unused, p.noise, ws);
        e.reset_accumulators(s);
      }
    } else {
      SmcOptions so;
      so.particles = opts.particles;
      so.formalism = opts.formalism;
      so.dt = p.dt;
      so.t0 = p.t0;
      so.seed = Rng::stream(opts.seed, {kTagForecast, k, 1})();
      so.noise = p.noise;
      SmcResult r = smc_filter(e, theta, p.data, so);
      if (r.degenerate || r.path.empty())
        throw NumericalError("forecast: conditioning filter degenerated for trajectory " + std::to_string(k));
      s = r.path.back();
      e.reset_accumulators(s);
    }

    Rng rng = Rng::stream(opts.seed, {kTagForecast, k, 2});
    for (std::size_t i = 0; i < n_out; ++i) {
      double t = t_start + step * static_cast<double>(i + 1);
      propagate(e, s, theta, t, p.dt, opts.formalism, rng, p.noise, ws);
      e.bind_state(s.x, s.t, ws.binding);
      ForecastSample raw{k, t, std::vector<double>(S)};
      for (std::size_t q = 0; q < S; ++q) {
        double h = e.observed_value(q, ws.binding);
        samples[i][q].push_back(h);
        raw.values[q] = h;
      }
      res.raw.push_back(std::move(raw));
      e.reset_accumulators(s);
    }
  }
  for (std::size_t i = 0; i < n_out; ++i)
    for (std::size_t q = 0; q < S; ++q) {
      ForecastRow row;
      row.t = t_start + step * static_cast<double>(i + 1);
      row.stream = q;
      for (std::size_t l = 0; l < kForecastLevels.size(); ++l) row.q[l] = quantile(samples[i][q], kForecastLevels[l]);
      res.quantiles.push_back(row);
    }
  return res;
}

void write_forecast_csv(std::ostream& out, const Problem& p, const ForecastResult& r) {
  out << "time,stream,q025,q25,q50,q75,q975\n";
  for (const auto& row : r.quantiles) {
    out << row.t << ',' << p.model().observations[row.stream].name;
    for (double v : row.q) out << ',' << v;
    out << '\n';
  }
}

void write_forecast_raw_csv(std::ostream& out, const Problem& p, const ForecastResult& r) {
  out << "trajectory,time";
  for (const auto& o : p.model().observations) out << ',' << o.name;
  out << '\n';
  for (const auto& s : r.raw) {
    out << s.trajectory << ',' << s.t;
    for (double v : s.values) out << ',' << v;
    out << '\n';
  }
}

}  // namespace ssm

#include "ssm/filters.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <tbb/blocked_range.h>
#include <tbb/enumerable_thread_specific.h>
#include <tbb/parallel_for.h>

namespace ssm {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

std::vector<std::size_t> systematic_resample(std::span<const double> weights, std::size_t n, double u) {
  std::vector<std::size_t> out(n);
  const double step = 1.0 / static_cast<double>(n);
  double target = u * step;
  double cum = weights.empty() ? 0.0 : weights[0];
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (target >= cum && j + 1 < weights.size()) cum += weights[++j];
    out[i] = j;
    target += step;
  }
  return out;
}

std::vector<std::size_t> systematic_resample(std::span<const double> weights, Rng& rng) {
  return systematic_resample(weights, weights.size(), rng.uniform());
}

double log_sum_exp(std::span<const double> v) {
  double mx = kNegInf;
  for (double x : v) mx = std::max(mx, x);
  if (mx == kNegInf) return kNegInf;
  if (mx == std::numeric_limits<double>::infinity()) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

double default_dt(const DataSet& data) {
  double gap = data.min_interval();
  return gap > 0.0 ? gap / 10.0 : 0.1;
}

// ---------------------------------------------------------------- SMC

SmcResult smc_filter(const Engine& engine, const ParamVector& theta, const DataSet& data, const SmcOptions& opts) {
  if (opts.particles < 1) throw std::invalid_argument("at least one particle is required");
  const std::size_t J = opts.particles;
  const std::size_t D = engine.dim();
  const std::size_t n = data.size();
  const double dt = opts.dt > 0.0 ? opts.dt : default_dt(data);

  SmcResult res;
  StateVector x0 = engine.initial_state(theta, opts.t0);

  std::vector<double> particles(J * D), next(J * D);
  for (std::size_t j = 0; j < J; ++j) std::copy(x0.x.begin(), x0.x.end(), particles.begin() + j * D);

  std::vector<std::vector<double>> history;        // post-propagation swarm at each time
  std::vector<std::vector<std::size_t>> ancestors;  // ancestors[i][j]: index into history[i-1] (or x0)
  if (opts.keep_path) {
    history.reserve(n);
    ancestors.reserve(n);
  }

  std::vector<double> logw(J, -std::log(static_cast<double>(J)));
  std::vector<double> log_alpha(J), w(J);
  std::vector<std::size_t> parent(J);
  for (std::size_t j = 0; j < J; ++j) parent[j] = j;
  std::vector<std::size_t> clamps(J, 0);

  struct Local {
    Workspace ws;
    StateVector s;
  };
  tbb::enumerable_thread_specific<Local> locals;

  double t_prev = opts.t0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& obs = data.times[i];
    tbb::parallel_for(tbb::blocked_range<std::size_t>(0, J), [&](const tbb::blocked_range<std::size_t>& r) {
      Local& loc = locals.local();
      for (std::size_t j = r.begin(); j != r.end(); ++j) {
        loc.s.x.assign(particles.begin() + j * D, particles.begin() + (j + 1) * D);
        loc.s.t = t_prev;
        Rng rng = Rng::stream(opts.seed, {kTagParticleStep, i, j});
        StepDiagnostics diag;
        propagate(engine, loc.s, theta, obs.t, dt, opts.formalism, rng, opts.noise, loc.ws, &diag);
        clamps[j] += diag.clamp_events;
        for (std::size_t k = 0; k < D; ++k)
          if (!std::isfinite(loc.s.x[k]))
            throw NumericalError("particle " + std::to_string(j) + " has a non-finite state at t=" +
                                 std::to_string(obs.t));
        engine.bind_state(loc.s.x, loc.s.t, loc.ws.binding);
        log_alpha[j] = log_density_at(engine, obs, loc.ws.binding);
        std::copy(loc.s.x.begin(), loc.s.x.end(), next.begin() + j * D);
      }
    });
    t_prev = obs.t;
    if (opts.keep_path) {
      history.push_back(next);
      ancestors.push_back(parent);
    }

    for (std::size_t j = 0; j < J; ++j) log_alpha[j] += logw[j];
    double inc = log_sum_exp(log_alpha);
    if (inc == kNegInf || std::isnan(inc)) {
      res.log_likelihood = kNegInf;
      res.degenerate = true;
      return res;
    }
    res.log_likelihood += inc;
    double sum_sq = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      w[j] = std::exp(log_alpha[j] - inc);
      sum_sq += w[j] * w[j];
    }
    double ess = 1.0 / sum_sq;
    if (opts.keep_summaries) {
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(D));
      for (std::size_t j = 0; j < J; ++j)
        mean += w[j] * Eigen::Map<const Eigen::VectorXd>(next.data() + j * D, static_cast<Eigen::Index>(D));
      res.filtered_mean.push_back(mean);
      res.ess.push_back(ess);
    }

    bool resample = ess < opts.resample_threshold * static_cast<double>(J) || opts.resample_threshold >= 1.0;
    if (resample) {
      Rng rng = Rng::stream(opts.seed, {kTagResample, i});
      auto idx = systematic_resample(w, rng);
      for (std::size_t j = 0; j < J; ++j) {
        std::copy(next.begin() + idx[j] * D, next.begin() + (idx[j] + 1) * D, particles.begin() + j * D);
        parent[j] = idx[j];
      }
      std::fill(logw.begin(), logw.end(), -std::log(static_cast<double>(J)));
    } else {
      particles.swap(next);
      for (std::size_t j = 0; j < J; ++j) {
        parent[j] = j;
        logw[j] = log_alpha[j] - inc;
      }
    }
    for (std::size_t j = 0; j < J; ++j)
      std::fill(particles.begin() + j * D + engine.accumulator_offset(), particles.begin() + (j + 1) * D, 0.0);
  }
  for (auto c : clamps) res.clamp_events += c;

  if (opts.keep_path) {
    res.path.resize(n + 1);
    res.path[0] = x0;
    if (n > 0) {
      // weights over history[n-1] are the final normalised weights w
      Rng rng = Rng::stream(opts.seed, {kTagPathSample});
      double u = rng.uniform();
      std::size_t k = J - 1;
      double cum = 0.0;
      for (std::size_t j = 0; j < J; ++j) {
        cum += w[j];
        if (u < cum) {
          k = j;
          break;
        }
      }
      for (std::size_t i = n; i-- > 0;) {
        const auto& h = history[i];
        res.path[i + 1].x.assign(h.begin() + k * D, h.begin() + (k + 1) * D);
        res.path[i + 1].t = data.times[i].t;
        k = ancestors[i][k];
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------- EKF

namespace {

void project_psd(Eigen::MatrixXd& C) {
  C = 0.5 * (C + C.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  const auto& ev = es.eigenvalues();
  if (ev.size() == 0 || ev.minCoeff() >= 0.0) return;
  Eigen::VectorXd clipped = ev.cwiseMax(0.0);
  C = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
  C = 0.5 * (C + C.transpose());
}

struct Moments {
  Eigen::VectorXd m;
  Eigen::MatrixXd C;
};

void moment_derivative(const Engine& engine, const ParamVector& theta, NoiseOptions noise, double t,
                       const Eigen::VectorXd& m, const Eigen::MatrixXd& C, Eigen::VectorXd& dm, Eigen::MatrixXd& dC) {
  StateVector s{std::vector<double>(m.data(), m.data() + m.size()), t};
  for (std::size_t i = 0; i < engine.n_compartments(); ++i) s.x[i] = std::max(s.x[i], 0.0);
  auto f = engine.drift(s, theta);
  dm = Eigen::Map<Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
  Eigen::MatrixXd Jm = engine.drift_jacobian(s, theta);
  dC = Jm * C + C * Jm.transpose() + engine.diffusion_covariance(s, theta, noise);
}

void rk4_moments(const Engine& engine, const ParamVector& theta, NoiseOptions noise, double t, double h, Moments& b) {
  Eigen::VectorXd k1m, k2m, k3m, k4m;
  Eigen::MatrixXd k1c, k2c, k3c, k4c;
  moment_derivative(engine, theta, noise, t, b.m, b.C, k1m, k1c);
  moment_derivative(engine, theta, noise, t + 0.5 * h, b.m + 0.5 * h * k1m, b.C + 0.5 * h * k1c, k2m, k2c);
  moment_derivative(engine, theta, noise, t + 0.5 * h, b.m + 0.5 * h * k2m, b.C + 0.5 * h * k2c, k3m, k3c);
  moment_derivative(engine, theta, noise, t + h, b.m + h * k3m, b.C + h * k3c, k4m, k4c);
  b.m += h / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
  b.C += h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c);
  b.C = 0.5 * (b.C + b.C.transpose());
  for (std::size_t i = 0; i < engine.n_compartments(); ++i) {
    auto ii = static_cast<Eigen::Index>(i);
    if (b.m(ii) < 0.0) b.m(ii) = 0.0;
  }
  for (Eigen::Index i = 0; i < b.m.size(); ++i)
    if (!std::isfinite(b.m(i)))
      throw NumericalError("EKF mean became non-finite at t=" + std::to_string(t + h));
}

}  // namespace

EkfResult ekf_filter(const Engine& engine, const ParamVector& theta, const DataSet& data, const EkfOptions& opts) {
  const double dt = opts.dt > 0.0 ? opts.dt : default_dt(data);
  const auto D = static_cast<Eigen::Index>(engine.dim());
  StateVector x0 = engine.initial_state(theta, opts.t0);
  Moments b{Eigen::Map<Eigen::VectorXd>(x0.x.data(), D), Eigen::MatrixXd::Zero(D, D)};
  EkfResult res;
  double t = opts.t0;
  for (const auto& obs : data.times) {
    double span = obs.t - t;
    if (span > 0.0) {
      auto steps = static_cast<std::size_t>(std::max(1.0, std::ceil(span / dt - 1e-9)));
      double h = span / static_cast<double>(steps);
      for (std::size_t k = 0; k < steps; ++k) rk4_moments(engine, theta, opts.noise, t + h * static_cast<double>(k), h, b);
    }
    t = obs.t;
    for (const auto& d : obs.data) {
      if (!d.value) continue;
      StateVector s{std::vector<double>(b.m.data(), b.m.data() + D), t};
      auto lin = linearized_observation(engine, d.stream, s, theta);
      double S = lin.gradient.dot(b.C * lin.gradient) + lin.variance;
      if (!(S > 0.0) || !std::isfinite(S))
        throw NumericalError("EKF innovation variance " + std::to_string(S) + " is not positive for stream '" +
                             engine.model().observations[d.stream].name + "' at t=" + std::to_string(t));
      double e = *d.value - lin.h;
      Eigen::VectorXd K = b.C * lin.gradient / S;
      b.m += K * e;
      b.C -= K * S * K.transpose();
      project_psd(b.C);
      for (std::size_t i = 0; i < engine.n_compartments(); ++i) {
        auto ii = static_cast<Eigen::Index>(i);
        if (b.m(ii) < 0.0) b.m(ii) = 0.0;
      }
      res.log_likelihood += -0.5 * (std::log(2.0 * std::numbers::pi * S) + e * e / S);
    }
    if (opts.keep_beliefs) {
      res.means.push_back(b.m);
      res.covariances.push_back(b.C);
    }
    auto off = static_cast<Eigen::Index>(engine.accumulator_offset());
    auto na = static_cast<Eigen::Index>(engine.n_accumulators());
    if (na > 0) {
      b.m.segment(off, na).setZero();
      b.C.middleRows(off, na).setZero();
      b.C.middleCols(off, na).setZero();
    }
  }
  return res;
}

double ode_log_likelihood(const Engine& engine, const ParamVector& theta, const DataSet& data, double dt, double t0) {
  if (!(dt > 0.0)) dt = default_dt(data);
  StateVector s = engine.initial_state(theta, t0);
  Workspace ws;
  Rng unused(0);
  double total = 0.0;
  for (const auto& obs : data.times) {
    propagate(engine, s, theta, obs.t, dt, Formalism::Ode, unused, {}, ws);
    engine.bind_state(s.x, s.t, ws.binding);
    total += log_density_at(engine, obs, ws.binding);
    if (total == kNegInf) return total;
    engine.reset_accumulators(s);
  }
  return total;
}

}  // namespace ssm

#include "ssm/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <tbb/blocked_range.h>
#include <tbb/enumerable_thread_specific.h>
#include <tbb/parallel_for.h>

namespace ssm {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double finite_or_neg_inf(double v) { return std::isfinite(v) ? v : kNegInf; }
}  // namespace

NelderMeadResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& objective, const Eigen::VectorXd& x0,
                             const NelderMeadOptions& opts) {
  constexpr double alpha = 1.0, gamma = 2.0, rho = -0.5, sigma = 0.5;
  const Eigen::Index d = x0.size();
  std::vector<Eigen::VectorXd> v(static_cast<std::size_t>(d + 1), x0);
  std::vector<double> f(static_cast<std::size_t>(d + 1));
  for (Eigen::Index i = 0; i < d; ++i) v[static_cast<std::size_t>(i + 1)](i) += opts.step;
  bool any_finite = false;
  for (std::size_t i = 0; i < v.size(); ++i) {
    f[i] = finite_or_neg_inf(objective(v[i]));
    any_finite = any_finite || f[i] > kNegInf;
  }
  if (!any_finite) throw std::runtime_error("objective is not finite at any initial simplex vertex");

  NelderMeadResult res;
  std::vector<std::size_t> order(v.size());
  auto sort_vertices = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a] > f[b]; });
    std::vector<Eigen::VectorXd> nv;
    std::vector<double> nf;
    for (auto i : order) {
      nv.push_back(v[i]);
      nf.push_back(f[i]);
    }
    v.swap(nv);
    f.swap(nf);
  };

  const auto worst = static_cast<std::size_t>(d);
  while (true) {
    sort_vertices();
    double spread_x = 0.0;
    for (std::size_t i = 1; i < v.size(); ++i) spread_x = std::max(spread_x, (v[i] - v[0]).cwiseAbs().maxCoeff());
    double spread_f = f[0] - f[worst];
    // a flat value spread alone can be a tie across a still-wide simplex
    bool flat = std::isfinite(spread_f) && spread_f <= opts.ftol * std::max(1.0, std::abs(f[0]));
    if (d == 0 || spread_x <= opts.xtol || (flat && spread_x <= std::sqrt(opts.xtol))) {
      res.converged = true;
      break;
    }
    if (res.iterations >= opts.max_iter) break;
    ++res.iterations;

    Eigen::VectorXd c = Eigen::VectorXd::Zero(d);
    for (std::size_t i = 0; i < worst; ++i) c += v[i];
    c /= static_cast<double>(d);

    Eigen::VectorXd xr = c + alpha * (c - v[worst]);
    double fr = finite_or_neg_inf(objective(xr));
    if (fr > f[0]) {
      Eigen::VectorXd xe = c + gamma * (c - v[worst]);
      double fe = finite_or_neg_inf(objective(xe));
      if (fe >= fr) {
        v[worst] = xe;
        f[worst] = fe;
      } else {
        v[worst] = xr;
        f[worst] = fr;
      }
    } else if (fr >= f[worst - 1]) {
      v[worst] = xr;
      f[worst] = fr;
    } else {
      Eigen::VectorXd xc = c + rho * (c - v[worst]);
      double fc = finite_or_neg_inf(objective(xc));
      if (fc >= f[worst]) {
        v[worst] = xc;
        f[worst] = fc;
      } else {
        for (std::size_t i = 1; i < v.size(); ++i) {
          v[i] = v[0] + sigma * (v[i] - v[0]);
          f[i] = finite_or_neg_inf(objective(v[i]));
        }
      }
    }
    res.best_trace.push_back(*std::max_element(f.begin(), f.end()));
  }
  res.x = v[0];
  res.value = f[0];
  return res;
}

// ---------------------------------------------------------------- MIF

MifResult mif(const Engine& engine, const ParameterSpace& space, const ParamVector& theta0, const DataSet& data,
              const Eigen::VectorXd& perturbation_sd, const MifOptions& opts) {
  if (opts.particles < 50) throw std::invalid_argument("mif needs at least 50 particles");
  if (!(opts.cooling > 0.0 && opts.cooling < 1.0)) throw std::invalid_argument("mif cooling must lie in (0, 1)");
  if (opts.formalism == Formalism::Ode) throw std::invalid_argument("mif needs a stochastic formalism (sde, psr or jump)");
  const std::size_t J = opts.particles;
  const std::size_t n = data.size();
  const std::size_t D = engine.dim();
  const auto q = static_cast<Eigen::Index>(space.dimension());
  if (perturbation_sd.size() != q) throw std::invalid_argument("perturbation sd has the wrong dimension");
  const double dt = opts.dt > 0.0 ? opts.dt : default_dt(data);
  std::size_t lag = opts.lag > 0 ? opts.lag : static_cast<std::size_t>(std::llround(0.75 * static_cast<double>(n)));
  lag = std::clamp<std::size_t>(lag, n > 0 ? 1 : 0, n);

  // split free coordinates into parameters proper and initial conditions
  std::vector<Eigen::Index> par, ic;
  for (Eigen::Index k = 0; k < q; ++k) {
    const auto& def = engine.model().parameters[space.indices()[static_cast<std::size_t>(k)]];
    (def.role == ParamRole::InitialCondition ? ic : par).push_back(k);
  }
  const auto dp = static_cast<Eigen::Index>(par.size());

  MifResult res;
  Eigen::VectorXd u = space.to_transformed(theta0);
  res.iterates.push_back(u);
  std::size_t cooled = 0;  // successful iterations so far

  std::vector<Eigen::VectorXd> cloud(J), next_cloud(J);
  std::vector<double> particles(J * D), next(J * D), logw(J), w(J);
  std::vector<ParamVector> naturals(J);
  struct Local {
    Workspace ws;
    StateVector s;
  };
  tbb::enumerable_thread_specific<Local> locals;

  for (std::size_t m = 0; m < opts.iterations; ++m) {
    const double cool = std::pow(opts.cooling, static_cast<double>(cooled));
    Eigen::VectorXd sd0 = perturbation_sd;
    for (auto k : par) sd0(k) *= std::sqrt(opts.rejuvenation * cool);
    for (auto k : ic) sd0(k) *= std::sqrt(cool);

    {
      Rng rng = Rng::stream(opts.seed, {kTagMif, m, 0});
      for (std::size_t j = 0; j < J; ++j) {
        cloud[j] = u;
        for (Eigen::Index k = 0; k < q; ++k)
          if (sd0(k) > 0.0) cloud[j](k) += sd0(k) * rng.normal();
      }
    }
    for (std::size_t j = 0; j < J; ++j) {
      naturals[j] = space.to_natural(cloud[j], theta0);
      StateVector x0 = engine.initial_state(naturals[j], opts.t0);
      std::copy(x0.x.begin(), x0.x.end(), particles.begin() + j * D);
    }
    Eigen::VectorXd theta_bar_prev(dp);
    for (Eigen::Index a = 0; a < dp; ++a) theta_bar_prev(a) = u(par[static_cast<std::size_t>(a)]);
    Eigen::VectorXd u_ic_smoothed = u;
    Eigen::MatrixXd V1;
    Eigen::VectorXd step_sum = Eigen::VectorXd::Zero(dp);
    bool failed = false;
    double loglik = 0.0;
    double t_prev = opts.t0;

    for (std::size_t i = 0; i < n; ++i) {
      const auto& obs = data.times[i];
      tbb::parallel_for(tbb::blocked_range<std::size_t>(0, J), [&](const tbb::blocked_range<std::size_t>& r) {
        Local& loc = locals.local();
        for (std::size_t j = r.begin(); j != r.end(); ++j) {
          loc.s.x.assign(particles.begin() + j * D, particles.begin() + (j + 1) * D);
          loc.s.t = t_prev;
          Rng rng = Rng::stream(opts.seed, {kTagMif, m, i + 1, j});
          propagate(engine, loc.s, naturals[j], obs.t, dt, opts.formalism, rng, opts.noise, loc.ws);
          engine.bind_parameters(naturals[j], loc.ws.binding);
          engine.bind_state(loc.s.x, loc.s.t, loc.ws.binding);
          double lw = log_density_at(engine, obs, loc.ws.binding);
          lw += space.log_prior(naturals[j]) / static_cast<double>(n);
          logw[j] = std::isnan(lw) ? kNegInf : lw;
          std::copy(loc.s.x.begin(), loc.s.x.end(), next.begin() + j * D);
        }
      });
      double lse = log_sum_exp(logw);
      if (lse == kNegInf || !std::isfinite(lse)) {
        failed = true;
        break;
      }
      loglik += lse - std::log(static_cast<double>(J));
      for (std::size_t j = 0; j < J; ++j) w[j] = std::exp(logw[j] - lse);
      Rng rrng = Rng::stream(opts.seed, {kTagMif, m, i + 1, J});
      auto idx = systematic_resample(w, rrng);

      Eigen::VectorXd theta_bar = Eigen::VectorXd::Zero(dp);
      for (std::size_t j = 0; j < J; ++j) {
        std::copy(next.begin() + idx[j] * D, next.begin() + (idx[j] + 1) * D, particles.begin() + j * D);
        std::fill(particles.begin() + j * D + engine.accumulator_offset(), particles.begin() + (j + 1) * D, 0.0);
        next_cloud[j] = cloud[idx[j]];
        for (Eigen::Index a = 0; a < dp; ++a) theta_bar(a) += next_cloud[j](par[static_cast<std::size_t>(a)]);
      }
      theta_bar /= static_cast<double>(J);

      if (i + 1 == lag) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(q);
        for (std::size_t j = 0; j < J; ++j) mean += next_cloud[j];
        mean /= static_cast<double>(J);
        for (auto k : ic) u_ic_smoothed(k) = mean(k);
      }

      // rejuvenate parameters proper
      double gap = obs.t - t_prev;
      Rng prng = Rng::stream(opts.seed, {kTagMif, m, i + 1, J + 1});
      for (std::size_t j = 0; j < J; ++j)
        for (auto k : par) {
          double s = perturbation_sd(k) * std::sqrt(cool * gap);
          if (s > 0.0) next_cloud[j](k) += s * prng.normal();
        }
      cloud.swap(next_cloud);
      for (std::size_t j = 0; j < J; ++j) naturals[j] = space.to_natural(cloud[j], theta0);

      Eigen::MatrixXd P(static_cast<Eigen::Index>(J), dp);
      for (std::size_t j = 0; j < J; ++j)
        for (Eigen::Index a = 0; a < dp; ++a)
          P(static_cast<Eigen::Index>(j), a) = cloud[j](par[static_cast<std::size_t>(a)]);
      Eigen::RowVectorXd pm = P.colwise().mean();
      Eigen::MatrixXd centered = P.rowwise() - pm;
      Eigen::MatrixXd V = centered.transpose() * centered / static_cast<double>(J > 1 ? J - 1 : 1);
      if (i == 0) V1 = V;
      if (dp > 0) step_sum += V.completeOrthogonalDecomposition().pseudoInverse() * (theta_bar - theta_bar_prev);
      theta_bar_prev = theta_bar;
      t_prev = obs.t;
    }

    res.failed.push_back(failed);
    res.log_likelihood.push_back(failed ? kNegInf : loglik);
    if (!failed) {
      Eigen::VectorXd un = u;
      if (dp > 0 && n > 0) {
        Eigen::VectorXd delta = V1 * step_sum;
        for (Eigen::Index a = 0; a < dp; ++a) un(par[static_cast<std::size_t>(a)]) += delta(a);
      }
      for (auto k : ic) un(k) = u_ic_smoothed(k);
      u = un;
      ++cooled;
    }
    res.iterates.push_back(u);
  }
  res.theta = space.to_natural(u, theta0);
  return res;
}

}  // namespace ssm

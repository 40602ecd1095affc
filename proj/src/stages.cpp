#include "ssm/stages.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

namespace ssm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::string utc_now() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void stamp(ThetaDocument& doc, const std::string& stage, const StageOptions& opts, std::size_t iterations) {
  ProvenanceRecord r{stage, opts.seed, iterations, std::nullopt};
  if (opts.timestamp) r.timestamp = utc_now();
  doc.add_provenance(r);
}

ThetaDocument with_values(const Problem& p, ThetaDocument doc, const ParamVector& theta) {
  for (std::size_t i = 0; i < theta.size(); ++i) doc.set_value(p.model().parameters[i].name, theta[i]);
  return doc;
}

std::vector<std::string> free_names(const Problem& p) { return p.space.names(); }

Eigen::MatrixXd initial_proposal(const Problem& p, const ThetaDocument& doc, const StageOptions& opts) {
  if (auto cov = doc.free_covariance(p.model())) return *cov;
  Eigen::VectorXd sd = doc.free_perturbation_sd(p.model(), opts.default_sd);
  return sd.array().square().matrix().asDiagonal();
}

std::uint64_t filter_seed(std::uint64_t seed, std::uint64_t evaluation) {
  return Rng::stream(seed, {kTagFilterSeed, evaluation})();
}

void write_path(std::ostream& out, const Problem& p, std::size_t iteration, const std::vector<StateVector>& path) {
  const auto& e = p.engine;
  for (const auto& s : path) {
    out << iteration << ',' << s.t;
    for (std::size_t i = 0; i < e.n_compartments(); ++i) out << ',' << s.x[i];
    for (std::size_t j = 0; j < e.n_diffusions(); ++j)
      out << ',' << e.diffusion_natural(j, s.x[e.diffusion_offset() + j]);
    for (std::size_t a = 0; a < e.n_accumulators(); ++a) out << ',' << s.x[e.accumulator_offset() + a];
    out << '\n';
  }
}

void write_path_header(std::ostream& out, const Problem& p) {
  out << "iteration,t";
  for (const auto& c : p.model().compartments) out << ',' << c;
  for (const auto& d : p.model().diffusions) out << ',' << d.name;
  for (const auto& a : p.model().accumulators) out << ',' << a;
  out << '\n';
}

}  // namespace

Problem::Problem(ModelSpec model, DataSet d, double dt_, double t0_)
    : engine(std::move(model)), data(std::move(d)), space(engine.model()), dt(dt_ > 0.0 ? dt_ : default_dt(data)),
      t0(t0_) {}

double safe_ode_log_likelihood(const Problem& p, const ParamVector& theta) {
  try {
    double v = ode_log_likelihood(p.engine, theta, p.data, p.dt, p.t0);
    return std::isnan(v) ? kNegInf : v;
  } catch (const DomainError&) {
    return kNegInf;
  } catch (const NumericalError&) {
    return kNegInf;
  } catch (const ModelError&) {
    return kNegInf;
  }
}

double safe_ekf_log_likelihood(const Problem& p, const ParamVector& theta) {
  try {
    EkfOptions o;
    o.dt = p.dt;
    o.t0 = p.t0;
    o.noise = p.noise;
    double v = ekf_filter(p.engine, theta, p.data, o).log_likelihood;
    return std::isnan(v) ? kNegInf : v;
  } catch (const NumericalError&) {
    return kNegInf;
  } catch (const ModelError&) {
    return kNegInf;
  }
}

double safe_smc_log_likelihood(const Problem& p, const ParamVector& theta, std::size_t particles, Formalism f,
                               std::uint64_t seed, SmcResult* out) {
  if (f == Formalism::Ode) return safe_ode_log_likelihood(p, theta);
  try {
    SmcOptions o;
    o.particles = particles;
    o.formalism = f;
    o.dt = p.dt;
    o.t0 = p.t0;
    o.seed = seed;
    o.noise = p.noise;
    o.keep_path = out != nullptr;
    SmcResult r = smc_filter(p.engine, theta, p.data, o);
    double v = r.log_likelihood;
    if (out) *out = std::move(r);
    return std::isnan(v) ? kNegInf : v;
  } catch (const NumericalError&) {
    return kNegInf;
  } catch (const ModelError&) {
    return kNegInf;
  }
}

ThetaDocument run_smc(const Problem& p, const ThetaDocument& in, const StageOptions& opts, SmcResult* out) {
  ParamVector theta = in.parameters(p.model());
  SmcOptions o;
  o.particles = opts.particles;
  o.formalism = opts.formalism;
  o.dt = p.dt;
  o.t0 = p.t0;
  o.seed = opts.seed;
  o.noise = p.noise;
  o.keep_path = out != nullptr;
  o.keep_summaries = out != nullptr;
  SmcResult r = smc_filter(p.engine, theta, p.data, o);
  ThetaDocument doc = in;
  doc.set_log_likelihood(r.log_likelihood);
  doc.set_log_posterior(r.log_likelihood + p.space.log_prior(theta));
  stamp(doc, "smc", opts, 1);
  if (out) *out = std::move(r);
  return doc;
}

ThetaDocument run_kalman(const Problem& p, const ThetaDocument& in, const StageOptions& opts, EkfResult* out) {
  ParamVector theta = in.parameters(p.model());
  EkfOptions o;
  o.dt = p.dt;
  o.t0 = p.t0;
  o.noise = p.noise;
  o.keep_beliefs = out != nullptr;
  EkfResult r = ekf_filter(p.engine, theta, p.data, o);
  ThetaDocument doc = in;
  doc.set_log_likelihood(r.log_likelihood);
  doc.set_log_posterior(r.log_likelihood + p.space.log_prior(theta));
  stamp(doc, "kalman", opts, 1);
  if (out) *out = std::move(r);
  return doc;
}

ThetaDocument run_simplex(const Problem& p, const ThetaDocument& in, const StageOptions& opts, bool kalman,
                          NelderMeadResult* out) {
  ParamVector base = in.parameters(p.model());
  auto objective = [&](const Eigen::VectorXd& u) {
    ParamVector theta = p.space.to_natural(u, base);
    double lp = p.space.log_prior(theta);
    if (!std::isfinite(lp)) return kNegInf;
    double ll = kalman ? safe_ekf_log_likelihood(p, theta) : safe_ode_log_likelihood(p, theta);
    return ll + lp;
  };
  NelderMeadOptions o;
  o.max_iter = opts.iterations;
  o.step = opts.simplex_step;
  o.xtol = opts.simplex_tol;
  NelderMeadResult r = nelder_mead(objective, p.space.to_transformed(base), o);
  ParamVector best = p.space.to_natural(r.x, base);
  ThetaDocument doc = with_values(p, in, best);
  double lp = p.space.log_prior(best);
  doc.set_log_likelihood(r.value - lp);
  doc.set_log_posterior(r.value);
  stamp(doc, kalman ? "ksimplex" : "simplex", opts, r.iterations);
  if (out) *out = std::move(r);
  return doc;
}

ThetaDocument run_mif(const Problem& p, const ThetaDocument& in, const StageOptions& opts, MifResult* out) {
  ParamVector base = in.parameters(p.model());
  MifOptions o;
  o.iterations = opts.iterations;
  o.particles = opts.particles;
  o.cooling = opts.mif_cooling;
  o.rejuvenation = opts.mif_rejuvenation;
  o.lag = opts.mif_lag;
  o.formalism = opts.formalism;
  o.dt = p.dt;
  o.t0 = p.t0;
  o.seed = opts.seed;
  o.noise = p.noise;
  Eigen::VectorXd sd = in.free_perturbation_sd(p.model(), opts.default_sd);
  MifResult r = mif(p.engine, p.space, base, p.data, sd, o);
  ThetaDocument doc = with_values(p, in, r.theta);
  if (!r.log_likelihood.empty()) doc.set_log_likelihood(r.log_likelihood.back());
  stamp(doc, "mif", opts, opts.iterations);
  if (out) *out = std::move(r);
  return doc;
}

namespace {

ThetaDocument finish_chain(const Problem& p, const ThetaDocument& in, const RwmResult& chain,
                           const StageOptions& opts, const ParamVector& base, double ll_at_mean, const char* stage) {
  ChainSummary s = summarize(chain.trace, opts.burn_fraction);
  ParamVector mean = base;
  const auto& idx = p.space.indices();
  for (std::size_t k = 0; k < idx.size(); ++k) mean[idx[k]] = s.mean_theta(static_cast<Eigen::Index>(k));
  ThetaDocument doc = with_values(p, in, mean);
  doc.set_covariance({free_names(p), s.covariance_u});
  doc.set_log_likelihood(ll_at_mean);
  doc.set_log_posterior(ll_at_mean + p.space.log_prior(mean));
  stamp(doc, stage, opts, opts.iterations);
  std::cerr << stage << ": acceptance " << s.acceptance_rate << ", ESS";
  for (std::size_t k = 0; k < s.ess.size(); ++k) std::cerr << ' ' << p.space.names()[k] << '=' << s.ess[k];
  std::cerr << '\n';
  return doc;
}

ParamVector posterior_mean(const Problem& p, const Trace& trace, const ParamVector& base, double burn) {
  ChainSummary s = summarize(trace, burn);
  ParamVector mean = base;
  const auto& idx = p.space.indices();
  for (std::size_t k = 0; k < idx.size(); ++k) mean[idx[k]] = s.mean_theta(static_cast<Eigen::Index>(k));
  return mean;
}

}  // namespace

ThetaDocument run_kmcmc(const Problem& p, const ThetaDocument& in, const StageOptions& opts, Trace* trace) {
  ParamVector base = in.parameters(p.model());
  auto target = [&](const Eigen::VectorXd& u) {
    ParamVector theta = p.space.to_natural(u, base);
    TargetValue v;
    v.log_prior = p.space.log_prior(theta);
    v.log_jacobian = p.space.log_jacobian(theta);
    v.log_likelihood = std::isfinite(v.log_prior) ? safe_ekf_log_likelihood(p, theta) : kNegInf;
    return v;
  };
  RwmOptions o;
  o.iterations = opts.iterations;
  o.adapt = opts.adapt.value_or(true);
  o.cooling = opts.cooling;
  o.seed = opts.seed;
  o.to_natural = [&](const Eigen::VectorXd& u) {
    ParamVector theta = p.space.to_natural(u, base);
    Eigen::VectorXd out(u.size());
    for (std::size_t k = 0; k < p.space.indices().size(); ++k) out(static_cast<Eigen::Index>(k)) = theta[p.space.indices()[k]];
    return out;
  };
  RwmResult chain = rwm_chain(target, p.space.to_transformed(base), initial_proposal(p, in, opts), o);
  chain.trace.names = free_names(p);
  ParamVector mean = posterior_mean(p, chain.trace, base, opts.burn_fraction);
  ThetaDocument doc = finish_chain(p, in, chain, opts, base, safe_ekf_log_likelihood(p, mean), "kmcmc");
  if (trace) *trace = std::move(chain.trace);
  return doc;
}

ThetaDocument run_pmcmc(const Problem& p, const ThetaDocument& in, const StageOptions& opts, Trace* trace,
                        std::ostream* paths) {
  ParamVector base = in.parameters(p.model());
  std::uint64_t evaluations = 0;
  SmcResult stash, incumbent;
  bool have_incumbent = false;
  auto target = [&](const Eigen::VectorXd& u) {
    ParamVector theta = p.space.to_natural(u, base);
    TargetValue v;
    v.log_prior = p.space.log_prior(theta);
    v.log_jacobian = p.space.log_jacobian(theta);
    std::uint64_t seed = filter_seed(opts.seed, evaluations++);
    if (!std::isfinite(v.log_prior)) {
      v.log_likelihood = kNegInf;
      return v;
    }
    v.log_likelihood =
        safe_smc_log_likelihood(p, theta, opts.particles, opts.formalism, seed, paths ? &stash : nullptr);
    if (paths && !have_incumbent) {
      incumbent = stash;
      have_incumbent = true;
    }
    return v;
  };
  const bool has_cov = in.free_covariance(p.model()).has_value();
  RwmOptions o;
  o.iterations = opts.iterations;
  o.adapt = opts.adapt.value_or(!has_cov);
  o.adapt_until = static_cast<std::size_t>(std::floor(opts.burn_fraction * static_cast<double>(opts.iterations)));
  o.cooling = opts.cooling;
  o.seed = opts.seed;
  o.to_natural = [&](const Eigen::VectorXd& u) {
    ParamVector theta = p.space.to_natural(u, base);
    Eigen::VectorXd out(u.size());
    for (std::size_t k = 0; k < p.space.indices().size(); ++k) out(static_cast<Eigen::Index>(k)) = theta[p.space.indices()[k]];
    return out;
  };
  if (paths) {
    write_path_header(*paths, p);
    o.after_step = [&](std::size_t i, bool accepted) {
      if (accepted) incumbent = stash;
      if (opts.thin > 0 && i % opts.thin == 0) write_path(*paths, p, i, incumbent.path);
    };
  }
  RwmResult chain = rwm_chain(target, p.space.to_transformed(base), initial_proposal(p, in, opts), o);
  chain.trace.names = free_names(p);
  ParamVector mean = posterior_mean(p, chain.trace, base, opts.burn_fraction);
  double ll = safe_smc_log_likelihood(p, mean, opts.particles, opts.formalism, filter_seed(opts.seed, evaluations));
  ThetaDocument doc = finish_chain(p, in, chain, opts, base, ll, "pmcmc");
  if (trace) *trace = std::move(chain.trace);
  return doc;
}

}  // namespace ssm

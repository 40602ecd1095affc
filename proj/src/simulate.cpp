#include "ssm/simulate.hpp"

#include <algorithm>
#include <cmath>

namespace ssm {

Formalism parse_formalism(const std::string& name) {
  if (name == "ode") return Formalism::Ode;
  if (name == "sde") return Formalism::Sde;
  if (name == "psr") return Formalism::Psr;
  if (name == "jump" || name == "gillespie") return Formalism::Jump;
  throw std::invalid_argument("unknown formalism '" + name + "' (expected ode, sde, psr or jump)");
}

std::string to_string(Formalism f) {
  switch (f) {
    case Formalism::Ode: return "ode";
    case Formalism::Sde: return "sde";
    case Formalism::Psr: return "psr";
    case Formalism::Jump: return "jump";
  }
  return "?";
}

// ---------------------------------------------------------------- engine

Engine::Engine(ModelSpec model) : model_(std::move(model)) {
  c_ = model_.compartments.size();
  d_ = model_.diffusions.size();
  a_ = model_.accumulators.size();
  p_ = model_.parameters.size();

  for (const auto& name : model_.compartments) symbols_.add(name);
  for (const auto& d : model_.diffusions) symbols_.add(d.name);
  for (const auto& name : model_.accumulators) symbols_.add(name);
  for (const auto& p : model_.parameters) symbols_.add(p.name);
  t_slot_ = symbols_.add("t");
  if (model_.population_size) symbols_.alias("N", c_ + d_ + a_ + *model_.population_size);

  auto diff_wrt_state = [&](const Expr& e, std::vector<CompiledExpr>& dz, std::vector<CompiledExpr>& dth) {
    for (const auto& name : model_.compartments) dz.emplace_back(differentiate(e, name), symbols_);
    for (const auto& d : model_.diffusions) dth.emplace_back(differentiate(e, d.name), symbols_);
  };

  for (const auto& r : model_.reactions) {
    ReactionCode code;
    code.rate = CompiledExpr(r.rate, symbols_);
    diff_wrt_state(r.rate, code.d_rate_dz, code.d_rate_dtheta);
    reactions_.push_back(std::move(code));
  }
  for (const auto& d : model_.diffusions) {
    DiffusionCode code;
    code.drift = CompiledExpr(d.drift, symbols_);
    code.volatility = CompiledExpr(d.volatility, symbols_);
    diff_wrt_state(d.drift, code.d_drift_dz, code.d_drift_dtheta);
    diffusions_.push_back(std::move(code));
  }
  for (const auto& o : model_.observations) {
    ObservationCode code;
    code.observed = CompiledExpr(o.observed, symbols_);
    if (o.family == ObservationFamily::Normal || o.family == ObservationFamily::DiscretizedNormal)
      code.variance = CompiledExpr(o.variance, symbols_);
    if (o.family == ObservationFamily::Binomial) {
      code.trials = CompiledExpr(o.trials, symbols_);
      code.probability = CompiledExpr(o.probability, symbols_);
    }
    for (const auto& name : model_.compartments) code.d_observed.emplace_back(differentiate(o.observed, name), symbols_);
    for (const auto& d : model_.diffusions) code.d_observed.emplace_back(differentiate(o.observed, d.name), symbols_);
    for (const auto& name : model_.accumulators) code.d_observed.emplace_back(differentiate(o.observed, name), symbols_);
    observations_.push_back(std::move(code));
  }

  const std::size_t m = model_.reactions.size();
  full_effect_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim()), static_cast<Eigen::Index>(m));
  by_source_.assign(c_, {});
  for (std::size_t k = 0; k < m; ++k) {
    const auto& r = model_.reactions[k];
    for (std::size_t i = 0; i < c_; ++i) full_effect_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = r.effect[i];
    for (auto acc : r.accumulators)
      full_effect_(static_cast<Eigen::Index>(c_ + d_ + acc), static_cast<Eigen::Index>(k)) += 1.0;
    if (r.is_external())
      external_.push_back(k);
    else
      by_source_[r.source].push_back(k);
  }

  std::vector<bool> has_ic(c_, false);
  for (const auto& p : model_.parameters)
    if (!p.compartment.empty()) has_ic[model_.compartment_index(p.compartment)] = true;
  if (model_.population_size)
    for (std::size_t i = 0; i < c_; ++i)
      if (!has_ic[i]) {
        remainder_.push_back(i);
        break;
      }
}

StateVector Engine::initial_state(const ParamVector& theta, double t0) const {
  StateVector s;
  s.t = t0;
  s.x.assign(dim(), 0.0);
  double assigned = 0.0;
  for (std::size_t p = 0; p < p_; ++p) {
    const auto& def = model_.parameters[p];
    if (def.compartment.empty()) continue;
    std::size_t i = model_.compartment_index(def.compartment);
    s.x[i] = theta[p];
    assigned += theta[p];
  }
  if (!remainder_.empty()) {
    double rest = theta[*model_.population_size] - assigned;
    if (rest < 0.0) throw ModelError("initial conditions exceed the population size");
    s.x[remainder_.front()] = rest;
  }
  for (std::size_t j = 0; j < d_; ++j) {
    const auto& d = model_.diffusions[j];
    double v = theta[d.initial_value_param];
    if (!d.transform.in_domain(v))
      throw ModelError("initial value " + std::to_string(v) + " of diffusion '" + d.name + "' is outside its " +
                       d.transform.describe() + " domain");
    s.x[c_ + j] = d.transform.forward(v);
  }
  return s;
}

std::vector<double> Engine::make_binding(const ParamVector& theta) const {
  std::vector<double> b(binding_size(), 0.0);
  bind_parameters(theta, b);
  return b;
}

void Engine::bind_parameters(const ParamVector& theta, std::span<double> binding) const {
  std::copy(theta.begin(), theta.end(), binding.begin() + static_cast<std::ptrdiff_t>(c_ + d_ + a_));
}

double Engine::diffusion_natural(std::size_t j, double u) const { return model_.diffusions[j].transform.inverse(u); }

void Engine::bind_state(std::span<const double> x, double t, std::span<double> binding) const {
  for (std::size_t i = 0; i < c_; ++i) binding[i] = x[i];
  for (std::size_t j = 0; j < d_; ++j) binding[c_ + j] = diffusion_natural(j, x[c_ + j]);
  for (std::size_t a = 0; a < a_; ++a) binding[c_ + d_ + a] = x[c_ + d_ + a];
  binding[t_slot_] = t;
}

void Engine::rates(std::span<const double> binding, std::span<double> out) const {
  for (std::size_t k = 0; k < reactions_.size(); ++k) out[k] = reactions_[k].rate(binding);
}

void Engine::propensities(std::span<const double> binding, std::span<double> out) const {
  for (std::size_t k = 0; k < reactions_.size(); ++k) {
    double r = reactions_[k].rate(binding);
    const auto& def = model_.reactions[k];
    double a = def.is_external() ? r : r * binding[def.source];
    if (!std::isfinite(a))
      throw NumericalError("non-finite propensity for reaction " + std::to_string(k) + " ('" + def.name + "') at t=" +
                           std::to_string(binding[t_slot_]));
    out[k] = a;
  }
}

double Engine::diffusion_drift(std::size_t j, std::span<const double> binding) const {
  return diffusions_[j].drift(binding);
}

double Engine::diffusion_volatility(std::size_t j, std::span<const double> binding) const {
  return diffusions_[j].volatility(binding);
}

namespace {

// out = drift at the bound state; props receives the propensities.
void drift_at(const Engine& e, std::span<const double> binding, std::span<double> props, std::span<double> out) {
  e.propensities(binding, props);
  std::fill(out.begin(), out.end(), 0.0);
  const auto& L = e.full_effect();
  for (Eigen::Index k = 0; k < L.cols(); ++k) {
    double a = props[static_cast<std::size_t>(k)];
    if (a == 0.0) continue;
    for (Eigen::Index i = 0; i < L.rows(); ++i) {
      double l = L(i, k);
      if (l != 0.0) out[static_cast<std::size_t>(i)] += l * a;
    }
  }
  for (std::size_t j = 0; j < e.n_diffusions(); ++j) out[e.diffusion_offset() + j] = e.diffusion_drift(j, binding);
}

void ensure(Workspace& ws, const Engine& e) {
  const std::size_t m = e.n_reactions();
  const std::size_t n = e.dim();
  if (ws.binding.size() != e.binding_size()) ws.binding.assign(e.binding_size(), 0.0);
  ws.rates.resize(m);
  ws.props.resize(m);
  ws.drift.resize(n);
  ws.scratch.resize(std::max(n, m));
  ws.increments.resize(m);
  ws.k1.resize(n);
  ws.k2.resize(n);
  ws.k3.resize(n);
  ws.k4.resize(n);
  ws.tmp.resize(n);
}

std::size_t clamp_nonnegative(const Engine& e, std::vector<double>& x) {
  std::size_t events = 0;
  for (std::size_t i = 0; i < e.n_compartments(); ++i)
    if (x[i] < 0.0) {
      x[i] = 0.0;
      ++events;
    }
  for (std::size_t a = 0; a < e.n_accumulators(); ++a) {
    double& v = x[e.accumulator_offset() + a];
    if (v < 0.0) {
      v = 0.0;
      ++events;
    }
  }
  return events;
}

void euler_inplace(const Engine& e, StateVector& s, double dt, Workspace& ws) {
  e.bind_state(s.x, s.t, ws.binding);
  drift_at(e, ws.binding, ws.props, ws.drift);
  for (std::size_t i = 0; i < s.x.size(); ++i) s.x[i] += ws.drift[i] * dt;
  s.t += dt;
}

void rk4_inplace(const Engine& e, StateVector& s, double h, Workspace& ws) {
  const std::size_t n = s.x.size();
  auto stage = [&](const std::vector<double>& x, double t, std::vector<double>& k) {
    e.bind_state(x, t, ws.binding);
    drift_at(e, ws.binding, ws.props, k);
  };
  stage(s.x, s.t, ws.k1);
  for (std::size_t i = 0; i < n; ++i) ws.tmp[i] = s.x[i] + 0.5 * h * ws.k1[i];
  stage(ws.tmp, s.t + 0.5 * h, ws.k2);
  for (std::size_t i = 0; i < n; ++i) ws.tmp[i] = s.x[i] + 0.5 * h * ws.k2[i];
  stage(ws.tmp, s.t + 0.5 * h, ws.k3);
  for (std::size_t i = 0; i < n; ++i) ws.tmp[i] = s.x[i] + h * ws.k3[i];
  stage(ws.tmp, s.t + h, ws.k4);
  for (std::size_t i = 0; i < n; ++i) s.x[i] += h / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
  s.t += h;
}

void check_ode_domain(const Engine& e, StateVector& s, StepDiagnostics* diag) {
  double scale = 1.0;
  for (std::size_t i = 0; i < e.n_compartments(); ++i) scale = std::max(scale, std::abs(s.x[i]));
  for (std::size_t i = 0; i < e.n_compartments(); ++i) {
    if (s.x[i] < -1e-9 * scale)
      throw DomainError("compartment '" + e.model().compartments[i] + "' became negative (" + std::to_string(s.x[i]) +
                        ") at t=" + std::to_string(s.t) + "; reduce dt");
  }
  std::size_t n = clamp_nonnegative(e, s.x);
  if (diag) diag->clamp_events += n;
}

void advance_diffusions(const Engine& e, StateVector& s, double dt, Rng& rng, Workspace& ws) {
  if (e.n_diffusions() == 0) return;
  // binding must hold the state at the start of the step
  const double sq = std::sqrt(dt);
  for (std::size_t j = 0; j < e.n_diffusions(); ++j) {
    double mu = e.diffusion_drift(j, ws.binding);
    double vol = e.diffusion_volatility(j, ws.binding);
    s.x[e.diffusion_offset() + j] += mu * dt + vol * sq * rng.normal();
  }
}

void sde_inplace(const Engine& e, StateVector& s, const ParamVector& theta, double dt, Rng& rng, NoiseOptions noise,
                 Workspace& ws, StepDiagnostics* diag) {
  const auto& model = e.model();
  e.bind_state(s.x, s.t, ws.binding);
  drift_at(e, ws.binding, ws.props, ws.drift);
  const std::size_t n = s.x.size();
  std::vector<double>& x = ws.tmp;
  for (std::size_t i = 0; i < n; ++i) x[i] = s.x[i] + ws.drift[i] * dt;
  const double sq = std::sqrt(dt);
  const auto& L = e.full_effect();
  if (noise.demographic) {
    for (std::size_t k = 0; k < e.n_reactions(); ++k) {
      double xi = rng.normal();
      double amp = std::sqrt(std::max(ws.props[k], 0.0) * dt) * xi;
      if (amp == 0.0) continue;
      for (Eigen::Index i = 0; i < L.rows(); ++i) {
        double l = L(i, static_cast<Eigen::Index>(k));
        if (l != 0.0) x[static_cast<std::size_t>(i)] += l * amp;
      }
    }
  }
  if (noise.environmental) {
    for (const auto& g : model.noise_groups) {
      double xi = rng.normal();
      double amp = theta[g.sd_param] * sq * xi;
      for (auto k : g.reactions) {
        double a = std::max(ws.props[k], 0.0) * amp;
        if (a == 0.0) continue;
        for (Eigen::Index i = 0; i < L.rows(); ++i) {
          double l = L(i, static_cast<Eigen::Index>(k));
          if (l != 0.0) x[static_cast<std::size_t>(i)] += l * a;
        }
      }
    }
  }
  for (std::size_t j = 0; j < e.n_diffusions(); ++j) {
    double vol = e.diffusion_volatility(j, ws.binding);
    x[e.diffusion_offset() + j] += vol * sq * rng.normal();
  }
  std::size_t clamps = clamp_nonnegative(e, x);
  if (diag) diag->clamp_events += clamps;
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i]))
      throw NumericalError("non-finite state component " + std::to_string(i) + " after SDE step at t=" +
                           std::to_string(s.t));
  std::copy(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n), s.x.begin());
  s.t += dt;
}

void psr_inplace(const Engine& e, StateVector& s, const ParamVector& theta, double dt, Rng& rng, NoiseOptions noise,
                 Workspace& ws, StepDiagnostics* diag) {
  const auto& model = e.model();
  e.bind_state(s.x, s.t, ws.binding);
  e.rates(ws.binding, ws.rates);
  for (std::size_t k = 0; k < e.n_reactions(); ++k) {
    double r = ws.rates[k];
    if (!std::isfinite(r))
      throw NumericalError("non-finite rate for reaction " + std::to_string(k) + " ('" + model.reactions[k].name +
                           "') at t=" + std::to_string(s.t));
    if (r < 0.0) ws.rates[k] = 0.0;
  }
  // Time increments: dt for quiet reactions, one Gamma draw per noise group.
  std::vector<double>& inc = ws.increments;
  std::fill(inc.begin(), inc.end(), dt);
  if (noise.environmental) {
    for (const auto& g : model.noise_groups) {
      double sd = theta[g.sd_param];
      if (!(sd > 0.0)) continue;
      double var = sd * sd;
      double d_gamma = rng.gamma(dt / var, var);
      for (auto k : g.reactions) inc[k] = d_gamma;
    }
  }

  std::vector<double>& fired = ws.props;  // reused: firing counts
  std::fill(fired.begin(), fired.end(), 0.0);
  for (std::size_t i = 0; i < e.n_compartments(); ++i) {
    const auto& ks = e.reactions_by_source()[i];
    if (ks.empty()) continue;
    auto trials = static_cast<std::uint64_t>(std::llround(std::max(s.x[i], 0.0)));
    if (trials == 0) continue;
    double total = 0.0;
    for (auto k : ks) total += ws.rates[k] * inc[k];
    if (!(total > 0.0)) continue;
    const double exit_prob = -std::expm1(-total);
    double mass = 1.0;
    for (auto k : ks) {
      if (trials == 0) break;
      double pk = exit_prob * ws.rates[k] * inc[k] / total;
      double cond = mass > 0.0 ? std::clamp(pk / mass, 0.0, 1.0) : 0.0;
      std::uint64_t nk = rng.binomial(trials, cond);
      fired[k] = static_cast<double>(nk);
      trials -= nk;
      mass -= pk;
    }
  }
  for (auto k : e.external_reactions()) {
    double n = static_cast<double>(rng.poisson(ws.rates[k] * inc[k]));
    const auto& r = model.reactions[k];
    if (r.absolute_outflow) {
      for (std::size_t i = 0; i < e.n_compartments(); ++i)
        if (r.effect[i] < 0) n = std::min(n, std::floor(std::max(s.x[i], 0.0) / -r.effect[i]));
    }
    fired[k] = n;
  }

  advance_diffusions(e, s, dt, rng, ws);

  const auto& L = e.full_effect();
  for (std::size_t k = 0; k < e.n_reactions(); ++k) {
    double n = fired[k];
    if (n == 0.0) continue;
    for (Eigen::Index i = 0; i < L.rows(); ++i) {
      double l = L(i, static_cast<Eigen::Index>(k));
      if (l != 0.0) s.x[static_cast<std::size_t>(i)] += l * n;
    }
  }
  std::size_t clamps = clamp_nonnegative(e, s.x);
  if (diag) diag->clamp_events += clamps;
  s.t += dt;
}

// Returns elapsed time; `reaction` receives the fired index or -1.
double gillespie_inplace(const Engine& e, StateVector& s, double dt_max, Rng& rng, Workspace& ws, long& reaction) {
  e.bind_state(s.x, s.t, ws.binding);
  e.propensities(ws.binding, ws.props);
  double total = 0.0;
  for (auto& a : ws.props) {
    a = std::max(a, 0.0);
    total += a;
  }
  reaction = -1;
  double tau = total > 0.0 ? rng.exponential(total) : std::numeric_limits<double>::infinity();
  if (tau >= dt_max) {
    if (!std::isfinite(dt_max)) return tau;
    advance_diffusions(e, s, dt_max, rng, ws);
    s.t += dt_max;
    return dt_max;
  }
  double u = rng.uniform() * total;
  std::size_t k = 0;
  double cum = 0.0;
  for (; k + 1 < ws.props.size(); ++k) {
    cum += ws.props[k];
    if (u < cum) break;
  }
  while (ws.props[k] <= 0.0 && k > 0) --k;
  const auto& L = e.full_effect();
  for (Eigen::Index i = 0; i < L.rows(); ++i) s.x[static_cast<std::size_t>(i)] += L(i, static_cast<Eigen::Index>(k));
  advance_diffusions(e, s, tau, rng, ws);
  s.t += tau;
  reaction = static_cast<long>(k);
  return tau;
}

std::size_t substeps(double span, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("step size must be positive");
  double n = std::ceil(span / dt - 1e-9);
  return static_cast<std::size_t>(std::max(1.0, n));
}

}  // namespace

void Engine::drift(const StateVector& s, const ParamVector& theta, std::span<double> out) const {
  std::vector<double> binding = make_binding(theta);
  std::vector<double> props(n_reactions());
  bind_state(s.x, s.t, binding);
  drift_at(*this, binding, props, out);
}

std::vector<double> Engine::drift(const StateVector& s, const ParamVector& theta) const {
  std::vector<double> out(dim());
  drift(s, theta, out);
  return out;
}

Eigen::MatrixXd Engine::drift_jacobian(const StateVector& s, const ParamVector& theta) const {
  const auto n = static_cast<Eigen::Index>(dim());
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  std::vector<double> binding = make_binding(theta);
  bind_state(s.x, s.t, binding);

  // d natural / d transformed for each diffusing component
  std::vector<double> chain(d_);
  for (std::size_t j = 0; j < d_; ++j) chain[j] = model_.diffusions[j].transform.derivative(binding[c_ + j]);

  Eigen::VectorXd grad(n);
  for (std::size_t k = 0; k < reactions_.size(); ++k) {
    const auto& def = model_.reactions[k];
    const auto& code = reactions_[k];
    double r = code.rate(binding);
    double w = def.is_external() ? 1.0 : binding[def.source];
    grad.setZero();
    for (std::size_t i = 0; i < c_; ++i) grad(static_cast<Eigen::Index>(i)) = code.d_rate_dz[i](binding) * w;
    if (!def.is_external()) grad(static_cast<Eigen::Index>(def.source)) += r;
    for (std::size_t j = 0; j < d_; ++j)
      grad(static_cast<Eigen::Index>(c_ + j)) = code.d_rate_dtheta[j](binding) * chain[j] * w;
    J += full_effect_.col(static_cast<Eigen::Index>(k)) * grad.transpose();
  }
  for (std::size_t j = 0; j < d_; ++j) {
    const auto& code = diffusions_[j];
    auto row = static_cast<Eigen::Index>(c_ + j);
    for (std::size_t i = 0; i < c_; ++i) J(row, static_cast<Eigen::Index>(i)) = code.d_drift_dz[i](binding);
    for (std::size_t q = 0; q < d_; ++q)
      J(row, static_cast<Eigen::Index>(c_ + q)) = code.d_drift_dtheta[q](binding) * chain[q];
  }
  return J;
}

DispersionAssembly Engine::assemble_dispersion(const StateVector& s, const ParamVector& theta, bool demographic,
                                               bool environmental) const {
  std::vector<double> binding = make_binding(theta);
  bind_state(s.x, s.t, binding);
  std::vector<double> props(n_reactions());
  propensities(binding, props);

  const auto c = static_cast<Eigen::Index>(c_);
  const auto m = static_cast<Eigen::Index>(n_reactions());
  std::vector<std::size_t> noisy;
  for (std::size_t k = 0; k < n_reactions(); ++k)
    if (model_.reactions[k].noise_group) noisy.push_back(k);
  const auto ne = environmental ? static_cast<Eigen::Index>(noisy.size()) : 0;
  const auto md = demographic ? m : 0;
  const auto ng = static_cast<Eigen::Index>(model_.noise_groups.size());

  DispersionAssembly out;
  out.L = Eigen::MatrixXd::Zero(c, md + ne);
  out.Q = Eigen::MatrixXd::Zero(md + ne, md + ne);
  out.Qd = Eigen::MatrixXd::Zero(md, md);
  out.Lg = Eigen::MatrixXd::Zero(ne, environmental ? ng : 0);
  out.Qg = Eigen::MatrixXd::Zero(environmental ? ng : 0, environmental ? ng : 0);
  if (demographic) {
    out.L.leftCols(m) = model_.stoichiometry();
    for (Eigen::Index k = 0; k < m; ++k) out.Qd(k, k) = props[static_cast<std::size_t>(k)];
  }
  if (environmental) {
    Eigen::MatrixXd stoich = model_.stoichiometry();
    for (Eigen::Index q = 0; q < ne; ++q) {
      std::size_t k = noisy[static_cast<std::size_t>(q)];
      out.L.col(md + q) = stoich.col(static_cast<Eigen::Index>(k));
      out.Lg(q, static_cast<Eigen::Index>(*model_.reactions[k].noise_group)) = props[k];
    }
    for (Eigen::Index p = 0; p < ng; ++p) {
      double sd = theta[model_.noise_groups[static_cast<std::size_t>(p)].sd_param];
      out.Qg(p, p) = sd * sd;
    }
  }
  out.Qe = out.Lg * out.Qg * out.Lg.transpose();
  out.Q.topLeftCorner(md, md) = out.Qd;
  out.Q.bottomRightCorner(ne, ne) = out.Qe;
  return out;
}

Eigen::MatrixXd Engine::diffusion_covariance(const StateVector& s, const ParamVector& theta, NoiseOptions noise) const {
  const auto n = static_cast<Eigen::Index>(dim());
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(n, n);
  std::vector<double> binding = make_binding(theta);
  bind_state(s.x, s.t, binding);
  std::vector<double> props(n_reactions());
  propensities(binding, props);
  if (noise.demographic) {
    for (std::size_t k = 0; k < n_reactions(); ++k) {
      double a = std::max(props[k], 0.0);
      if (a == 0.0) continue;
      auto col = full_effect_.col(static_cast<Eigen::Index>(k));
      S.noalias() += a * col * col.transpose();
    }
  }
  if (noise.environmental) {
    Eigen::VectorXd v(n);
    for (const auto& g : model_.noise_groups) {
      v.setZero();
      for (auto k : g.reactions) v += std::max(props[k], 0.0) * full_effect_.col(static_cast<Eigen::Index>(k));
      double sd = theta[g.sd_param];
      S.noalias() += sd * sd * v * v.transpose();
    }
  }
  for (std::size_t j = 0; j < d_; ++j) {
    double vol = diffusions_[j].volatility(binding);
    auto i = static_cast<Eigen::Index>(c_ + j);
    S(i, i) += vol * vol;
  }
  return S;
}

double Engine::observed_value(std::size_t obs, std::span<const double> binding) const {
  return observations_[obs].observed(binding);
}

double Engine::observation_variance(std::size_t obs, std::span<const double> binding) const {
  return observations_[obs].variance(binding);
}

double Engine::observation_trials(std::size_t obs, std::span<const double> binding) const {
  return observations_[obs].trials(binding);
}

double Engine::observation_probability(std::size_t obs, std::span<const double> binding) const {
  return observations_[obs].probability(binding);
}

Eigen::VectorXd Engine::observation_gradient(std::size_t obs, const StateVector& s, const ParamVector& theta) const {
  std::vector<double> binding = make_binding(theta);
  bind_state(s.x, s.t, binding);
  Eigen::VectorXd g(static_cast<Eigen::Index>(dim()));
  const auto& code = observations_[obs];
  for (std::size_t i = 0; i < dim(); ++i) {
    double v = code.d_observed[i](binding);
    if (i >= c_ && i < c_ + d_) v *= model_.diffusions[i - c_].transform.derivative(binding[i]);
    g(static_cast<Eigen::Index>(i)) = v;
  }
  return g;
}

void Engine::reset_accumulators(StateVector& s) const {
  std::fill(s.x.begin() + static_cast<std::ptrdiff_t>(c_ + d_), s.x.end(), 0.0);
}

// ---------------------------------------------------------------- steppers

StateVector euler_step(const Engine& engine, const StateVector& s, const ParamVector& theta, double dt) {
  Workspace ws;
  ensure(ws, engine);
  engine.bind_parameters(theta, ws.binding);
  StateVector out = s;
  euler_inplace(engine, out, dt, ws);
  return out;
}

StateVector ode_integrate(const Engine& engine, StateVector s, const ParamVector& theta, double t_end, double dt_max,
                          StepDiagnostics* diag) {
  Rng unused(0);
  Workspace ws;
  propagate(engine, s, theta, t_end, dt_max, Formalism::Ode, unused, {}, ws, diag);
  return s;
}

StateVector sde_step(const Engine& engine, const StateVector& s, const ParamVector& theta, double dt, Rng& rng,
                     NoiseOptions noise, StepDiagnostics* diag) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  Workspace ws;
  ensure(ws, engine);
  engine.bind_parameters(theta, ws.binding);
  StateVector out = s;
  sde_inplace(engine, out, theta, dt, rng, noise, ws, diag);
  return out;
}

StateVector psr_step(const Engine& engine, const StateVector& s, const ParamVector& theta, double dt, Rng& rng,
                     NoiseOptions noise, StepDiagnostics* diag) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  Workspace ws;
  ensure(ws, engine);
  engine.bind_parameters(theta, ws.binding);
  StateVector out = s;
  psr_inplace(engine, out, theta, dt, rng, noise, ws, diag);
  return out;
}

JumpResult gillespie_step(const Engine& engine, const StateVector& s, const ParamVector& theta, Rng& rng,
                          double dt_max) {
  Workspace ws;
  ensure(ws, engine);
  engine.bind_parameters(theta, ws.binding);
  JumpResult out{s, 0.0, std::nullopt};
  long k = -1;
  out.elapsed = gillespie_inplace(engine, out.state, dt_max, rng, ws, k);
  if (k >= 0) out.reaction = static_cast<std::size_t>(k);
  return out;
}

void propagate(const Engine& engine, StateVector& s, const ParamVector& theta, double t_end, double dt,
               Formalism formalism, Rng& rng, NoiseOptions noise, Workspace& ws, StepDiagnostics* diag) {
  ensure(ws, engine);
  engine.bind_parameters(theta, ws.binding);
  const double span = t_end - s.t;
  if (span <= 0.0) return;
  if (formalism == Formalism::Jump) {
    long k = -1;
    while (s.t < t_end) {
      double remaining = t_end - s.t;
      if (remaining <= 1e-12 * std::max(1.0, std::abs(t_end))) break;
      gillespie_inplace(engine, s, std::min(dt, remaining), rng, ws, k);
    }
    s.t = t_end;
    return;
  }
  const std::size_t n = substeps(span, dt);
  const double h = span / static_cast<double>(n);
  const double t0 = s.t;
  for (std::size_t i = 0; i < n; ++i) {
    switch (formalism) {
      case Formalism::Ode:
        rk4_inplace(engine, s, h, ws);
        check_ode_domain(engine, s, diag);
        break;
      case Formalism::Sde:
        sde_inplace(engine, s, theta, h, rng, noise, ws, diag);
        break;
      case Formalism::Psr:
        psr_inplace(engine, s, theta, h, rng, noise, ws, diag);
        break;
      case Formalism::Jump:
        break;
    }
    s.t = t0 + h * static_cast<double>(i + 1);
  }
  s.t = t_end;
}

StateVector propagate(const Engine& engine, StateVector s, const ParamVector& theta, double t_end, double dt,
                      Formalism formalism, Rng& rng, NoiseOptions noise, StepDiagnostics* diag) {
  Workspace ws;
  propagate(engine, s, theta, t_end, dt, formalism, rng, noise, ws, diag);
  return s;
}

}  // namespace ssm

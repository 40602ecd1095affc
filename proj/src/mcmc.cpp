#include "ssm/mcmc.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "ssm/rng.hpp"

namespace ssm {

namespace {

// Cholesky factor of a covariance, with growing jitter if needed.
Eigen::MatrixXd safe_cholesky(const Eigen::MatrixXd& S) {
  const auto d = S.rows();
  double jitter = 0.0;
  for (int attempt = 0; attempt < 12; ++attempt) {
    Eigen::LLT<Eigen::MatrixXd> llt(S + jitter * Eigen::MatrixXd::Identity(d, d));
    if (llt.info() == Eigen::Success) return llt.matrixL();
    double scale = std::max(1e-300, S.diagonal().cwiseAbs().maxCoeff());
    jitter = jitter == 0.0 ? 1e-12 * scale : jitter * 10.0;
  }
  throw std::runtime_error("proposal covariance is not positive definite");
}

bool is_positive_definite(const Eigen::MatrixXd& S) {
  Eigen::LLT<Eigen::MatrixXd> llt(S);
  return llt.info() == Eigen::Success;
}

}  // namespace

RwmResult rwm_chain(const LogTarget& target, const Eigen::VectorXd& u0, const Eigen::MatrixXd& sigma0,
                    const RwmOptions& opts) {
  const auto d = u0.size();
  if (sigma0.rows() != d || sigma0.cols() != d) throw std::invalid_argument("initial covariance has the wrong shape");
  auto to_natural = opts.to_natural ? opts.to_natural : [](const Eigen::VectorXd& u) { return u; };
  const double scale = d > 0 ? 2.38 * 2.38 / static_cast<double>(d) : 1.0;
  const std::size_t floor_iter = opts.empirical_floor > 0 ? opts.empirical_floor : static_cast<std::size_t>(10 * d);

  Rng rng = Rng::stream(opts.seed, {kTagChain});
  RwmResult res;
  Eigen::VectorXd u = u0;
  TargetValue cur = target(u);
  if (!std::isfinite(cur.total())) throw std::runtime_error("target is not finite at the initial point");

  Eigen::MatrixXd chol0 = d > 0 ? safe_cholesky(sigma0) : Eigen::MatrixXd();
  Eigen::MatrixXd chol_emp = chol0;
  bool have_emp = false;
  double lambda = opts.lambda0;

  // running moments of visited states
  Eigen::VectorXd mean = u;
  Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
  std::size_t count = 1;
  std::deque<bool> window;
  std::size_t window_accepts = 0;

  res.trace.rows.reserve(opts.iterations);
  for (std::size_t i = 0; i < opts.iterations; ++i) {
    const bool adapting = opts.adapt && i < opts.adapt_until;
    if (adapting && i >= floor_iter && count > 1) {
      Eigen::MatrixXd emp = m2 / static_cast<double>(count - 1);
      if (is_positive_definite(emp)) {
        chol_emp = emp.llt().matrixL();
        have_emp = true;
      }
    }
    const Eigen::MatrixXd* L = &chol0;
    if (opts.adapt && have_emp) {
      double pick = rng.uniform();
      if (pick >= opts.mixture) L = &chol_emp;
    }
    Eigen::VectorXd xi(d);
    for (Eigen::Index k = 0; k < d; ++k) xi(k) = rng.normal();
    Eigen::VectorXd prop = d > 0 ? Eigen::VectorXd(u + std::sqrt(lambda * scale) * (*L) * xi) : u;

    TargetValue cand = target(prop);
    double log_u = std::log(rng.uniform());
    bool accepted = std::isfinite(cand.total()) && log_u < cand.total() - cur.total();
    if (accepted) {
      u = prop;
      cur = cand;
    }

    ++count;
    Eigen::VectorXd delta = u - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (u - mean).transpose();

    window.push_back(accepted);
    window_accepts += accepted ? 1 : 0;
    if (window.size() > opts.window) {
      window_accepts -= window.front() ? 1 : 0;
      window.pop_front();
    }
    if (adapting) {
      double rate = static_cast<double>(window_accepts) / static_cast<double>(window.size());
      lambda *= std::exp(std::pow(opts.cooling, static_cast<double>(i)) * (rate - opts.target_rate));
    }

    TraceRow row;
    row.iteration = i;
    row.u = u;
    row.theta = to_natural(u);
    row.log_likelihood = cur.log_likelihood;
    row.log_prior = cur.log_prior;
    row.accepted = accepted;
    res.trace.rows.push_back(std::move(row));
    if (opts.after_step) opts.after_step(i, accepted);
  }
  res.final_lambda = lambda;
  res.empirical_covariance = count > 1 ? Eigen::MatrixXd(m2 / static_cast<double>(count - 1)) : Eigen::MatrixXd(m2);
  return res;
}

double ess(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) return 0.0;
  if (n == 1) return 1.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double c0 = 0.0;
  for (double v : x) c0 += (v - mean) * (v - mean);
  c0 /= static_cast<double>(n);
  double sum = 0.0;
  if (!(c0 > 0.0)) {
    // constant series: every autocorrelation is 1
    sum = static_cast<double>(n - 1);
  } else {
    for (std::size_t k = 1; k < n; ++k) {
      double ck = 0.0;
      for (std::size_t t = 0; t + k < n; ++t) ck += (x[t] - mean) * (x[t + k] - mean);
      double rho = ck / static_cast<double>(n) / c0;
      if (rho < 0.05) break;
      sum += rho;
    }
  }
  return static_cast<double>(n) / (1.0 + 2.0 * sum);
}

ChainSummary summarize(const Trace& trace, double burn_fraction) {
  ChainSummary s;
  const std::size_t n = trace.rows.size();
  s.burn_in = static_cast<std::size_t>(std::floor(burn_fraction * static_cast<double>(n)));
  if (n == 0) return s;
  if (s.burn_in >= n) s.burn_in = n - 1;
  const std::size_t kept = n - s.burn_in;
  const auto du = trace.rows.front().u.size();
  const auto dt = trace.rows.front().theta.size();
  s.mean_u = Eigen::VectorXd::Zero(du);
  s.mean_theta = Eigen::VectorXd::Zero(dt);
  std::size_t acc = 0;
  for (std::size_t i = s.burn_in; i < n; ++i) {
    const auto& r = trace.rows[i];
    if (du > 0) s.mean_u += r.u;
    s.mean_theta += r.theta;
    acc += r.accepted ? 1 : 0;
  }
  s.mean_u /= static_cast<double>(kept);
  s.mean_theta /= static_cast<double>(kept);
  s.acceptance_rate = static_cast<double>(acc) / static_cast<double>(kept);
  s.covariance_u = Eigen::MatrixXd::Zero(du, du);
  for (std::size_t i = s.burn_in; i < n && du > 0; ++i) {
    Eigen::VectorXd c = trace.rows[i].u - s.mean_u;
    s.covariance_u += c * c.transpose();
  }
  if (kept > 1) s.covariance_u /= static_cast<double>(kept - 1);
  std::vector<double> col(kept);
  for (Eigen::Index k = 0; k < dt; ++k) {
    for (std::size_t i = 0; i < kept; ++i) col[i] = trace.rows[s.burn_in + i].theta(k);
    s.ess.push_back(ess(col));
  }
  return s;
}

void Trace::write_csv(std::ostream& out) const {
  out << "iteration";
  for (const auto& name : names) out << ',' << name;
  out << ",log_likelihood,log_prior,accepted\n";
  auto old = out.precision(17);
  for (const auto& r : rows) {
    out << r.iteration;
    for (Eigen::Index k = 0; k < r.theta.size(); ++k) out << ',' << r.theta(k);
    out << ',' << r.log_likelihood << ',' << r.log_prior << ',' << (r.accepted ? 1 : 0) << '\n';
  }
  out.precision(old);
}

Trace Trace::read_csv(std::istream& in) {
  Trace t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty trace file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) header.push_back(f);
  }
  if (header.size() < 4 || header.front() != "iteration" || header[header.size() - 3] != "log_likelihood" ||
      header[header.size() - 2] != "log_prior" || header.back() != "accepted")
    throw std::runtime_error("trace header must be 'iteration,<params...>,log_likelihood,log_prior,accepted'");
  t.names.assign(header.begin() + 1, header.end() - 3);
  const auto d = static_cast<Eigen::Index>(t.names.size());
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != header.size())
      throw std::runtime_error("trace line " + std::to_string(lineno) + " has " + std::to_string(f.size()) +
                               " fields, expected " + std::to_string(header.size()));
    TraceRow r;
    r.iteration = std::stoul(f[0]);
    r.theta.resize(d);
    for (Eigen::Index k = 0; k < d; ++k) r.theta(k) = std::stod(f[static_cast<std::size_t>(k + 1)]);
    r.log_likelihood = std::stod(f[f.size() - 3]);
    r.log_prior = std::stod(f[f.size() - 2]);
    r.accepted = f.back() == "1";
    t.rows.push_back(std::move(r));
  }
  return t;
}

}  // namespace ssm

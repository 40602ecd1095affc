// ssm: pipe-composable front end. Stages read a theta document on stdin and
// write the updated document on stdout; progress goes to stderr.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <tbb/global_control.h>

#include "ssm/expr.hpp"
#include "ssm/forecast.hpp"
#include "ssm/mcmc.hpp"
#include "ssm/stages.hpp"

namespace {

using namespace ssm;

constexpr int kExitUsage = 2;

struct Common {
  std::string model_path, data_path, theta_path;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;
  double dt = 0.0, t0 = 0.0;
  std::string formalism = "psr";
  std::size_t iterations = 0, particles = 0;
  std::string trace_path, paths_path, traj_path;
  bool timestamp = false, no_demographic = false, no_environmental = false;
};

std::string read_all(std::istream& in) { return {std::istreambuf_iterator<char>(in), {}}; }

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw SchemaError("cannot open '" + path + "'");
  return read_all(f);
}

std::uint64_t resolve_seed(const Common& c) {
  if (c.seed) return *c.seed;
  if (const char* env = std::getenv("SSM_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw SchemaError(std::string("SSM_SEED: '") + env + "' is not an unsigned integer");
    }
  }
  return 0;
}

ThetaDocument read_theta(const Common& c) {
  std::string text = c.theta_path.empty() ? read_all(std::cin) : read_file(c.theta_path);
  return ThetaDocument::parse(text);
}

std::unique_ptr<Problem> make_problem(const Common& c, bool need_data) {
  if (c.model_path.empty()) throw SchemaError("--model is required");
  ModelSpec model = load_model(c.model_path);
  DataSet data;
  if (!c.data_path.empty())
    data = load_data(c.data_path, model);
  else if (need_data)
    throw SchemaError("--data is required");
  auto p = std::make_unique<Problem>(std::move(model), std::move(data), c.dt, c.t0);
  p->noise.demographic = !c.no_demographic;
  p->noise.environmental = !c.no_environmental;
  return p;
}

StageOptions stage_options(const Common& c, std::size_t default_iterations, std::size_t default_particles) {
  StageOptions o;
  o.iterations = c.iterations > 0 ? c.iterations : default_iterations;
  o.particles = c.particles > 0 ? c.particles : default_particles;
  o.seed = resolve_seed(c);
  o.formalism = parse_formalism(c.formalism);
  o.timestamp = c.timestamp;
  return o;
}

void add_model_opts(CLI::App* app, Common& c) {
  app->add_option("--model,-m", c.model_path, "model.json")->required();
  app->add_option("--theta", c.theta_path, "theta.json (default: stdin)");
  app->add_option("--dt", c.dt, "integration step (default: a tenth of the smallest observation gap)");
  app->add_option("--t0", c.t0, "start time");
  app->add_flag("--no-demographic", c.no_demographic, "switch off demographic noise");
  app->add_flag("--no-environmental", c.no_environmental, "switch off white environmental noise");
}

void add_stage_opts(CLI::App* app, Common& c) {
  add_model_opts(app, c);
  app->add_option("--data,-d", c.data_path, "data.csv")->required();
  app->add_option("--seed", c.seed, "random seed (default: $SSM_SEED, else 0)");
  app->add_flag("--timestamp", c.timestamp, "record wall-clock time in the provenance record");
}

void write_trace(const std::string& path, const Trace& t) {
  if (path.empty()) return;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  t.write_csv(f);
}

void write_states(std::ostream& out, const Problem& p, const std::vector<Eigen::VectorXd>& xs,
                  const std::vector<double>& ts) {
  const auto& e = p.engine;
  out << "t";
  for (const auto& cname : p.model().compartments) out << ',' << cname;
  for (const auto& d : p.model().diffusions) out << ',' << d.name;
  for (const auto& a : p.model().accumulators) out << ',' << a;
  out << '\n';
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out << ts[i];
    for (std::size_t k = 0; k < e.dim(); ++k) {
      double v = xs[i](static_cast<Eigen::Index>(k));
      if (k >= e.diffusion_offset() && k < e.accumulator_offset()) v = e.diffusion_natural(k - e.diffusion_offset(), v);
      out << ',' << v;
    }
    out << '\n';
  }
}

int run_simulate(const Common& c, double end, std::size_t trajectories, double every, bool observations) {
  auto p = make_problem(c, false);
  ThetaDocument doc = read_theta(c);
  ParamVector theta = doc.parameters(p->model());
  Formalism f = parse_formalism(c.formalism);
  if (!(every > 0.0)) throw SchemaError("--every must be positive");
  double dt = c.dt > 0.0 ? c.dt : every / 10.0;
  const auto& e = p->engine;
  std::uint64_t seed = resolve_seed(c);
  if (observations && trajectories != 1) throw SchemaError("--observations writes a single trajectory");
  std::ostream& out = std::cout;
  out.precision(12);
  if (observations) {
    out << "time,stream,value\n";
  } else {
    out << "trajectory,t";
    for (const auto& n : p->model().compartments) out << ',' << n;
    for (const auto& d : p->model().diffusions) out << ',' << d.name;
    for (const auto& a : p->model().accumulators) out << ',' << a;
    out << '\n';
  }
  Workspace ws;
  std::vector<double> binding = e.make_binding(theta);
  for (std::size_t k = 0; k < trajectories; ++k) {
    Rng rng = Rng::stream(seed, {kTagSimulate, k});
    StateVector s = e.initial_state(theta, c.t0);
    Rng obs_rng = Rng::stream(seed, {kTagSimulate, k, 1});
    auto emit = [&] {
      if (observations) {
        if (s.t == c.t0) return;
        e.bind_state(s.x, s.t, binding);
        for (std::size_t q = 0; q < p->model().observations.size(); ++q)
          out << s.t << ',' << p->model().observations[q].name << ','
              << sample_observation(e, q, binding, obs_rng) << '\n';
        return;
      }
      out << k << ',' << s.t;
      for (std::size_t i = 0; i < e.n_compartments(); ++i) out << ',' << s.x[i];
      for (std::size_t j = 0; j < e.n_diffusions(); ++j) out << ',' << e.diffusion_natural(j, s.x[e.diffusion_offset() + j]);
      for (std::size_t a = 0; a < e.n_accumulators(); ++a) out << ',' << s.x[e.accumulator_offset() + a];
      out << '\n';
    };
    emit();
    StepDiagnostics diag;
    for (std::size_t i = 1; c.t0 + every * static_cast<double>(i) <= end + 1e-9 * std::max(1.0, std::abs(end)); ++i) {
      e.reset_accumulators(s);
      propagate(e, s, theta, c.t0 + every * static_cast<double>(i), dt, f, rng, p->noise, ws, &diag);
      emit();
    }
    if (diag.clamp_events > 0) std::cerr << "simulate: trajectory " << k << ": " << diag.clamp_events << " clamp events\n";
  }
  return 0;
}

int run_diagnostics(const std::string& trace_path, double burn) {
  std::ifstream f(trace_path);
  if (!f) throw SchemaError("cannot open '" + trace_path + "'");
  Trace t = Trace::read_csv(f);
  ChainSummary s = summarize(t, burn);
  nlohmann::ordered_json j;
  j["iterations"] = t.rows.size();
  j["burn_in"] = s.burn_in;
  j["acceptance_rate"] = s.acceptance_rate;
  nlohmann::ordered_json params = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < t.names.size(); ++k) {
    nlohmann::ordered_json pj;
    pj["mean"] = s.mean_theta(static_cast<Eigen::Index>(k));
    pj["ess"] = s.ess[k];
    nlohmann::ordered_json running = nlohmann::ordered_json::array();
    double sum = 0.0;
    std::size_t mark = std::max<std::size_t>(1, t.rows.size() / 10);
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      sum += t.rows[i].theta(static_cast<Eigen::Index>(k));
      if ((i + 1) % mark == 0 || i + 1 == t.rows.size())
        running.push_back({{"iteration", i + 1}, {"mean", sum / static_cast<double>(i + 1)}});
    }
    pj["running_mean"] = running;
    params[t.names[k]] = pj;
  }
  j["parameters"] = params;
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // allow `ksimplex`, `kmcmc`, ... as program names
  std::vector<std::string> args(argv, argv + argc);
  static const std::vector<std::string> kAliases{"simplex", "ksimplex", "mif", "kmcmc", "pmcmc", "smc", "kalman"};
  std::string prog = std::filesystem::path(args[0]).filename().string();
  if (std::find(kAliases.begin(), kAliases.end(), prog) != kAliases.end()) args.insert(args.begin() + 1, prog);

  CLI::App app{"State-space models for population dynamics: simulation and inference"};
  app.require_subcommand(1);
  Common c;
  app.add_option("--threads", c.threads, "worker threads (default: all cores)");

  auto* cat = app.add_subcommand("cat", "validate a theta document and echo it");
  cat->add_option("--model,-m", c.model_path, "validate against this model");
  cat->add_option("--theta", c.theta_path, "theta.json (default: stdin)");

  double sim_end = 0.0, sim_every = 1.0;
  std::size_t sim_k = 1;
  bool sim_obs = false;
  auto* sim = app.add_subcommand("simulate", "simulate trajectories to CSV");
  add_model_opts(sim, c);
  sim->add_option("--formalism,-f", c.formalism, "ode, sde, psr or jump")->default_val("psr");
  sim->add_option("--end", sim_end, "final time")->required();
  sim->add_option("--every", sim_every, "output interval")->default_val(1.0);
  sim->add_option("--trajectories,-k", sim_k, "number of trajectories")->default_val(1);
  sim->add_option("--seed", c.seed, "random seed (default: $SSM_SEED, else 0)");
  sim->add_flag("--observations", sim_obs, "write sampled observations as data.csv instead of states");

  auto* check = app.add_subcommand("check-data", "validate data.csv against a model");
  check->add_option("--model,-m", c.model_path, "model.json")->required();
  check->add_option("--data,-d", c.data_path, "data.csv")->required();

  auto* smc = app.add_subcommand("smc", "particle filter log-likelihood");
  add_stage_opts(smc, c);
  smc->add_option("--particles,-J", c.particles, "particles")->default_val(500);
  smc->add_option("--formalism,-f", c.formalism, "sde, psr or jump")->default_val("psr");
  smc->add_option("--traj", c.traj_path, "write the sampled path to this CSV");

  auto* kalman = app.add_subcommand("kalman", "extended Kalman filter log-likelihood");
  add_stage_opts(kalman, c);
  kalman->add_option("--traj", c.traj_path, "write filtered means to this CSV");

  auto* simplex = app.add_subcommand("simplex", "Nelder-Mead on the ODE posterior");
  add_stage_opts(simplex, c);
  simplex->add_option("--iterations,-n", c.iterations, "maximum iterations")->default_val(1000);
  simplex->add_option("--trace", c.trace_path, "best value per iteration");

  auto* ksimplex = app.add_subcommand("ksimplex", "Nelder-Mead on the EKF posterior");
  add_stage_opts(ksimplex, c);
  ksimplex->add_option("--iterations,-n", c.iterations, "maximum iterations")->default_val(1000);
  ksimplex->add_option("--trace", c.trace_path, "best value per iteration");

  auto* mifcmd = app.add_subcommand("mif", "iterated filtering");
  add_stage_opts(mifcmd, c);
  mifcmd->add_option("--iterations,-n", c.iterations, "iterations M")->default_val(30);
  mifcmd->add_option("--particles,-J", c.particles, "particles")->default_val(500);
  mifcmd->add_option("--formalism,-f", c.formalism, "sde, psr or jump")->default_val("psr");
  mifcmd->add_option("--trace", c.trace_path, "parameter iterates");
  double mif_a = 0.975, mif_b = 2.0;
  std::size_t mif_lag = 0;
  mifcmd->add_option("--cooling", mif_a, "cooling factor a")->default_val(0.975);
  mifcmd->add_option("--rejuvenation", mif_b, "initial perturbation multiplier b")->default_val(2.0);
  mifcmd->add_option("--lag", mif_lag, "fixed lag for initial conditions (default: round(0.75 n))");

  std::optional<bool> adapt;
  double cooling = 0.999;
  auto* kmcmc = app.add_subcommand("kmcmc", "adaptive MCMC on the EKF likelihood");
  add_stage_opts(kmcmc, c);
  kmcmc->add_option("--iterations,-n", c.iterations, "chain length")->default_val(10000);
  kmcmc->add_option("--trace", c.trace_path, "trace.csv");
  kmcmc->add_option("--adapt", adapt, "adapt the proposal (true/false)");
  kmcmc->add_option("--cooling", cooling, "adaptation cooling rate")->default_val(0.999);

  auto* pmcmc = app.add_subcommand("pmcmc", "particle marginal Metropolis-Hastings");
  add_stage_opts(pmcmc, c);
  pmcmc->add_option("--iterations,-n", c.iterations, "chain length")->default_val(5000);
  pmcmc->add_option("--particles,-J", c.particles, "particles")->default_val(500);
  pmcmc->add_option("--formalism,-f", c.formalism, "sde, psr or jump")->default_val("psr");
  pmcmc->add_option("--trace", c.trace_path, "trace.csv");
  pmcmc->add_option("--paths", c.paths_path, "sampled paths CSV");
  std::size_t thin = 10;
  pmcmc->add_option("--thin", thin, "write a path every this many iterations")->default_val(10);
  pmcmc->add_option("--adapt", adapt, "adapt during burn-in (default: only without an input covariance)");
  pmcmc->add_option("--cooling", cooling, "adaptation cooling rate")->default_val(0.999);

  ForecastOptions fo;
  std::string fc_trace;
  bool fc_raw = false;
  auto* fc = app.add_subcommand("forecast", "simulate beyond the data and summarise quantiles");
  add_stage_opts(fc, c);
  fc->add_option("--horizon", fo.horizon, "time beyond the last observation")->required();
  fc->add_option("--trajectories,-k", fo.trajectories, "number of trajectories")->default_val(100);
  fc->add_option("--formalism,-f", c.formalism, "ode, sde, psr or jump")->default_val("psr");
  fc->add_option("--particles,-J", fo.particles, "particles of the conditioning filter")->default_val(200);
  fc->add_option("--step", fo.step, "output spacing (default: smallest observation gap)");
  fc->add_option("--from-trace", fc_trace, "draw parameters from this trace.csv");
  fc->add_flag("--raw", fc_raw, "write every trajectory instead of quantiles");

  std::string diag_trace;
  double diag_burn = 0.1;
  auto* diag = app.add_subcommand("diagnostics", "acceptance rate, ESS and running means of a trace");
  diag->add_option("--trace", diag_trace, "trace.csv")->required();
  diag->add_option("--burn", diag_burn, "burn-in fraction")->default_val(0.1);

  try {
    std::vector<const char*> cargs;
    for (const auto& a : args) cargs.push_back(a.c_str());
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::optional<tbb::global_control> threads;
  if (c.threads > 0) threads.emplace(tbb::global_control::max_allowed_parallelism, c.threads);

  try {
    std::cout.precision(17);
    if (*cat) {
      ThetaDocument doc = read_theta(c);
      if (!c.model_path.empty()) doc.validate(load_model(c.model_path));
      std::cout << doc.dump();
      return 0;
    }
    if (*sim) return run_simulate(c, sim_end, sim_k, sim_every, sim_obs);
    if (*check) {
      ModelSpec model = load_model(c.model_path);
      DataSet data = load_data(c.data_path, model);
      std::size_t rows = 0, missing = 0;
      for (const auto& t : data.times)
        for (const auto& d : t.data) {
          ++rows;
          if (!d.value) ++missing;
        }
      std::cout << "ok: " << data.size() << " observation times, " << rows << " values (" << missing
                << " missing)\n";
      return 0;
    }
    if (*diag) return run_diagnostics(diag_trace, diag_burn);

    auto p = make_problem(c, true);
    ThetaDocument in = read_theta(c);
    in.validate(p->model());

    if (*smc) {
      StageOptions o = stage_options(c, 1, 500);
      SmcResult r;
      ThetaDocument out = run_smc(*p, in, o, c.traj_path.empty() ? nullptr : &r);
      if (!c.traj_path.empty()) {
        std::ofstream f(c.traj_path);
        std::vector<Eigen::VectorXd> xs;
        std::vector<double> ts;
        for (const auto& s : r.path) {
          xs.push_back(Eigen::Map<const Eigen::VectorXd>(s.x.data(), static_cast<Eigen::Index>(s.x.size())));
          ts.push_back(s.t);
        }
        write_states(f, *p, xs, ts);
      }
      std::cout << out.dump();
      return 0;
    }
    if (*kalman) {
      StageOptions o = stage_options(c, 1, 1);
      EkfResult r;
      ThetaDocument out = run_kalman(*p, in, o, c.traj_path.empty() ? nullptr : &r);
      if (!c.traj_path.empty()) {
        std::ofstream f(c.traj_path);
        std::vector<double> ts;
        for (const auto& t : p->data.times) ts.push_back(t.t);
        write_states(f, *p, r.means, ts);
      }
      std::cout << out.dump();
      return 0;
    }
    if (*simplex || *ksimplex) {
      StageOptions o = stage_options(c, 1000, 1);
      NelderMeadResult r;
      ThetaDocument out = run_simplex(*p, in, o, static_cast<bool>(*ksimplex), &r);
      if (!c.trace_path.empty()) {
        std::ofstream f(c.trace_path);
        f.precision(17);
        f << "iteration,log_posterior\n";
        for (std::size_t i = 0; i < r.best_trace.size(); ++i) f << i + 1 << ',' << r.best_trace[i] << '\n';
      }
      std::cerr << (*ksimplex ? "ksimplex" : "simplex") << ": " << r.iterations << " iterations, log posterior "
                << r.value << (r.converged ? "" : " (not converged)") << '\n';
      std::cout << out.dump();
      return 0;
    }
    if (*mifcmd) {
      StageOptions o = stage_options(c, 30, 500);
      o.mif_cooling = mif_a;
      o.mif_rejuvenation = mif_b;
      o.mif_lag = mif_lag;
      MifResult r;
      ThetaDocument out = run_mif(*p, in, o, &r);
      if (!c.trace_path.empty()) {
        Trace t;
        t.names = p->space.names();
        ParamVector base = in.parameters(p->model());
        for (std::size_t m = 0; m < r.iterates.size(); ++m) {
          TraceRow row;
          row.iteration = m;
          ParamVector nat = p->space.to_natural(r.iterates[m], base);
          row.theta.resize(static_cast<Eigen::Index>(p->space.dimension()));
          for (std::size_t k = 0; k < p->space.dimension(); ++k)
            row.theta(static_cast<Eigen::Index>(k)) = nat[p->space.indices()[k]];
          row.log_likelihood = m == 0 ? std::nan("") : r.log_likelihood[m - 1];
          row.log_prior = p->space.log_prior(nat);
          row.accepted = m > 0 && !r.failed[m - 1];
          t.rows.push_back(row);
        }
        write_trace(c.trace_path, t);
      }
      std::cout << out.dump();
      return 0;
    }
    if (*kmcmc || *pmcmc) {
      StageOptions o = *kmcmc ? stage_options(c, 10000, 1) : stage_options(c, 5000, 500);
      o.adapt = adapt;
      o.cooling = cooling;
      o.thin = thin;
      Trace t;
      ThetaDocument out;
      if (*kmcmc) {
        out = run_kmcmc(*p, in, o, &t);
      } else {
        std::unique_ptr<std::ofstream> paths;
        if (!c.paths_path.empty()) paths = std::make_unique<std::ofstream>(c.paths_path);
        out = run_pmcmc(*p, in, o, &t, paths.get());
      }
      write_trace(c.trace_path, t);
      std::cout << out.dump();
      return 0;
    }
    if (*fc) {
      fo.formalism = parse_formalism(c.formalism);
      fo.seed = resolve_seed(c);
      ParamVector base = in.parameters(p->model());
      std::vector<ParamVector> draws;
      if (!fc_trace.empty()) {
        std::ifstream f(fc_trace);
        if (!f) throw SchemaError("cannot open '" + fc_trace + "'");
        Trace t = Trace::read_csv(f);
        std::size_t burn = t.rows.size() / 10;
        for (std::size_t i = burn; i < t.rows.size(); ++i) {
          ParamVector theta = base;
          for (std::size_t k = 0; k < t.names.size(); ++k)
            theta[p->model().parameter_index(t.names[k])] = t.rows[i].theta(static_cast<Eigen::Index>(k));
          draws.push_back(std::move(theta));
        }
      } else {
        draws.push_back(base);
      }
      ForecastResult r = forecast(*p, draws, fo);
      std::cout.precision(10);
      if (fc_raw)
        write_forecast_raw_csv(std::cout, *p, r);
      else
        write_forecast_csv(std::cout, *p, r);
      return 0;
    }
  } catch (const SchemaError& e) {
    std::cerr << "ssm: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ModelError& e) {
    std::cerr << "ssm: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "ssm: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ExprSyntaxError& e) {
    std::cerr << "ssm: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "ssm: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "ssm: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

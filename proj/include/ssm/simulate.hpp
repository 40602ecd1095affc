#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ssm/expr.hpp"
#include "ssm/model.hpp"
#include "ssm/rng.hpp"

namespace ssm {

/// A propensity or state became non-finite, or a covariance lost definiteness.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A deterministic integration drove a compartment below zero.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Formalism { Ode, Sde, Psr, Jump };

Formalism parse_formalism(const std::string& name);
std::string to_string(Formalism f);

/// x = [z | x_theta | acc]: compartment sizes, transformed diffusing
/// quantities, incidence accumulators.
struct StateVector {
  std::vector<double> x;
  double t = 0.0;
};

struct NoiseOptions {
  bool demographic = true;
  bool environmental = true;
};

struct StepDiagnostics {
  std::size_t clamp_events = 0;
};

/// c x (m + |R^e|) dispersion (L^d | L^e) with block-diagonal diffusion
/// diag(Q^d, Q^e), and the group factorisation Q^e = L^g Q^g L^g'.
struct DispersionAssembly {
  Eigen::MatrixXd L;
  Eigen::MatrixXd Q;
  Eigen::MatrixXd Qd;
  Eigen::MatrixXd Lg;
  Eigen::MatrixXd Qg;
  Eigen::MatrixXd Qe;
};

/// Compiled form of a ModelSpec shared by every formalism, the filters and
/// the observation layer. Immutable after construction.
///
/// Binding layout used by compiled expressions:
///   [compartments | diffusions (natural scale) | accumulators | parameters | t]
class Engine {
 public:
  explicit Engine(ModelSpec model);

  const ModelSpec& model() const { return model_; }
  std::size_t n_compartments() const { return c_; }
  std::size_t n_diffusions() const { return d_; }
  std::size_t n_accumulators() const { return a_; }
  std::size_t n_reactions() const { return model_.reactions.size(); }
  std::size_t dim() const { return c_ + d_ + a_; }
  std::size_t diffusion_offset() const { return c_; }
  std::size_t accumulator_offset() const { return c_ + d_; }
  std::size_t binding_size() const { return symbols_.size(); }
  const SymbolTable& symbols() const { return symbols_; }

  StateVector initial_state(const ParamVector& theta, double t0) const;

  std::vector<double> make_binding(const ParamVector& theta) const;
  void bind_parameters(const ParamVector& theta, std::span<double> binding) const;
  void bind_state(std::span<const double> x, double t, std::span<double> binding) const;

  /// Per-capita rates r^(k) (absolute for external sources).
  void rates(std::span<const double> binding, std::span<double> out) const;
  /// Total propensities r^(k) z^chi(k). Throws NumericalError naming the reaction if non-finite.
  void propensities(std::span<const double> binding, std::span<double> out) const;

  /// d x / dt for the deterministic skeleton, including accumulators.
  void drift(const StateVector& s, const ParamVector& theta, std::span<double> out) const;
  std::vector<double> drift(const StateVector& s, const ParamVector& theta) const;
  /// Exact Jacobian of drift() with respect to x.
  Eigen::MatrixXd drift_jacobian(const StateVector& s, const ParamVector& theta) const;

  DispersionAssembly assemble_dispersion(const StateVector& s, const ParamVector& theta, bool demographic,
                                         bool environmental) const;
  /// Infinitesimal covariance L Q L' over the full state (compartments,
  /// diffusing components and accumulators).
  Eigen::MatrixXd diffusion_covariance(const StateVector& s, const ParamVector& theta, NoiseOptions noise) const;

  // Observation layer.
  double observed_value(std::size_t obs, std::span<const double> binding) const;
  double observation_variance(std::size_t obs, std::span<const double> binding) const;
  double observation_trials(std::size_t obs, std::span<const double> binding) const;
  double observation_probability(std::size_t obs, std::span<const double> binding) const;
  /// Gradient of h with respect to the state vector x (chain rule through diffusion transforms).
  Eigen::VectorXd observation_gradient(std::size_t obs, const StateVector& s, const ParamVector& theta) const;

  void reset_accumulators(StateVector& s) const;
  double diffusion_natural(std::size_t j, double transformed) const;
  double diffusion_drift(std::size_t j, std::span<const double> binding) const;
  double diffusion_volatility(std::size_t j, std::span<const double> binding) const;

  const Eigen::MatrixXd& full_effect() const { return full_effect_; }
  const std::vector<std::vector<std::size_t>>& reactions_by_source() const { return by_source_; }
  const std::vector<std::size_t>& external_reactions() const { return external_; }

 private:
  struct ReactionCode {
    CompiledExpr rate;
    std::vector<CompiledExpr> d_rate_dz;      // per compartment
    std::vector<CompiledExpr> d_rate_dtheta;  // per diffusion, w.r.t. natural value
  };
  struct DiffusionCode {
    CompiledExpr drift, volatility;
    std::vector<CompiledExpr> d_drift_dz, d_drift_dtheta;
  };
  struct ObservationCode {
    CompiledExpr observed, variance, trials, probability;
    std::vector<CompiledExpr> d_observed;  // per state component (natural scale)
  };

  ModelSpec model_;
  std::size_t c_ = 0, d_ = 0, a_ = 0, p_ = 0;
  SymbolTable symbols_;
  std::size_t t_slot_ = 0;
  std::vector<ReactionCode> reactions_;
  std::vector<DiffusionCode> diffusions_;
  std::vector<ObservationCode> observations_;
  // Effect of reaction k on the full state: compartments then accumulators.
  Eigen::MatrixXd full_effect_;
  std::vector<std::size_t> remainder_;  // compartment receiving N minus the others, if any
  std::vector<std::vector<std::size_t>> by_source_;
  std::vector<std::size_t> external_;

};

/// One explicit Euler step of the deterministic skeleton.
StateVector euler_step(const Engine& engine, const StateVector& s, const ParamVector& theta, double dt);

/// Classical RK4 with fixed substeps no larger than dt_max. Compartments
/// that drift below zero by more than round-off raise DomainError.
StateVector ode_integrate(const Engine& engine, StateVector s, const ParamVector& theta, double t_end, double dt_max,
                          StepDiagnostics* diag = nullptr);

/// Euler-Maruyama step: x + drift dt + L sqrt(Q) xi sqrt(dt), compartments clamped at zero.
StateVector sde_step(const Engine& engine, const StateVector& s, const ParamVector& theta, double dt, Rng& rng,
                     NoiseOptions noise = {}, StepDiagnostics* diag = nullptr);

/// Multinomial exits per source compartment, Poisson inflows, Gamma white-noise time increments.
StateVector psr_step(const Engine& engine, const StateVector& s, const ParamVector& theta, double dt, Rng& rng,
                     NoiseOptions noise = {}, StepDiagnostics* diag = nullptr);

struct JumpResult {
  StateVector state;
  double elapsed = 0.0;
  std::optional<std::size_t> reaction;  // empty when no event fired within dt_max
};

/// Exact SSA event with rates frozen over the step. If the drawn waiting time
/// exceeds dt_max the clock advances by dt_max without an event.
JumpResult gillespie_step(const Engine& engine, const StateVector& s, const ParamVector& theta, Rng& rng,
                          double dt_max = std::numeric_limits<double>::infinity());

/// Scratch buffers reused across steps; one per thread.
struct Workspace {
  std::vector<double> binding;
  std::vector<double> rates;
  std::vector<double> props;
  std::vector<double> drift;
  std::vector<double> scratch;
  std::vector<double> increments;
  std::vector<double> k1, k2, k3, k4, tmp;
};

/// Advance `s` in place to t_end under the chosen formalism with step dt.
/// The parameter slots of `ws.binding` are filled from theta on entry.
void propagate(const Engine& engine, StateVector& s, const ParamVector& theta, double t_end, double dt,
               Formalism formalism, Rng& rng, NoiseOptions noise, Workspace& ws, StepDiagnostics* diag = nullptr);

StateVector propagate(const Engine& engine, StateVector s, const ParamVector& theta, double t_end, double dt,
                      Formalism formalism, Rng& rng, NoiseOptions noise = {}, StepDiagnostics* diag = nullptr);

}  // namespace ssm

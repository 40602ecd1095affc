#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "ssm/expr.hpp"

namespace ssm {

/// Invalid model file or parameter value; the message names the offending item.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TransformKind { Identity, Log, Logit, ScaledLogit };

/// Bijection from a parameter's natural domain onto the real line.
struct Transform {
  TransformKind kind = TransformKind::Identity;
  double lower = 0.0;  // ScaledLogit bounds
  double upper = 1.0;

  bool in_domain(double natural) const;
  double forward(double natural) const;
  double inverse(double transformed) const;
  /// d natural / d transformed, expressed at the natural value.
  double derivative(double natural) const;
  /// log |d natural / d transformed|.
  double log_jacobian(double natural) const;
  std::string describe() const;
};

enum class PriorKind { Uniform, Normal, LogNormal, Dirac };

struct Prior {
  PriorKind kind = PriorKind::Dirac;
  double a = 0.0;  // uniform: lower, normal: mean, lognormal: meanlog
  double b = 0.0;  // uniform: upper, normal: sd,   lognormal: sdlog

  double log_density(double x) const;
  double support_lower() const;
  double support_upper() const;
};

enum class ParamRole { Estimated, Fixed, InitialCondition };

struct ParameterDef {
  std::string name;
  Transform transform;
  Prior prior;
  ParamRole role = ParamRole::Fixed;
  std::string compartment;  // initial-condition target, if any

  /// Free in inference stages: estimated, or an initial condition with a proper prior.
  bool is_free() const { return role != ParamRole::Fixed && prior.kind != PriorKind::Dirac; }
};

inline constexpr std::size_t kExternalSource = std::numeric_limits<std::size_t>::max();

struct ReactionDef {
  std::string name;
  std::vector<int> effect;                 // l^(k), one entry per compartment
  std::size_t source = kExternalSource;    // chi(k)
  Expr rate;                               // per-capita, or absolute when the source is external
  std::optional<std::size_t> noise_group;  // index into ModelSpec::noise_groups
  std::vector<std::size_t> accumulators;   // indices into ModelSpec::accumulators
  bool absolute_outflow = false;

  bool is_external() const { return source == kExternalSource; }
};

struct NoiseGroup {
  std::string name;
  std::size_t sd_param = 0;
  std::vector<std::size_t> reactions;
};

struct DiffusionDef {
  std::string name;
  Transform transform;
  Expr drift;       // in transformed space
  Expr volatility;  // sd of d(transformed) per unit time
  std::size_t initial_value_param = 0;
};

enum class ObservationFamily { Poisson, DiscretizedNormal, Normal, Binomial };

struct ObservationDef {
  std::string name;
  ObservationFamily family = ObservationFamily::Poisson;
  Expr observed;  // h(x); for binomial this is trials*probability
  Expr variance;  // normal families
  Expr trials;    // binomial
  Expr probability;
};

struct ModelSpec {
  std::vector<std::string> compartments;
  std::optional<std::size_t> population_size;  // parameter index playing N
  std::vector<ParameterDef> parameters;
  std::vector<ReactionDef> reactions;
  std::vector<NoiseGroup> noise_groups;
  std::vector<DiffusionDef> diffusions;
  std::vector<std::string> accumulators;
  std::vector<ObservationDef> observations;
  bool conserves_population = false;

  std::size_t compartment_index(std::string_view name) const;
  std::size_t parameter_index(std::string_view name) const;
  std::optional<std::size_t> find_parameter(std::string_view name) const;
  std::optional<std::size_t> find_observation(std::string_view name) const;

  /// c x m matrix whose columns are the effect vectors.
  Eigen::MatrixXd stoichiometry() const;
  /// Indices of free parameters in declaration order.
  std::vector<std::size_t> free_parameters() const;
};

ModelSpec parse_model(std::string_view json_text);
ModelSpec load_model(const std::string& path);

/// Natural-scale parameter vector indexed like ModelSpec::parameters.
using ParamVector = std::vector<double>;

ParamVector parameter_vector(const ModelSpec& model, const std::map<std::string, double>& values);

/// Free parameters mapped to the unconstrained space. Throws ModelError for
/// values outside the transform's domain.
Eigen::VectorXd transform_theta(const ModelSpec& model, const std::map<std::string, double>& values);
std::map<std::string, double> inverse_transform_theta(const ModelSpec& model, const Eigen::VectorXd& transformed,
                                                      std::map<std::string, double> base);

/// Helper shared by the inference stages: a view of the free parameters.
class ParameterSpace {
 public:
  explicit ParameterSpace(const ModelSpec& model);

  std::size_t dimension() const { return free_.size(); }
  const std::vector<std::size_t>& indices() const { return free_; }
  std::vector<std::string> names() const;

  Eigen::VectorXd to_transformed(const ParamVector& natural) const;
  ParamVector to_natural(const Eigen::VectorXd& transformed, ParamVector base) const;
  /// Sum of log prior densities over the free parameters.
  double log_prior(const ParamVector& natural) const;
  double log_jacobian(const ParamVector& natural) const;

 private:
  const ModelSpec* model_;
  std::vector<std::size_t> free_;
};

}  // namespace ssm

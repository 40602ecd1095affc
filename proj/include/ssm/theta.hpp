#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ssm/model.hpp"

namespace ssm {

/// Malformed theta document; the message names the offending field.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ThetaCovariance {
  std::vector<std::string> parameters;
  Eigen::MatrixXd matrix;  // transformed scale
};

struct ProvenanceRecord {
  std::string stage;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  std::optional<std::string> timestamp;
};

/// The document passed between pipeline stages. Unknown keys survive a
/// parse/dump round trip, and key order is preserved.
class ThetaDocument {
 public:
  ThetaDocument();
  static ThetaDocument parse(const std::string& text);
  std::string dump() const;

  std::map<std::string, double> values() const;
  void set_value(const std::string& name, double v);
  void set_values(const std::map<std::string, double>& values);

  std::optional<ThetaCovariance> covariance() const;
  void set_covariance(const ThetaCovariance& cov);

  std::map<std::string, double> perturbation_sd() const;

  std::optional<double> log_likelihood() const;
  void set_log_likelihood(double v);
  void set_log_posterior(double v);

  std::vector<ProvenanceRecord> provenance() const;
  void add_provenance(const ProvenanceRecord& rec);

  /// Checks names, domains and covariance shape against a model.
  void validate(const ModelSpec& model) const;

  /// Natural parameter vector indexed like the model's parameters.
  ParamVector parameters(const ModelSpec& model) const;
  /// Covariance restricted and reordered to the model's free parameters.
  std::optional<Eigen::MatrixXd> free_covariance(const ModelSpec& model) const;
  /// Per-free-parameter perturbation sd, with `fallback` where absent.
  Eigen::VectorXd free_perturbation_sd(const ModelSpec& model, double fallback) const;

  const nlohmann::ordered_json& json() const { return j_; }

 private:
  nlohmann::ordered_json j_;
};

}  // namespace ssm

#include "ssm/theta.hpp"

#include <algorithm>
#include <cmath>

namespace ssm {

namespace {

using ojson = nlohmann::ordered_json;

// nlohmann writes non-finite numbers as null; keep them as strings instead
ojson number_or_string(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

double as_number(const ojson& j, const std::string& field) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    auto s = j.get<std::string>();
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    if (s == "nan") return NAN;
  }
  throw SchemaError(field + ": expected a number");
}

}  // namespace

ThetaDocument::ThetaDocument() : j_(ojson::object()) {
  j_["ssm_theta"] = 1;
  j_["values"] = ojson::object();
}

ThetaDocument ThetaDocument::parse(const std::string& text) {
  ThetaDocument doc;
  try {
    doc.j_ = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("theta document is not valid JSON: ") + e.what());
  }
  const auto& j = doc.j_;
  if (!j.is_object()) throw SchemaError("theta document must be a JSON object");
  if (!j.contains("ssm_theta")) throw SchemaError("ssm_theta: missing");
  if (!j["ssm_theta"].is_number_integer() || j["ssm_theta"].get<int>() != 1)
    throw SchemaError("ssm_theta: unsupported version (expected 1)");
  if (!j.contains("values") || !j["values"].is_object()) throw SchemaError("values: missing or not an object");
  for (const auto& [k, v] : j["values"].items())
    if (!v.is_number()) throw SchemaError("values." + k + ": expected a number");
  if (j.contains("perturbation_sd")) {
    if (!j["perturbation_sd"].is_object()) throw SchemaError("perturbation_sd: expected an object");
    for (const auto& [k, v] : j["perturbation_sd"].items())
      if (!v.is_number() || v.get<double>() < 0.0)
        throw SchemaError("perturbation_sd." + k + ": expected a nonnegative number");
  }
  if (j.contains("covariance")) doc.covariance();  // shape checks
  if (j.contains("provenance")) {
    if (!j["provenance"].is_array()) throw SchemaError("provenance: expected an array");
    for (const auto& r : j["provenance"])
      if (!r.is_object() || !r.contains("stage") || !r["stage"].is_string())
        throw SchemaError("provenance: each record needs a 'stage' string");
  }
  for (const char* key : {"log_likelihood", "log_posterior"})
    if (j.contains(key)) as_number(j[key], key);
  return doc;
}

std::string ThetaDocument::dump() const { return j_.dump(2) + "\n"; }

std::map<std::string, double> ThetaDocument::values() const {
  std::map<std::string, double> out;
  for (const auto& [k, v] : j_["values"].items()) out[k] = v.get<double>();
  return out;
}

void ThetaDocument::set_value(const std::string& name, double v) {
  if (!std::isfinite(v)) throw SchemaError("values." + name + ": non-finite value");
  j_["values"][name] = v;
}

void ThetaDocument::set_values(const std::map<std::string, double>& values) {
  for (const auto& [k, v] : values) set_value(k, v);
}

std::optional<ThetaCovariance> ThetaDocument::covariance() const {
  if (!j_.contains("covariance") || j_["covariance"].is_null()) return std::nullopt;
  const auto& c = j_["covariance"];
  if (!c.is_object() || !c.contains("parameters") || !c.contains("matrix"))
    throw SchemaError("covariance: expected {\"parameters\": [...], \"matrix\": [[...]]}");
  ThetaCovariance out;
  if (!c["parameters"].is_array()) throw SchemaError("covariance.parameters: expected an array");
  for (const auto& p : c["parameters"]) {
    if (!p.is_string()) throw SchemaError("covariance.parameters: expected strings");
    out.parameters.push_back(p.get<std::string>());
  }
  const auto d = static_cast<Eigen::Index>(out.parameters.size());
  const auto& m = c["matrix"];
  if (!m.is_array() || static_cast<Eigen::Index>(m.size()) != d)
    throw SchemaError("covariance.matrix: expected " + std::to_string(d) + " rows");
  out.matrix.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const auto& row = m[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != d)
      throw SchemaError("covariance.matrix[" + std::to_string(i) + "]: expected " + std::to_string(d) + " entries");
    for (Eigen::Index k = 0; k < d; ++k) {
      if (!row[static_cast<std::size_t>(k)].is_number())
        throw SchemaError("covariance.matrix[" + std::to_string(i) + "][" + std::to_string(k) + "]: expected a number");
      out.matrix(i, k) = row[static_cast<std::size_t>(k)].get<double>();
    }
  }
  return out;
}

void ThetaDocument::set_covariance(const ThetaCovariance& cov) {
  ojson c = ojson::object();
  c["parameters"] = cov.parameters;
  ojson m = ojson::array();
  for (Eigen::Index i = 0; i < cov.matrix.rows(); ++i) {
    ojson row = ojson::array();
    for (Eigen::Index k = 0; k < cov.matrix.cols(); ++k) row.push_back(cov.matrix(i, k));
    m.push_back(row);
  }
  c["matrix"] = m;
  j_["covariance"] = c;
}

std::map<std::string, double> ThetaDocument::perturbation_sd() const {
  std::map<std::string, double> out;
  if (j_.contains("perturbation_sd"))
    for (const auto& [k, v] : j_["perturbation_sd"].items()) out[k] = v.get<double>();
  return out;
}

std::optional<double> ThetaDocument::log_likelihood() const {
  if (!j_.contains("log_likelihood")) return std::nullopt;
  return as_number(j_["log_likelihood"], "log_likelihood");
}

void ThetaDocument::set_log_likelihood(double v) { j_["log_likelihood"] = number_or_string(v); }
void ThetaDocument::set_log_posterior(double v) { j_["log_posterior"] = number_or_string(v); }

std::vector<ProvenanceRecord> ThetaDocument::provenance() const {
  std::vector<ProvenanceRecord> out;
  if (!j_.contains("provenance")) return out;
  for (const auto& r : j_["provenance"]) {
    ProvenanceRecord p;
    p.stage = r["stage"].get<std::string>();
    if (r.contains("seed")) p.seed = r["seed"].get<std::uint64_t>();
    if (r.contains("iterations")) p.iterations = r["iterations"].get<std::size_t>();
    if (r.contains("timestamp")) p.timestamp = r["timestamp"].get<std::string>();
    out.push_back(p);
  }
  return out;
}

void ThetaDocument::add_provenance(const ProvenanceRecord& rec) {
  if (!j_.contains("provenance")) j_["provenance"] = ojson::array();
  ojson r = ojson::object();
  r["stage"] = rec.stage;
  r["seed"] = rec.seed;
  r["iterations"] = rec.iterations;
  if (rec.timestamp) r["timestamp"] = *rec.timestamp;
  j_["provenance"].push_back(r);
}

void ThetaDocument::validate(const ModelSpec& model) const {
  auto vals = values();
  for (const auto& [k, v] : vals)
    if (!model.find_parameter(k)) throw SchemaError("values." + k + ": not a parameter of the model");
  for (const auto& p : model.parameters) {
    auto it = vals.find(p.name);
    if (it == vals.end()) throw SchemaError("values." + p.name + ": missing");
    if (!p.transform.in_domain(it->second))
      throw SchemaError("values." + p.name + ": " + std::to_string(it->second) + " is outside the " +
                        p.transform.describe() + " domain");
    if (p.is_free() && !std::isfinite(p.prior.log_density(it->second)))
      throw SchemaError("values." + p.name + ": " + std::to_string(it->second) + " has zero prior density");
  }
  if (auto cov = covariance()) {
    auto free = model.free_parameters();
    if (cov->parameters.size() != free.size())
      throw SchemaError("covariance: expected " + std::to_string(free.size()) + " parameters, got " +
                        std::to_string(cov->parameters.size()));
    for (auto idx : free)
      if (std::find(cov->parameters.begin(), cov->parameters.end(), model.parameters[idx].name) ==
          cov->parameters.end())
        throw SchemaError("covariance.parameters: missing '" + model.parameters[idx].name + "'");
  }
}

ParamVector ThetaDocument::parameters(const ModelSpec& model) const {
  validate(model);
  std::map<std::string, double> vals = values();
  return parameter_vector(model, vals);
}

std::optional<Eigen::MatrixXd> ThetaDocument::free_covariance(const ModelSpec& model) const {
  auto cov = covariance();
  if (!cov) return std::nullopt;
  auto free = model.free_parameters();
  std::vector<Eigen::Index> pos;
  for (auto idx : free) {
    auto it = std::find(cov->parameters.begin(), cov->parameters.end(), model.parameters[idx].name);
    if (it == cov->parameters.end()) throw SchemaError("covariance.parameters: missing '" + model.parameters[idx].name + "'");
    pos.push_back(static_cast<Eigen::Index>(it - cov->parameters.begin()));
  }
  const auto d = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd out(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index k = 0; k < d; ++k)
      out(i, k) = cov->matrix(pos[static_cast<std::size_t>(i)], pos[static_cast<std::size_t>(k)]);
  return out;
}

Eigen::VectorXd ThetaDocument::free_perturbation_sd(const ModelSpec& model, double fallback) const {
  auto sd = perturbation_sd();
  auto free = model.free_parameters();
  Eigen::VectorXd out(static_cast<Eigen::Index>(free.size()));
  for (std::size_t i = 0; i < free.size(); ++i) {
    auto it = sd.find(model.parameters[free[i]].name);
    out(static_cast<Eigen::Index>(i)) = it == sd.end() ? fallback : it->second;
  }
  return out;
}

}  // namespace ssm

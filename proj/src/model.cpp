#include "ssm/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

namespace ssm {

using nlohmann::json;

// ---------------------------------------------------------------- transforms

bool Transform::in_domain(double x) const {
  if (!std::isfinite(x)) return false;
  switch (kind) {
    case TransformKind::Identity: return true;
    case TransformKind::Log: return x > 0.0;
    case TransformKind::Logit: return x > 0.0 && x < 1.0;
    case TransformKind::ScaledLogit: return x > lower && x < upper;
  }
  return false;
}

double Transform::forward(double x) const {
  switch (kind) {
    case TransformKind::Identity: return x;
    case TransformKind::Log: return std::log(x);
    case TransformKind::Logit: return std::log(x / (1.0 - x));
    case TransformKind::ScaledLogit: {
      double p = (x - lower) / (upper - lower);
      return std::log(p / (1.0 - p));
    }
  }
  return x;
}

double Transform::inverse(double u) const {
  auto logistic = [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
  switch (kind) {
    case TransformKind::Identity: return u;
    case TransformKind::Log: return std::exp(u);
    case TransformKind::Logit: return logistic(u);
    case TransformKind::ScaledLogit: return lower + (upper - lower) * logistic(u);
  }
  return u;
}

double Transform::derivative(double x) const {
  switch (kind) {
    case TransformKind::Identity: return 1.0;
    case TransformKind::Log: return x;
    case TransformKind::Logit: return x * (1.0 - x);
    case TransformKind::ScaledLogit: return (x - lower) * (upper - x) / (upper - lower);
  }
  return 1.0;
}

double Transform::log_jacobian(double x) const { return std::log(std::abs(derivative(x))); }

std::string Transform::describe() const {
  switch (kind) {
    case TransformKind::Identity: return "identity";
    case TransformKind::Log: return "log";
    case TransformKind::Logit: return "logit";
    case TransformKind::ScaledLogit: {
      std::ostringstream os;
      os << "scaled_logit(" << lower << ", " << upper << ")";
      return os.str();
    }
  }
  return "?";
}

// ---------------------------------------------------------------- priors

double Prior::log_density(double x) const {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  switch (kind) {
    case PriorKind::Uniform:
      return (x >= a && x <= b) ? -std::log(b - a) : kNegInf;
    case PriorKind::Normal: {
      double z = (x - a) / b;
      return -0.5 * z * z - std::log(b) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    case PriorKind::LogNormal: {
      if (x <= 0.0) return kNegInf;
      double z = (std::log(x) - a) / b;
      return -0.5 * z * z - std::log(x * b) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    case PriorKind::Dirac:
      return 0.0;
  }
  return kNegInf;
}

double Prior::support_lower() const {
  switch (kind) {
    case PriorKind::Uniform: return a;
    case PriorKind::LogNormal: return 0.0;
    default: return -std::numeric_limits<double>::infinity();
  }
}

double Prior::support_upper() const {
  if (kind == PriorKind::Uniform) return b;
  return std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------- lookups

std::size_t ModelSpec::compartment_index(std::string_view name) const {
  for (std::size_t i = 0; i < compartments.size(); ++i)
    if (compartments[i] == name) return i;
  throw ModelError("unknown compartment '" + std::string(name) + "'");
}

std::optional<std::size_t> ModelSpec::find_parameter(std::string_view name) const {
  for (std::size_t i = 0; i < parameters.size(); ++i)
    if (parameters[i].name == name) return i;
  return std::nullopt;
}

std::size_t ModelSpec::parameter_index(std::string_view name) const {
  if (auto i = find_parameter(name)) return *i;
  throw ModelError("unknown parameter '" + std::string(name) + "'");
}

std::optional<std::size_t> ModelSpec::find_observation(std::string_view name) const {
  for (std::size_t i = 0; i < observations.size(); ++i)
    if (observations[i].name == name) return i;
  return std::nullopt;
}

Eigen::MatrixXd ModelSpec::stoichiometry() const {
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(compartments.size()),
                                            static_cast<Eigen::Index>(reactions.size()));
  for (std::size_t k = 0; k < reactions.size(); ++k)
    for (std::size_t i = 0; i < compartments.size(); ++i)
      l(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = reactions[k].effect[i];
  return l;
}

std::vector<std::size_t> ModelSpec::free_parameters() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < parameters.size(); ++i)
    if (parameters[i].is_free()) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------- parsing

namespace {

const std::set<std::string, std::less<>> kReserved = {"t", "N", "pi", "EXTERNAL"};

double number_field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_number()) throw ModelError(where + ": missing numeric field '" + key + "'");
  return j.at(key).get<double>();
}

Expr expr_field(const json& j, const char* key, const std::string& where, const char* fallback = nullptr) {
  if (!j.contains(key)) {
    if (fallback) return parse_expr(fallback);
    throw ModelError(where + ": missing expression field '" + key + "'");
  }
  const json& v = j.at(key);
  std::string text = v.is_number() ? v.dump() : v.get<std::string>();
  try {
    return parse_expr(text);
  } catch (const ExprSyntaxError& e) {
    throw ModelError(where + ": in '" + key + "': " + e.what());
  }
}

Prior parse_prior(const json& j, const std::string& where) {
  Prior p;
  std::string dist = j.value("dist", std::string("dirac"));
  if (dist == "uniform") {
    p.kind = PriorKind::Uniform;
    p.a = number_field(j, "lower", where);
    p.b = number_field(j, "upper", where);
    if (!(p.a < p.b)) throw ModelError(where + ": uniform prior requires lower < upper");
  } else if (dist == "normal") {
    p.kind = PriorKind::Normal;
    p.a = number_field(j, "mean", where);
    p.b = number_field(j, "sd", where);
    if (!(p.b > 0.0)) throw ModelError(where + ": normal prior requires sd > 0");
  } else if (dist == "lognormal") {
    p.kind = PriorKind::LogNormal;
    p.a = number_field(j, "meanlog", where);
    p.b = number_field(j, "sdlog", where);
    if (!(p.b > 0.0)) throw ModelError(where + ": lognormal prior requires sdlog > 0");
  } else if (dist == "dirac") {
    p.kind = PriorKind::Dirac;
  } else {
    throw ModelError(where + ": unknown prior distribution '" + dist + "'");
  }
  return p;
}

Transform parse_transform(const json& j, const std::string& where, const Prior* prior) {
  Transform t;
  std::string kind;
  if (j.is_string()) {
    kind = j.get<std::string>();
  } else if (j.is_object()) {
    kind = j.value("type", std::string());
    if (j.contains("lower")) t.lower = number_field(j, "lower", where);
    if (j.contains("upper")) t.upper = number_field(j, "upper", where);
  } else {
    throw ModelError(where + ": transform must be a string or object");
  }
  if (kind == "identity") {
    t.kind = TransformKind::Identity;
  } else if (kind == "log") {
    t.kind = TransformKind::Log;
  } else if (kind == "logit") {
    t.kind = TransformKind::Logit;
  } else if (kind == "scaled_logit") {
    t.kind = TransformKind::ScaledLogit;
    if (j.is_string()) {
      if (!prior || prior->kind != PriorKind::Uniform)
        throw ModelError(where + ": scaled_logit without bounds needs a uniform prior");
      t.lower = prior->a;
      t.upper = prior->b;
    }
    if (!(t.lower < t.upper)) throw ModelError(where + ": scaled_logit requires lower < upper");
  } else {
    throw ModelError(where + ": unknown transform '" + kind + "'");
  }
  return t;
}

Transform default_transform(const Prior& p) {
  Transform t;
  if (p.kind == PriorKind::Uniform) {
    t.kind = TransformKind::ScaledLogit;
    t.lower = p.a;
    t.upper = p.b;
  } else if (p.kind == PriorKind::LogNormal) {
    t.kind = TransformKind::Log;
  }
  return t;
}

void check_transform_prior(const Transform& t, const Prior& p, const std::string& where) {
  if (p.kind == PriorKind::Dirac || t.kind == TransformKind::Identity) return;
  double lo = p.support_lower();
  double hi = p.support_upper();
  double tlo = 0.0, thi = 1.0;
  switch (t.kind) {
    case TransformKind::Log: tlo = 0.0; thi = std::numeric_limits<double>::infinity(); break;
    case TransformKind::Logit: break;
    case TransformKind::ScaledLogit: tlo = t.lower; thi = t.upper; break;
    default: break;
  }
  if (lo < tlo || hi > thi)
    throw ModelError(where + ": prior support is not contained in the domain of the " + t.describe() + " transform");
}

struct NameRegistry {
  std::set<std::string, std::less<>> names;
  void add(const std::string& name, const std::string& what) {
    if (name.empty()) throw ModelError(what + " with empty name");
    if (kReserved.count(name) && name != "N") throw ModelError(what + " '" + name + "' uses a reserved name");
    if (!names.insert(name).second) throw ModelError("duplicate " + what + " '" + name + "'");
  }
};

void check_symbols(const Expr& e, const std::set<std::string, std::less<>>& allowed, const std::string& where) {
  for (const auto& s : free_symbols(e))
    if (!allowed.count(s)) throw ModelError("unknown symbol '" + s + "' in " + where);
}

}  // namespace

ModelSpec parse_model(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ModelError(std::string("model is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ModelError("model root must be an object");
  if (!root.contains("ssm_model") || root.at("ssm_model") != 1)
    throw ModelError("model must declare \"ssm_model\": 1");

  ModelSpec m;
  NameRegistry registry;

  for (const auto& c : root.value("compartments", json::array())) {
    std::string name = c.get<std::string>();
    if (std::find(m.compartments.begin(), m.compartments.end(), name) != m.compartments.end())
      throw ModelError("duplicate compartment '" + name + "'");
    registry.add(name, "compartment");
    m.compartments.push_back(name);
  }
  const std::size_t c = m.compartments.size();

  for (const auto& pj : root.value("parameters", json::array())) {
    ParameterDef p;
    p.name = pj.at("name").get<std::string>();
    std::string where = "parameter '" + p.name + "'";
    registry.add(p.name, "parameter");
    if (pj.contains("prior")) p.prior = parse_prior(pj.at("prior"), where);
    p.transform = pj.contains("transform") ? parse_transform(pj.at("transform"), where, &p.prior)
                                           : default_transform(p.prior);
    check_transform_prior(p.transform, p.prior, where);
    std::string role = pj.value("role", std::string(p.prior.kind == PriorKind::Dirac ? "fixed" : "estimated"));
    if (role == "estimated") {
      p.role = ParamRole::Estimated;
    } else if (role == "fixed") {
      p.role = ParamRole::Fixed;
    } else if (role == "initial-condition") {
      p.role = ParamRole::InitialCondition;
      p.compartment = pj.value("compartment", std::string());
      if (!p.compartment.empty()) m.compartment_index(p.compartment);
    } else {
      throw ModelError(where + ": unknown role '" + role + "'");
    }
    m.parameters.push_back(std::move(p));
  }

  if (root.contains("population_size")) {
    std::string n = root.at("population_size").get<std::string>();
    auto idx = m.find_parameter(n);
    if (!idx) throw ModelError("population_size refers to unknown parameter '" + n + "'");
    m.population_size = *idx;
  }

  // Initial-condition targets are unique.
  {
    std::set<std::string> targets;
    for (const auto& p : m.parameters)
      if (!p.compartment.empty() && !targets.insert(p.compartment).second)
        throw ModelError("compartment '" + p.compartment + "' has more than one initial-condition parameter");
  }

  std::set<std::string, std::less<>> state_symbols(m.compartments.begin(), m.compartments.end());
  for (const auto& p : m.parameters) state_symbols.insert(p.name);
  state_symbols.insert("t");
  if (m.population_size) state_symbols.insert("N");

  // Diffusions are declared before reactions so that rates may refer to them.
  for (const auto& dj : root.value("diffusions", json::array())) {
    DiffusionDef d;
    d.name = dj.at("name").get<std::string>();
    std::string where = "diffusion '" + d.name + "'";
    registry.add(d.name, "diffusion");
    d.transform = dj.contains("transform") ? parse_transform(dj.at("transform"), where, nullptr) : Transform{};
    d.drift = expr_field(dj, "drift", where, "0");
    d.volatility = expr_field(dj, "volatility", where);
    std::string init = dj.value("initial", std::string());
    auto idx = m.find_parameter(init);
    if (!idx) throw ModelError(where + ": initial value parameter '" + init + "' is not declared");
    d.initial_value_param = *idx;
    m.diffusions.push_back(std::move(d));
  }
  for (const auto& d : m.diffusions) state_symbols.insert(d.name);
  for (const auto& d : m.diffusions) {
    check_symbols(d.drift, state_symbols, "drift of diffusion '" + d.name + "'");
    check_symbols(d.volatility, state_symbols, "volatility of diffusion '" + d.name + "'");
  }

  std::map<std::string, std::size_t> group_index;
  std::size_t k = 0;
  for (const auto& rj : root.value("reactions", json::array())) {
    ReactionDef r;
    r.name = rj.value("name", "reaction " + std::to_string(k + 1));
    std::string where = "reaction '" + r.name + "'";
    r.effect.assign(c, 0);

    bool sugar = rj.contains("from") || rj.contains("to");
    if (sugar && rj.contains("effect")) throw ModelError(where + ": use either from/to or effect, not both");
    std::optional<std::size_t> declared_source;
    bool declared_external = false;
    if (sugar) {
      if (rj.contains("from")) {
        std::size_t from = m.compartment_index(rj.at("from").get<std::string>());
        r.effect[from] -= 1;
        declared_source = from;
      } else {
        declared_external = true;
      }
      if (rj.contains("to")) r.effect[m.compartment_index(rj.at("to").get<std::string>())] += 1;
    } else if (rj.contains("effect")) {
      for (const auto& [name, v] : rj.at("effect").items()) {
        std::size_t i;
        try {
          i = m.compartment_index(name);
        } catch (const ModelError&) {
          throw ModelError(where + ": effect refers to unknown compartment '" + name + "'");
        }
        r.effect[i] += v.get<int>();
      }
    }
    if (std::all_of(r.effect.begin(), r.effect.end(), [](int v) { return v == 0; }))
      throw ModelError(where + ": empty effect vector");

    if (rj.contains("source")) {
      std::string s = rj.at("source").get<std::string>();
      if (s == "EXTERNAL") {
        declared_source.reset();
        declared_external = true;
      } else {
        declared_source = m.compartment_index(s);
        declared_external = false;
      }
    }
    if (declared_source) {
      r.source = *declared_source;
    } else if (declared_external) {
      r.source = kExternalSource;
    } else {
      std::vector<std::size_t> negatives;
      for (std::size_t i = 0; i < c; ++i)
        if (r.effect[i] < 0) negatives.push_back(i);
      if (negatives.size() > 1) throw ModelError(where + ": ambiguous source, declare \"source\" explicitly");
      r.source = negatives.empty() ? kExternalSource : negatives.front();
    }
    r.absolute_outflow = rj.value("absolute_outflow", false);
    if (r.is_external() && !r.absolute_outflow)
      for (std::size_t i = 0; i < c; ++i)
        if (r.effect[i] < 0)
          throw ModelError(where + ": external source cannot remove individuals from '" + m.compartments[i] +
                           "' unless absolute_outflow is set");

    r.rate = expr_field(rj, "rate", where);
    check_symbols(r.rate, state_symbols, "rate of " + where);

    if (rj.contains("white_noise")) {
      const json& wn = rj.at("white_noise");
      std::string group = wn.value("group", r.name);
      std::string sd = wn.at("sd").get<std::string>();
      auto sd_idx = m.find_parameter(sd);
      if (!sd_idx) throw ModelError(where + ": white-noise sd parameter '" + sd + "' is not declared");
      auto [it, inserted] = group_index.emplace(group, m.noise_groups.size());
      if (inserted) m.noise_groups.push_back({group, *sd_idx, {}});
      NoiseGroup& g = m.noise_groups[it->second];
      if (g.sd_param != *sd_idx)
        throw ModelError(where + ": noise group '" + group + "' already uses sd parameter '" +
                         m.parameters[g.sd_param].name + "'");
      g.reactions.push_back(k);
      r.noise_group = it->second;
    }

    for (const auto& a : rj.value("accumulators", json::array())) {
      std::string name = a.get<std::string>();
      auto it = std::find(m.accumulators.begin(), m.accumulators.end(), name);
      if (it == m.accumulators.end()) {
        registry.add(name, "accumulator");
        m.accumulators.push_back(name);
        it = m.accumulators.end() - 1;
      }
      r.accumulators.push_back(static_cast<std::size_t>(it - m.accumulators.begin()));
    }
    m.reactions.push_back(std::move(r));
    ++k;
  }

  m.conserves_population = !m.reactions.empty();
  for (const auto& r : m.reactions) {
    int sum = 0;
    for (int v : r.effect) sum += v;
    if (sum != 0 || r.is_external()) m.conserves_population = false;
  }

  std::set<std::string, std::less<>> obs_symbols = state_symbols;
  obs_symbols.insert(m.accumulators.begin(), m.accumulators.end());
  std::set<std::string> obs_names;
  for (const auto& oj : root.value("observations", json::array())) {
    ObservationDef o;
    o.name = oj.at("name").get<std::string>();
    std::string where = "observation '" + o.name + "'";
    if (!obs_names.insert(o.name).second) throw ModelError("duplicate observation '" + o.name + "'");
    std::string dist = oj.value("distribution", std::string("poisson"));
    if (dist == "poisson") {
      o.family = ObservationFamily::Poisson;
      o.observed = expr_field(oj, "observed", where);
    } else if (dist == "discretized_normal" || dist == "normal") {
      o.family = dist == "normal" ? ObservationFamily::Normal : ObservationFamily::DiscretizedNormal;
      o.observed = expr_field(oj, "observed", where);
      o.variance = expr_field(oj, "variance", where);
      check_symbols(o.variance, obs_symbols, "variance of " + where);
    } else if (dist == "binomial") {
      o.family = ObservationFamily::Binomial;
      o.trials = expr_field(oj, "n", where);
      o.probability = expr_field(oj, "p", where);
      check_symbols(o.trials, obs_symbols, "n of " + where);
      check_symbols(o.probability, obs_symbols, "p of " + where);
      o.observed = o.trials * o.probability;
    } else {
      throw ModelError(where + ": unknown distribution '" + dist + "'");
    }
    check_symbols(o.observed, obs_symbols, where);
    m.observations.push_back(std::move(o));
  }
  return m;
}

ModelSpec load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open model file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model(ss.str());
}

// ---------------------------------------------------------------- theta

ParamVector parameter_vector(const ModelSpec& model, const std::map<std::string, double>& values) {
  ParamVector out(model.parameters.size());
  for (std::size_t i = 0; i < model.parameters.size(); ++i) {
    auto it = values.find(model.parameters[i].name);
    if (it == values.end()) throw ModelError("missing value for parameter '" + model.parameters[i].name + "'");
    out[i] = it->second;
  }
  return out;
}

Eigen::VectorXd transform_theta(const ModelSpec& model, const std::map<std::string, double>& values) {
  auto free = model.free_parameters();
  Eigen::VectorXd u(static_cast<Eigen::Index>(free.size()));
  for (std::size_t i = 0; i < free.size(); ++i) {
    const ParameterDef& p = model.parameters[free[i]];
    auto it = values.find(p.name);
    if (it == values.end()) throw ModelError("missing value for parameter '" + p.name + "'");
    if (!p.transform.in_domain(it->second))
      throw ModelError("value " + std::to_string(it->second) + " of parameter '" + p.name +
                       "' is outside the domain of its " + p.transform.describe() + " transform");
    u(static_cast<Eigen::Index>(i)) = p.transform.forward(it->second);
  }
  return u;
}

std::map<std::string, double> inverse_transform_theta(const ModelSpec& model, const Eigen::VectorXd& u,
                                                      std::map<std::string, double> base) {
  auto free = model.free_parameters();
  if (static_cast<std::size_t>(u.size()) != free.size())
    throw ModelError("transformed vector has wrong dimension");
  for (std::size_t i = 0; i < free.size(); ++i) {
    const ParameterDef& p = model.parameters[free[i]];
    base[p.name] = p.transform.inverse(u(static_cast<Eigen::Index>(i)));
  }
  return base;
}

ParameterSpace::ParameterSpace(const ModelSpec& model) : model_(&model), free_(model.free_parameters()) {}

std::vector<std::string> ParameterSpace::names() const {
  std::vector<std::string> out;
  for (auto i : free_) out.push_back(model_->parameters[i].name);
  return out;
}

Eigen::VectorXd ParameterSpace::to_transformed(const ParamVector& natural) const {
  Eigen::VectorXd u(static_cast<Eigen::Index>(free_.size()));
  for (std::size_t i = 0; i < free_.size(); ++i) {
    const ParameterDef& p = model_->parameters[free_[i]];
    double x = natural[free_[i]];
    if (!p.transform.in_domain(x))
      throw ModelError("value " + std::to_string(x) + " of parameter '" + p.name + "' is outside the domain of its " +
                       p.transform.describe() + " transform");
    u(static_cast<Eigen::Index>(i)) = p.transform.forward(x);
  }
  return u;
}

ParamVector ParameterSpace::to_natural(const Eigen::VectorXd& u, ParamVector base) const {
  for (std::size_t i = 0; i < free_.size(); ++i)
    base[free_[i]] = model_->parameters[free_[i]].transform.inverse(u(static_cast<Eigen::Index>(i)));
  return base;
}

double ParameterSpace::log_prior(const ParamVector& natural) const {
  double lp = 0.0;
  for (auto i : free_) lp += model_->parameters[i].prior.log_density(natural[i]);
  return lp;
}

double ParameterSpace::log_jacobian(const ParamVector& natural) const {
  double lj = 0.0;
  for (auto i : free_) lj += model_->parameters[i].transform.log_jacobian(natural[i]);
  return lj;
}

}  // namespace ssm

#include "ssm/observe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace ssm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kMinCountVariance = 1e-6;

std::string trim(std::string s) {
  auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& text, std::size_t line, const char* what) {
  try {
    std::size_t used = 0;
    double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw DataError("line " + std::to_string(line) + ": " + what + " '" + text + "' is not a number");
  }
}

bool is_count_family(ObservationFamily f) {
  return f == ObservationFamily::Poisson || f == ObservationFamily::Binomial || f == ObservationFamily::DiscretizedNormal;
}

// log(Phi(b) - Phi(a)) for a < b
double log_normal_interval(double a, double b) {
  auto Phi = [](double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); };
  double p;
  if (a > 0.0)
    p = 0.5 * (std::erfc(a / std::numbers::sqrt2) - std::erfc(b / std::numbers::sqrt2));
  else
    p = Phi(b) - Phi(a);
  if (p > 0.0) return std::log(p);
  // both tails underflow: density at the midpoint times the width
  double mid = 0.5 * (a + b);
  return -0.5 * mid * mid - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(b - a);
}

}  // namespace

double DataSet::min_interval() const {
  double best = 0.0;
  for (std::size_t i = 1; i < times.size(); ++i) {
    double gap = times[i].t - times[i - 1].t;
    if (gap > 0.0 && (best == 0.0 || gap < best)) best = gap;
  }
  return best;
}

DataSet parse_data(const std::string& csv_text, const ModelSpec& model) {
  std::istringstream in(csv_text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  DataSet ds;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (!header) {
      if (fields.size() != 3 || fields[0] != "time" || fields[1] != "stream" || fields[2] != "value")
        throw DataError("line " + std::to_string(lineno) + ": expected header 'time,stream,value'");
      header = true;
      continue;
    }
    if (fields.size() == 2) fields.emplace_back();
    if (fields.size() != 3) throw DataError("line " + std::to_string(lineno) + ": expected 3 fields");
    double t = parse_number(fields[0], lineno, "time");
    auto stream = model.find_observation(fields[1]);
    if (!stream) throw DataError("line " + std::to_string(lineno) + ": unknown stream '" + fields[1] + "'");
    const auto& def = model.observations[*stream];
    Datum d{*stream, std::nullopt};
    if (!fields[2].empty()) {
      double v = parse_number(fields[2], lineno, "value");
      if (is_count_family(def.family)) {
        if (v < 0.0) throw DataError("line " + std::to_string(lineno) + ": negative count " + fields[2]);
        double r = std::round(v);
        if (std::abs(v - r) > 1e-9)
          throw DataError("line " + std::to_string(lineno) + ": value " + fields[2] + " of count stream '" + def.name +
                          "' is not an integer");
        v = r;
      }
      d.value = v;
    }
    if (!ds.times.empty() && t < ds.times.back().t)
      throw DataError("line " + std::to_string(lineno) + ": timestamps must be nondecreasing");
    if (ds.times.empty() || t != ds.times.back().t) ds.times.push_back({t, {}});
    for (const auto& prev : ds.times.back().data)
      if (prev.stream == d.stream)
        throw DataError("line " + std::to_string(lineno) + ": duplicate stream '" + def.name + "' at time " +
                        fields[0]);
    ds.times.back().data.push_back(d);
  }
  if (!header) throw DataError("empty data file");
  return ds;
}

DataSet load_data(const std::string& path, const ModelSpec& model) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open data file '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_data(buf.str(), model);
}

double poisson_log_pmf(double y, double mean) {
  if (!(mean > 0.0)) return y == 0.0 ? 0.0 : kNegInf;
  return y * std::log(mean) - mean - std::lgamma(y + 1.0);
}

double discretized_normal_log_pmf(double y, double mean, double variance) {
  double sd = std::sqrt(variance);
  double hi = (y + 0.5 - mean) / sd;
  if (y <= 0.0) {
    // all mass below 0.5 goes to zero
    double p = 0.5 * std::erfc(-hi / std::numbers::sqrt2);
    return p > 0.0 ? std::log(p) : log_normal_interval(hi - 1.0, hi);
  }
  return log_normal_interval((y - 0.5 - mean) / sd, hi);
}

double normal_log_pdf(double y, double mean, double variance) {
  double e = y - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * variance) + e * e / variance);
}

double binomial_log_pmf(double y, double trials, double p) {
  if (y < 0.0 || y > trials) return kNegInf;
  if (p <= 0.0) return y == 0.0 ? 0.0 : kNegInf;
  if (p >= 1.0) return y == trials ? 0.0 : kNegInf;
  return std::lgamma(trials + 1.0) - std::lgamma(y + 1.0) - std::lgamma(trials - y + 1.0) + y * std::log(p) +
         (trials - y) * std::log1p(-p);
}

double log_density(const Engine& engine, std::size_t stream, double y, std::span<const double> binding) {
  const auto& def = engine.model().observations[stream];
  switch (def.family) {
    case ObservationFamily::Poisson:
      return poisson_log_pmf(y, engine.observed_value(stream, binding));
    case ObservationFamily::DiscretizedNormal: {
      double v = engine.observation_variance(stream, binding);
      if (!(v > 0.0)) return kNegInf;
      return discretized_normal_log_pmf(y, engine.observed_value(stream, binding), v);
    }
    case ObservationFamily::Normal: {
      double v = engine.observation_variance(stream, binding);
      if (!(v > 0.0)) return kNegInf;
      return normal_log_pdf(y, engine.observed_value(stream, binding), v);
    }
    case ObservationFamily::Binomial:
      return binomial_log_pmf(y, std::round(engine.observation_trials(stream, binding)),
                              engine.observation_probability(stream, binding));
  }
  return kNegInf;
}

double sample_observation(const Engine& engine, std::size_t stream, std::span<const double> binding, Rng& rng) {
  const auto& def = engine.model().observations[stream];
  switch (def.family) {
    case ObservationFamily::Poisson:
      return static_cast<double>(rng.poisson(std::max(0.0, engine.observed_value(stream, binding))));
    case ObservationFamily::DiscretizedNormal: {
      double y = engine.observed_value(stream, binding) +
                 std::sqrt(std::max(0.0, engine.observation_variance(stream, binding))) * rng.normal();
      return std::max(0.0, std::round(y));
    }
    case ObservationFamily::Normal:
      return engine.observed_value(stream, binding) +
             std::sqrt(std::max(0.0, engine.observation_variance(stream, binding))) * rng.normal();
    case ObservationFamily::Binomial: {
      double n = std::max(0.0, std::round(engine.observation_trials(stream, binding)));
      double p = std::clamp(engine.observation_probability(stream, binding), 0.0, 1.0);
      return static_cast<double>(rng.binomial(static_cast<std::uint64_t>(n), p));
    }
  }
  return 0.0;
}

double log_density_at(const Engine& engine, const ObservationTime& obs, std::span<const double> binding) {
  double total = 0.0;
  for (const auto& d : obs.data) {
    if (!d.value) continue;
    total += log_density(engine, d.stream, *d.value, binding);
    if (total == kNegInf) break;
  }
  return total;
}

LinearizedObservation linearized_observation(const Engine& engine, std::size_t stream, const StateVector& s,
                                             const ParamVector& theta) {
  std::vector<double> binding = engine.make_binding(theta);
  engine.bind_state(s.x, s.t, binding);
  LinearizedObservation out;
  out.h = engine.observed_value(stream, binding);
  out.gradient = engine.observation_gradient(stream, s, theta);
  const auto& def = engine.model().observations[stream];
  switch (def.family) {
    case ObservationFamily::Poisson:
      out.variance = std::max(out.h, kMinCountVariance);
      break;
    case ObservationFamily::DiscretizedNormal:
      out.variance = std::max(engine.observation_variance(stream, binding), kMinCountVariance);
      break;
    case ObservationFamily::Normal:
      out.variance = engine.observation_variance(stream, binding);
      break;
    case ObservationFamily::Binomial: {
      double n = engine.observation_trials(stream, binding);
      double p = engine.observation_probability(stream, binding);
      out.variance = std::max(n * p * (1.0 - p), kMinCountVariance);
      break;
    }
  }
  return out;
}

}  // namespace ssm

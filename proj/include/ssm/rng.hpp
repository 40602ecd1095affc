#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace ssm {

/// xoshiro256++ generator with counter-derived streams.
///
/// `Rng::stream(seed, {a, b, ...})` hashes the seed and keys into an
/// independent state, so work item (a, b) always receives the same draws
/// whatever thread executes it.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()();

  /// Uniform on [0, 1).
  double uniform();
  double normal();
  double exponential(double rate);
  /// Gamma with given shape and scale.
  double gamma(double shape, double scale);
  std::uint64_t poisson(double mean);
  std::uint64_t binomial(std::uint64_t trials, double p);

 private:
  std::uint64_t s_[4];
};

/// Stream tags; keep distinct so purposes never share draws.
enum StreamTag : std::uint64_t {
  kTagParticleInit = 1,
  kTagParticleStep = 2,
  kTagResample = 3,
  kTagPathSample = 4,
  kTagSimulate = 5,
  kTagChain = 6,
  kTagMif = 7,
  kTagForecast = 8,
  kTagFilterSeed = 9,
};

}  // namespace ssm

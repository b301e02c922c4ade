#pragma once

#include <cstdint>
#include <string>

#include "polynext/tensor.hpp"

namespace polynext {

/// Deterministic generator (xoshiro256**, splitmix64 seeding). The standard
/// library distributions are implementation-defined, so sampling is done by
/// hand here to keep runs reproducible across compilers.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0);

  uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller; consumes two uniforms per pair.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  int64_t below(int64_t n);

  /// Independent stream derived from this generator's seed and a stream id;
  /// the parent state is not consumed.
  Rng fork(uint64_t stream) const;

  Tensor normal_tensor(Shape shape, double mean, double stddev);
  Tensor uniform_tensor(Shape shape, double lo, double hi);

  std::string serialize_state() const;
  static Rng deserialize_state(const std::string& blob);

 private:
  uint64_t state_[4];
  uint64_t seed_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace polynext

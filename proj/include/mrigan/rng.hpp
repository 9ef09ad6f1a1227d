#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace mrigan {

// Deterministic RNG. The distribution transforms are pinned here instead of
// using std::*_distribution, whose output sequences differ across standard
// library implementations.
class Rng {
public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // Box-Muller with a cached spare.
  double normal();
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Normal(0, sigma) resampled until within +/- limit*sigma.
  double trunc_normal(double sigma, double limit = 2.0);

  // Uniform integer in [0, n).
  long index(long n);

  std::vector<long> permutation(long n);

  std::string save_state() const;
  void load_state(const std::string& state);

private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64-style combination for deriving independent stream seeds.
uint64_t mix_seed(std::initializer_list<uint64_t> parts);

} // namespace mrigan

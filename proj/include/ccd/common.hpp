#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace ccd {

/// Bad input or configuration (CLI exit code 1).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure while running an otherwise valid request (CLI exit code 2).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seeded random source with portable distributions.
///
/// std::uniform_real_distribution and friends are implementation defined, so
/// the conversions from raw engine output are done here to keep generated
/// data identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi]; returns lo when the range is empty.
  double uniform(double lo, double hi) { return hi > lo ? lo + (hi - lo) * uniform() : lo; }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);

  bool bernoulli(double p) { return p > 0.0 && uniform() < p; }

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  /// Truncated normal on [-2 stddev, 2 stddev] by rejection.
  double truncated_normal(double stddev);

  /// Derives an independent child seed (splitmix64 of the state and a tag).
  std::uint64_t fork_seed(std::uint64_t tag);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Number of worker threads to use; 0 means hardware concurrency.
std::size_t resolve_workers(std::size_t requested);

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Exceptions from
/// workers are rethrown on the calling thread (the lowest index wins).
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace ccd

#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace curvlab {

/// Counter-based generator: the i-th draw is splitmix64(key + i·γ).
/// Output depends only on (seed, stream, counter), so sequences are identical
/// across platforms and standard libraries. Normal draws use Box–Muller.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

std::uint64_t mix64(std::uint64_t x);

/// Derives an independent child seed for a named purpose ("init", "batches", ...).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0);

}  // namespace curvlab

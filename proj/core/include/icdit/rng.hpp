#pragma once

#include <cstdint>

namespace icdit {

/// Counter-based generator: draw i is a pure function of (key, i).
///
/// The key is derived from the seed and a stream id, so independent
/// consumers (per-sample data, per-step noise) take their own stream via
/// split() and never depend on the order in which other streams are used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  /// Child generator for a named sub-stream. Does not advance *this.
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform on [0, n); unbiased.
  std::uint64_t below(std::uint64_t n);
  /// Uniform on the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller.
  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace icdit

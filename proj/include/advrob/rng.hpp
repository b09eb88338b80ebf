#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <vector>

namespace advrob {

/// Seeded generator whose output is fully specified by the C++ standard
/// (mt19937_64 + seed_seq), so streams match across platforms. The real
/// valued draws below are computed by hand because the standard
/// distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(make_seq({seed})) {}

  /// Stream keyed by several integers, e.g. (run seed, sample, restart).
  Rng(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) : engine_(make_seq({a, b, c})) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  /// Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

 private:
  static std::seed_seq make_seq(std::initializer_list<std::uint64_t> keys) {
    std::vector<std::uint32_t> words;
    for (auto k : keys) {
      words.push_back(static_cast<std::uint32_t>(k));
      words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    return std::seed_seq(words.begin(), words.end());
  }

  // seed_seq is not copyable, so the engine is built from a temporary.
  struct Engine : std::mt19937_64 {
    explicit Engine(std::seed_seq&& seq) : std::mt19937_64(seq) {}
  };
  Engine engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace advrob

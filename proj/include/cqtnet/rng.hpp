#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace cqtnet {

// Seed for an independent stage stream: hash of (stage name, global seed).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage);

// mt19937_64 with distribution helpers written out by hand so that draws are
// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer on the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();

  std::string serialize() const;
  static Rng deserialize(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cqtnet

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>

namespace bnnlab {

std::uint64_t splitmix64(std::uint64_t& state);

// Mixes `value` into `seed`; used to derive independent stream seeds from a
// run seed and a stream tag (example index, epoch, grid point, ...).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t value);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

// xoshiro256** generator with Box-Muller normals. Output is identical on
// every platform for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next();
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, bound); bound > 0.
  std::uint64_t below(std::uint64_t bound);
  double normal();

  void fill_normal(std::span<double> out);

 private:
  std::array<std::uint64_t, 4> s_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace bnnlab

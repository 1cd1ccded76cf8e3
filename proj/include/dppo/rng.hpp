#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace dppo {

// Mixes a root seed with a stream name and up to two indices. Every stream in
// the project is keyed this way, so toggling one consumer never shifts the
// draws of another.
std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                          std::uint64_t a = 0, std::uint64_t b = 0);

// A seedable stream of random draws. The generator is std::mt19937_64, whose
// output sequence is fixed by the standard; the conversions below are written
// out by hand so results do not depend on the standard library vendor.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  RngStream(std::uint64_t root, std::string_view name, std::uint64_t a = 0,
            std::uint64_t b = 0)
      : engine_(derive_seed(root, name, a, b)) {}

  std::uint64_t next() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Requires n > 0.
  std::size_t below(std::size_t n);

  // k distinct indices from [0, n), in draw order (partial Fisher-Yates).
  std::vector<std::size_t> choose(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
};

}  // namespace dppo

#include "dppo/rng.hpp"

#include <numeric>
#include <utility>

#include "dppo/error.hpp"

namespace dppo {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                          std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = splitmix64(root ^ fnv1a(name));
  h = splitmix64(h ^ a);
  return splitmix64(h ^ (b * 0xd6e8feb86659fd93ULL));
}

std::size_t RngStream::below(std::size_t n) {
  if (n == 0) throw InvalidInput("RngStream::below: n must be positive");
  const std::uint64_t bound = n;
  // Reject the tail that would bias the modulus.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % bound);
}

std::vector<std::size_t> RngStream::choose(std::size_t n, std::size_t k) {
  if (k > n) throw InvalidInput("RngStream::choose: k exceeds n");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + below(n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace dppo

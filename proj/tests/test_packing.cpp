#include <doctest.h>

#include <numeric>

#include "dppo/commands.hpp"
#include "dppo/error.hpp"
#include "dppo/packing.hpp"
#include "dppo/rng.hpp"

using namespace dppo;

TEST_CASE("first-fit window example") {
  const std::vector<int> lengths = {6, 3, 4, 2, 5};
  const std::vector<int> ids = {0, 1, 2, 3, 4};
  const PackedBatch b = pack(ids, lengths, 10, 5, PackStrategy::first_fit);
  CHECK(b.sequences == std::vector<std::vector<int>>{{0, 1}, {2, 3}, {4}});
  CHECK(std::abs(density(b, lengths) - 20.0 / 30.0) < 1e-12);
  const PackedBatch off = pack(ids, lengths, 10, 5, PackStrategy::off);
  CHECK(off.sequences.size() == 5);
  CHECK(density(off, lengths) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK_NOTHROW(check_packing(b, ids, lengths));
}

TEST_CASE("window limits lookahead") {
  // With a window of one the packer cannot skip past the 5.
  const std::vector<int> lengths = {6, 5, 4};
  const std::vector<int> ids = {0, 1, 2};
  CHECK(pack(ids, lengths, 10, 1).sequences ==
        std::vector<std::vector<int>>{{0}, {1, 2}});
  CHECK(pack(ids, lengths, 10, 3).sequences ==
        std::vector<std::vector<int>>{{0, 2}, {1}});
}

TEST_CASE("edge cases") {
  const std::vector<int> lengths = {10};
  const PackedBatch one = pack(std::vector<int>{0}, lengths, 10, 4);
  CHECK(one.sequences == std::vector<std::vector<int>>{{0}});
  CHECK(density(one, lengths) == 1.0);

  const PackedBatch empty = pack(std::vector<int>{}, lengths, 10, 4);
  CHECK(empty.sequences.empty());
  CHECK(density(empty, lengths) == 1.0);

  CHECK_THROWS_AS(pack(std::vector<int>{0}, std::vector<int>{11}, 10, 4), InvalidInput);
  CHECK_THROWS_AS(parse_pack_strategy("next_fit"), InvalidInput);
  CHECK(parse_pack_strategy("best_fit_decreasing") == PackStrategy::best_fit_decreasing);
}

TEST_CASE("check_packing catches broken batches") {
  const std::vector<int> lengths = {6, 3, 4};
  const std::vector<int> ids = {0, 1, 2};
  PackedBatch b;
  b.l_max = 10;
  b.sequences = {{0, 2}, {1}};
  CHECK_NOTHROW(check_packing(b, ids, lengths));
  b.sequences = {{0, 1, 2}};
  CHECK_THROWS_AS(check_packing(b, ids, lengths), ConsistencyError);
  b.sequences = {{0}, {1}};
  CHECK_THROWS_AS(check_packing(b, ids, lengths), ConsistencyError);
  b.sequences = {{0, 1}, {1, 2}};
  CHECK_THROWS_AS(check_packing(b, ids, lengths), ConsistencyError);
}

TEST_CASE("randomized profiles: validity and dominance over one-per-slot") {
  const int l_max = 16;
  for (int profile = 0; profile < 1000; ++profile) {
    const auto lengths = pack_profile("mixed", 64, l_max, 99, profile);
    std::vector<int> ids(lengths.size());
    std::iota(ids.begin(), ids.end(), 0);
    const double base = density(pack(ids, lengths, l_max, 4, PackStrategy::off), lengths);
    for (PackStrategy s : {PackStrategy::first_fit, PackStrategy::best_fit_decreasing}) {
      const PackedBatch b = pack(ids, lengths, l_max, 4, s);
      CHECK_NOTHROW(check_packing(b, ids, lengths));
      CHECK(density(b, lengths) >= base);
      CHECK(density(b, lengths) <= 1.0);
    }
  }
}

TEST_CASE("uniform maximal lengths pack perfectly") {
  const auto lengths = pack_profile("uniform_max", 20, 12, 1, 0);
  std::vector<int> ids(lengths.size());
  std::iota(ids.begin(), ids.end(), 0);
  for (PackStrategy s :
       {PackStrategy::off, PackStrategy::first_fit, PackStrategy::best_fit_decreasing})
    CHECK(density(pack(ids, lengths, 12, 4, s), lengths) == 1.0);
}

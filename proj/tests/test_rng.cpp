#include "helpers.hpp"

#include <set>

using namespace owssl;

TEST_CASE("same seed and stream give identical sequences", "[rng]") {
  Rng a = make_rng(42, 3);
  Rng b = make_rng(42, 3);
  for (int i = 0; i < 100; ++i) REQUIRE(a() == b());
}

TEST_CASE("different streams decorrelate", "[rng]") {
  Rng a = make_rng(42, 0);
  Rng b = make_rng(42, 1);
  int equal = 0;
  for (int i = 0; i < 64; ++i) equal += a() == b() ? 1 : 0;
  REQUIRE(equal == 0);
}

TEST_CASE("mix64 separates nearby inputs", "[rng]") {
  std::set<std::uint64_t> outs;
  for (std::uint64_t i = 0; i < 1000; ++i) outs.insert(mix64(i));
  REQUIRE(outs.size() == 1000);
  REQUIRE(mix64(0) != 0);
}

TEST_CASE("shuffled_indices is a permutation", "[rng]") {
  Rng rng = make_rng(7);
  const auto idx = shuffled_indices(50, rng);
  REQUIRE(idx.size() == 50);
  std::set<std::size_t> seen(idx.begin(), idx.end());
  REQUIRE(seen.size() == 50);
  REQUIRE(*seen.begin() == 0);
  REQUIRE(*seen.rbegin() == 49);

  Rng rng2 = make_rng(7);
  REQUIRE(shuffled_indices(50, rng2) == idx);
}

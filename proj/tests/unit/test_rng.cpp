#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "qlab/rng.hpp"

using namespace qlab;

TEST_CASE("same seed gives the same stream") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    differs = differs || x != c.next();
  }
  CHECK(differs);
}

TEST_CASE("uniform stays in [0, 1) with the right mean") {
  Rng rng(1);
  double sum = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(sum / 20000 == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("below covers every value of a small range and nothing else") {
  Rng rng(2);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = rng.below(7);
    REQUIRE(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
  CHECK(rng.below(1) == 0);
}

TEST_CASE("normal draws have zero mean and unit variance") {
  Rng rng(3);
  double s = 0, sq = 0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    sq += z * z;
  }
  CHECK(std::abs(s / n) < 0.03);
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("shuffle is a permutation and depends on the seed") {
  std::vector<int> a(50);
  std::iota(a.begin(), a.end(), 0);
  std::vector<int> b(a);
  Rng(5).shuffle(a);
  Rng(6).shuffle(b);
  CHECK(a != b);
  std::sort(a.begin(), a.end());
  for (int i = 0; i < 50; ++i) CHECK(a[i] == i);
}

TEST_CASE("derived seeds separate by tag and are reproducible") {
  CHECK(derive_seed(7, {1}) == derive_seed(7, {1}));
  CHECK(derive_seed(7, {1}) != derive_seed(7, {2}));
  CHECK(derive_seed(7, {1}) != derive_seed(8, {1}));
  CHECK(derive_seed(7, {1, 2}) != derive_seed(7, {2, 1}));
}

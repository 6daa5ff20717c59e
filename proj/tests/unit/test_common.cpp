#include <doctest.h>

#include <set>

#include "cbct/common.hpp"

using namespace cbct;

TEST_CASE("fnv1a64 matches reference vectors") {
  CHECK(fnv1a64("", 0) == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("rng is deterministic per seed") {
  Rng a(42), b(42), c(43);
  bool same = true, diff = false;
  for (int i = 0; i < 100; ++i) {
    auto x = a.next_u64();
    if (x != b.next_u64()) same = false;
    if (x != c.next_u64()) diff = true;
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("derive_seed separates labels and indices") {
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 16; ++i) {
    seen.insert(derive_seed(7, "noise", i));
    seen.insert(derive_seed(7, "streaks", i));
  }
  CHECK(seen.size() == 32);
  CHECK(derive_seed(7, "noise", 3) == derive_seed(7, "noise", 3));
}

TEST_CASE("uniform_int covers inclusive range") {
  Rng r(1);
  int lo = 100, hi = -1;
  for (int i = 0; i < 2000; ++i) {
    int v = r.uniform_int(2, 5);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo == 2);
  CHECK(hi == 5);
}

TEST_CASE("uniform bounds and normal moments") {
  Rng r(9);
  double sum = 0, sum2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = r.uniform(-2.0, 3.0);
    CHECK(u >= -2.0);
    CHECK(u < 3.0);
    double z = r.normal();
    sum += z;
    sum2 += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sum2 / n - 1.0) < 0.05);
}

TEST_CASE("shuffle is a deterministic permutation") {
  Rng a(5), b(5);
  std::vector<int> v1{0, 1, 2, 3, 4, 5, 6, 7};
  auto v2 = v1;
  a.shuffle(v1);
  b.shuffle(v2);
  CHECK(v1 == v2);
  std::set<int> s(v1.begin(), v1.end());
  CHECK(s.size() == 8);
}

#include <doctest.h>

#include <cmath>

#include "cbct/common.hpp"
#include "cbct/pipeline.hpp"

using namespace cbct;
using namespace cbct::pipeline;

namespace {

Volume filled(int h, int w, int d, ValueDomain dom, double val) {
  Volume v = Volume::make(h, w, d, dom);
  std::fill(v.voxels.begin(), v.voxels.end(), val);
  return v;
}

Volume smooth_random(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Volume v = Volume::make(h, w, 1, ValueDomain::Unitless);
  for (double& x : v.voxels) x = rng.uniform(0.0, 100.0);
  // box blur to create correlated texture
  for (int pass = 0; pass < 2; ++pass) {
    Volume b = v;
    for (int y = 1; y < h - 1; ++y)
      for (int x = 1; x < w - 1; ++x) {
        double s = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) s += v.at(0, y + dy, x + dx);
        b.at(0, y, x) = s / 9.0;
      }
    v = b;
  }
  return v;
}

}  // namespace

TEST_CASE("hu to lac fixed points") {
  CHECK(std::abs(hu_to_lac_value(0.0) - 0.192) < 1e-9);
  CHECK(std::abs(hu_to_lac_value(-1000.0) - 0.0) < 1e-9);
  CHECK(std::abs(hu_to_lac_value(200.0) - 0.2304) < 1e-9);

  Volume v = Volume::make(1, 3, 1, ValueDomain::HU);
  v.voxels = {0.0, -1000.0, 200.0};
  Volume l = hu_to_lac(v);
  CHECK(l.domain == ValueDomain::LAC);
  CHECK(std::abs(l.voxels[0] - 0.192) < 1e-9);
  CHECK(std::abs(l.voxels[1]) < 1e-9);
  CHECK(std::abs(l.voxels[2] - 0.2304) < 1e-9);
}

TEST_CASE("lac to hu inverts the affine map") {
  for (double hu : {-1000.0, -500.0, 200.0})
    CHECK(std::abs(lac_to_hu_value(hu_to_lac_value(hu)) - hu) < 1e-6);
  CHECK(std::abs(lac_to_hu_value(0.192)) < 1e-6);
  CHECK(std::abs(lac_to_hu_value(0.0) + 1000.0) < 1e-6);

  Volume l = Volume::make(1, 2, 1, ValueDomain::LAC);
  l.voxels = {0.192, 0.0};
  Volume v = lac_to_hu(l);
  CHECK(v.domain == ValueDomain::HU);
  CHECK_THROWS(lac_to_hu(v));
  CHECK_THROWS(hu_to_lac(l));
}

TEST_CASE("hu to lac preserves ordering") {
  Rng rng(2);
  double prev_hu = -1000.0, prev_mu = hu_to_lac_value(-1000.0);
  for (int i = 0; i < 100; ++i) {
    const double hu = prev_hu + rng.uniform(0.01, 40.0);
    const double mu = hu_to_lac_value(hu);
    CHECK(mu > prev_mu);
    prev_hu = hu;
    prev_mu = mu;
  }
}

TEST_CASE("hu to lac rejects unclipped input") {
  Volume v = filled(2, 2, 1, ValueDomain::HU, -1024.0);
  CHECK_THROWS(hu_to_lac(v));
}

TEST_CASE("clip") {
  Volume v = Volume::make(1, 3, 1, ValueDomain::HU);
  v.voxels = {-1024.0, 0.0, 250.0};
  Volume c = clip_hu(v);
  CHECK(c.voxels == std::vector<double>{-1000.0, 0.0, 200.0});
  CHECK(clip_hu(c).voxels == c.voxels);
  Volume u = filled(1, 1, 1, ValueDomain::LAC, 0.1);
  CHECK_THROWS(clip_hu(u));
}

TEST_CASE("apply_mask") {
  Volume v = filled(4, 4, 1, ValueDomain::HU, 100.0);
  Volume ones = filled(4, 4, 1, ValueDomain::Unitless, 1.0);
  Volume zeros = filled(4, 4, 1, ValueDomain::Unitless, 0.0);
  CHECK(apply_mask(v, ones).voxels == v.voxels);
  for (double x : apply_mask(v, zeros).voxels) CHECK(x == 0.0);

  Volume checker = zeros;
  int count = 0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      if ((x + y) % 2 == 0) {
        checker.at(0, y, x) = 1.0;
        ++count;
      }
  Volume m = apply_mask(v, checker);
  int zeroed = 0;
  for (double x : m.voxels)
    if (x == 0.0) ++zeroed;
  CHECK(zeroed == 16 - count);
  CHECK(zeroed == 8);
  CHECK(apply_mask(m, checker).voxels == m.voxels);

  Volume small = filled(2, 2, 1, ValueDomain::Unitless, 1.0);
  CHECK_THROWS(apply_mask(v, small));
  Volume bad = filled(4, 4, 1, ValueDomain::Unitless, 0.5);
  CHECK_THROWS(apply_mask(v, bad));
}

TEST_CASE("crop_resize identity and constant") {
  Volume v = smooth_random(16, 16, 5);
  Volume id = crop_resize(v, Roi{0, 0, 16, 16}, 16);
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    CHECK(std::abs(id.voxels[i] - v.voxels[i]) < 1e-6);

  Volume c = filled(16, 16, 2, ValueDomain::HU, 42.0);
  Volume r = crop_resize(c, Roi{2, 3, 8, 8}, 8);
  for (double x : r.voxels) CHECK(x == doctest::Approx(42.0));
}

TEST_CASE("crop_resize ramp downsample doubles the slope") {
  Volume v = Volume::make(16, 16, 1, ValueDomain::Unitless);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) v.at(0, y, x) = static_cast<double>(x);
  Volume r = crop_resize(v, Roi{0, 0, 16, 16}, 8);
  for (int ox = 0; ox < 8; ++ox)
    CHECK(r.at(0, 3, ox) == doctest::Approx(2.0 * ox + 0.5));
}

TEST_CASE("crop_resize validation") {
  Volume v = filled(16, 16, 1, ValueDomain::HU, 0.0);
  CHECK_THROWS(crop_resize(v, Roi{0, 0, 17, 16}, 8));
  CHECK_THROWS(crop_resize(v, Roi{0, 0, 16, 16}, 12));
  CHECK_THROWS(crop_resize(v, Roi{0, 0, 0, 0}, 8));
}

TEST_CASE("rigid_align identity is bit exact") {
  Volume v = smooth_random(12, 12, 6);
  Volume out = rigid_align(v, RigidTransform{});
  CHECK(out.voxels == v.voxels);
}

TEST_CASE("rigid_align integer shift equals shifted original") {
  Volume v = smooth_random(16, 16, 7);
  Volume out = rigid_align(v, RigidTransform{0.0, 3.0, 0.0});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 13; ++x)
      CHECK(out.at(0, y, x) == doctest::Approx(v.at(0, y, x + 3)));
}

TEST_CASE("rigid_align 90 degree symmetry of a cross") {
  Volume v = Volume::make(33, 33, 1, ValueDomain::Unitless);
  for (int i = 0; i < 33; ++i) {
    v.at(0, 16, i) = 1.0;
    v.at(0, i, 16) = 1.0;
  }
  Volume out = rigid_align(v, RigidTransform{90.0, 0.0, 0.0});
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    CHECK(std::abs(out.voxels[i] - v.voxels[i]) < 1e-4);
}

TEST_CASE("rigid inverse composes to identity") {
  RigidTransform t{10.0, 4.0, -2.0};
  RigidTransform ti = t.inverse();
  CHECK(ti.rot_deg == -10.0);
  // shift-only inverse is the negated shift
  RigidTransform s{0.0, 4.0, 0.0};
  CHECK(s.inverse().dx == doctest::Approx(-4.0));
  CHECK(s.inverse().dy == doctest::Approx(0.0));

  // exact composition check in coordinates: T_ti(T_t(p)) == p
  const double th = t.rot_deg * M_PI / 180.0;
  auto apply = [](const RigidTransform& u, double x, double y, double cx,
                  double cy) {
    const double a = u.rot_deg * M_PI / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    return std::pair{c * (x - cx) - s * (y - cy) + cx + u.dx,
                     s * (x - cx) + c * (y - cy) + cy + u.dy};
  };
  (void)th;
  for (auto [px, py] : {std::pair{3.0, 7.0}, {15.5, 2.25}, {0.0, 0.0}}) {
    auto [qx, qy] = apply(t, px, py, 15.5, 15.5);
    auto [rx, ry] = apply(ti, qx, qy, 15.5, 15.5);
    CHECK(rx == doctest::Approx(px).epsilon(1e-12));
    CHECK(ry == doctest::Approx(py).epsilon(1e-12));
  }

  Volume v = smooth_random(32, 32, 8);
  Volume round = rigid_align(rigid_align(v, t), ti);
  double err = 0;
  int n = 0;
  for (int y = 10; y < 22; ++y)
    for (int x = 10; x < 22; ++x) {
      err += std::abs(round.at(0, y, x) - v.at(0, y, x));
      ++n;
    }
  CHECK(err / n < 1.5);  // two bilinear resampling passes blur the texture
}

TEST_CASE("transform validation") {
  CHECK_THROWS(validate_transform(RigidTransform{46.0, 0.0, 0.0}, 64));
  CHECK_THROWS(validate_transform(RigidTransform{0.0, 40.0, 0.0}, 64));
  validate_transform(RigidTransform{45.0, 32.0, -32.0}, 64);
}

TEST_CASE("estimate_rigid recovers identity and shifts") {
  Volume fixed = smooth_random(32, 32, 9);
  auto grid = SearchGrid::symmetric(0.0, 0.0, 5.0, 1.0);

  RigidTransform id = estimate_rigid(fixed, fixed, grid);
  CHECK(id.is_identity());

  for (auto [dx, dy] : {std::pair{4.0, 0.0}, {-3.0, 2.0}, {0.0, -2.0}}) {
    Volume moving = rigid_align(fixed, RigidTransform{0.0, dx, dy});
    RigidTransform t = estimate_rigid(moving, fixed, grid);
    CHECK(t.rot_deg == 0.0);
    CHECK(t.dx == doctest::Approx(-dx));
    CHECK(t.dy == doctest::Approx(-dy));
  }
}

TEST_CASE("estimate_rigid tie-breaks to identity on constant images") {
  Volume a = filled(16, 16, 1, ValueDomain::Unitless, 3.0);
  auto grid = SearchGrid::symmetric(2.0, 1.0, 2.0, 1.0);
  RigidTransform t = estimate_rigid(a, a, grid);
  CHECK(t.is_identity());
}

TEST_CASE("estimate_rigid rejects empty grid") {
  Volume a = filled(8, 8, 1, ValueDomain::Unitless, 0.0);
  SearchGrid g;
  CHECK_THROWS(estimate_rigid(a, a, g));
}

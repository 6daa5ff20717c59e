#include "cbct/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace cbct::pipeline {

double hu_to_lac_value(double hu) { return (hu / 1000.0 + 1.0) * kMuWater; }

double lac_to_hu_value(double mu) { return (mu / kMuWater - 1.0) * 1000.0; }

Volume clip_hu(const Volume& v) {
  require(v.domain == ValueDomain::HU, "clip_hu requires an HU volume");
  Volume out = v;
  for (double& x : out.voxels) x = std::clamp(x, kClipLoHu, kClipHiHu);
  return out;
}

Volume apply_mask(const Volume& v, const Volume& mask) {
  if (!v.same_geometry(mask)) throw ShapeError("apply_mask: geometry mismatch");
  for (double m : mask.voxels)
    require(m == 0.0 || m == 1.0, "apply_mask: mask must be binary");
  Volume out = v;
  for (std::size_t i = 0; i < out.voxels.size(); ++i)
    if (mask.voxels[i] == 0.0) out.voxels[i] = 0.0;
  return out;
}

Volume hu_to_lac(const Volume& v) {
  require(v.domain == ValueDomain::HU, "hu_to_lac requires an HU volume");
  Volume out = v;
  out.domain = ValueDomain::LAC;
  for (double& x : out.voxels) {
    require(x >= kClipLoHu, "hu_to_lac input below -1000 HU; clip first");
    x = hu_to_lac_value(x);
    if (x < 0.0) x = 0.0;  // guard rounding at the air point
  }
  return out;
}

Volume lac_to_hu(const Volume& v) {
  require(v.domain == ValueDomain::LAC, "lac_to_hu requires an LAC volume");
  Volume out = v;
  out.domain = ValueDomain::HU;
  for (double& x : out.voxels) x = lac_to_hu_value(x);
  return out;
}

namespace {

double bilinear_zero(const Volume& v, int s, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto pix = [&](int yy, int xx) -> double {
    return (yy >= 0 && yy < v.height && xx >= 0 && xx < v.width)
               ? v.at(s, yy, xx)
               : 0.0;
  };
  return (1 - fy) * ((1 - fx) * pix(y0, x0) + fx * pix(y0, x0 + 1)) +
         fy * ((1 - fx) * pix(y0 + 1, x0) + fx * pix(y0 + 1, x0 + 1));
}

}  // namespace

Volume crop_resize(const Volume& v, Roi roi, int out_size) {
  require(roi.w > 0 && roi.h > 0, "crop_resize: empty roi");
  require(roi.x0 >= 0 && roi.y0 >= 0 && roi.x0 + roi.w <= v.width &&
              roi.y0 + roi.h <= v.height,
          "crop_resize: roi out of bounds");
  require(out_size > 0 && out_size % 8 == 0,
          "crop_resize: out_size must be divisible by 8");
  Volume out = Volume::make(out_size, out_size, v.depth, v.domain);
  out.spacing = v.spacing;
  out.provenance = v.provenance;
  const double sx = static_cast<double>(roi.w) / out_size;
  const double sy = static_cast<double>(roi.h) / out_size;
  for (int s = 0; s < v.depth; ++s)
    for (int oy = 0; oy < out_size; ++oy)
      for (int ox = 0; ox < out_size; ++ox) {
        const double x = roi.x0 + (ox + 0.5) * sx - 0.5;
        const double y = roi.y0 + (oy + 0.5) * sy - 0.5;
        out.at(s, oy, ox) = bilinear_zero(v, s, x, y);
      }
  return out;
}

Volume binarize(const Volume& v, double threshold) {
  Volume out = v;
  for (double& x : out.voxels) x = x >= threshold ? 1.0 : 0.0;
  return out;
}

RigidTransform RigidTransform::inverse() const {
  const double th = -rot_deg * M_PI / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  RigidTransform inv;
  inv.rot_deg = -rot_deg;
  inv.dx = -(c * dx - s * dy);
  inv.dy = -(s * dx + c * dy);
  return inv;
}

void validate_transform(const RigidTransform& t, int image_size) {
  require(std::abs(t.rot_deg) <= 45.0, "rigid rotation must be within 45 deg");
  require(std::abs(t.dx) <= image_size / 2.0 && std::abs(t.dy) <= image_size / 2.0,
          "rigid offset exceeds half the image size");
}

Volume rigid_align(const Volume& moving, const RigidTransform& t) {
  // accept rotations beyond the estimation range so symmetry checks (e.g.
  // 90 deg) stay expressible; estimated/generated transforms are validated
  // at their producers
  require(std::abs(t.rot_deg) <= 180.0, "rigid rotation out of range");
  if (t.is_identity()) return moving;

  const double th = t.rot_deg * M_PI / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = (moving.width - 1) / 2.0;
  const double cy = (moving.height - 1) / 2.0;
  Volume out = moving;
  for (int sl = 0; sl < moving.depth; ++sl)
    for (int y = 0; y < moving.height; ++y)
      for (int x = 0; x < moving.width; ++x) {
        const double rx = x - cx, ry = y - cy;
        const double sxp = c * rx - s * ry + cx + t.dx;
        const double syp = s * rx + c * ry + cy + t.dy;
        out.at(sl, y, x) = bilinear_zero(moving, sl, sxp, syp);
      }
  return out;
}

SearchGrid SearchGrid::symmetric(double rot_max, double rot_step,
                                 double shift_max, double shift_step) {
  require(rot_max >= 0 && shift_max >= 0, "grid extents must be non-negative");
  auto axis = [](double mx, double step) {
    std::vector<double> v;
    if (mx == 0 || step <= 0) {
      v.push_back(0.0);
      return v;
    }
    for (double x = -mx; x <= mx + 1e-9; x += step) v.push_back(x);
    return v;
  };
  SearchGrid g;
  g.rotations = axis(rot_max, rot_step);
  g.dxs = axis(shift_max, shift_step);
  g.dys = axis(shift_max, shift_step);
  return g;
}

namespace {

// zero-normalized cross-correlation; 0 for degenerate (constant) inputs
double ncc_score(const Volume& a, const Volume& b) {
  const std::size_t n = a.voxels.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a.voxels[i];
    mb += b.voxels[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double num = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a.voxels[i] - ma, db = b.voxels[i] - mb;
    num += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va <= 1e-12 || vb <= 1e-12) return 0.0;
  return num / std::sqrt(va * vb);
}

}  // namespace

RigidTransform estimate_rigid(const Volume& moving, const Volume& fixed,
                              const SearchGrid& grid) {
  require(moving.same_geometry(fixed), "estimate_rigid: geometry mismatch");
  require(!grid.rotations.empty() && !grid.dxs.empty() && !grid.dys.empty(),
          "estimate_rigid: empty search grid");
  const int size = std::max(moving.height, moving.width);

  auto magnitude = [](const RigidTransform& t) {
    return t.rot_deg * t.rot_deg + t.dx * t.dx + t.dy * t.dy;
  };
  auto lex_less = [](const RigidTransform& a, const RigidTransform& b) {
    if (a.rot_deg != b.rot_deg) return a.rot_deg < b.rot_deg;
    if (a.dx != b.dx) return a.dx < b.dx;
    return a.dy < b.dy;
  };

  bool have = false;
  RigidTransform best;
  double best_score = 0;
  for (double r : grid.rotations)
    for (double dx : grid.dxs)
      for (double dy : grid.dys) {
        RigidTransform t{r, dx, dy};
        validate_transform(t, size);
        const double score = ncc_score(rigid_align(moving, t), fixed);
        bool take = !have || score > best_score;
        if (have && score == best_score) {
          const double mt = magnitude(t), mbest = magnitude(best);
          take = mt < mbest || (mt == mbest && lex_less(t, best));
        }
        if (take) {
          have = true;
          best = t;
          best_score = score;
        }
      }
  return best;
}

}  // namespace cbct::pipeline

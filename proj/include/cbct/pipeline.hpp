#pragma once

#include <vector>

#include "cbct/volume.hpp"

namespace cbct::pipeline {

inline constexpr double kMuWater = 0.192;  // LAC of water, mm^-1 scale
inline constexpr double kClipLoHu = -1000.0;
inline constexpr double kClipHiHu = 200.0;

double hu_to_lac_value(double hu);
double lac_to_hu_value(double mu);

Volume clip_hu(const Volume& v);
Volume apply_mask(const Volume& v, const Volume& mask);
Volume hu_to_lac(const Volume& v);
Volume lac_to_hu(const Volume& v);

struct Roi {
  int x0 = 0;
  int y0 = 0;
  int w = 0;
  int h = 0;
};

Volume crop_resize(const Volume& v, Roi roi, int out_size);

// Binarizes a resampled mask back to {0,1}.
Volume binarize(const Volume& v, double threshold = 0.5);

// In-plane rigid motion. `rot_deg` rotates about the slice centre,
// offsets are in pixels (dx along columns, dy along rows). rigid_align
// resamples the moving image so that out(p) = moving(R(p-c)+c+(dx,dy)):
// content shifts by the inverse of the transform.
struct RigidTransform {
  double rot_deg = 0.0;
  double dx = 0.0;
  double dy = 0.0;

  bool is_identity() const { return rot_deg == 0.0 && dx == 0.0 && dy == 0.0; }
  RigidTransform inverse() const;
};

void validate_transform(const RigidTransform& t, int image_size);

Volume rigid_align(const Volume& moving, const RigidTransform& t);

struct SearchGrid {
  std::vector<double> rotations;
  std::vector<double> dxs;
  std::vector<double> dys;

  // symmetric grid: rotations +-rot_max step rot_step, shifts +-shift_max
  // step shift_step; always contains the identity point
  static SearchGrid symmetric(double rot_max, double rot_step,
                              double shift_max, double shift_step);
};

RigidTransform estimate_rigid(const Volume& moving, const Volume& fixed,
                              const SearchGrid& grid);

}  // namespace cbct::pipeline

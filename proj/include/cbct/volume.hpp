#pragma once

#include <array>
#include <string>
#include <vector>

#include "cbct/common.hpp"
#include "cbct/tensor.hpp"

namespace cbct {

enum class ValueDomain { HU, LAC, Unitless };

std::string to_string(ValueDomain d);
ValueDomain value_domain_from_string(const std::string& s);

// A stack of D axial slices, H rows by W columns, voxel order (slice, row,
// column). Values are held in double; the on-disk container stores float32
// (or uint8 for masks).
struct Volume {
  int height = 0;
  int width = 0;
  int depth = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  ValueDomain domain = ValueDomain::Unitless;
  std::string provenance;
  std::vector<double> voxels;

  static Volume make(int h, int w, int d, ValueDomain dom);

  std::size_t numel() const { return voxels.size(); }

  double& at(int s, int r, int c) {
    return voxels[(static_cast<std::size_t>(s) * height + r) * width + c];
  }
  double at(int s, int r, int c) const {
    return voxels[(static_cast<std::size_t>(s) * height + r) * width + c];
  }

  bool same_geometry(const Volume& o) const {
    return height == o.height && width == o.width && depth == o.depth;
  }

  Tensor slice_tensor(int s) const;            // (1,H,W) float32
  TensorT<double> slice_tensor_d(int s) const; // (1,H,W) double
  void set_slice(int s, const Tensor& t);
  void set_slice(int s, const TensorT<double>& t);

  // Checks finiteness and the domain range invariants (HU in [-1024, 3071],
  // LAC >= 0). Throws on violation.
  void validate() const;
};

enum class VoxelDtype { F32, U8 };

// Container: directory with meta.json and voxels.raw (little endian, voxel
// order (slice, row, column)). U8 is for binary masks.
void save_volume(const Volume& v, const std::string& dir,
                 VoxelDtype dtype = VoxelDtype::F32);
Volume load_volume(const std::string& dir);

std::uint64_t volume_content_hash(const Volume& v);

}  // namespace cbct

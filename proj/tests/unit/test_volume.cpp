#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cbct/volume.hpp"

using namespace cbct;
namespace fs = std::filesystem;

namespace {

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("voxel order is slice, row, column") {
  Volume v = Volume::make(2, 3, 4, ValueDomain::Unitless);
  v.at(1, 0, 2) = 7.0;
  // slice 1 starts at 1*2*3, row 0, col 2
  CHECK(v.voxels[1 * 2 * 3 + 0 * 3 + 2] == 7.0);
}

TEST_CASE("f32 container round trip is lossless") {
  const auto dir = fs::temp_directory_path() / "cbct_vol_rt";
  fs::remove_all(dir);
  Volume v = Volume::make(4, 5, 3, ValueDomain::HU);
  v.spacing = {1.0, 1.0, 2.5};
  v.provenance = "test";
  // f32-representable values
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    v.voxels[i] = -1000.0 + 0.5 * static_cast<double>(i);
  save_volume(v, dir.string());
  Volume w = load_volume(dir.string());
  CHECK(w.same_geometry(v));
  CHECK(w.domain == v.domain);
  CHECK(w.spacing == v.spacing);
  CHECK(w.provenance == "test");
  CHECK(w.voxels == v.voxels);

  const auto dir2 = fs::temp_directory_path() / "cbct_vol_rt2";
  fs::remove_all(dir2);
  save_volume(w, dir2.string());
  CHECK(slurp(dir / "voxels.raw") == slurp(dir2 / "voxels.raw"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("u8 mask container") {
  const auto dir = fs::temp_directory_path() / "cbct_vol_u8";
  fs::remove_all(dir);
  Volume m = Volume::make(2, 2, 1, ValueDomain::Unitless);
  m.voxels = {0, 1, 1, 0};
  save_volume(m, dir.string(), VoxelDtype::U8);
  Volume r = load_volume(dir.string());
  CHECK(r.voxels == m.voxels);
  CHECK(fs::file_size(dir / "voxels.raw") == 4);

  m.voxels[0] = 0.5;
  CHECK_THROWS(save_volume(m, dir.string(), VoxelDtype::U8));
  fs::remove_all(dir);
}

TEST_CASE("validation catches bad volumes") {
  Volume v = Volume::make(2, 2, 1, ValueDomain::HU);
  v.voxels[0] = 4000.0;
  CHECK_THROWS(v.validate());
  v.voxels[0] = std::nan("");
  CHECK_THROWS(v.validate());
  Volume l = Volume::make(2, 2, 1, ValueDomain::LAC);
  l.voxels[3] = -0.1;
  CHECK_THROWS(l.validate());
}

TEST_CASE("truncated and oversized raw files are rejected") {
  const auto dir = fs::temp_directory_path() / "cbct_vol_bad";
  fs::remove_all(dir);
  Volume v = Volume::make(2, 2, 2, ValueDomain::Unitless);
  save_volume(v, dir.string());
  {
    std::ofstream f(dir / "voxels.raw", std::ios::binary | std::ios::trunc);
    const float junk[3] = {0, 0, 0};
    f.write(reinterpret_cast<const char*>(junk), sizeof junk);
  }
  CHECK_THROWS(load_volume(dir.string()));
  {
    std::ofstream f(dir / "voxels.raw", std::ios::binary | std::ios::trunc);
    const std::vector<float> junk(9, 0.0f);
    f.write(reinterpret_cast<const char*>(junk.data()), 9 * sizeof(float));
  }
  CHECK_THROWS(load_volume(dir.string()));
  fs::remove_all(dir);
}

TEST_CASE("content hash tracks voxel changes") {
  Volume v = Volume::make(3, 3, 1, ValueDomain::Unitless);
  const auto h0 = volume_content_hash(v);
  v.at(0, 1, 1) = 1e-9;
  CHECK(volume_content_hash(v) != h0);
}

TEST_CASE("slice tensor round trip") {
  Volume v = Volume::make(3, 4, 2, ValueDomain::LAC);
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = 0.25 * static_cast<double>(i);
  auto t = v.slice_tensor_d(1);
  CHECK(t.dim(1) == 3);
  CHECK(t.at(0, 2, 3) == v.at(1, 2, 3));
  Volume w = Volume::make(3, 4, 2, ValueDomain::LAC);
  w.set_slice(1, t);
  CHECK(w.at(1, 2, 3) == v.at(1, 2, 3));
  CHECK(w.at(0, 0, 0) == 0.0);
}

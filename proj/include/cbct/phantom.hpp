#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cbct/pipeline.hpp"
#include "cbct/volume.hpp"

namespace cbct::phantom {

struct HuLevels {
  double parenchyma = -850.0;
  double vessel = -50.0;
  double lesion = 30.0;
  double background = 0.0;
};

struct PhantomSpec {
  int image_size = 64;
  int n_slices = 4;
  int lung_count = 2;
  int vessel_tree_depth = 3;
  bool lesion_present = true;
  HuLevels hu;

  void validate() const;
  nlohmann::json to_json() const;
  static PhantomSpec from_json(const nlohmann::json& j);
};

struct DegradationParams {
  int n_streaks = 0;
  double streak_amplitude = 0.0;
  double noise_sigma = 0.0;
  double cupping_amplitude = 0.0;
  double elastic_max_disp = 0.0;
  double rigid_rotation = 0.0;
  double rigid_dx = 0.0;
  double rigid_dy = 0.0;
  std::uint64_t seed = 0;

  void validate(int image_size) const;
};

struct PhantomPair {
  Volume ct;
  Volume cbct;
  Volume lung_mask;
  pipeline::RigidTransform true_rigid;
  std::uint64_t seed = 0;
};

// Diagnostics emitted by degrade_to_cbct so tests can check effects exactly.
struct DegradationTrace {
  pipeline::RigidTransform applied_rigid;
  // per slice: in-slice linear indices touched by streak profiles
  std::vector<std::vector<std::size_t>> streak_support;
};

Volume generate_phantom_ct(const PhantomSpec& spec, std::uint64_t seed);
Volume generate_phantom_mask(const PhantomSpec& spec, std::uint64_t seed);
std::pair<Volume, Volume> generate_phantom(const PhantomSpec& spec,
                                           std::uint64_t seed);

std::pair<Volume, pipeline::RigidTransform> degrade_to_cbct(
    const Volume& ct, const Volume& mask, const DegradationParams& params,
    DegradationTrace* trace = nullptr);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct ParamRanges {
  int n_streaks_lo = 4;
  int n_streaks_hi = 12;
  Range streak_amplitude{80.0, 200.0};
  Range noise_sigma{10.0, 30.0};
  Range cupping{0.0, 60.0};
  Range elastic{1.0, 4.0};
  double rot_max = 3.0;
  double offset_max = 5.0;

  nlohmann::json to_json() const;
  static ParamRanges from_json(const nlohmann::json& j);
};

struct PairRecord {
  int id = 0;
  std::string dir;  // relative to the manifest's directory
  std::uint64_t seed = 0;
  pipeline::RigidTransform true_rigid;
  std::string ct_hash, cbct_hash, mask_hash;
};

struct DatasetManifest {
  int image_size = 0;
  int n_slices = 0;
  std::uint64_t seed = 0;
  PhantomSpec spec;
  ParamRanges ranges;
  std::vector<PairRecord> pairs;
  std::string root;  // directory the manifest was saved in / loaded from

  void save(const std::string& dir) const;
  static DatasetManifest load(const std::string& dir);

  std::string ct_dir(const PairRecord& r) const;
  std::string cbct_dir(const PairRecord& r) const;
  std::string mask_dir(const PairRecord& r) const;
};

PhantomPair load_pair(const DatasetManifest& m, const PairRecord& r);

DatasetManifest make_dataset(int n_pairs, const PhantomSpec& spec,
                             const ParamRanges& ranges,
                             const std::string& out_dir, std::uint64_t seed);

}  // namespace cbct::phantom

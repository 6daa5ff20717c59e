#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbct/common.hpp"
#include "cbct/tensor.hpp"
#include "cbct/volume.hpp"

namespace cbct::metrics {

// Metrics on enhanced volumes are computed in HU after converting back from
// attenuation, with the clip window [-1000, 200] as the dynamic range.
inline constexpr double kHuDataRange = 1200.0;
inline constexpr double kPsnrCapDb = 99.0;

// ---- 2D image metrics, rank-2 (H, W) tensors ----

// 10*log10(data_range^2 / MSE), capped at kPsnrCapDb (also the MSE=0 flag).
double psnr(const TensorD& a, const TensorD& b, double data_range);

// Mean local SSIM, 11x11 Gaussian window sigma=1.5, K1=0.01, K2=0.03,
// averaged over the fully-covered (valid) region. Needs images >= 11x11.
double ssim(const TensorD& a, const TensorD& b, double data_range);

// Zero-normalized cross-correlation. Constant input is undefined.
double ncc(const TensorD& a, const TensorD& b);

// Pixel-domain VIF over a 4-scale Gaussian pyramid (the vifp variant):
// window sides 17/9/5/3 with sigma = side/5, filter-and-decimate between
// scales, sigma_nsq = 2 on images prescaled by 255/data_range. Directional:
// the first argument is the reference.
double vif(const TensorD& ref, const TensorD& dist, double data_range);

// Information-fidelity sum over the same pyramid: the VIF numerator without
// the reference-information denominator, reported in bits. Per-scale terms
// (finest first) are written to *per_scale when given; the return value is
// their sum.
double ifc(const TensorD& ref, const TensorD& dist, double data_range,
           std::vector<double>* per_scale = nullptr);

// ---- voxel-wise metrics on flat arrays ----

// 2|A&B| / (|A|+|B|) over 0/1 arrays; 1.0 when both empty.
double dsc(const std::vector<double>& mask_a, const std::vector<double>& mask_b);

// Sample correlation over voxels where mask == 1. Needs >= 2 in-mask voxels
// and non-constant values.
double pearson(const std::vector<double>& a, const std::vector<double>& b,
               const std::vector<double>& mask);

// ---- volume-level wrappers: mean of the slice metric over the stack ----

// Rank-2 (H, W) copy of one axial slice.
TensorD slice2d(const Volume& v, int z);

double volume_psnr(const Volume& a, const Volume& b, double data_range);
double volume_ssim(const Volume& a, const Volume& b, double data_range);
double volume_ncc(const Volume& a, const Volume& b);
double volume_vif(const Volume& ref, const Volume& dist, double data_range);
double volume_ifc(const Volume& ref, const Volume& dist, double data_range);

// ---- pair evaluation ----

// "High-function" region: in-mask voxels at or above the (1 - top_fraction)
// intensity quantile of the image's own in-mask values.
struct RegionRule {
  double top_fraction = 0.30;

  void validate() const;
  nlohmann::json to_json() const;
  static RegionRule from_json(const nlohmann::json& j);
};

// Flat 0/1 array marking the region under `rule`.
std::vector<double> region_mask(const Volume& img, const Volume& mask,
                                const RegionRule& rule);

struct EvalOptions {
  std::vector<std::string> metric_names{"psnr", "ssim", "ncc", "vif",
                                        "ifc",  "dsc",  "pearson"};
  RegionRule region;
  double data_range = kHuDataRange;

  void validate() const;
  nlohmann::json to_json() const;
  static EvalOptions from_json(const nlohmann::json& j);
};

// One evaluation pair: preprocessed LAC volumes plus the binary lung mask.
struct EvalPair {
  int id = 0;
  Volume ct;
  Volume cbct;
  Volume mask;
};

using PairProvider = std::function<EvalPair(int)>;
// Enhancement model, LAC in / LAC out. Empty function = baseline rows only.
using ModelFn = std::function<Volume(const Volume&)>;

struct MetricsReport {
  struct Row {
    int pair_id = 0;
    std::string input;  // "cbct" (baseline) or "sct"
    std::map<std::string, double> values;
  };
  struct Stat {
    double mean = 0.0;
    double stddev = 0.0;  // sample, n-1; 0 when n < 2
    int n = 0;
  };

  nlohmann::json header;
  std::vector<std::string> metric_names;
  std::vector<Row> rows;
  std::map<std::string, Stat> aggregate;  // key "<input>.<metric>"

  void recompute_aggregate();
  std::string csv() const;
  nlohmann::json aggregate_json() const;
  // Writes metrics.csv and aggregate.json under dir.
  void write(const std::string& dir) const;
};

// Computes the requested metrics per pair for (CBCT, CT) and, when a model is
// given, (sCT, CT). CT is the reference for the directional metrics; DSC
// compares the region masks of reference and test image, Pearson correlates
// intensities inside the reference region.
MetricsReport evaluate_pairs(const PairProvider& pairs, int n_pairs,
                             const ModelFn& model, const EvalOptions& opts = {});

}  // namespace cbct::metrics

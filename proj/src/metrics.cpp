#include "cbct/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cbct/jsonutil.hpp"
#include "cbct/pipeline.hpp"

namespace cbct::metrics {

namespace {

void check_image(const TensorD& t, const char* who) {
  if (t.rank() != 2)
    throw ShapeError(std::string(who) + ": expected a rank-2 (H,W) image, got " +
                     t.shape_str());
}

void check_pair(const TensorD& a, const TensorD& b, const char* who) {
  check_image(a, who);
  check_image(b, who);
  if (!a.same_shape(b))
    throw ShapeError(std::string(who) + ": shape mismatch " + a.shape_str() +
                     " vs " + b.shape_str());
}

// Plain image used by the filtering internals.
struct Img {
  int h = 0, w = 0;
  std::vector<double> v;

  Img() = default;
  Img(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0.0) {}

  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
};

Img from_tensor(const TensorD& t, double scale) {
  Img out(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.numel(); ++i) out.v[i] = t[i] * scale;
  return out;
}

std::vector<double> gauss1d(int n, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(n));
  const double c = (n - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = i - c;
    k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
    sum += k[static_cast<std::size_t>(i)];
  }
  for (auto& x : k) x /= sum;
  return k;
}

// Separable correlation, 'valid' region only: output (h-n+1, w-n+1).
Img filter_valid(const Img& x, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = x.h - n + 1;
  const int ow = x.w - n + 1;
  Img mid(x.h, ow);
  for (int r = 0; r < x.h; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += x.at(r, c + j) * k[static_cast<std::size_t>(j)];
      mid.at(r, c) = s;
    }
  Img out(oh, ow);
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += mid.at(r + j, c) * k[static_cast<std::size_t>(j)];
      out.at(r, c) = s;
    }
  return out;
}

Img decimate2(const Img& x) {
  Img out((x.h + 1) / 2, (x.w + 1) / 2);
  for (int r = 0; r < out.h; ++r)
    for (int c = 0; c < out.w; ++c) out.at(r, c) = x.at(2 * r, 2 * c);
  return out;
}

constexpr double kVifSigmaNsq = 2.0;
constexpr int kVifScales = 4;

// Per-scale information sums in natural log; the caller picks the base.
void vif_scales(const TensorD& ref_t, const TensorD& dist_t, double data_range,
                std::vector<double>& num_ln, std::vector<double>& den_ln) {
  check_pair(ref_t, dist_t, "vif");
  require(data_range > 0.0, "vif: data_range must be positive");
  const double prescale = 255.0 / data_range;
  Img ref = from_tensor(ref_t, prescale);
  Img dist = from_tensor(dist_t, prescale);

  num_ln.assign(kVifScales, 0.0);
  den_ln.assign(kVifScales, 0.0);
  for (int scale = 1; scale <= kVifScales; ++scale) {
    const int n = (1 << (kVifScales - scale + 1)) + 1;  // 17, 9, 5, 3
    const auto k = gauss1d(n, n / 5.0);
    if (scale > 1) {
      if (ref.h < n || ref.w < n)
        throw ShapeError("vif: image too small for the 4-scale pyramid");
      ref = decimate2(filter_valid(ref, k));
      dist = decimate2(filter_valid(dist, k));
    }
    if (ref.h < n || ref.w < n)
      throw ShapeError("vif: image too small for the 4-scale pyramid");

    Img rr = ref, dd = dist, rd = ref;
    for (std::size_t i = 0; i < rr.v.size(); ++i) {
      rr.v[i] = ref.v[i] * ref.v[i];
      dd.v[i] = dist.v[i] * dist.v[i];
      rd.v[i] = ref.v[i] * dist.v[i];
    }
    const Img mu1 = filter_valid(ref, k);
    const Img mu2 = filter_valid(dist, k);
    const Img e_rr = filter_valid(rr, k);
    const Img e_dd = filter_valid(dd, k);
    const Img e_rd = filter_valid(rd, k);

    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < mu1.v.size(); ++i) {
      double s1 = std::max(0.0, e_rr.v[i] - mu1.v[i] * mu1.v[i]);
      double s2 = std::max(0.0, e_dd.v[i] - mu2.v[i] * mu2.v[i]);
      const double s12 = e_rd.v[i] - mu1.v[i] * mu2.v[i];

      double g = s12 / (s1 + 1e-10);
      double sv = s2 - g * s12;
      if (s1 < 1e-10) {
        g = 0.0;
        sv = s2;
        s1 = 0.0;
      }
      if (s2 < 1e-10) {
        sv = 0.0;
        g = 0.0;
      }
      if (g < 0.0) {
        sv = s2;
        g = 0.0;
      }
      if (sv <= 1e-10) sv = 1e-10;

      num += std::log1p(g * g * s1 / (sv + kVifSigmaNsq));
      den += std::log1p(s1 / kVifSigmaNsq);
    }
    num_ln[static_cast<std::size_t>(scale - 1)] = num;
    den_ln[static_cast<std::size_t>(scale - 1)] = den;
  }
}

double slice_mean(const Volume& a, const Volume& b,
                  const std::function<double(const TensorD&, const TensorD&)>& f) {
  require(a.same_geometry(b), "volume metric: geometry mismatch");
  double s = 0.0;
  for (int z = 0; z < a.depth; ++z) s += f(slice2d(a, z), slice2d(b, z));
  return s / static_cast<double>(a.depth);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void check_binary_flat(const std::vector<double>& m, const char* who) {
  for (double v : m)
    if (v != 0.0 && v != 1.0)
      throw ValidationError(std::string(who) + ": mask values must be 0 or 1");
}

}  // namespace

double psnr(const TensorD& a, const TensorD& b, double data_range) {
  check_pair(a, b, "psnr");
  require(data_range > 0.0, "psnr: data_range must be positive");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.numel());
  if (mse == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(data_range * data_range / mse));
}

double ssim(const TensorD& a, const TensorD& b, double data_range) {
  check_pair(a, b, "ssim");
  require(data_range > 0.0, "ssim: data_range must be positive");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  if (a.dim(0) < kWin || a.dim(1) < kWin)
    throw ShapeError("ssim: images must be at least 11x11");
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);

  const auto k = gauss1d(kWin, kSigma);
  const Img x = from_tensor(a, 1.0);
  const Img y = from_tensor(b, 1.0);
  Img xx = x, yy = y, xy = x;
  for (std::size_t i = 0; i < xx.v.size(); ++i) {
    xx.v[i] = x.v[i] * x.v[i];
    yy.v[i] = y.v[i] * y.v[i];
    xy.v[i] = x.v[i] * y.v[i];
  }
  const Img mu1 = filter_valid(x, k);
  const Img mu2 = filter_valid(y, k);
  const Img e_xx = filter_valid(xx, k);
  const Img e_yy = filter_valid(yy, k);
  const Img e_xy = filter_valid(xy, k);

  double sum = 0.0;
  for (std::size_t i = 0; i < mu1.v.size(); ++i) {
    const double m1 = mu1.v[i], m2 = mu2.v[i];
    const double m1sq = m1 * m1, m2sq = m2 * m2, m12 = m1 * m2;
    const double s1 = e_xx.v[i] - m1sq;
    const double s2 = e_yy.v[i] - m2sq;
    const double s12 = e_xy.v[i] - m12;
    sum += ((2.0 * m12 + c1) * (2.0 * s12 + c2)) /
           ((m1sq + m2sq + c1) * (s1 + s2 + c2));
  }
  return sum / static_cast<double>(mu1.v.size());
}

double ncc(const TensorD& a, const TensorD& b) {
  check_pair(a, b, "ncc");
  const std::size_t n = a.numel();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0)
    throw DomainError("ncc undefined for constant input");
  return sab / std::sqrt(saa * sbb);
}

double vif(const TensorD& ref, const TensorD& dist, double data_range) {
  std::vector<double> num, den;
  vif_scales(ref, dist, data_range, num, den);
  double n = 0.0, d = 0.0;
  for (int s = 0; s < kVifScales; ++s) {
    n += num[static_cast<std::size_t>(s)];
    d += den[static_cast<std::size_t>(s)];
  }
  // A constant reference carries no information; every distortion preserves
  // all of it.
  if (d <= 0.0) return 1.0;
  return n / d;
}

double ifc(const TensorD& ref, const TensorD& dist, double data_range,
           std::vector<double>* per_scale) {
  std::vector<double> num, den;
  vif_scales(ref, dist, data_range, num, den);
  const double ln2 = std::log(2.0);
  std::vector<double> bits(num.size());
  for (std::size_t s = 0; s < num.size(); ++s) bits[s] = num[s] / ln2;
  double total = 0.0;
  for (double v : bits) total += v;
  if (per_scale) *per_scale = std::move(bits);
  return total;
}

double dsc(const std::vector<double>& mask_a, const std::vector<double>& mask_b) {
  if (mask_a.size() != mask_b.size())
    throw ShapeError("dsc: mask size mismatch");
  check_binary_flat(mask_a, "dsc");
  check_binary_flat(mask_b, "dsc");
  std::size_t na = 0, nb = 0, ni = 0;
  for (std::size_t i = 0; i < mask_a.size(); ++i) {
    const bool ia = mask_a[i] == 1.0, ib = mask_b[i] == 1.0;
    na += ia;
    nb += ib;
    ni += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b,
               const std::vector<double>& mask) {
  if (a.size() != b.size() || a.size() != mask.size())
    throw ShapeError("pearson: array size mismatch");
  check_binary_flat(mask, "pearson");
  std::size_t m = 0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] == 1.0) {
      ++m;
      ma += a[i];
      mb += b[i];
    }
  if (m < 2) throw DomainError("pearson needs at least 2 in-mask voxels");
  ma /= static_cast<double>(m);
  mb /= static_cast<double>(m);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] == 1.0) {
      const double da = a[i] - ma, db = b[i] - mb;
      sab += da * db;
      saa += da * da;
      sbb += db * db;
    }
  if (saa <= 0.0 || sbb <= 0.0)
    throw DomainError("pearson undefined for constant in-mask input");
  return sab / std::sqrt(saa * sbb);
}

TensorD slice2d(const Volume& v, int z) {
  require(z >= 0 && z < v.depth, "slice2d: slice out of range");
  TensorD t({v.height, v.width});
  const std::size_t off =
      static_cast<std::size_t>(z) * v.height * static_cast<std::size_t>(v.width);
  std::copy(v.voxels.begin() + static_cast<std::ptrdiff_t>(off),
            v.voxels.begin() +
                static_cast<std::ptrdiff_t>(off + t.numel()),
            t.data());
  return t;
}

double volume_psnr(const Volume& a, const Volume& b, double data_range) {
  return slice_mean(a, b, [&](const TensorD& x, const TensorD& y) {
    return psnr(x, y, data_range);
  });
}

double volume_ssim(const Volume& a, const Volume& b, double data_range) {
  return slice_mean(a, b, [&](const TensorD& x, const TensorD& y) {
    return ssim(x, y, data_range);
  });
}

double volume_ncc(const Volume& a, const Volume& b) {
  return slice_mean(a, b, &ncc);
}

double volume_vif(const Volume& ref, const Volume& dist, double data_range) {
  return slice_mean(ref, dist, [&](const TensorD& x, const TensorD& y) {
    return vif(x, y, data_range);
  });
}

double volume_ifc(const Volume& ref, const Volume& dist, double data_range) {
  return slice_mean(ref, dist, [&](const TensorD& x, const TensorD& y) {
    return ifc(x, y, data_range, nullptr);
  });
}

void RegionRule::validate() const {
  require(top_fraction > 0.0 && top_fraction <= 1.0,
          "region rule: top_fraction must be in (0, 1]");
}

nlohmann::json RegionRule::to_json() const {
  return {{"top_fraction", top_fraction}};
}

RegionRule RegionRule::from_json(const nlohmann::json& j) {
  require_known_keys(j, {"top_fraction"}, "region rule");
  RegionRule r;
  r.top_fraction = j.value("top_fraction", r.top_fraction);
  r.validate();
  return r;
}

std::vector<double> region_mask(const Volume& img, const Volume& mask,
                                const RegionRule& rule) {
  rule.validate();
  require(img.same_geometry(mask), "region_mask: geometry mismatch");
  check_binary_flat(mask.voxels, "region_mask");
  std::vector<double> vals;
  vals.reserve(mask.numel());
  for (std::size_t i = 0; i < mask.numel(); ++i)
    if (mask.voxels[i] == 1.0) vals.push_back(img.voxels[i]);
  require(!vals.empty(), "region_mask: empty mask");

  const std::size_t k = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::floor(rule.top_fraction * static_cast<double>(vals.size()))));
  std::nth_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(k - 1),
                   vals.end(), std::greater<double>());
  const double thr = vals[k - 1];

  std::vector<double> out(img.numel(), 0.0);
  for (std::size_t i = 0; i < img.numel(); ++i)
    if (mask.voxels[i] == 1.0 && img.voxels[i] >= thr) out[i] = 1.0;
  return out;
}

void EvalOptions::validate() const {
  static const std::vector<std::string> known{"psnr", "ssim", "ncc",    "vif",
                                             "ifc",  "dsc",  "pearson"};
  require(!metric_names.empty(), "eval options: empty metric set");
  for (const auto& name : metric_names) {
    if (std::find(known.begin(), known.end(), name) == known.end())
      throw ValidationError("eval options: unknown metric '" + name + "'");
    if (std::count(metric_names.begin(), metric_names.end(), name) != 1)
      throw ValidationError("eval options: duplicate metric '" + name + "'");
  }
  region.validate();
  require(data_range > 0.0, "eval options: data_range must be positive");
}

nlohmann::json EvalOptions::to_json() const {
  return {{"metric_names", metric_names},
          {"region", region.to_json()},
          {"data_range", data_range}};
}

EvalOptions EvalOptions::from_json(const nlohmann::json& j) {
  require_known_keys(j, {"metric_names", "region", "data_range"},
                     "eval options");
  EvalOptions o;
  if (j.contains("metric_names"))
    o.metric_names = j.at("metric_names").get<std::vector<std::string>>();
  if (j.contains("region")) o.region = RegionRule::from_json(j.at("region"));
  o.data_range = j.value("data_range", o.data_range);
  o.validate();
  return o;
}

void MetricsReport::recompute_aggregate() {
  aggregate.clear();
  std::map<std::string, std::vector<double>> cols;
  for (const auto& row : rows)
    for (const auto& [name, value] : row.values)
      cols[row.input + "." + name].push_back(value);
  for (const auto& [key, vals] : cols) {
    Stat st;
    st.n = static_cast<int>(vals.size());
    double sum = 0.0;
    for (double v : vals) sum += v;
    st.mean = sum / static_cast<double>(vals.size());
    if (vals.size() >= 2) {
      double ss = 0.0;
      for (double v : vals) {
        const double d = v - st.mean;
        ss += d * d;
      }
      st.stddev = std::sqrt(ss / static_cast<double>(vals.size() - 1));
    }
    aggregate[key] = st;
  }
}

std::string MetricsReport::csv() const {
  std::ostringstream os;
  os << "pair_id,input";
  for (const auto& name : metric_names) os << "," << name;
  os << "\n";
  for (const auto& row : rows) {
    os << row.pair_id << "," << row.input;
    for (const auto& name : metric_names) os << "," << fmt_double(row.values.at(name));
    os << "\n";
  }
  return os.str();
}

nlohmann::json MetricsReport::aggregate_json() const {
  nlohmann::json agg;
  for (const auto& [key, st] : aggregate) {
    const auto dot = key.find('.');
    agg[key.substr(0, dot)][key.substr(dot + 1)] = {
        {"mean", st.mean}, {"std", st.stddev}, {"n", st.n}};
  }
  return nlohmann::json{{"header", header},
                        {"std_kind", "sample (n-1)"},
                        {"aggregate", agg}};
}

void MetricsReport::write(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir + "/metrics.csv", std::ios::binary);
    if (!f) throw IoError("cannot write " + dir + "/metrics.csv");
    f << csv();
  }
  {
    std::ofstream f(dir + "/aggregate.json", std::ios::binary);
    if (!f) throw IoError("cannot write " + dir + "/aggregate.json");
    f << aggregate_json().dump(2) << "\n";
  }
}

namespace {

nlohmann::json variant_header(const EvalOptions& opts, bool with_model) {
  return nlohmann::json{
      {"domain", "HU"},
      {"data_range", opts.data_range},
      {"reference", "ct"},
      {"inputs", with_model ? nlohmann::json::array({"cbct", "sct"})
                            : nlohmann::json::array({"cbct"})},
      {"slice_reduction", "mean over axial slices"},
      {"psnr", {{"cap_db", kPsnrCapDb}}},
      {"ssim", {{"window", 11}, {"sigma", 1.5}, {"k1", 0.01}, {"k2", 0.03}}},
      {"vif",
       {{"variant", "pixel-domain gaussian pyramid"},
        {"scales", kVifScales},
        {"windows", {17, 9, 5, 3}},
        {"sigma_nsq", kVifSigmaNsq},
        {"prescale", "255/data_range"}}},
      {"ifc",
       {{"variant", "pixel-domain gaussian pyramid, unnormalized"},
        {"log_base", 2}}},
      {"region_rule",
       {{"kind", "top fraction of in-mask intensities"},
        {"top_fraction", opts.region.top_fraction},
        {"dsc", "region(reference) vs region(test)"},
        {"pearson_mask", "region(reference)"}}}};
}

MetricsReport::Row eval_one(int pair_id, const std::string& input,
                            const Volume& test_hu, const Volume& ct_hu,
                            const Volume& mask,
                            const std::vector<double>& ct_region,
                            const EvalOptions& opts) {
  MetricsReport::Row row;
  row.pair_id = pair_id;
  row.input = input;
  for (const auto& name : opts.metric_names) {
    double v = 0.0;
    if (name == "psnr") {
      v = volume_psnr(ct_hu, test_hu, opts.data_range);
    } else if (name == "ssim") {
      v = volume_ssim(ct_hu, test_hu, opts.data_range);
    } else if (name == "ncc") {
      v = volume_ncc(ct_hu, test_hu);
    } else if (name == "vif") {
      v = volume_vif(ct_hu, test_hu, opts.data_range);
    } else if (name == "ifc") {
      v = volume_ifc(ct_hu, test_hu, opts.data_range);
    } else if (name == "dsc") {
      v = dsc(ct_region, region_mask(test_hu, mask, opts.region));
    } else {  // pearson
      v = pearson(ct_hu.voxels, test_hu.voxels, ct_region);
    }
    row.values[name] = v;
  }
  return row;
}

}  // namespace

MetricsReport evaluate_pairs(const PairProvider& pairs, int n_pairs,
                             const ModelFn& model, const EvalOptions& opts) {
  opts.validate();
  require(pairs != nullptr, "evaluate_pairs: missing pair provider");
  require(n_pairs > 0, "evaluate_pairs: need at least one pair");

  MetricsReport report;
  report.metric_names = opts.metric_names;
  report.header = variant_header(opts, model != nullptr);

  for (int i = 0; i < n_pairs; ++i) {
    EvalPair p = pairs(i);
    require(p.ct.domain == ValueDomain::LAC && p.cbct.domain == ValueDomain::LAC,
            "evaluate_pairs: ct/cbct volumes must be in LAC domain");
    require(p.ct.same_geometry(p.cbct) && p.ct.same_geometry(p.mask),
            "evaluate_pairs: pair geometry mismatch");

    const Volume ct_hu = pipeline::lac_to_hu(p.ct);
    const Volume cbct_hu = pipeline::lac_to_hu(p.cbct);
    const auto ct_region = region_mask(ct_hu, p.mask, opts.region);

    report.rows.push_back(
        eval_one(p.id, "cbct", cbct_hu, ct_hu, p.mask, ct_region, opts));
    if (model) {
      Volume sct = model(p.cbct);
      require(sct.domain == ValueDomain::LAC,
              "evaluate_pairs: model output must be in LAC domain");
      require(sct.same_geometry(p.ct), "evaluate_pairs: model changed geometry");
      const Volume sct_hu = pipeline::lac_to_hu(sct);
      report.rows.push_back(
          eval_one(p.id, "sct", sct_hu, ct_hu, p.mask, ct_region, opts));
    }
  }
  report.recompute_aggregate();
  return report;
}

}  // namespace cbct::metrics

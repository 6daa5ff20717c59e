#include "cbct/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace cbct::phantom {

namespace fs = std::filesystem;
using nlohmann::json;
using pipeline::RigidTransform;

void PhantomSpec::validate() const {
  require(image_size >= 32, "phantom image_size must be >= 32");
  require(image_size % 8 == 0, "phantom image_size must be divisible by 8");
  require(n_slices >= 1, "phantom n_slices must be >= 1");
  require(lung_count == 1 || lung_count == 2, "lung_count must be 1 or 2");
  require(vessel_tree_depth >= 0 && vessel_tree_depth <= 8,
          "vessel_tree_depth out of range");
  for (double h : {hu.parenchyma, hu.vessel, hu.lesion, hu.background})
    require(h >= -1000.0 && h <= 200.0, "phantom HU level outside [-1000, 200]");
}

void DegradationParams::validate(int image_size) const {
  require(n_streaks >= 0, "n_streaks must be >= 0");
  require(streak_amplitude >= 0.0, "streak_amplitude must be >= 0");
  require(noise_sigma >= 0.0, "noise_sigma must be >= 0");
  require(cupping_amplitude >= 0.0, "cupping_amplitude must be >= 0");
  require(elastic_max_disp >= 0.0, "elastic_max_disp must be >= 0");
  require(elastic_max_disp < image_size / 8.0,
          "elastic_max_disp must be < image_size/8");
  pipeline::validate_transform(RigidTransform{rigid_rotation, rigid_dx, rigid_dy},
                               image_size);
}

namespace {

struct Ellipse {
  double cx, cy, a, b, phi;

  bool contains(double x, double y) const {
    const double c = std::cos(phi), s = std::sin(phi);
    const double dx = x - cx, dy = y - cy;
    const double u = c * dx + s * dy, v = -s * dx + c * dy;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

struct Geometry {
  std::vector<Ellipse> lungs;        // per lung, at nominal scale
  std::vector<double> slice_scale;   // per slice multiplier on the axes
};

Geometry make_geometry(const PhantomSpec& spec, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "geometry"));
  const double S = spec.image_size;
  Geometry g;
  if (spec.lung_count == 2) {
    for (int side : {-1, +1}) {
      Ellipse e;
      e.cx = S * (0.5 + side * (0.18 + rng.uniform(-0.015, 0.015)));
      e.cy = S * (0.5 + rng.uniform(-0.03, 0.03));
      e.a = S * 0.15 * (1.0 + rng.uniform(-0.1, 0.1));
      e.b = S * 0.28 * (1.0 + rng.uniform(-0.1, 0.1));
      e.phi = side * rng.uniform(0.0, 0.12);
      g.lungs.push_back(e);
    }
  } else {
    Ellipse e;
    e.cx = S * (0.5 + rng.uniform(-0.02, 0.02));
    e.cy = S * (0.5 + rng.uniform(-0.02, 0.02));
    e.a = S * 0.30 * (1.0 + rng.uniform(-0.1, 0.1));
    e.b = S * 0.34 * (1.0 + rng.uniform(-0.1, 0.1));
    e.phi = rng.uniform(-0.1, 0.1);
    g.lungs.push_back(e);
  }
  g.slice_scale.resize(spec.n_slices);
  const double mid = (spec.n_slices - 1) / 2.0;
  for (int z = 0; z < spec.n_slices; ++z) {
    const double rel = mid > 0 ? std::abs(z - mid) / mid : 0.0;
    g.slice_scale[z] = 1.0 - 0.15 * rel;
  }
  return g;
}

bool in_lungs(const Geometry& g, int slice, double x, double y) {
  for (const auto& e0 : g.lungs) {
    Ellipse e = e0;
    e.a *= g.slice_scale[slice];
    e.b *= g.slice_scale[slice];
    if (e.contains(x, y)) return true;
  }
  return false;
}

void gaussian_blur_slice(std::vector<double>& img, int h, int w, double sigma) {
  const int rad = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * rad + 1);
  double ksum = 0;
  for (int i = -rad; i <= rad; ++i) {
    k[i + rad] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    ksum += k[i + rad];
  }
  for (double& v : k) v /= ksum;

  std::vector<double> tmp(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -rad; i <= rad; ++i) {
        const int xx = std::clamp(x + i, 0, w - 1);
        acc += k[i + rad] * img[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -rad; i <= rad; ++i) {
        const int yy = std::clamp(y + i, 0, h - 1);
        acc += k[i + rad] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      img[static_cast<std::size_t>(y) * w + x] = acc;
    }
}

struct Segment {
  double x0, y0, x1, y1, radius;
};

void grow_branch(std::vector<Segment>& out, Rng& rng, double x, double y,
                 double dir, double len, double radius, int depth) {
  if (depth <= 0 || radius < 0.4) return;
  const double d = dir + rng.uniform(-0.35, 0.35);
  const double x1 = x + len * std::cos(d);
  const double y1 = y + len * std::sin(d);
  out.push_back({x, y, x1, y1, radius});
  const double split = rng.uniform(0.45, 0.75);
  grow_branch(out, rng, x1, y1, d + split, len * 0.72, radius * 0.7, depth - 1);
  grow_branch(out, rng, x1, y1, d - split, len * 0.72, radius * 0.7, depth - 1);
}

double dist_to_segment(const Segment& s, double px, double py) {
  const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  const double l2 = vx * vx + vy * vy;
  double t = l2 > 0 ? ((px - s.x0) * vx + (py - s.y0) * vy) / l2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (s.x0 + t * vx), dy = py - (s.y0 + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

std::pair<Volume, Volume> generate_phantom(const PhantomSpec& spec,
                                           std::uint64_t seed) {
  spec.validate();
  const int S = spec.image_size, D = spec.n_slices;
  const Geometry geo = make_geometry(spec, seed);

  Volume mask = Volume::make(S, S, D, ValueDomain::Unitless);
  mask.provenance = "lung-mask";
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        mask.at(z, y, x) = in_lungs(geo, z, x, y) ? 1.0 : 0.0;

  Volume ct = Volume::make(S, S, D, ValueDomain::HU);
  ct.provenance = "phantom-ct";

  // parenchyma with smooth texture, sigma 20 HU within the mask
  for (int z = 0; z < D; ++z) {
    Rng trng(derive_seed(seed, "texture", z));
    std::vector<double> noise(static_cast<std::size_t>(S) * S);
    for (double& v : noise) v = trng.normal();
    gaussian_blur_slice(noise, S, S, S / 32.0);
    double mean = 0, var = 0;
    for (double v : noise) mean += v;
    mean /= static_cast<double>(noise.size());
    for (double v : noise) var += (v - mean) * (v - mean);
    var /= static_cast<double>(noise.size());
    const double gain = var > 0 ? 20.0 / std::sqrt(var) : 0.0;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if (mask.at(z, y, x) == 1.0)
          ct.at(z, y, x) =
              spec.hu.parenchyma +
              gain * (noise[static_cast<std::size_t>(y) * S + x] - mean);
        else
          ct.at(z, y, x) = spec.hu.background;
  }

  // one vessel tree per lung, shared across slices
  {
    Rng vrng(derive_seed(seed, "vessels"));
    std::vector<Segment> segs;
    for (const auto& lung : geo.lungs) {
      const double toward_mid = lung.cx < S / 2.0 ? 1.0 : -1.0;
      const double hx = lung.cx + toward_mid * lung.a * 0.55;
      const double hy = lung.cy;
      const double base_dir = toward_mid > 0 ? M_PI : 0.0;  // out into the lung
      for (int k = 0; k < 2; ++k) {
        const double d0 = base_dir + vrng.uniform(-0.9, 0.9);
        grow_branch(segs, vrng, hx, hy, d0, S * 0.16, S / 48.0 + 1.0,
                    spec.vessel_tree_depth);
      }
    }
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          if (mask.at(z, y, x) != 1.0) continue;
          for (const auto& s : segs)
            if (dist_to_segment(s, x, y) <= s.radius) {
              ct.at(z, y, x) = spec.hu.vessel;
              break;
            }
        }
  }

  if (spec.lesion_present) {
    Rng lrng(derive_seed(seed, "lesion"));
    const auto& lung = geo.lungs[lrng.uniform_int(
        0, static_cast<int>(geo.lungs.size()) - 1)];
    double lx = 0, ly = 0;
    for (int tries = 0; tries < 200; ++tries) {
      lx = lung.cx + lrng.uniform(-0.5, 0.5) * lung.a;
      ly = lung.cy + lrng.uniform(-0.5, 0.5) * lung.b;
      if (in_lungs(geo, D / 2, lx, ly)) break;
    }
    const double r = S * lrng.uniform(0.035, 0.06);
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
          if (mask.at(z, y, x) == 1.0 &&
              (x - lx) * (x - lx) + (y - ly) * (y - ly) <= r * r)
            ct.at(z, y, x) = spec.hu.lesion;
  }

  for (double& v : ct.voxels) v = std::clamp(v, -1000.0, 200.0);
  return {std::move(ct), std::move(mask)};
}

Volume generate_phantom_ct(const PhantomSpec& spec, std::uint64_t seed) {
  return generate_phantom(spec, seed).first;
}

Volume generate_phantom_mask(const PhantomSpec& spec, std::uint64_t seed) {
  return generate_phantom(spec, seed).second;
}

namespace {

Volume apply_elastic(const Volume& v, double max_disp, Rng& rng) {
  if (max_disp <= 0.0) return v;
  const int H = v.height, W = v.width;
  std::vector<double> ux(static_cast<std::size_t>(H) * W);
  std::vector<double> uy(ux.size());
  for (double& x : ux) x = rng.normal();
  for (double& x : uy) x = rng.normal();
  gaussian_blur_slice(ux, H, W, W / 16.0);
  gaussian_blur_slice(uy, H, W, W / 16.0);
  double mx = 0;
  for (std::size_t i = 0; i < ux.size(); ++i)
    mx = std::max(mx, std::sqrt(ux[i] * ux[i] + uy[i] * uy[i]));
  const double f = mx > 0 ? max_disp / mx : 0.0;

  Volume out = v;
  for (int z = 0; z < v.depth; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * W + x;
        const double sx = x + f * ux[i];
        const double sy = y + f * uy[i];
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const double fx = sx - x0, fy = sy - y0;
        auto pix = [&](int yy, int xx) -> double {
          return (yy >= 0 && yy < H && xx >= 0 && xx < W) ? v.at(z, yy, xx)
                                                          : 0.0;
        };
        out.at(z, y, x) =
            (1 - fy) * ((1 - fx) * pix(y0, x0) + fx * pix(y0, x0 + 1)) +
            fy * ((1 - fx) * pix(y0 + 1, x0) + fx * pix(y0 + 1, x0 + 1));
      }
  return out;
}

void add_streaks(Volume& v, int slice, int n, double amplitude, Rng& rng,
                 std::vector<std::size_t>* support) {
  const int H = v.height, W = v.width;
  // candidate seed points: top-decile gradient magnitude
  std::vector<double> gmag(static_cast<std::size_t>(H) * W, 0.0);
  for (int y = 1; y < H - 1; ++y)
    for (int x = 1; x < W - 1; ++x) {
      const double gx = (v.at(slice, y, x + 1) - v.at(slice, y, x - 1)) / 2;
      const double gy = (v.at(slice, y + 1, x) - v.at(slice, y - 1, x)) / 2;
      gmag[static_cast<std::size_t>(y) * W + x] = std::sqrt(gx * gx + gy * gy);
    }
  std::vector<double> sorted = gmag;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() * 9 / 10,
                   sorted.end());
  const double thr = sorted[sorted.size() * 9 / 10];
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < gmag.size(); ++i)
    if (gmag[i] >= thr && gmag[i] > 0) cand.push_back(i);
  if (cand.empty())
    for (std::size_t i = 0; i < gmag.size(); ++i) cand.push_back(i);

  std::vector<char> touched(static_cast<std::size_t>(H) * W, 0);
  for (int k = 0; k < n; ++k) {
    const std::size_t p =
        cand[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cand.size()) - 1))];
    const double p0x = static_cast<double>(p % W);
    const double p0y = static_cast<double>(p / W);
    const double theta = rng.uniform(0.0, M_PI);
    const double nx = -std::sin(theta), ny = std::cos(theta);
    const double amp =
        amplitude * rng.uniform(0.7, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double d = std::abs((x - p0x) * nx + (y - p0y) * ny);
        if (d < 1.0) {
          v.at(slice, y, x) += amp * (0.3 + 0.7 * (1.0 - d));
          touched[static_cast<std::size_t>(y) * W + x] = 1;
        }
      }
  }
  if (support)
    for (std::size_t i = 0; i < touched.size(); ++i)
      if (touched[i]) support->push_back(i);
}

}  // namespace

std::pair<Volume, RigidTransform> degrade_to_cbct(const Volume& ct,
                                                  const Volume& mask,
                                                  const DegradationParams& params,
                                                  DegradationTrace* trace) {
  require(ct.domain == ValueDomain::HU, "degrade_to_cbct requires HU input");
  require(ct.same_geometry(mask), "degrade_to_cbct: mask geometry mismatch");
  require(ct.height == ct.width, "degrade_to_cbct expects square slices");
  params.validate(ct.width);

  const RigidTransform rigid{params.rigid_rotation, params.rigid_dx,
                             params.rigid_dy};

  Volume out = ct;
  {
    Rng erng(derive_seed(params.seed, "elastic"));
    out = apply_elastic(out, params.elastic_max_disp, erng);
  }
  out = pipeline::rigid_align(out, rigid);

  std::vector<std::vector<std::size_t>> support(
      static_cast<std::size_t>(ct.depth));
  if (params.n_streaks > 0 && params.streak_amplitude > 0) {
    for (int z = 0; z < ct.depth; ++z) {
      Rng srng(derive_seed(params.seed, "streaks", z));
      add_streaks(out, z, params.n_streaks, params.streak_amplitude, srng,
                  &support[static_cast<std::size_t>(z)]);
    }
  }

  if (params.cupping_amplitude > 0) {
    const double cx = (out.width - 1) / 2.0, cy = (out.height - 1) / 2.0;
    const double rmax2 = cx * cx + cy * cy;
    for (int z = 0; z < out.depth; ++z)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
          const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          out.at(z, y, x) -= params.cupping_amplitude * (1.0 - r2 / rmax2);
        }
  }

  if (params.noise_sigma > 0) {
    Rng nrng(derive_seed(params.seed, "noise"));
    for (double& v : out.voxels) v += nrng.normal(0.0, params.noise_sigma);
  }

  bool any_stage = params.elastic_max_disp > 0 || !rigid.is_identity() ||
                   (params.n_streaks > 0 && params.streak_amplitude > 0) ||
                   params.cupping_amplitude > 0 || params.noise_sigma > 0;
  if (any_stage)
    for (double& v : out.voxels) v = std::clamp(v, -1024.0, 3071.0);

  out.provenance = "phantom-cbct";
  if (trace) {
    trace->applied_rigid = rigid;
    trace->streak_support = std::move(support);
  }
  return {std::move(out), rigid};
}

json ParamRanges::to_json() const {
  return json{{"n_streaks", {n_streaks_lo, n_streaks_hi}},
              {"streak_amplitude", {streak_amplitude.lo, streak_amplitude.hi}},
              {"noise_sigma", {noise_sigma.lo, noise_sigma.hi}},
              {"cupping", {cupping.lo, cupping.hi}},
              {"elastic", {elastic.lo, elastic.hi}},
              {"rot_max", rot_max},
              {"offset_max", offset_max}};
}

ParamRanges ParamRanges::from_json(const json& j) {
  ParamRanges r;
  auto pair_of = [&](const char* key, double& lo, double& hi) {
    const auto v = j.at(key).get<std::vector<double>>();
    require(v.size() == 2 && v[0] <= v[1], std::string("bad range for ") + key);
    lo = v[0];
    hi = v[1];
  };
  const auto ns = j.at("n_streaks").get<std::vector<int>>();
  require(ns.size() == 2 && ns[0] <= ns[1], "bad range for n_streaks");
  r.n_streaks_lo = ns[0];
  r.n_streaks_hi = ns[1];
  pair_of("streak_amplitude", r.streak_amplitude.lo, r.streak_amplitude.hi);
  pair_of("noise_sigma", r.noise_sigma.lo, r.noise_sigma.hi);
  pair_of("cupping", r.cupping.lo, r.cupping.hi);
  pair_of("elastic", r.elastic.lo, r.elastic.hi);
  r.rot_max = j.at("rot_max").get<double>();
  r.offset_max = j.at("offset_max").get<double>();
  return r;
}

json PhantomSpec::to_json() const {
  return json{{"image_size", image_size},
              {"n_slices", n_slices},
              {"lung_count", lung_count},
              {"vessel_tree_depth", vessel_tree_depth},
              {"lesion_present", lesion_present},
              {"hu",
               {{"parenchyma", hu.parenchyma},
                {"vessel", hu.vessel},
                {"lesion", hu.lesion},
                {"background", hu.background}}}};
}

PhantomSpec PhantomSpec::from_json(const json& j) {
  PhantomSpec s;
  s.image_size = j.at("image_size").get<int>();
  s.n_slices = j.at("n_slices").get<int>();
  s.lung_count = j.at("lung_count").get<int>();
  s.vessel_tree_depth = j.at("vessel_tree_depth").get<int>();
  s.lesion_present = j.at("lesion_present").get<bool>();
  const auto& h = j.at("hu");
  s.hu.parenchyma = h.at("parenchyma").get<double>();
  s.hu.vessel = h.at("vessel").get<double>();
  s.hu.lesion = h.at("lesion").get<double>();
  s.hu.background = h.at("background").get<double>();
  return s;
}

void DatasetManifest::save(const std::string& dir) const {
  json j;
  j["format_version"] = 1;
  j["image_size"] = image_size;
  j["n_slices"] = n_slices;
  j["seed"] = seed;
  j["spec"] = spec.to_json();
  j["ranges"] = ranges.to_json();
  json arr = json::array();
  for (const auto& p : pairs)
    arr.push_back({{"id", p.id},
                   {"dir", p.dir},
                   {"seed", p.seed},
                   {"true_rigid",
                    {{"rot_deg", p.true_rigid.rot_deg},
                     {"dx", p.true_rigid.dx},
                     {"dy", p.true_rigid.dy}}},
                   {"ct_hash", p.ct_hash},
                   {"cbct_hash", p.cbct_hash},
                   {"mask_hash", p.mask_hash}});
  j["pairs"] = arr;
  fs::create_directories(dir);
  std::ofstream f(fs::path(dir) / "manifest.json");
  require(f.good(), "cannot write manifest in " + dir);
  f << j.dump(2) << "\n";
  require(f.good(), "short write on manifest in " + dir);
}

DatasetManifest DatasetManifest::load(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  require(f.good(), "manifest.json not found in " + dir);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw IoError("bad manifest in " + dir + ": " + e.what());
  }
  DatasetManifest m;
  m.image_size = j.at("image_size").get<int>();
  m.n_slices = j.at("n_slices").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.spec = PhantomSpec::from_json(j.at("spec"));
  m.ranges = ParamRanges::from_json(j.at("ranges"));
  for (const auto& e : j.at("pairs")) {
    PairRecord p;
    p.id = e.at("id").get<int>();
    p.dir = e.at("dir").get<std::string>();
    p.seed = e.at("seed").get<std::uint64_t>();
    p.true_rigid.rot_deg = e.at("true_rigid").at("rot_deg").get<double>();
    p.true_rigid.dx = e.at("true_rigid").at("dx").get<double>();
    p.true_rigid.dy = e.at("true_rigid").at("dy").get<double>();
    p.ct_hash = e.at("ct_hash").get<std::string>();
    p.cbct_hash = e.at("cbct_hash").get<std::string>();
    p.mask_hash = e.at("mask_hash").get<std::string>();
    m.pairs.push_back(std::move(p));
  }
  m.root = dir;
  return m;
}

std::string DatasetManifest::ct_dir(const PairRecord& r) const {
  return (fs::path(root) / r.dir / "ct").string();
}
std::string DatasetManifest::cbct_dir(const PairRecord& r) const {
  return (fs::path(root) / r.dir / "cbct").string();
}
std::string DatasetManifest::mask_dir(const PairRecord& r) const {
  return (fs::path(root) / r.dir / "lung_mask").string();
}

PhantomPair load_pair(const DatasetManifest& m, const PairRecord& r) {
  PhantomPair p;
  p.ct = load_volume(m.ct_dir(r));
  p.cbct = load_volume(m.cbct_dir(r));
  p.lung_mask = load_volume(m.mask_dir(r));
  p.true_rigid = r.true_rigid;
  p.seed = r.seed;
  return p;
}

DatasetManifest make_dataset(int n_pairs, const PhantomSpec& spec,
                             const ParamRanges& ranges,
                             const std::string& out_dir, std::uint64_t seed) {
  require(n_pairs >= 0, "n_pairs must be >= 0");
  spec.validate();
  DatasetManifest m;
  m.image_size = spec.image_size;
  m.n_slices = spec.n_slices;
  m.seed = seed;
  m.spec = spec;
  m.ranges = ranges;
  m.root = out_dir;

  for (int i = 0; i < n_pairs; ++i) {
    const std::uint64_t pair_seed = derive_seed(seed, "pair", i);
    auto [ct, mask] = generate_phantom(spec, pair_seed);

    Rng prng(derive_seed(pair_seed, "params"));
    DegradationParams dp;
    dp.n_streaks = prng.uniform_int(ranges.n_streaks_lo, ranges.n_streaks_hi);
    dp.streak_amplitude =
        prng.uniform(ranges.streak_amplitude.lo, ranges.streak_amplitude.hi);
    dp.noise_sigma = prng.uniform(ranges.noise_sigma.lo, ranges.noise_sigma.hi);
    dp.cupping_amplitude = prng.uniform(ranges.cupping.lo, ranges.cupping.hi);
    dp.elastic_max_disp = prng.uniform(ranges.elastic.lo, ranges.elastic.hi);
    dp.rigid_rotation = prng.uniform(-ranges.rot_max, ranges.rot_max);
    dp.rigid_dx = prng.uniform(-ranges.offset_max, ranges.offset_max);
    dp.rigid_dy = prng.uniform(-ranges.offset_max, ranges.offset_max);
    dp.seed = derive_seed(pair_seed, "degrade");

    auto [cbct, rigid] = degrade_to_cbct(ct, mask, dp);

    char name[32];
    std::snprintf(name, sizeof name, "pair_%04d", i);
    PairRecord rec;
    rec.id = i;
    rec.dir = name;
    rec.seed = pair_seed;
    rec.true_rigid = rigid;
    rec.ct_hash = hex64(volume_content_hash(ct));
    rec.cbct_hash = hex64(volume_content_hash(cbct));
    rec.mask_hash = hex64(volume_content_hash(mask));

    const fs::path pdir = fs::path(out_dir) / name;
    save_volume(ct, (pdir / "ct").string());
    save_volume(cbct, (pdir / "cbct").string());
    save_volume(mask, (pdir / "lung_mask").string(), VoxelDtype::U8);
    m.pairs.push_back(std::move(rec));
  }

  m.save(out_dir);
  return m;
}

}  // namespace cbct::phantom

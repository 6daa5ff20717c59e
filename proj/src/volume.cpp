#include "cbct/volume.hpp"

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace cbct {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ValueDomain d) {
  switch (d) {
    case ValueDomain::HU: return "HU";
    case ValueDomain::LAC: return "LAC";
    case ValueDomain::Unitless: return "unitless";
  }
  throw ValidationError("bad value domain enum");
}

ValueDomain value_domain_from_string(const std::string& s) {
  if (s == "HU") return ValueDomain::HU;
  if (s == "LAC") return ValueDomain::LAC;
  if (s == "unitless") return ValueDomain::Unitless;
  throw ValidationError("unknown value domain: " + s);
}

Volume Volume::make(int h, int w, int d, ValueDomain dom) {
  require(h > 0 && w > 0 && d > 0, "volume dims must be positive");
  Volume v;
  v.height = h;
  v.width = w;
  v.depth = d;
  v.domain = dom;
  v.voxels.assign(static_cast<std::size_t>(h) * w * d, 0.0);
  return v;
}

Tensor Volume::slice_tensor(int s) const {
  require(s >= 0 && s < depth, "slice index out of range");
  Tensor t({1, height, width});
  const double* src = voxels.data() + static_cast<std::size_t>(s) * height * width;
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(src[i]);
  return t;
}

TensorT<double> Volume::slice_tensor_d(int s) const {
  require(s >= 0 && s < depth, "slice index out of range");
  TensorT<double> t({1, height, width});
  const double* src = voxels.data() + static_cast<std::size_t>(s) * height * width;
  std::copy(src, src + t.numel(), t.data());
  return t;
}

void Volume::set_slice(int s, const Tensor& t) {
  require(s >= 0 && s < depth, "slice index out of range");
  require(t.rank() == 3 && t.dim(0) == 1 && t.dim(1) == height && t.dim(2) == width,
          "slice shape mismatch");
  double* dst = voxels.data() + static_cast<std::size_t>(s) * height * width;
  for (std::size_t i = 0; i < t.numel(); ++i) dst[i] = static_cast<double>(t[i]);
}

void Volume::set_slice(int s, const TensorT<double>& t) {
  require(s >= 0 && s < depth, "slice index out of range");
  require(t.rank() == 3 && t.dim(0) == 1 && t.dim(1) == height && t.dim(2) == width,
          "slice shape mismatch");
  double* dst = voxels.data() + static_cast<std::size_t>(s) * height * width;
  std::copy(t.data(), t.data() + t.numel(), dst);
}

void Volume::validate() const {
  require(voxels.size() == static_cast<std::size_t>(height) * width * depth,
          "voxel count does not match dims");
  for (double v : voxels) {
    if (!std::isfinite(v)) throw ValidationError("volume contains non-finite voxel");
    if (domain == ValueDomain::HU && (v < -1024.0 || v > 3071.0))
      throw ValidationError("HU voxel outside [-1024, 3071]");
    if (domain == ValueDomain::LAC && v < 0.0)
      throw ValidationError("negative LAC voxel");
  }
}

void save_volume(const Volume& v, const std::string& dir, VoxelDtype dtype) {
  static_assert(std::endian::native == std::endian::little,
                "volume writer assumes little endian host");
  v.validate();
  fs::create_directories(dir);

  json meta;
  meta["dims"] = {v.height, v.width, v.depth};
  meta["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
  meta["value_domain"] = to_string(v.domain);
  meta["dtype"] = dtype == VoxelDtype::F32 ? "float32" : "uint8";
  if (!v.provenance.empty()) meta["provenance"] = v.provenance;
  {
    std::ofstream f(fs::path(dir) / "meta.json");
    require(f.good(), "cannot write volume meta: " + dir);
    f << meta.dump(2) << "\n";
  }

  std::ofstream f(fs::path(dir) / "voxels.raw", std::ios::binary);
  require(f.good(), "cannot write voxels: " + dir);
  if (dtype == VoxelDtype::F32) {
    std::vector<float> buf(v.voxels.size());
    for (std::size_t i = 0; i < buf.size(); ++i)
      buf[i] = static_cast<float>(v.voxels[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  } else {
    std::vector<unsigned char> buf(v.voxels.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const double x = v.voxels[i];
      require(x == 0.0 || x == 1.0, "uint8 volume requires binary voxels");
      buf[i] = static_cast<unsigned char>(x);
    }
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  }
  require(f.good(), "short write on voxels: " + dir);
}

Volume load_volume(const std::string& dir) {
  static_assert(std::endian::native == std::endian::little,
                "volume reader assumes little endian host");
  std::ifstream mf(fs::path(dir) / "meta.json");
  require(mf.good(), "volume meta not found: " + dir);
  json meta;
  try {
    mf >> meta;
  } catch (const std::exception& e) {
    throw IoError("bad volume meta in " + dir + ": " + e.what());
  }
  const auto dims = meta.at("dims").get<std::vector<int>>();
  require(dims.size() == 3, "volume meta dims must have 3 entries");
  Volume v = Volume::make(dims[0], dims[1], dims[2],
                          value_domain_from_string(meta.at("value_domain")));
  const auto sp = meta.at("spacing").get<std::vector<double>>();
  require(sp.size() == 3, "volume meta spacing must have 3 entries");
  v.spacing = {sp[0], sp[1], sp[2]};
  v.provenance = meta.value("provenance", std::string{});
  const std::string dtype = meta.at("dtype").get<std::string>();

  std::ifstream f(fs::path(dir) / "voxels.raw", std::ios::binary);
  require(f.good(), "voxels.raw not found: " + dir);
  if (dtype == "float32") {
    std::vector<float> buf(v.voxels.size());
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    require(f.gcount() ==
                static_cast<std::streamsize>(buf.size() * sizeof(float)),
            "voxels.raw truncated: " + dir);
    for (std::size_t i = 0; i < buf.size(); ++i)
      v.voxels[i] = static_cast<double>(buf[i]);
  } else if (dtype == "uint8") {
    std::vector<unsigned char> buf(v.voxels.size());
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size()));
    require(f.gcount() == static_cast<std::streamsize>(buf.size()),
            "voxels.raw truncated: " + dir);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      require(buf[i] <= 1, "uint8 volume voxel not binary in " + dir);
      v.voxels[i] = static_cast<double>(buf[i]);
    }
  } else {
    throw IoError("unknown volume dtype: " + dtype);
  }
  f.peek();
  require(f.eof(), "voxels.raw has trailing bytes: " + dir);
  v.validate();
  return v;
}

std::uint64_t volume_content_hash(const Volume& v) {
  std::uint64_t h = fnv1a64(&v.height, sizeof v.height);
  h = fnv1a64(&v.width, sizeof v.width, h);
  h = fnv1a64(&v.depth, sizeof v.depth, h);
  const auto dom = to_string(v.domain);
  h = fnv1a64(dom.data(), dom.size(), h);
  // hash at storage precision so a volume and its saved/reloaded copy agree
  std::vector<float> q(v.voxels.size());
  for (std::size_t i = 0; i < q.size(); ++i)
    q[i] = static_cast<float>(v.voxels[i]);
  h = fnv1a64(q.data(), q.size() * sizeof(float), h);
  return h;
}

}  // namespace cbct

#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbct/common.hpp"
#include "cbct/tape.hpp"
#include "cbct/tensor.hpp"

namespace cbct::nn {

template <class R>
class ParamStoreT {
 public:
  ParamT<R>& create(const std::string& name, TensorT<R> init) {
    require(find(name) == nullptr, "duplicate parameter name: " + name);
    auto p = std::make_unique<ParamT<R>>();
    p->id = static_cast<int>(ps_.size());
    p->name = name;
    p->value = std::move(init);
    ps_.push_back(std::move(p));
    return *ps_.back();
  }

  std::size_t size() const { return ps_.size(); }
  ParamT<R>& at(int id) { return *ps_.at(static_cast<std::size_t>(id)); }
  const ParamT<R>& at(int id) const { return *ps_.at(static_cast<std::size_t>(id)); }

  ParamT<R>* find(const std::string& name) {
    for (auto& p : ps_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& p : ps_) n += p->value.numel();
    return n;
  }

  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : ps_) {
      h = fnv1a64(p->name.data(), p->name.size(), h);
      h = fnv1a64(p->value.data(), p->value.numel() * sizeof(R), h);
    }
    return h;
  }

 private:
  std::vector<std::unique_ptr<ParamT<R>>> ps_;
};

using ParamStore = ParamStoreT<float>;

enum class Init { He, Zero };

template <class R>
TensorT<R> he_normal(const std::vector<int>& shape, int fan_in, Rng& rng) {
  TensorT<R> t(shape);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<R>(rng.normal(0.0, std));
  return t;
}

// ---------------------------------------------------------------------------
// Layer builders. A layer owns pointers into its ParamStore; fwd() pushes the
// weights onto the given tape. `trainable=false` runs the same math but marks
// the weights frozen, so only input gradients flow through.
// ---------------------------------------------------------------------------

template <class R>
struct Conv2dT {
  const ParamT<R>* w = nullptr;
  const ParamT<R>* b = nullptr;
  int stride = 1;
  int pad = 1;

  typename TapeT<R>::Ref fwd(TapeT<R>& t, typename TapeT<R>::Ref x,
                             bool trainable = true) const {
    auto wn = t.param(*w, trainable);
    auto bn = b ? t.param(*b, trainable) : nullptr;
    return ops::conv2d(t, x, wn, bn, stride, pad);
  }
};

template <class R>
Conv2dT<R> make_conv(ParamStoreT<R>& ps, const std::string& name, int cin,
                     int cout, int k, int stride, int pad, Rng& rng,
                     Init init = Init::He) {
  Conv2dT<R> c;
  TensorT<R> w = init == Init::He
                     ? he_normal<R>({cout, cin, k, k}, cin * k * k, rng)
                     : TensorT<R>({cout, cin, k, k});
  c.w = &ps.create(name + ".w", std::move(w));
  c.b = &ps.create(name + ".b", TensorT<R>({cout}));
  c.stride = stride;
  c.pad = pad;
  return c;
}

template <class R>
struct LinearT {
  const ParamT<R>* w = nullptr;
  const ParamT<R>* b = nullptr;

  typename TapeT<R>::Ref fwd(TapeT<R>& t, typename TapeT<R>::Ref x,
                             bool trainable = true) const {
    auto wn = t.param(*w, trainable);
    auto bn = t.param(*b, trainable);
    return ops::fc(t, x, wn, bn);
  }
};

template <class R>
LinearT<R> make_linear(ParamStoreT<R>& ps, const std::string& name, int cin,
                       int cout, Rng& rng, Init init = Init::He) {
  LinearT<R> l;
  TensorT<R> w = init == Init::He ? he_normal<R>({cout, cin}, cin, rng)
                                  : TensorT<R>({cout, cin});
  l.w = &ps.create(name + ".w", std::move(w));
  l.b = &ps.create(name + ".b", TensorT<R>({cout}));
  return l;
}

// Two-conv residual block: y = relu(conv2(relu(conv1(x))) + x).
template <class R>
struct ResBlockT {
  Conv2dT<R> c1, c2;

  typename TapeT<R>::Ref fwd(TapeT<R>& t, typename TapeT<R>::Ref x,
                             bool trainable = true) const {
    auto h = ops::relu(t, c1.fwd(t, x, trainable));
    h = c2.fwd(t, h, trainable);
    return ops::relu(t, ops::add(t, h, x));
  }
};

template <class R>
ResBlockT<R> make_res_block(ParamStoreT<R>& ps, const std::string& name,
                            int ch, Rng& rng) {
  ResBlockT<R> b;
  b.c1 = make_conv(ps, name + ".c1", ch, ch, 3, 1, 1, rng);
  b.c2 = make_conv(ps, name + ".c2", ch, ch, 3, 1, 1, rng);
  return b;
}

// Squeeze-and-excitation gate over channels.
template <class R>
struct SeBlockT {
  LinearT<R> fc1, fc2;

  typename TapeT<R>::Ref fwd(TapeT<R>& t, typename TapeT<R>::Ref x,
                             bool trainable = true) const {
    auto s = ops::global_avg_pool(t, x);
    s = ops::relu(t, fc1.fwd(t, s, trainable));
    s = ops::sigmoid(t, fc2.fwd(t, s, trainable));
    return ops::channel_scale(t, x, s);
  }
};

template <class R>
SeBlockT<R> make_se_block(ParamStoreT<R>& ps, const std::string& name, int ch,
                          int reduction, Rng& rng) {
  require(reduction >= 1 && ch % reduction == 0,
          "se reduction must divide channel count");
  SeBlockT<R> b;
  b.fc1 = make_linear(ps, name + ".fc1", ch, ch / reduction, rng);
  b.fc2 = make_linear(ps, name + ".fc2", ch / reduction, ch, rng);
  return b;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class R>
class AdamT {
 public:
  explicit AdamT(R lr, R beta1 = R(0.9), R beta2 = R(0.999),
                 R eps = R(1e-8))
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStoreT<R>& ps, const ParamGradsT<R>& grads) {
    if (m_.size() < ps.size()) {
      m_.resize(ps.size());
      v_.resize(ps.size());
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(b1_), t_);
    const double bc2 = 1.0 - std::pow(static_cast<double>(b2_), t_);
    for (std::size_t id = 0; id < ps.size(); ++id) {
      if (id >= grads.has.size() || !grads.has[id]) continue;
      auto& p = ps.at(static_cast<int>(id));
      const auto& g = grads.g[id];
      require(g.same_shape(p.value), "adam: gradient shape mismatch for " + p.name);
      if (!m_[id].same_shape(p.value)) {
        m_[id] = TensorT<R>(p.value.shape());
        v_[id] = TensorT<R>(p.value.shape());
      }
      auto& m = m_[id];
      auto& v = v_[id];
      for (std::size_t i = 0; i < g.numel(); ++i) {
        m[i] = b1_ * m[i] + (R(1) - b1_) * g[i];
        v[i] = b2_ * v[i] + (R(1) - b2_) * g[i] * g[i];
        const double mh = static_cast<double>(m[i]) / bc1;
        const double vh = static_cast<double>(v[i]) / bc2;
        p.value[i] -= static_cast<R>(static_cast<double>(lr_) * mh /
                                     (std::sqrt(vh) + static_cast<double>(eps_)));
      }
    }
  }

  long steps_taken() const { return t_; }
  void set_lr(R lr) { lr_ = lr; }

 private:
  R lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<TensorT<R>> m_, v_;
};

using Adam = AdamT<float>;

// ---------------------------------------------------------------------------
// Checkpoint container: directory with meta.json (format version, parameter
// index, caller metadata) and params.bin (all values as float32, little
// endian, concatenated in index order).
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

template <class R>
void save_checkpoint(const ParamStoreT<R>& ps, const std::string& dir,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes little endian host");
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json meta;
  meta["format_version"] = kCheckpointVersion;
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  nlohmann::json idx = nlohmann::json::array();
  std::size_t off = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& p = ps.at(static_cast<int>(i));
    idx.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", off}});
    off += p.value.numel();
  }
  meta["params"] = idx;

  {
    std::ofstream f(fs::path(dir) / "meta.json");
    require(f.good(), "cannot write checkpoint meta: " + dir);
    f << meta.dump(2) << "\n";
  }
  {
    std::ofstream f(fs::path(dir) / "params.bin", std::ios::binary);
    require(f.good(), "cannot write checkpoint params: " + dir);
    std::vector<float> buf;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto& v = ps.at(static_cast<int>(i)).value;
      buf.resize(v.numel());
      for (std::size_t j = 0; j < v.numel(); ++j) buf[j] = static_cast<float>(v[j]);
      f.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    require(f.good(), "short write on checkpoint params: " + dir);
  }
}

// Loads values into an already-built store; names and shapes must match.
// Returns the checkpoint metadata.
template <class R>
nlohmann::json load_checkpoint(ParamStoreT<R>& ps, const std::string& dir) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint reader assumes little endian host");
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "meta.json");
  require(mf.good(), "checkpoint meta not found: " + dir);
  nlohmann::json meta;
  try {
    mf >> meta;
  } catch (const std::exception& e) {
    throw IoError("bad checkpoint meta in " + dir + ": " + e.what());
  }
  require(meta.value("format_version", -1) == kCheckpointVersion,
          "unsupported checkpoint format version in " + dir);
  require(meta.contains("params") && meta["params"].is_array(),
          "checkpoint meta missing params index: " + dir);

  std::ifstream bf(fs::path(dir) / "params.bin", std::ios::binary);
  require(bf.good(), "checkpoint params.bin not found: " + dir);
  bf.seekg(0, std::ios::end);
  const std::size_t bytes = static_cast<std::size_t>(bf.tellg());
  bf.seekg(0);

  std::size_t expected = 0;
  for (const auto& e : meta["params"]) expected += [&] {
    std::size_t n = 1;
    for (int d : e.at("shape").get<std::vector<int>>()) n *= static_cast<std::size_t>(d);
    return n;
  }();
  require(bytes == expected * sizeof(float),
          "checkpoint params.bin size mismatch: " + dir);

  std::vector<float> buf;
  for (const auto& e : meta["params"]) {
    const std::string name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<int>>();
    ParamT<R>* p = ps.find(name);
    require(p != nullptr, "checkpoint has unknown parameter: " + name);
    require(p->value.shape() == shape, "checkpoint shape mismatch for " + name);
    const std::size_t off = e.at("offset").get<std::size_t>();
    buf.resize(p->value.numel());
    bf.seekg(static_cast<std::streamoff>(off * sizeof(float)));
    bf.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    require(bf.good(), "short read in checkpoint: " + dir);
    for (std::size_t j = 0; j < buf.size(); ++j)
      p->value[j] = static_cast<R>(buf[j]);
  }
  return meta;
}

}  // namespace cbct::nn

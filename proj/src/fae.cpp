#include "cbct/fae.hpp"

#include <cmath>

#include "cbct/jsonutil.hpp"

namespace cbct::fae {

void FaeConfig::validate() const {
  require(input_size >= 8 && input_size % 8 == 0,
          "fae config: input_size must be a positive multiple of 8");
  int sum = 0;
  for (int s = 0; s < 4; ++s) {
    require(stage_channels[static_cast<std::size_t>(s)] >= 1,
            "fae config: stage_channels must be positive");
    require(blocks_per_stage[static_cast<std::size_t>(s)] >= 1,
            "fae config: blocks_per_stage must be positive");
    sum += blocks_per_stage[static_cast<std::size_t>(s)];
  }
  require(sum == residual_layers,
          "fae config: blocks_per_stage must sum to residual_layers");
  require(width_multiplier > 0.0, "fae config: width_multiplier must be positive");
  scaled_channels();
}

std::array<int, 4> FaeConfig::scaled_channels() const {
  std::array<int, 4> out{};
  for (int s = 0; s < 4; ++s) {
    const double scaled = stage_channels[static_cast<std::size_t>(s)] * width_multiplier;
    const int c = static_cast<int>(std::llround(scaled));
    require(c >= 1 && std::abs(scaled - c) < 1e-9,
            "fae config: width_multiplier must scale every stage to a whole "
            "channel count");
    out[static_cast<std::size_t>(s)] = c;
  }
  return out;
}

nlohmann::json FaeConfig::to_json() const {
  return {{"input_size", input_size},
          {"stage_channels", stage_channels},
          {"blocks_per_stage", blocks_per_stage},
          {"residual_layers", residual_layers},
          {"width_multiplier", width_multiplier}};
}

FaeConfig FaeConfig::from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"input_size", "stage_channels", "blocks_per_stage",
                      "residual_layers", "width_multiplier"},
                     "fae config");
  FaeConfig cfg;
  cfg.input_size = j.value("input_size", cfg.input_size);
  if (j.contains("stage_channels"))
    cfg.stage_channels = j.at("stage_channels").get<std::array<int, 4>>();
  if (j.contains("blocks_per_stage"))
    cfg.blocks_per_stage = j.at("blocks_per_stage").get<std::array<int, 4>>();
  cfg.residual_layers = j.value("residual_layers", cfg.residual_layers);
  cfg.width_multiplier = j.value("width_multiplier", cfg.width_multiplier);
  cfg.validate();
  return cfg;
}

template <class R>
FaeNetT<R> build_fae_net(nn::ParamStoreT<R>& ps, const std::string& prefix,
                         const FaeConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto ch = cfg.scaled_channels();
  FaeNetT<R> net;
  net.input_size = cfg.input_size;
  net.stem = nn::make_conv(ps, prefix + "stem", 1, ch[0], 3, 1, 1, rng);
  int cin = ch[0];
  for (int s = 0; s < 4; ++s) {
    const std::string stage = prefix + "stage" + std::to_string(s + 1);
    net.stage_in[static_cast<std::size_t>(s)] =
        nn::make_conv(ps, stage + ".in", cin, ch[static_cast<std::size_t>(s)], 3,
                      1, 1, rng);
    cin = ch[static_cast<std::size_t>(s)];
    auto& stage_blocks = net.blocks[static_cast<std::size_t>(s)];
    for (int b = 0; b < cfg.blocks_per_stage[static_cast<std::size_t>(s)]; ++b)
      stage_blocks.push_back(nn::make_res_block(
          ps, stage + ".block" + std::to_string(b + 1), cin, rng));
  }
  net.last_shared_w = net.blocks[3].back().c2.w;
  return net;
}

template <class R>
FaeModelT<R> build_fae(const FaeConfig& cfg, std::uint64_t seed) {
  FaeModelT<R> m;
  m.cfg = cfg;
  m.seed = seed;
  Rng rng(derive_seed(seed, "fae.init"));
  m.net = build_fae_net(m.params, "fae.", cfg, rng);
  return m;
}

template <class R>
cfp::FeaturePyramidT<R> extract_pyramid(const FaeModelT<R>& m,
                                        const TensorT<R>& image) {
  TapeT<R> t;
  auto x = t.constant(image);
  const auto taps = m.net.forward(t, x, false);
  cfp::FeaturePyramidT<R> pyr;
  pyr.reserve(4);
  for (auto r : taps) pyr.push_back(t.val(r));
  return pyr;
}

template <class R>
void save_fae(const FaeModelT<R>& m, const std::string& dir) {
  nn::save_checkpoint(m.params, dir,
                      {{"kind", "fae"},
                       {"seed", m.seed},
                       {"fae_config", m.cfg.to_json()}});
}

template <class R>
FaeModelT<R> load_fae(const std::string& dir) {
  // Peek at the metadata to rebuild the architecture, then load values.
  std::ifstream mf(std::filesystem::path(dir) / "meta.json");
  require(mf.good(), "fae checkpoint meta not found: " + dir);
  nlohmann::json meta;
  mf >> meta;
  require(meta.value("kind", "") == "fae",
          "checkpoint at " + dir + " is not an fae checkpoint");
  const FaeConfig cfg = FaeConfig::from_json(meta.at("fae_config"));
  FaeModelT<R> m = build_fae<R>(cfg, meta.value("seed", std::uint64_t{0}));
  nn::load_checkpoint(m.params, dir);
  return m;
}

template FaeNetT<float> build_fae_net<float>(nn::ParamStoreT<float>&,
                                             const std::string&,
                                             const FaeConfig&, Rng&);
template FaeNetT<double> build_fae_net<double>(nn::ParamStoreT<double>&,
                                               const std::string&,
                                               const FaeConfig&, Rng&);
template FaeModelT<float> build_fae<float>(const FaeConfig&, std::uint64_t);
template FaeModelT<double> build_fae<double>(const FaeConfig&, std::uint64_t);
template cfp::FeaturePyramidT<float> extract_pyramid<float>(
    const FaeModelT<float>&, const TensorT<float>&);
template cfp::FeaturePyramidT<double> extract_pyramid<double>(
    const FaeModelT<double>&, const TensorT<double>&);
template void save_fae<float>(const FaeModelT<float>&, const std::string&);
template void save_fae<double>(const FaeModelT<double>&, const std::string&);
template FaeModelT<float> load_fae<float>(const std::string&);
template FaeModelT<double> load_fae<double>(const std::string&);

}  // namespace cbct::fae

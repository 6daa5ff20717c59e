#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbct/cfp.hpp"
#include "cbct/fae.hpp"
#include "cbct/nn.hpp"
#include "cbct/phantom.hpp"
#include "cbct/tape.hpp"
#include "cbct/volume.hpp"

namespace cbct::translate {

enum class ModelKind { Unet, Gan, CycleGan };
enum class LossKind { Mse, Cfp };

std::string to_string(ModelKind k);
std::string to_string(LossKind k);
ModelKind model_kind_from_string(const std::string& s);
LossKind loss_kind_from_string(const std::string& s);

struct TranslateConfig {
  ModelKind model_kind = ModelKind::Unet;
  LossKind loss_kind = LossKind::Mse;
  int input_size = 256;
  int base_channels = 32;
  std::array<int, 4> res_blocks_per_level{2, 4, 6, 8};
  int se_reduction = 16;
  double adv_weight = 0.01;
  double cycle_weight = 10.0;
  // paired reconstruction term inside the cyclegan objective; switching it
  // off leaves adversarial + cycle-consistency only
  bool cycle_recon = true;
  cfp::CfpConfig cfp_cfg;
  double lr = 1e-4;
  int batch_size = 16;
  int epochs = 10;
  int max_pairs = 0;  // 0 = use every pair

  // encoder widths; the bottleneck doubles the deepest one
  std::array<int, 4> channels() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TranslateConfig from_json(const nlohmann::json& j);
};

// Channel-attention residual U-Net. Four maxpool downsamplings; each encoder
// level runs an entry convolution and a fixed count of two-skip residual
// blocks, and its skip passes through a squeeze-excite gate before the
// decoder concatenation. The zero-initialized head predicts a residual that
// is added onto the input, so an untrained net is the identity.
template <class R>
struct CarUnetT {
  using Ref = typename TapeT<R>::Ref;

  struct Level {
    nn::Conv2dT<R> in;
    std::vector<nn::ResBlockT<R>> blocks;
    nn::SeBlockT<R> se;
  };

  int input_size = 0;
  std::array<Level, 4> enc;
  nn::Conv2dT<R> bot1, bot2;
  std::array<nn::Conv2dT<R>, 4> up;     // deepest-to-finest: index = level
  std::array<nn::Conv2dT<R>, 4> merge;  // after skip concatenation
  nn::Conv2dT<R> out;                   // zero-initialized residual head

  Ref fwd(TapeT<R>& t, Ref x, bool trainable = true) const {
    const auto& in0 = t.val(x);
    if (in0.rank() != 3 || in0.dim(0) != 1 || in0.dim(1) != input_size ||
        in0.dim(2) != input_size)
      throw ShapeError("car-unet: expected (1," + std::to_string(input_size) +
                       "," + std::to_string(input_size) + ") input, got " +
                       in0.shape_str());
    std::array<Ref, 4> skips{};
    auto h = x;
    for (int l = 0; l < 4; ++l) {
      const auto& lv = enc[static_cast<std::size_t>(l)];
      if (l > 0) h = ops::maxpool2(t, h);
      h = ops::relu(t, lv.in.fwd(t, h, trainable));
      for (const auto& b : lv.blocks) h = b.fwd(t, h, trainable);
      skips[static_cast<std::size_t>(l)] = lv.se.fwd(t, h, trainable);
      h = skips[static_cast<std::size_t>(l)];
    }
    h = ops::maxpool2(t, h);
    h = ops::relu(t, bot1.fwd(t, h, trainable));
    h = ops::relu(t, bot2.fwd(t, h, trainable));
    for (int l = 3; l >= 0; --l) {
      h = ops::upsample_nearest2(t, h);
      h = ops::relu(t, up[static_cast<std::size_t>(l)].fwd(t, h, trainable));
      h = ops::concat_ch(t, h, skips[static_cast<std::size_t>(l)]);
      h = ops::relu(t, merge[static_cast<std::size_t>(l)].fwd(t, h, trainable));
    }
    return ops::add(t, x, out.fwd(t, h, trainable));
  }
};

// Patch classifier: four stride-2 convolutions and a single-channel score
// map (least-squares adversarial targets 1 = real, 0 = fake).
template <class R>
struct PatchDiscT {
  using Ref = typename TapeT<R>::Ref;

  std::array<nn::Conv2dT<R>, 4> convs;
  nn::Conv2dT<R> score;

  Ref fwd(TapeT<R>& t, Ref x, bool trainable = true) const {
    auto h = x;
    for (const auto& c : convs)
      h = ops::leaky_relu(t, c.fwd(t, h, trainable), R(0.2));
    return score.fwd(t, h, trainable);
  }
};

template <class R>
CarUnetT<R> build_car_unet(nn::ParamStoreT<R>& ps, const std::string& prefix,
                           const TranslateConfig& cfg, Rng& rng);
template <class R>
PatchDiscT<R> build_discriminator(nn::ParamStoreT<R>& ps,
                                  const std::string& prefix,
                                  const TranslateConfig& cfg, Rng& rng);

// "gen" always maps CBCT -> CT, so inference is kind-independent. The
// reverse generator and the discriminators exist per model kind.
template <class R>
struct TranslationModelT {
  TranslateConfig cfg;
  std::uint64_t seed = 0;
  nn::ParamStoreT<R> params;
  CarUnetT<R> gen;
  std::optional<CarUnetT<R>> gen_rev;
  std::optional<PatchDiscT<R>> disc;
  std::optional<PatchDiscT<R>> disc_rev;
};

using TranslationModel = TranslationModelT<float>;
using TranslationModelD = TranslationModelT<double>;

template <class R>
TranslationModelT<R> build_translation(const TranslateConfig& cfg,
                                       std::uint64_t seed);

struct TranslateTrainResult {
  TranslationModel model;
  nlohmann::json log;  // one record per epoch
};

// Trains on a prepared (LAC) paired dataset. `fae_dir` points at a frozen
// loss-net checkpoint and is required for loss_kind = cfp; it may be empty
// for mse. The loss net is never updated.
TranslateTrainResult train_translation(const phantom::DatasetManifest& ds,
                                       const std::string& fae_dir,
                                       const TranslateConfig& cfg,
                                       std::uint64_t seed);

// Slice-wise deterministic CBCT -> sCT mapping; LAC in, LAC out, same
// geometry. Negative outputs are clamped to zero (attenuation cannot be
// negative).
Volume infer(const TranslationModel& m, const Volume& cbct);

void save_translation(const TranslationModel& m, const std::string& dir);
TranslationModel load_translation(const std::string& dir);

}  // namespace cbct::translate

#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbct/cfp.hpp"
#include "cbct/nn.hpp"
#include "cbct/tape.hpp"

namespace cbct::fae {

// Residual encoder used both as the multi-task backbone and, frozen, as the
// loss network. Four stages; stage s runs an entry convolution followed by
// blocks_per_stage[s] two-skip residual blocks, with a 2x maxpool between
// stages. The per-stage tap is the last block's ReLU output.
struct FaeConfig {
  int input_size = 256;
  std::array<int, 4> stage_channels{32, 64, 128, 256};
  std::array<int, 4> blocks_per_stage{3, 4, 23, 1};
  int residual_layers = 31;
  double width_multiplier = 1.0;

  void validate() const;
  // stage_channels scaled by width_multiplier; must land on integers.
  std::array<int, 4> scaled_channels() const;

  nlohmann::json to_json() const;
  static FaeConfig from_json(const nlohmann::json& j);
};

// Layer graph only; parameters live in the store the net was built into.
template <class R>
struct FaeNetT {
  using Ref = typename TapeT<R>::Ref;

  int input_size = 0;
  nn::Conv2dT<R> stem;
  std::array<nn::Conv2dT<R>, 4> stage_in;
  std::array<std::vector<nn::ResBlockT<R>>, 4> blocks;
  // Deepest conv shared by every task head; gradnorm balances on its weight.
  const ParamT<R>* last_shared_w = nullptr;

  // Taps finest-first. trainable=false freezes the weights so only input
  // gradients flow (loss-net mode).
  std::array<Ref, 4> forward(TapeT<R>& t, Ref x, bool trainable) const {
    const auto& in = t.val(x);
    if (in.rank() != 3 || in.dim(0) != 1 || in.dim(1) != input_size ||
        in.dim(2) != input_size)
      throw ShapeError("fae forward: expected (1," + std::to_string(input_size) +
                       "," + std::to_string(input_size) + ") input, got " +
                       in.shape_str());
    auto h = ops::relu(t, stem.fwd(t, x, trainable));
    std::array<Ref, 4> taps{};
    for (int s = 0; s < 4; ++s) {
      if (s > 0) h = ops::maxpool2(t, h);
      h = ops::relu(t, stage_in[static_cast<std::size_t>(s)].fwd(t, h, trainable));
      for (const auto& b : blocks[static_cast<std::size_t>(s)])
        h = b.fwd(t, h, trainable);
      taps[static_cast<std::size_t>(s)] = h;
    }
    return taps;
  }
};

template <class R>
FaeNetT<R> build_fae_net(nn::ParamStoreT<R>& ps, const std::string& prefix,
                         const FaeConfig& cfg, Rng& rng);

// Standalone backbone with its own parameter store.
template <class R>
struct FaeModelT {
  FaeConfig cfg;
  std::uint64_t seed = 0;
  nn::ParamStoreT<R> params;
  FaeNetT<R> net;
};

using FaeModel = FaeModelT<float>;
using FaeModelD = FaeModelT<double>;

template <class R>
FaeModelT<R> build_fae(const FaeConfig& cfg, std::uint64_t seed);

// Forward-only pyramid extraction; pure in (parameters, image).
template <class R>
cfp::FeaturePyramidT<R> extract_pyramid(const FaeModelT<R>& m,
                                        const TensorT<R>& image);

template <class R>
void save_fae(const FaeModelT<R>& m, const std::string& dir);

template <class R>
FaeModelT<R> load_fae(const std::string& dir);

}  // namespace cbct::fae

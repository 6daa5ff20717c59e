#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbct/fae.hpp"
#include "cbct/nn.hpp"
#include "cbct/phantom.hpp"
#include "cbct/tape.hpp"

namespace cbct::mtfs {

// Task ids: 1 self-recovery, 2 registration, 3 modality classification.
// A displacement field is a (2, H, W) tensor in pixel units: channel 0 is dx
// (columns), channel 1 is dy (rows).

std::vector<int> normalize_task_subset(const std::vector<int>& subset);

struct MtfsConfig {
  fae::FaeConfig fae;
  double alpha = 1.5;  // gradnorm asymmetry
  double lr = 1e-4;
  double lr_w = 0.01;  // gradnorm weight step
  int batch_size = 16;
  int epochs = 10;
  int max_pairs = 0;  // 0 = use every pair in the dataset
  double aug_rot_deg = 10.0;
  double aug_offset_px = 10.0;
  bool ct_only_recovery = false;

  void validate() const;
  nlohmann::json to_json() const;
  static MtfsConfig from_json(const nlohmann::json& j);
};

// ---- task heads ----

// Decoder from the deepest feature map back to a single-channel image:
// 9 convolutions (channels 256,256,256,128,128,64,64,32,1 scaled by the
// backbone width), nearest 2x upsampling before convolutions 4, 6 and 8.
template <class R>
struct RecoveryHeadT {
  using Ref = typename TapeT<R>::Ref;

  std::vector<nn::Conv2dT<R>> convs;

  Ref fwd(TapeT<R>& t, Ref deepest, bool trainable = true) const {
    auto h = deepest;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      if (i == 3 || i == 5 || i == 7) h = ops::upsample_nearest2(t, h);
      h = convs[i].fwd(t, h, trainable);
      if (i + 1 < convs.size()) h = ops::relu(t, h);
    }
    return h;
  }
};

// Coarse-to-fine displacement decoder over two feature pyramids. At the
// coarsest level the DVF is predicted from concatenated features; at each
// finer level the upsampled (and doubled) DVF warps the moving features and a
// zero-initialized convolution predicts a residual. Zero init means the head
// starts at the identity warp.
template <class R>
struct RegistrationHeadT {
  using Ref = typename TapeT<R>::Ref;

  std::array<nn::Conv2dT<R>, 4> mix;   // index = level - 1
  std::array<nn::Conv2dT<R>, 4> pred;  // zero-initialized, 2 output channels

  Ref fwd(TapeT<R>& t, const std::array<Ref, 4>& moving,
          const std::array<Ref, 4>& fixed, bool trainable = true) const {
    for (int l = 0; l < 4; ++l) {
      const auto& mv = t.val(moving[static_cast<std::size_t>(l)]);
      const auto& fv = t.val(fixed[static_cast<std::size_t>(l)]);
      if (!mv.same_shape(fv))
        throw ShapeError("registration head: pyramid mismatch at level " +
                         std::to_string(l + 1));
    }
    Ref dvf = nullptr;
    for (int l = 3; l >= 0; --l) {
      auto m = moving[static_cast<std::size_t>(l)];
      if (dvf != nullptr) {
        dvf = ops::scale(t, ops::upsample_bilinear2(t, dvf), R(2));
        m = ops::warp(t, m, dvf);
      }
      auto h = ops::concat_ch(t, m, fixed[static_cast<std::size_t>(l)]);
      h = ops::relu(t, mix[static_cast<std::size_t>(l)].fwd(t, h, trainable));
      auto res = pred[static_cast<std::size_t>(l)].fwd(t, h, trainable);
      dvf = dvf == nullptr ? res : ops::add(t, dvf, res);
    }
    return dvf;  // (2, S, S)
  }
};

// Global average pool over the deepest map, one FC layer to 2 logits
// (CBCT = 0, CT = 1).
template <class R>
struct ClassifierHeadT {
  using Ref = typename TapeT<R>::Ref;

  nn::LinearT<R> fc;

  Ref fwd(TapeT<R>& t, Ref deepest, bool trainable = true) const {
    return fc.fwd(t, ops::global_avg_pool(t, deepest), trainable);
  }
};

template <class R>
RecoveryHeadT<R> build_recovery_head(nn::ParamStoreT<R>& ps,
                                     const std::string& prefix,
                                     const fae::FaeConfig& cfg, Rng& rng);
template <class R>
RegistrationHeadT<R> build_registration_head(nn::ParamStoreT<R>& ps,
                                             const std::string& prefix,
                                             const fae::FaeConfig& cfg, Rng& rng);
template <class R>
ClassifierHeadT<R> build_classifier_head(nn::ParamStoreT<R>& ps,
                                         const std::string& prefix,
                                         const fae::FaeConfig& cfg, Rng& rng);

// ---- scalar losses ----

double recovery_loss(const TensorD& decoded, const TensorD& target);
double registration_loss(const TensorD& warped, const TensorD& fixed);
double classification_loss(const std::array<double, 2>& logits, int label);

// Backward-warp of a (C, H, W) image by a (2, H, W) displacement field,
// outside samples are zero.
template <class R>
TensorT<R> warp(const TensorT<R>& image, const TensorT<R>& dvf);

// ---- gradnorm ----

struct TaskWeights {
  std::vector<double> w;
  std::vector<double> initial_losses;  // captured on the first update
  double alpha = 1.5;

  static TaskWeights init(int n_tasks, double alpha);
  int n_tasks() const { return static_cast<int>(w.size()); }
  void validate() const;
};

// One gradnorm update. losses are the current per-task batch losses,
// shared_grad_norms the L2 norms of each task's gradient on the designated
// shared layer (unweighted); G_i = w_i * shared_grad_norms[i]. Weights move
// one signed step toward the targets mean(G) * r_i^alpha, are clamped
// positive, and renormalized to sum to the task count.
TaskWeights gradnorm_step(const std::vector<double>& losses,
                          const std::vector<double>& shared_grad_norms,
                          TaskWeights tw, double lr_w);

// ---- model and training ----

template <class R>
struct MtfsModelT {
  MtfsConfig cfg;
  std::vector<int> tasks;
  std::uint64_t seed = 0;
  nn::ParamStoreT<R> params;
  fae::FaeNetT<R> backbone;
  std::optional<RecoveryHeadT<R>> recovery;
  std::optional<RegistrationHeadT<R>> registration;
  std::optional<ClassifierHeadT<R>> classifier;
};

using MtfsModel = MtfsModelT<float>;
using MtfsModelD = MtfsModelT<double>;

template <class R>
MtfsModelT<R> build_mtfs(const MtfsConfig& cfg, const std::vector<int>& tasks,
                         std::uint64_t seed);

struct MtfsTrainResult {
  MtfsModel model;
  nlohmann::json log;  // one record per epoch
};

// Trains backbone plus the selected task heads on a prepared (LAC) dataset.
// Gradnorm balances the losses when two or more tasks are active.
MtfsTrainResult train_mtfs(const phantom::DatasetManifest& ds,
                           const std::vector<int>& tasks, const MtfsConfig& cfg,
                           std::uint64_t seed);

void save_mtfs(const MtfsModel& m, const std::string& dir);
MtfsModel load_mtfs(const std::string& dir);

// Writes the backbone alone in the fae checkpoint format, so it can serve as
// the frozen loss network.
void export_fae_checkpoint(const MtfsModel& m, const std::string& dir);

}  // namespace cbct::mtfs

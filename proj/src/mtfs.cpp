#include "cbct/mtfs.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <utility>

#include "cbct/jsonutil.hpp"
#include "cbct/pipeline.hpp"
#include "cbct/volume.hpp"

namespace cbct::mtfs {

namespace {

constexpr double kMinTaskWeight = 1e-4;
constexpr double kDivergedLoss = 1e12;

// Recovery decoder widths before the backbone width multiplier.
constexpr std::array<int, 8> kRecoveryChannels{256, 256, 256, 128, 128,
                                               64,  64,  32};

int scale_channels(int c, double mult, const char* what) {
  const double s = static_cast<double>(c) * mult;
  const int si = static_cast<int>(std::llround(s));
  require(si >= 1 && std::abs(s - static_cast<double>(si)) < 1e-9,
          std::string(what) + ": width multiplier must scale " +
              std::to_string(c) + " channels to a positive integer");
  return si;
}

}  // namespace

std::vector<int> normalize_task_subset(const std::vector<int>& subset) {
  require(!subset.empty(), "task subset must not be empty");
  std::vector<int> out = subset;
  std::sort(out.begin(), out.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(out[i] >= 1 && out[i] <= 3,
            "task id out of range (valid: 1, 2, 3): " + std::to_string(out[i]));
    require(i == 0 || out[i] != out[i - 1],
            "duplicate task id: " + std::to_string(out[i]));
  }
  return out;
}

void MtfsConfig::validate() const {
  fae.validate();
  require(alpha >= 0.0, "mtfs: alpha must be non-negative");
  require(lr > 0.0 && lr_w > 0.0, "mtfs: learning rates must be positive");
  require(batch_size >= 1, "mtfs: batch_size must be >= 1");
  require(epochs >= 1, "mtfs: epochs must be >= 1");
  require(max_pairs >= 0, "mtfs: max_pairs must be >= 0");
  require(aug_rot_deg >= 0.0 && aug_rot_deg <= 45.0,
          "mtfs: aug_rot_deg must be in [0, 45]");
  require(aug_offset_px >= 0.0 && aug_offset_px <= fae.input_size / 2.0,
          "mtfs: aug_offset_px must be in [0, input_size/2]");
}

nlohmann::json MtfsConfig::to_json() const {
  return {{"fae", fae.to_json()},
          {"alpha", alpha},
          {"lr", lr},
          {"lr_w", lr_w},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"max_pairs", max_pairs},
          {"aug_rot_deg", aug_rot_deg},
          {"aug_offset_px", aug_offset_px},
          {"ct_only_recovery", ct_only_recovery}};
}

MtfsConfig MtfsConfig::from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"fae", "alpha", "lr", "lr_w", "batch_size", "epochs",
                      "max_pairs", "aug_rot_deg", "aug_offset_px",
                      "ct_only_recovery"},
                     "mtfs config");
  MtfsConfig c;
  if (j.contains("fae")) c.fae = fae::FaeConfig::from_json(j.at("fae"));
  c.alpha = j.value("alpha", c.alpha);
  c.lr = j.value("lr", c.lr);
  c.lr_w = j.value("lr_w", c.lr_w);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.max_pairs = j.value("max_pairs", c.max_pairs);
  c.aug_rot_deg = j.value("aug_rot_deg", c.aug_rot_deg);
  c.aug_offset_px = j.value("aug_offset_px", c.aug_offset_px);
  c.ct_only_recovery = j.value("ct_only_recovery", c.ct_only_recovery);
  c.validate();
  return c;
}

// ---- head builders ----

template <class R>
RecoveryHeadT<R> build_recovery_head(nn::ParamStoreT<R>& ps,
                                     const std::string& prefix,
                                     const fae::FaeConfig& cfg, Rng& rng) {
  RecoveryHeadT<R> h;
  int cin = cfg.scaled_channels()[3];
  for (std::size_t i = 0; i < kRecoveryChannels.size() + 1; ++i) {
    const int cout =
        i < kRecoveryChannels.size()
            ? scale_channels(kRecoveryChannels[i], cfg.width_multiplier,
                             "recovery head")
            : 1;
    h.convs.push_back(nn::make_conv(ps, prefix + "conv" + std::to_string(i + 1),
                                    cin, cout, 3, 1, 1, rng));
    cin = cout;
  }
  return h;
}

template <class R>
RegistrationHeadT<R> build_registration_head(nn::ParamStoreT<R>& ps,
                                             const std::string& prefix,
                                             const fae::FaeConfig& cfg,
                                             Rng& rng) {
  RegistrationHeadT<R> h;
  const auto ch = cfg.scaled_channels();
  for (int l = 0; l < 4; ++l) {
    const int c = ch[static_cast<std::size_t>(l)];
    const std::string lv = std::to_string(l + 1);
    h.mix[static_cast<std::size_t>(l)] =
        nn::make_conv(ps, prefix + "mix" + lv, 2 * c, c, 3, 1, 1, rng);
    h.pred[static_cast<std::size_t>(l)] = nn::make_conv(
        ps, prefix + "pred" + lv, c, 2, 3, 1, 1, rng, nn::Init::Zero);
  }
  return h;
}

template <class R>
ClassifierHeadT<R> build_classifier_head(nn::ParamStoreT<R>& ps,
                                         const std::string& prefix,
                                         const fae::FaeConfig& cfg, Rng& rng) {
  ClassifierHeadT<R> h;
  h.fc = nn::make_linear(ps, prefix + "fc", cfg.scaled_channels()[3], 2, rng);
  return h;
}

// ---- scalar losses ----

double recovery_loss(const TensorD& decoded, const TensorD& target) {
  if (!decoded.same_shape(target))
    throw ShapeError("recovery loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < decoded.numel(); ++i) {
    const double d = decoded[i] - target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(decoded.numel());
}

double registration_loss(const TensorD& warped, const TensorD& fixed) {
  if (!warped.same_shape(fixed))
    throw ShapeError("registration loss: shape mismatch");
  return recovery_loss(warped, fixed);
}

double classification_loss(const std::array<double, 2>& logits, int label) {
  require(label == 0 || label == 1,
          "classification loss: label must be 0 or 1");
  const double m = std::max(logits[0], logits[1]);
  const double z = std::exp(logits[0] - m) + std::exp(logits[1] - m);
  return std::log(z) - (logits[static_cast<std::size_t>(label)] - m);
}

template <class R>
TensorT<R> warp(const TensorT<R>& image, const TensorT<R>& dvf) {
  if (image.rank() != 3 || dvf.rank() != 3 || dvf.dim(0) != 2 ||
      dvf.dim(1) != image.dim(1) || dvf.dim(2) != image.dim(2))
    throw ShapeError("warp: image (C,H,W) and field (2,H,W) must agree");
  const double bound = std::max(image.dim(1), image.dim(2));
  for (std::size_t i = 0; i < dvf.numel(); ++i) {
    const double v = static_cast<double>(dvf[i]);
    require(std::isfinite(v) && std::abs(v) <= bound,
            "warp: displacement must be finite and at most the image side");
  }
  TapeT<R> t;
  auto out = ops::warp(t, t.constant(image), t.constant(dvf));
  return t.val(out);
}

// ---- gradnorm ----

TaskWeights TaskWeights::init(int n_tasks, double alpha) {
  require(n_tasks >= 1, "gradnorm: need at least one task");
  require(alpha >= 0.0, "gradnorm: alpha must be non-negative");
  TaskWeights tw;
  tw.alpha = alpha;
  tw.w.assign(static_cast<std::size_t>(n_tasks), 1.0);
  return tw;
}

void TaskWeights::validate() const {
  require(!w.empty(), "gradnorm: no task weights");
  for (double x : w)
    require(std::isfinite(x) && x > 0.0,
            "gradnorm: task weights must be finite and positive");
  require(initial_losses.empty() || initial_losses.size() == w.size(),
          "gradnorm: initial loss count mismatch");
  for (double x : initial_losses)
    require(std::isfinite(x) && x > 0.0,
            "gradnorm: initial losses must be finite and positive");
}

TaskWeights gradnorm_step(const std::vector<double>& losses,
                          const std::vector<double>& shared_grad_norms,
                          TaskWeights tw, double lr_w) {
  tw.validate();
  const std::size_t n = tw.w.size();
  require(losses.size() == n && shared_grad_norms.size() == n,
          "gradnorm: per-task vectors must match the weight count");
  require(lr_w > 0.0, "gradnorm: lr_w must be positive");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(losses[i]) || losses[i] < 0.0 ||
        !std::isfinite(shared_grad_norms[i]) || shared_grad_norms[i] < 0.0)
      throw TrainingError("gradnorm: non-finite or negative task signal at task " +
                          std::to_string(i + 1));
  }

  if (tw.initial_losses.empty()) {
    tw.initial_losses.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      tw.initial_losses[i] = std::max(losses[i], 1e-12);
  }

  // G_i = w_i * ||dL_i/dW_shared||; targets pull every G_i toward the mean
  // scaled by the relative inverse training rate r_i^alpha.
  double g_bar = 0.0, r_bar = 0.0;
  std::vector<double> G(n), ratio(n);
  for (std::size_t i = 0; i < n; ++i) {
    G[i] = tw.w[i] * shared_grad_norms[i];
    ratio[i] = losses[i] / tw.initial_losses[i];
    g_bar += G[i];
    r_bar += ratio[i];
  }
  g_bar /= static_cast<double>(n);
  r_bar /= static_cast<double>(n);
  r_bar = std::max(r_bar, 1e-12);

  for (std::size_t i = 0; i < n; ++i) {
    const double target = g_bar * std::pow(ratio[i] / r_bar, tw.alpha);
    const double diff = G[i] - target;
    const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    tw.w[i] -= lr_w * sgn * shared_grad_norms[i];
    tw.w[i] = std::max(tw.w[i], kMinTaskWeight);
  }
  double s = 0.0;
  for (double x : tw.w) s += x;
  if (!std::isfinite(s) || s <= 0.0)
    throw TrainingError("gradnorm: weight normalization degenerated");
  for (double& x : tw.w) x *= static_cast<double>(n) / s;
  tw.validate();
  return tw;
}

// ---- model ----

template <class R>
MtfsModelT<R> build_mtfs(const MtfsConfig& cfg, const std::vector<int>& tasks,
                         std::uint64_t seed) {
  cfg.validate();
  MtfsModelT<R> m;
  m.cfg = cfg;
  m.tasks = normalize_task_subset(tasks);
  m.seed = seed;
  Rng rng(derive_seed(seed, "mtfs.init"));
  m.backbone = fae::build_fae_net(m.params, "fae.", cfg.fae, rng);
  for (int task : m.tasks) {
    if (task == 1)
      m.recovery = build_recovery_head(m.params, "recovery.", cfg.fae, rng);
    else if (task == 2)
      m.registration =
          build_registration_head(m.params, "registration.", cfg.fae, rng);
    else
      m.classifier =
          build_classifier_head(m.params, "classifier.", cfg.fae, rng);
  }
  return m;
}

// ---- training ----

namespace {

struct Sample {
  int pair = 0;
  int slice = 0;
  int modality = 0;  // 0 = cbct, 1 = ct
};

struct TrainData {
  // per pair, per slice, float (1,S,S) tensors in LAC
  std::vector<std::vector<Tensor>> ct, cbct;
  int n_slices = 0;
};

TrainData load_train_data(const phantom::DatasetManifest& ds, int n_pairs,
                          int input_size) {
  TrainData td;
  td.n_slices = ds.n_slices;
  for (int i = 0; i < n_pairs; ++i) {
    phantom::PhantomPair p = phantom::load_pair(ds, ds.pairs[static_cast<std::size_t>(i)]);
    require(p.ct.domain == ValueDomain::LAC && p.cbct.domain == ValueDomain::LAC,
            "mtfs train: dataset must be prepared (LAC volumes)");
    require(p.ct.height == input_size && p.ct.width == input_size &&
                p.cbct.same_geometry(p.ct),
            "mtfs train: volume size does not match the configured input size");
    std::vector<Tensor> cts, cbs;
    for (int s = 0; s < p.ct.depth; ++s) {
      cts.push_back(p.ct.slice_tensor(s));
      cbs.push_back(p.cbct.slice_tensor(s));
    }
    td.ct.push_back(std::move(cts));
    td.cbct.push_back(std::move(cbs));
  }
  return td;
}

Tensor augment_slice(const Tensor& img, double rot, double dx, double dy) {
  const int S = img.dim(1);
  Volume one = Volume::make(S, S, 1, ValueDomain::LAC);
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c)
      one.at(0, r, c) = static_cast<double>(img.at(0, r, c));
  one = pipeline::rigid_align(one, {rot, dx, dy});
  return one.slice_tensor(0);
}

double check_loss(double v, int task, int epoch) {
  if (!std::isfinite(v) || v > kDivergedLoss)
    throw TrainingError("mtfs train: task " + std::to_string(task) +
                        " diverged at epoch " + std::to_string(epoch));
  return v;
}

}  // namespace

MtfsTrainResult train_mtfs(const phantom::DatasetManifest& ds,
                           const std::vector<int>& tasks, const MtfsConfig& cfg,
                           std::uint64_t seed) {
  cfg.validate();
  const std::vector<int> ts = normalize_task_subset(tasks);
  const int T = static_cast<int>(ts.size());
  const int B = cfg.batch_size;

  int n_pairs = static_cast<int>(ds.pairs.size());
  if (cfg.max_pairs > 0) n_pairs = std::min(n_pairs, cfg.max_pairs);
  require(n_pairs >= 1, "mtfs train: dataset has no pairs");
  const TrainData td = load_train_data(ds, n_pairs, cfg.fae.input_size);

  // sample pools; task 2 picks its warp direction per draw
  std::vector<Sample> pool1, pool2, pool3;
  for (int p = 0; p < n_pairs; ++p) {
    for (int s = 0; s < td.n_slices; ++s) {
      if (cfg.ct_only_recovery)
        pool1.push_back({p, s, 1});
      else {
        pool1.push_back({p, s, 0});
        pool1.push_back({p, s, 1});
      }
      pool2.push_back({p, s, 0});
      pool3.push_back({p, s, 0});
      pool3.push_back({p, s, 1});
    }
  }
  auto pool_of = [&](int task) -> std::vector<Sample>& {
    return task == 1 ? pool1 : task == 2 ? pool2 : pool3;
  };
  int steps = 0;
  for (int task : ts) {
    const int cap = static_cast<int>(pool_of(task).size()) / B;
    steps = steps == 0 ? cap : std::min(steps, cap);
  }
  require(steps >= 1, "mtfs train: not enough samples for one batch");

  MtfsTrainResult out{build_mtfs<float>(cfg, ts, seed), nlohmann::json::array()};
  MtfsModel& model = out.model;
  const ParamT<float>* shared = model.backbone.last_shared_w;

  Rng rng(derive_seed(seed, "mtfs.train"));
  nn::Adam opt(static_cast<float>(cfg.lr), 0.9f);
  TaskWeights tw = TaskWeights::init(T, cfg.alpha);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int task : ts) rng.shuffle(pool_of(task));

    std::vector<double> epoch_loss(static_cast<std::size_t>(T), 0.0);
    for (int step = 0; step < steps; ++step) {
      std::vector<ParamGradsT<float>> grads(static_cast<std::size_t>(T));
      std::vector<double> batch_loss(static_cast<std::size_t>(T), 0.0);

      for (int ti = 0; ti < T; ++ti) {
        const int task = ts[static_cast<std::size_t>(ti)];
        const auto& pool = pool_of(task);
        for (int b = 0; b < B; ++b) {
          const Sample& smp = pool[static_cast<std::size_t>(step * B + b)];
          const auto& ct_img = td.ct[static_cast<std::size_t>(smp.pair)]
                                    [static_cast<std::size_t>(smp.slice)];
          const auto& cb_img = td.cbct[static_cast<std::size_t>(smp.pair)]
                                      [static_cast<std::size_t>(smp.slice)];
          Tape t;
          Tape::Ref loss = nullptr;
          if (task == 1) {
            const Tensor& img = smp.modality == 1 ? ct_img : cb_img;
            auto x = t.constant(img);
            const auto taps = model.backbone.forward(t, x, true);
            auto decoded = model.recovery->fwd(t, taps[3]);
            loss = ops::mse(t, decoded, x);
          } else if (task == 2) {
            const bool cbct_moving = rng.bernoulli(0.5);
            const double rot = rng.uniform(-cfg.aug_rot_deg, cfg.aug_rot_deg);
            const double dx =
                rng.uniform(-cfg.aug_offset_px, cfg.aug_offset_px);
            const double dy =
                rng.uniform(-cfg.aug_offset_px, cfg.aug_offset_px);
            const Tensor moving =
                augment_slice(cbct_moving ? cb_img : ct_img, rot, dx, dy);
            auto m = t.constant(moving);
            auto f = t.constant(cbct_moving ? ct_img : cb_img);
            const auto taps_m = model.backbone.forward(t, m, true);
            const auto taps_f = model.backbone.forward(t, f, true);
            auto dvf = model.registration->fwd(t, taps_m, taps_f);
            loss = ops::mse(t, ops::warp(t, m, dvf), f);
          } else {
            const Tensor& img = smp.modality == 1 ? ct_img : cb_img;
            auto x = t.constant(img);
            const auto taps = model.backbone.forward(t, x, true);
            auto logits = model.classifier->fwd(t, taps[3]);
            loss = ops::softmax_ce(t, logits, smp.modality);
          }
          batch_loss[static_cast<std::size_t>(ti)] +=
              static_cast<double>(t.val(loss).item());
          t.backward(loss);
          t.collect_param_grads(grads[static_cast<std::size_t>(ti)],
                                1.0f / static_cast<float>(B));
        }
        batch_loss[static_cast<std::size_t>(ti)] /= static_cast<double>(B);
        check_loss(batch_loss[static_cast<std::size_t>(ti)], task, epoch);
      }

      ParamGradsT<float> combined;
      if (T == 1) {
        combined = std::move(grads[0]);
      } else {
        std::vector<double> norms(static_cast<std::size_t>(T));
        for (int ti = 0; ti < T; ++ti)
          norms[static_cast<std::size_t>(ti)] =
              grads[static_cast<std::size_t>(ti)].l2_norm(shared->id);
        tw = gradnorm_step(batch_loss, norms, std::move(tw), cfg.lr_w);
        for (int ti = 0; ti < T; ++ti)
          combined.add_scaled(grads[static_cast<std::size_t>(ti)],
                              static_cast<float>(tw.w[static_cast<std::size_t>(ti)]));
      }
      opt.step(model.params, combined);
      for (int ti = 0; ti < T; ++ti)
        epoch_loss[static_cast<std::size_t>(ti)] +=
            batch_loss[static_cast<std::size_t>(ti)];
    }

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    nlohmann::json losses = nlohmann::json::object();
    for (int ti = 0; ti < T; ++ti)
      losses[std::to_string(ts[static_cast<std::size_t>(ti)])] =
          check_loss(epoch_loss[static_cast<std::size_t>(ti)] / steps,
                     ts[static_cast<std::size_t>(ti)], epoch);
    out.log.push_back({{"epoch", epoch},
                       {"losses", losses},
                       {"weights", tw.w},
                       {"wall_time", secs}});
  }
  return out;
}

// ---- persistence ----

void save_mtfs(const MtfsModel& m, const std::string& dir) {
  nn::save_checkpoint(m.params, dir,
                      {{"kind", "mtfs"},
                       {"seed", m.seed},
                       {"tasks", m.tasks},
                       {"mtfs_config", m.cfg.to_json()}});
}

MtfsModel load_mtfs(const std::string& dir) {
  std::ifstream mf(std::filesystem::path(dir) / "meta.json");
  require(mf.good(), "mtfs checkpoint meta not found: " + dir);
  nlohmann::json meta;
  mf >> meta;
  require(meta.value("kind", "") == "mtfs",
          "checkpoint at " + dir + " is not an mtfs checkpoint");
  const MtfsConfig cfg = MtfsConfig::from_json(meta.at("mtfs_config"));
  const auto tasks = meta.at("tasks").get<std::vector<int>>();
  MtfsModel m =
      build_mtfs<float>(cfg, tasks, meta.value("seed", std::uint64_t{0}));
  nn::load_checkpoint(m.params, dir);
  return m;
}

void export_fae_checkpoint(const MtfsModel& m, const std::string& dir) {
  fae::FaeModel f = fae::build_fae<float>(m.cfg.fae, m.seed);
  for (std::size_t i = 0; i < f.params.size(); ++i) {
    auto& dst = f.params.at(static_cast<int>(i));
    const ParamT<float>* src = nullptr;
    for (std::size_t j = 0; j < m.params.size(); ++j) {
      const auto& p = m.params.at(static_cast<int>(j));
      if (p.name == dst.name) {
        src = &p;
        break;
      }
    }
    require(src != nullptr && src->value.same_shape(dst.value),
            "export: backbone parameter missing from the mtfs store: " +
                dst.name);
    dst.value = src->value;
  }
  fae::save_fae(f, dir);
}

// ---- explicit instantiations ----

template RecoveryHeadT<float> build_recovery_head<float>(
    nn::ParamStoreT<float>&, const std::string&, const fae::FaeConfig&, Rng&);
template RecoveryHeadT<double> build_recovery_head<double>(
    nn::ParamStoreT<double>&, const std::string&, const fae::FaeConfig&, Rng&);
template RegistrationHeadT<float> build_registration_head<float>(
    nn::ParamStoreT<float>&, const std::string&, const fae::FaeConfig&, Rng&);
template RegistrationHeadT<double> build_registration_head<double>(
    nn::ParamStoreT<double>&, const std::string&, const fae::FaeConfig&, Rng&);
template ClassifierHeadT<float> build_classifier_head<float>(
    nn::ParamStoreT<float>&, const std::string&, const fae::FaeConfig&, Rng&);
template ClassifierHeadT<double> build_classifier_head<double>(
    nn::ParamStoreT<double>&, const std::string&, const fae::FaeConfig&, Rng&);
template TensorT<float> warp<float>(const TensorT<float>&,
                                    const TensorT<float>&);
template TensorT<double> warp<double>(const TensorT<double>&,
                                      const TensorT<double>&);
template MtfsModelT<float> build_mtfs<float>(const MtfsConfig&,
                                             const std::vector<int>&,
                                             std::uint64_t);
template MtfsModelT<double> build_mtfs<double>(const MtfsConfig&,
                                               const std::vector<int>&,
                                               std::uint64_t);

}  // namespace cbct::mtfs

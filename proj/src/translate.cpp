#include "cbct/translate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <utility>

#include "cbct/jsonutil.hpp"

namespace cbct::translate {

namespace {

constexpr double kDivergedLoss = 1e12;

}  // namespace

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Unet: return "unet";
    case ModelKind::Gan: return "gan";
    case ModelKind::CycleGan: return "cyclegan";
  }
  throw ValidationError("unknown model kind");
}

std::string to_string(LossKind k) {
  return k == LossKind::Mse ? "mse" : "cfp";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "unet") return ModelKind::Unet;
  if (s == "gan") return ModelKind::Gan;
  if (s == "cyclegan") return ModelKind::CycleGan;
  throw ValidationError("unknown model kind: " + s);
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "mse") return LossKind::Mse;
  if (s == "cfp") return LossKind::Cfp;
  throw ValidationError("unknown loss kind: " + s);
}

std::array<int, 4> TranslateConfig::channels() const {
  return {base_channels, 2 * base_channels, 4 * base_channels,
          8 * base_channels};
}

void TranslateConfig::validate() const {
  require(input_size >= 16 && input_size % 16 == 0,
          "translate: input_size must be a multiple of 16 (four downsamplings)");
  require(base_channels >= 1, "translate: base_channels must be >= 1");
  for (int n : res_blocks_per_level)
    require(n >= 0, "translate: res block counts must be >= 0");
  require(se_reduction >= 1 && base_channels % se_reduction == 0,
          "translate: se_reduction must divide base_channels");
  require(adv_weight >= 0.0 && cycle_weight >= 0.0,
          "translate: loss weights must be non-negative");
  cfp_cfg.validate();
  require(lr > 0.0, "translate: lr must be positive");
  require(batch_size >= 1, "translate: batch_size must be >= 1");
  require(epochs >= 1, "translate: epochs must be >= 1");
  require(max_pairs >= 0, "translate: max_pairs must be >= 0");
}

nlohmann::json TranslateConfig::to_json() const {
  return {{"model_kind", to_string(model_kind)},
          {"loss_kind", to_string(loss_kind)},
          {"input_size", input_size},
          {"base_channels", base_channels},
          {"res_blocks_per_level", res_blocks_per_level},
          {"se_reduction", se_reduction},
          {"adv_weight", adv_weight},
          {"cycle_weight", cycle_weight},
          {"cycle_recon", cycle_recon},
          {"cfp", cfp_cfg.to_json()},
          {"lr", lr},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"max_pairs", max_pairs}};
}

TranslateConfig TranslateConfig::from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"model_kind", "loss_kind", "input_size", "base_channels",
                      "res_blocks_per_level", "se_reduction", "adv_weight",
                      "cycle_weight", "cycle_recon", "cfp", "lr", "batch_size",
                      "epochs", "max_pairs"},
                     "translate config");
  TranslateConfig c;
  if (j.contains("model_kind"))
    c.model_kind = model_kind_from_string(j.at("model_kind").get<std::string>());
  if (j.contains("loss_kind"))
    c.loss_kind = loss_kind_from_string(j.at("loss_kind").get<std::string>());
  c.input_size = j.value("input_size", c.input_size);
  c.base_channels = j.value("base_channels", c.base_channels);
  if (j.contains("res_blocks_per_level")) {
    const auto v = j.at("res_blocks_per_level").get<std::vector<int>>();
    require(v.size() == 4, "translate: res_blocks_per_level needs 4 entries");
    std::copy(v.begin(), v.end(), c.res_blocks_per_level.begin());
  }
  c.se_reduction = j.value("se_reduction", c.se_reduction);
  c.adv_weight = j.value("adv_weight", c.adv_weight);
  c.cycle_weight = j.value("cycle_weight", c.cycle_weight);
  c.cycle_recon = j.value("cycle_recon", c.cycle_recon);
  if (j.contains("cfp")) c.cfp_cfg = cfp::CfpConfig::from_json(j.at("cfp"));
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.max_pairs = j.value("max_pairs", c.max_pairs);
  c.validate();
  return c;
}

// ---- builders ----

template <class R>
CarUnetT<R> build_car_unet(nn::ParamStoreT<R>& ps, const std::string& prefix,
                           const TranslateConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto ch = cfg.channels();
  CarUnetT<R> net;
  net.input_size = cfg.input_size;
  int cin = 1;
  for (int l = 0; l < 4; ++l) {
    auto& lv = net.enc[static_cast<std::size_t>(l)];
    const int c = ch[static_cast<std::size_t>(l)];
    const std::string base = prefix + "enc" + std::to_string(l + 1);
    lv.in = nn::make_conv(ps, base + ".in", cin, c, 3, 1, 1, rng);
    for (int b = 0; b < cfg.res_blocks_per_level[static_cast<std::size_t>(l)];
         ++b)
      lv.blocks.push_back(
          nn::make_res_block(ps, base + ".block" + std::to_string(b + 1), c, rng));
    lv.se = nn::make_se_block(ps, base + ".se", c, cfg.se_reduction, rng);
    cin = c;
  }
  const int cb = 2 * ch[3];
  net.bot1 = nn::make_conv(ps, prefix + "bottleneck.c1", ch[3], cb, 3, 1, 1, rng);
  net.bot2 = nn::make_conv(ps, prefix + "bottleneck.c2", cb, cb, 3, 1, 1, rng);
  int cup = cb;
  for (int l = 3; l >= 0; --l) {
    const int c = ch[static_cast<std::size_t>(l)];
    const std::string base = prefix + "dec" + std::to_string(l + 1);
    net.up[static_cast<std::size_t>(l)] =
        nn::make_conv(ps, base + ".up", cup, c, 3, 1, 1, rng);
    net.merge[static_cast<std::size_t>(l)] =
        nn::make_conv(ps, base + ".merge", 2 * c, c, 3, 1, 1, rng);
    cup = c;
  }
  net.out = nn::make_conv(ps, prefix + "out", ch[0], 1, 3, 1, 1, rng,
                          nn::Init::Zero);
  return net;
}

template <class R>
PatchDiscT<R> build_discriminator(nn::ParamStoreT<R>& ps,
                                  const std::string& prefix,
                                  const TranslateConfig& cfg, Rng& rng) {
  cfg.validate();
  PatchDiscT<R> d;
  int cin = 1;
  for (int i = 0; i < 4; ++i) {
    const int cout = cfg.base_channels << i;
    d.convs[static_cast<std::size_t>(i)] = nn::make_conv(
        ps, prefix + "d" + std::to_string(i + 1), cin, cout, 3, 2, 1, rng);
    cin = cout;
  }
  d.score = nn::make_conv(ps, prefix + "score", cin, 1, 3, 1, 1, rng);
  return d;
}

template <class R>
TranslationModelT<R> build_translation(const TranslateConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  TranslationModelT<R> m;
  m.cfg = cfg;
  m.seed = seed;
  Rng rng(derive_seed(seed, "translate.init"));
  m.gen = build_car_unet(m.params, "gen.", cfg, rng);
  if (cfg.model_kind == ModelKind::Gan) {
    m.disc = build_discriminator(m.params, "disc.", cfg, rng);
  } else if (cfg.model_kind == ModelKind::CycleGan) {
    m.gen_rev = build_car_unet(m.params, "gen_rev.", cfg, rng);
    m.disc = build_discriminator(m.params, "disc.", cfg, rng);
    m.disc_rev = build_discriminator(m.params, "disc_rev.", cfg, rng);
  }
  return m;
}

// ---- training ----

namespace {

struct PairedSlices {
  // per pair, per slice: cbct and ct (1,S,S) LAC tensors
  std::vector<std::vector<Tensor>> cbct, ct;
  int n_slices = 0;
};

PairedSlices load_slices(const phantom::DatasetManifest& ds, int n_pairs,
                         int input_size) {
  PairedSlices out;
  out.n_slices = ds.n_slices;
  for (int i = 0; i < n_pairs; ++i) {
    phantom::PhantomPair p =
        phantom::load_pair(ds, ds.pairs[static_cast<std::size_t>(i)]);
    require(p.ct.domain == ValueDomain::LAC &&
                p.cbct.domain == ValueDomain::LAC,
            "translate train: dataset must be prepared (LAC volumes)");
    require(p.ct.height == input_size && p.ct.width == input_size &&
                p.cbct.same_geometry(p.ct),
            "translate train: volume size does not match the configured input "
            "size");
    require(p.ct.depth == ds.n_slices,
            "translate train: pair slice count disagrees with the manifest");
    std::vector<Tensor> cb, ct;
    for (int s = 0; s < p.ct.depth; ++s) {
      cb.push_back(p.cbct.slice_tensor(s));
      ct.push_back(p.ct.slice_tensor(s));
    }
    out.cbct.push_back(std::move(cb));
    out.ct.push_back(std::move(ct));
  }
  return out;
}

Tape::Ref filled_like(Tape& t, Tape::Ref r, float v) {
  Tensor z(t.val(r).shape());
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] = v;
  return t.constant(std::move(z));
}

// Reconstruction term between a generated image node and its paired target.
// The mse/cfp switch lives here and nowhere else.
Tape::Ref recon_node(Tape& t, Tape::Ref made, const Tensor& target,
                     const TranslateConfig& cfg, const fae::FaeModel* loss_net) {
  if (cfg.loss_kind == LossKind::Mse)
    return ops::mse(t, made, t.constant(target));
  const auto pa = loss_net->net.forward(t, made, false);
  const auto pb = loss_net->net.forward(t, t.constant(target), false);
  return cfp::cfp_node(t, {pa.begin(), pa.end()}, {pb.begin(), pb.end()},
                       cfg.cfp_cfg);
}

double checked(double v, const char* term, int epoch) {
  if (!std::isfinite(v) || std::abs(v) > kDivergedLoss)
    throw TrainingError(std::string("translate train: ") + term +
                        " loss diverged at epoch " + std::to_string(epoch));
  return v;
}

}  // namespace

TranslateTrainResult train_translation(const phantom::DatasetManifest& ds,
                                       const std::string& fae_dir,
                                       const TranslateConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  const int B = cfg.batch_size;

  std::optional<fae::FaeModel> loss_net;
  if (cfg.loss_kind == LossKind::Cfp) {
    require(!fae_dir.empty(),
            "translate train: cfp loss requires a loss-net checkpoint");
    loss_net = fae::load_fae<float>(fae_dir);
    require(loss_net->cfg.input_size == cfg.input_size,
            "translate train: loss net was built for a different input size");
  }
  const std::uint64_t fae_hash_before =
      loss_net ? loss_net->params.content_hash() : 0;

  int n_pairs = static_cast<int>(ds.pairs.size());
  if (cfg.max_pairs > 0) n_pairs = std::min(n_pairs, cfg.max_pairs);
  require(n_pairs >= 1, "translate train: dataset has no pairs");
  const PairedSlices data = load_slices(ds, n_pairs, cfg.input_size);

  std::vector<std::pair<int, int>> pool;
  for (int p = 0; p < n_pairs; ++p)
    for (int s = 0; s < data.n_slices; ++s) pool.push_back({p, s});
  const int steps = static_cast<int>(pool.size()) / B;
  require(steps >= 1, "translate train: not enough slices for one batch");

  TranslateTrainResult out{build_translation<float>(cfg, seed),
                           nlohmann::json::array()};
  TranslationModel& m = out.model;
  const bool has_disc = m.disc.has_value();
  const bool is_cycle = cfg.model_kind == ModelKind::CycleGan;

  Rng rng(derive_seed(seed, "translate.train"));
  nn::Adam gen_opt(static_cast<float>(cfg.lr), 0.9f);
  nn::Adam disc_opt(static_cast<float>(cfg.lr), 0.9f);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(pool);
    double recon_sum = 0.0, adv_sum = 0.0, cycle_sum = 0.0, disc_sum = 0.0;

    for (int step = 0; step < steps; ++step) {
      const auto* batch = pool.data() + static_cast<std::size_t>(step * B);

      if (has_disc) {
        ParamGradsT<float> dg;
        double dl = 0.0;
        for (int b = 0; b < B; ++b) {
          const Tensor& x = data.cbct[static_cast<std::size_t>(batch[b].first)]
                                     [static_cast<std::size_t>(batch[b].second)];
          const Tensor& y = data.ct[static_cast<std::size_t>(batch[b].first)]
                                   [static_cast<std::size_t>(batch[b].second)];
          Tape t;
          auto fake_b = m.gen.fwd(t, t.constant(x), false);
          auto d_real = m.disc->fwd(t, t.constant(y), true);
          auto d_fake = m.disc->fwd(t, fake_b, true);
          auto loss = ops::scale(
              t,
              ops::add(t, ops::mse(t, d_real, filled_like(t, d_real, 1.0f)),
                       ops::mse(t, d_fake, filled_like(t, d_fake, 0.0f))),
              0.5f);
          if (is_cycle) {
            auto fake_a = m.gen_rev->fwd(t, t.constant(y), false);
            auto r_real = m.disc_rev->fwd(t, t.constant(x), true);
            auto r_fake = m.disc_rev->fwd(t, fake_a, true);
            auto rev = ops::scale(
                t,
                ops::add(t, ops::mse(t, r_real, filled_like(t, r_real, 1.0f)),
                         ops::mse(t, r_fake, filled_like(t, r_fake, 0.0f))),
                0.5f);
            loss = ops::add(t, loss, rev);
          }
          dl += static_cast<double>(t.val(loss).item());
          t.backward(loss);
          t.collect_param_grads(dg, 1.0f / static_cast<float>(B));
        }
        disc_sum += checked(dl / B, "discriminator", epoch);
        disc_opt.step(m.params, dg);
      }

      ParamGradsT<float> gg;
      double rl = 0.0, al = 0.0, cl = 0.0;
      for (int b = 0; b < B; ++b) {
        const Tensor& x = data.cbct[static_cast<std::size_t>(batch[b].first)]
                                   [static_cast<std::size_t>(batch[b].second)];
        const Tensor& y = data.ct[static_cast<std::size_t>(batch[b].first)]
                                 [static_cast<std::size_t>(batch[b].second)];
        Tape t;
        auto xc = t.constant(x);
        auto yc = t.constant(y);
        auto fake_b = m.gen.fwd(t, xc, true);

        Tape::Ref loss = nullptr;
        Tape::Ref recon = nullptr;
        if (!is_cycle || cfg.cycle_recon)
          recon = recon_node(t, fake_b, y, cfg, loss_net ? &*loss_net : nullptr);

        if (is_cycle) {
          auto fake_a = m.gen_rev->fwd(t, yc, true);
          if (recon) {
            auto rev_recon =
                recon_node(t, fake_a, x, cfg, loss_net ? &*loss_net : nullptr);
            recon = ops::add(t, recon, rev_recon);
          }
          auto back_a = m.gen_rev->fwd(t, fake_b, true);
          auto back_b = m.gen.fwd(t, fake_a, true);
          auto cyc = ops::add(t, ops::l1(t, back_a, xc), ops::l1(t, back_b, yc));
          cyc = ops::scale(t, cyc, static_cast<float>(cfg.cycle_weight));
          auto s_b = m.disc->fwd(t, fake_b, false);
          auto s_a = m.disc_rev->fwd(t, fake_a, false);
          auto adv =
              ops::add(t, ops::mse(t, s_b, filled_like(t, s_b, 1.0f)),
                       ops::mse(t, s_a, filled_like(t, s_a, 1.0f)));
          adv = ops::scale(t, adv, static_cast<float>(cfg.adv_weight));
          cl += static_cast<double>(t.val(cyc).item());
          al += static_cast<double>(t.val(adv).item());
          loss = ops::add(t, cyc, adv);
          if (recon) loss = ops::add(t, loss, recon);
        } else if (has_disc) {
          auto s_b = m.disc->fwd(t, fake_b, false);
          auto adv = ops::scale(t, ops::mse(t, s_b, filled_like(t, s_b, 1.0f)),
                                static_cast<float>(cfg.adv_weight));
          al += static_cast<double>(t.val(adv).item());
          loss = ops::add(t, recon, adv);
        } else {
          loss = recon;
        }
        if (recon) rl += static_cast<double>(t.val(recon).item());
        t.backward(loss);
        t.collect_param_grads(gg, 1.0f / static_cast<float>(B));
      }
      recon_sum += checked(rl / B, "reconstruction", epoch);
      adv_sum += checked(al / B, "adversarial", epoch);
      cycle_sum += checked(cl / B, "cycle", epoch);
      gen_opt.step(m.params, gg);
    }

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    out.log.push_back(
        {{"epoch", epoch},
         {"losses",
          {{"recon", recon_sum / steps},
           {"adv", adv_sum / steps},
           {"cycle", cycle_sum / steps},
           {"disc", disc_sum / steps}}},
         {"wall_time", secs}});
  }

  if (loss_net && loss_net->params.content_hash() != fae_hash_before)
    throw TrainingError("translate train: loss net parameters changed");
  return out;
}

// ---- inference ----

Volume infer(const TranslationModel& m, const Volume& cbct) {
  require(cbct.domain == ValueDomain::LAC,
          "infer: input volume must be in LAC");
  require(cbct.height == m.cfg.input_size && cbct.width == m.cfg.input_size,
          "infer: volume size does not match the model input size");
  cbct.validate();

  Volume out = Volume::make(cbct.height, cbct.width, cbct.depth,
                            ValueDomain::LAC);
  out.spacing = cbct.spacing;
  out.provenance = "translated";
  for (int s = 0; s < cbct.depth; ++s) {
    Tape t;
    auto y = m.gen.fwd(t, t.constant(cbct.slice_tensor(s)), false);
    Tensor img = t.val(y);
    for (std::size_t i = 0; i < img.numel(); ++i)
      if (img[i] < 0.0f) img[i] = 0.0f;
    out.set_slice(s, img);
  }
  out.validate();
  return out;
}

// ---- persistence ----

void save_translation(const TranslationModel& m, const std::string& dir) {
  nn::save_checkpoint(m.params, dir,
                      {{"kind", "translate"},
                       {"seed", m.seed},
                       {"translate_config", m.cfg.to_json()}});
}

TranslationModel load_translation(const std::string& dir) {
  std::ifstream mf(std::filesystem::path(dir) / "meta.json");
  require(mf.good(), "translation checkpoint meta not found: " + dir);
  nlohmann::json meta;
  mf >> meta;
  require(meta.value("kind", "") == "translate",
          "checkpoint at " + dir + " is not a translation checkpoint");
  const TranslateConfig cfg =
      TranslateConfig::from_json(meta.at("translate_config"));
  TranslationModel m =
      build_translation<float>(cfg, meta.value("seed", std::uint64_t{0}));
  nn::load_checkpoint(m.params, dir);
  return m;
}

// ---- explicit instantiations ----

template CarUnetT<float> build_car_unet<float>(nn::ParamStoreT<float>&,
                                               const std::string&,
                                               const TranslateConfig&, Rng&);
template CarUnetT<double> build_car_unet<double>(nn::ParamStoreT<double>&,
                                                 const std::string&,
                                                 const TranslateConfig&, Rng&);
template PatchDiscT<float> build_discriminator<float>(nn::ParamStoreT<float>&,
                                                      const std::string&,
                                                      const TranslateConfig&,
                                                      Rng&);
template PatchDiscT<double> build_discriminator<double>(
    nn::ParamStoreT<double>&, const std::string&, const TranslateConfig&,
    Rng&);
template TranslationModelT<float> build_translation<float>(
    const TranslateConfig&, std::uint64_t);
template TranslationModelT<double> build_translation<double>(
    const TranslateConfig&, std::uint64_t);

}  // namespace cbct::translate

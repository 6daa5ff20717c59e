// Warp and registration oracles: bit-exact zero-field identity, integer and
// half-pixel shift behaviour of the backward warp, and a desk-scale
// registration head trained on rigid augmentations that recovers pure
// +-4 px shifts on held-out pairs to within 1 px mean endpoint error.

#include <algorithm>
#include <cmath>
#include <string>

#include "acc_common.hpp"
#include "cbct/harness.hpp"
#include "cbct/mtfs.hpp"
#include "cbct/phantom.hpp"
#include "cbct/pipeline.hpp"

using namespace cbct;

namespace {

Tensor shift_slice(const Tensor& img, double dx, double dy) {
  const int S = img.dim(1);
  Volume one = Volume::make(S, S, 1, ValueDomain::LAC);
  for (int r = 0; r < S; ++r)
    for (int c = 0; c < S; ++c)
      one.at(0, r, c) = static_cast<double>(img.at(0, r, c));
  one = pipeline::rigid_align(one, {0.0, dx, dy});
  return one.slice_tensor(0);
}

// mean endpoint error of the predicted field against a constant truth
double epe_of(const mtfs::MtfsModel& model, const Tensor& moving,
              const Tensor& fixed, double dx, double dy) {
  TapeT<float> t;
  const auto pm = model.backbone.forward(t, t.constant(moving), false);
  const auto pf = model.backbone.forward(t, t.constant(fixed), false);
  const auto dvf = t.val(model.registration->fwd(t, pm, pf, false));
  const int S = dvf.dim(1);
  double s = 0.0;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double ex = (double)dvf.at(0, y, x) + dx;
      const double ey = (double)dvf.at(1, y, x) + dy;
      s += std::sqrt(ex * ex + ey * ey);
    }
  return s / (S * S);
}

}  // namespace

int main(int argc, char** argv) {
  Acc acc("acc_06");
  try {
    Rng rng(60660);

    {
      const auto img = random_tensor<double>({2, 9, 7}, rng);
      const auto out = mtfs::warp(img, TensorD({2, 9, 7}));
      bool exact = out.same_shape(img);
      for (std::size_t i = 0; exact && i < img.numel(); ++i)
        exact = out[i] == img[i];
      acc.check(exact, "zero-field warp is a bit-exact identity");
    }

    {
      const auto img = random_tensor<double>({2, 8, 8}, rng);
      TensorD dvf({2, 8, 8});
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          dvf.at(0, y, x) = 3.0;
          dvf.at(1, y, x) = -2.0;
        }
      const auto out = mtfs::warp(img, dvf);
      double worst = 0.0;
      for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) {
            const bool in = x + 3 < 8 && y - 2 >= 0;
            const double want = in ? img.at(c, y - 2, x + 3) : 0.0;
            worst = std::max(worst, std::abs(out.at(c, y, x) - want));
          }
      acc.check(worst <= 1e-12,
                "integer (+3,-2) shift matches index arithmetic, worst " +
                    sci(worst));
    }

    {
      TensorD img({1, 4, 8});
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 8; ++x) img.at(0, y, x) = (double)x;
      TensorD dvf({2, 4, 8});
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 8; ++x) dvf.at(0, y, x) = 0.5;
      const auto out = mtfs::warp(img, dvf);
      double worst = 0.0;
      for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 7; ++x)
          worst = std::max(worst, std::abs(out.at(0, y, x) - (x + 0.5)));
        worst = std::max(worst, std::abs(out.at(0, y, 7) - 3.5));
      }
      acc.check(worst <= 1e-12,
                "half-pixel shift averages neighbours, worst " + sci(worst));
    }

    // desk registration head: task 2 alone on the shared desk dataset,
    // shift-dominant augmentation since the oracle probes pure shifts
    auto cfg = harness::RunConfig::with_preset("desk");
    cfg.out_dir = acc_root(argc, argv);
    cfg.tasks = {2};
    cfg.mtfs.aug_rot_deg = 4.0;
    cfg.mtfs.aug_offset_px = 6.0;
    cfg.mtfs.epochs = 8;
    cfg.validate();

    const auto gen = harness::run_phantom_gen(cfg);
    const auto prep = harness::run_prep(cfg, gen.output_path("dataset"));
    acc.note("desk dataset: " + prep.output_path("dataset"));
    const auto mt = harness::run_mtfs_train(cfg, prep.output_path("dataset"));
    acc.note("registration training: " + mt.root + " (" +
             sci(mt.timings.value("total", 0.0)) + " s)");
    auto model = mtfs::load_mtfs(mt.output_path("checkpoint"));
    acc.check(model.registration.has_value(),
              "checkpoint carries the registration decoder");

    const auto ds = phantom::DatasetManifest::load(prep.output_path("dataset"));
    const auto split = harness::split_pairs(ds, cfg.train_frac, cfg.val_frac);
    const auto held = harness::subset_manifest(ds, split.test);
    const double shifts[8][2] = {{4, 0},  {-4, 0}, {0, 4},  {0, -4},
                                 {4, 4},  {-4, 4}, {4, -4}, {-4, -4}};
    const int kPairs = std::min<int>(12, (int)held.pairs.size());
    double same_sum = 0.0, cross_sum = 0.0;
    int cases = 0;
    for (int i = 0; i < kPairs; ++i) {
      const auto p = phantom::load_pair(held, held.pairs[(std::size_t)i]);
      for (int k = 0; k < 2; ++k) {
        const auto& sh = shifts[(2 * i + k) % 8];
        const int s = (i + k) % p.ct.depth;
        const auto fixed = p.ct.slice_tensor(s);
        same_sum += epe_of(model, shift_slice(fixed, sh[0], sh[1]), fixed,
                           sh[0], sh[1]);
        cross_sum += epe_of(model,
                            shift_slice(p.cbct.slice_tensor(s), sh[0], sh[1]),
                            fixed, sh[0], sh[1]);
        ++cases;
      }
    }
    const double same_epe = same_sum / cases;
    const double cross_epe = cross_sum / cases;
    acc.note("cross-modality (shifted cbct vs ct) mean EPE " + sci(cross_epe) +
             " px over " + std::to_string(cases) + " cases");
    acc.check(same_epe <= 1.0,
              "pure +-4 px shift recovered on held-out pairs, mean EPE " +
                  sci(same_epe) + " px (limit 1)");
  } catch (const std::exception& e) {
    acc.check(false, std::string("unexpected exception: ") + e.what());
  }
  return acc.done("warp oracles and desk registration recovery");
}

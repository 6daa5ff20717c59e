// Architecture shape suite at full width: feature-pyramid channel/size
// ladder, the 9-conv recovery head, the CAR-U-Net res-block census, and
// identity behaviour of the zero-initialized residual paths.

#include <cmath>
#include <string>

#include "acc_common.hpp"
#include "cbct/fae.hpp"
#include "cbct/mtfs.hpp"
#include "cbct/translate.hpp"

using namespace cbct;

namespace {

long long conv_params(int cin, int cout) { return 9LL * cin * cout + cout; }
long long linear_params(int cin, int cout) {
  return (long long)cin * cout + cout;
}

}  // namespace

int main(int, char**) {
  Acc acc("acc_05");
  try {
    Rng rng(75001);

    // full-width backbone on a 64 px input: ladder (32,S)...(256,S/8)
    fae::FaeConfig fcfg;
    fcfg.input_size = 64;
    const auto fm = fae::build_fae<float>(fcfg, 11);
    const auto pyr =
        fae::extract_pyramid(fm, random_tensor<float>({1, 64, 64}, rng));
    bool ladder = pyr.size() == 4;
    const int want_ch[4] = {32, 64, 128, 256};
    for (int l = 0; l < 4 && ladder; ++l) {
      const auto& p = pyr[(std::size_t)l];
      ladder = p.rank() == 3 && p.dim(0) == want_ch[l] &&
               p.dim(1) == 64 >> l && p.dim(2) == 64 >> l;
    }
    acc.check(ladder, "feature pyramid shapes (32,S),(64,S/2),(128,S/4),(256,S/8)");

    // recovery head: 9 convs, channels 256,256,256,128,128,64,64,32,1,
    // three 2x upsamplings restore the input resolution
    nn::ParamStoreT<float> ps;
    const auto head = mtfs::build_recovery_head(ps, "rec.", fcfg, rng);
    const int chain[10] = {256, 256, 256, 256, 128, 128, 64, 64, 32, 1};
    bool rec_ok = head.convs.size() == 9;
    long long rec_expect = 0;
    for (int i = 0; i < 9 && rec_ok; ++i) {
      const auto* w = ps.find("rec.conv" + std::to_string(i + 1) + ".w");
      rec_ok = w != nullptr &&
               w->value.shape() ==
                   std::vector<int>{chain[i + 1], chain[i], 3, 3};
      rec_expect += conv_params(chain[i], chain[i + 1]);
    }
    rec_ok = rec_ok && (long long)ps.total_scalars() == rec_expect;
    acc.check(rec_ok, "recovery head census: 9 convs, channels "
                      "256,256,256,128,128,64,64,32,1");
    {
      TapeT<float> t;
      const auto out = head.fwd(t, t.constant(pyr[3]), false);
      const auto& v = t.val(out);
      acc.check(v.shape() == std::vector<int>{1, 64, 64},
                "recovery head restores the input resolution");
    }

    // CAR-U-Net at full width: res-block counts 2/4/6/8 via parameter census
    translate::TranslateConfig tcfg;
    tcfg.input_size = 64;
    nn::ParamStoreT<float> gs;
    Rng grng(8);
    const auto gen = translate::build_car_unet(gs, "gen.", tcfg, grng);
    const int blocks[4] = {2, 4, 6, 8};
    const int ch[4] = {32, 64, 128, 256};
    long long expect = 0;
    for (int l = 0; l < 4; ++l) {
      expect += conv_params(l == 0 ? 1 : ch[l - 1], ch[l]);      // entry
      expect += blocks[l] * 2 * conv_params(ch[l], ch[l]);       // res blocks
      expect += linear_params(ch[l], ch[l] / 16) +               // se squeeze
                linear_params(ch[l] / 16, ch[l]);                // se excite
      expect += conv_params(l == 3 ? 512 : ch[l + 1], ch[l]);  // dec up
      expect += conv_params(2 * ch[l], ch[l]);                   // dec merge
    }
    expect += conv_params(256, 512) + conv_params(512, 512);  // bottleneck
    expect += conv_params(32, 1);                             // head
    bool census = (long long)gs.total_scalars() == expect;
    const char* markers[4] = {"gen.enc1.block2.c2.w", "gen.enc2.block4.c2.w",
                              "gen.enc3.block6.c2.w", "gen.enc4.block8.c2.w"};
    const char* absent[4] = {"gen.enc1.block3.c1.w", "gen.enc2.block5.c1.w",
                             "gen.enc3.block7.c1.w", "gen.enc4.block9.c1.w"};
    for (int l = 0; l < 4; ++l)
      census = census && gs.find(markers[l]) != nullptr &&
               gs.find(absent[l]) == nullptr;
    acc.check(census, "CAR-U-Net parameter census with res-block counts 2/4/6/8 "
                      "(total " + std::to_string(gs.total_scalars()) + ")");

    // zero-init residual output path: the generator starts as the identity
    {
      TapeT<float> t;
      const auto x = random_tensor<float>({1, 64, 64}, grng);
      const auto y = t.val(gen.fwd(t, t.constant(x), false));
      bool same_shape = y.shape() == x.shape();
      double worst = 0.0;
      for (std::size_t i = 0; i < x.numel(); ++i)
        worst = std::max(worst, (double)std::abs(y[i] - x[i]));
      acc.check(same_shape && worst <= 1e-6,
                "CAR-U-Net output = input at init, worst |diff| " +
                    sci(worst));
    }

    // zero-init registration decoder starts at the identity warp (zero field)
    {
      fae::FaeConfig small;
      small.input_size = 32;
      small.width_multiplier = 0.125;
      small.blocks_per_stage = {1, 1, 1, 1};
      small.residual_layers = 4;
      mtfs::MtfsConfig mcfg;
      mcfg.fae = small;
      auto model = mtfs::build_mtfs<float>(mcfg, {2}, 3);
      TapeT<float> t;
      const auto a = model.backbone.forward(
          t, t.constant(random_tensor<float>({1, 32, 32}, rng)), false);
      const auto b = model.backbone.forward(
          t, t.constant(random_tensor<float>({1, 32, 32}, rng)), false);
      const auto dvf = t.val(model.registration->fwd(t, a, b, false));
      double worst = 0.0;
      for (std::size_t i = 0; i < dvf.numel(); ++i)
        worst = std::max(worst, (double)std::abs(dvf[i]));
      acc.check(dvf.shape() == std::vector<int>{2, 32, 32} && worst <= 1e-6,
                "registration decoder predicts a zero field at init, worst " +
                    sci(worst));
    }
  } catch (const std::exception& e) {
    acc.check(false, std::string("unexpected exception: ") + e.what());
  }
  return acc.done("architecture shapes, census and zero-init identities");
}

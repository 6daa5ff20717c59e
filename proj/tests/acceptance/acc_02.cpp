// Gradient correctness: analytic gradients of the content, style and
// composite perceptual losses and of the warp op match central finite
// differences to a relative error below 1e-4.

#include <string>
#include <vector>

#include "acc_common.hpp"
#include "cbct/cfp.hpp"
#include "cbct/mtfs.hpp"
#include "cbct/tape.hpp"
#include "support.hpp"

using namespace cbct;
using testsup::gradcheck;

namespace {

cfp::FeaturePyramidD random_pyramid(Rng& rng, int base) {
  const int ch[4] = {3, 4, 6, 8};
  cfp::FeaturePyramidD p;
  for (int l = 0; l < 4; ++l)
    p.push_back(random_tensor<double>({ch[l], base >> l, base >> l}, rng));
  return p;
}

std::string fmt(double x) { return sci(x); }

}  // namespace

int main(int, char**) {
  Acc acc("acc_02");
  try {
    Rng rng(4119);
    const double kTol = 1e-4;

    double worst = 0.0;
    for (int it = 0; it < 5; ++it) {
      auto a = random_tensor<double>({3, 4, 4}, rng);
      auto b = random_tensor<double>({3, 4, 4}, rng);
      const auto r = gradcheck({a, b}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
        return cfp::content_node(t, in[0], in[1]);
      });
      worst = std::max(worst, r.max_rel);
    }
    acc.check(worst < kTol, "content_loss grad vs central FD, worst rel " + fmt(worst));

    worst = 0.0;
    for (int it = 0; it < 5; ++it) {
      auto a = random_tensor<double>({3, 4, 4}, rng);
      auto b = random_tensor<double>({3, 4, 4}, rng);
      const auto r = gradcheck({a, b}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
        return cfp::style_node(t, in[0], in[1]);
      });
      worst = std::max(worst, r.max_rel);
    }
    acc.check(worst < kTol, "style_loss grad vs central FD, worst rel " + fmt(worst));

    // full composite, differentiated through one whole pyramid side
    worst = 0.0;
    for (int it = 0; it < 3; ++it) {
      auto pa = random_pyramid(rng, 8);
      const auto pb = random_pyramid(rng, 8);
      const auto r = gradcheck(
          {pa[0], pa[1], pa[2], pa[3]},
          [&](TapeD& t, const std::vector<TapeD::Ref>& in) {
            std::vector<TapeD::Ref> ra(in.begin(), in.end()), rb;
            for (int l = 0; l < 4; ++l) rb.push_back(t.constant(pb[(std::size_t)l]));
            return cfp::cfp_node(t, ra, rb, cfp::CfpConfig{});
          });
      worst = std::max(worst, r.max_rel);
    }
    acc.check(worst < kTol, "cfp_loss grad vs central FD, worst rel " + fmt(worst));

    // warp on an 8x8 image: gradient w.r.t. both the image and the field.
    // Fractional displacements keep bilinear sampling away from its kinks.
    worst = 0.0;
    for (int it = 0; it < 5; ++it) {
      auto img = random_tensor<double>({2, 8, 8}, rng);
      auto dvf = TensorD({2, 8, 8});
      for (std::size_t i = 0; i < dvf.numel(); ++i) {
        double v = rng.uniform(-1.4, 1.4);
        if (std::abs(v - std::round(v)) < 0.05) v += 0.1;
        dvf[i] = v;
      }
      const auto target = random_tensor<double>({2, 8, 8}, rng);
      const auto r = gradcheck(
          {img, dvf},
          [&](TapeD& t, const std::vector<TapeD::Ref>& in) {
            return ops::mse(t, ops::warp(t, in[0], in[1]), t.constant(target));
          });
      worst = std::max(worst, r.max_rel);
    }
    acc.check(worst < kTol, "warp grad vs central FD, worst rel " + fmt(worst));
  } catch (const std::exception& e) {
    acc.check(false, std::string("unexpected exception: ") + e.what());
  }
  return acc.done("analytic gradients match central finite differences");
}

#include <doctest.h>

#include "cbct/nn.hpp"
#include "cbct/tape.hpp"
#include "support.hpp"

using namespace cbct;
using testsup::gradcheck;

namespace {

// Direct convolution for cross-checking the im2col path.
TensorD conv_naive(const TensorD& x, const TensorD& w, const TensorD& b,
                   int stride, int pad) {
  const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Cout = w.dim(0), k = w.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  TensorD out({Cout, Ho, Wo});
  for (int co = 0; co < Cout; ++co)
    for (int oh = 0; oh < Ho; ++oh)
      for (int ow = 0; ow < Wo; ++ow) {
        double acc = b.numel() ? b[(std::size_t)co] : 0.0;
        for (int ci = 0; ci < Cin; ++ci)
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const int ih = oh * stride - pad + ki;
              const int iw = ow * stride - pad + kj;
              if (ih >= 0 && ih < H && iw >= 0 && iw < W)
                acc += x.at(ci, ih, iw) * w[((std::size_t)(co * Cin + ci) * k + ki) * k + kj];
            }
        out.at(co, oh, ow) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d forward matches direct convolution") {
  Rng rng(11);
  for (auto [stride, pad] : {std::pair{1, 1}, {2, 1}, {1, 0}}) {
    auto x = random_tensor<double>({3, 6, 6}, rng);
    auto w = random_tensor<double>({4, 3, 3, 3}, rng);
    auto b = random_tensor<double>({4}, rng);
    TapeD t;
    auto out = ops::conv2d(t, t.constant(x), t.constant(w), t.constant(b),
                           stride, pad);
    auto ref = conv_naive(x, w, b, stride, pad);
    REQUIRE(t.val(out).same_shape(ref));
    for (std::size_t i = 0; i < ref.numel(); ++i)
      CHECK(t.val(out)[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d gradients") {
  Rng rng(12);
  auto x = random_tensor<double>({2, 5, 5}, rng);
  auto w = random_tensor<double>({3, 2, 3, 3}, rng);
  auto b = random_tensor<double>({3}, rng);
  auto res = gradcheck({x, w, b}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    auto y = ops::conv2d(t, in[0], in[1], in[2], 2, 1);
    return ops::sum_squares(t, y);
  });
  CHECK(res.max_rel < 1e-6);
}

TEST_CASE("activation gradients") {
  Rng rng(13);
  auto x = random_tensor<double>({2, 4, 4}, rng, 0.2, 1.5);
  auto xn = random_tensor<double>({2, 4, 4}, rng, -1.5, -0.2);
  for (auto& base : {x, xn}) {
    auto r1 = gradcheck({base}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
      return ops::sum_squares(t, ops::relu(t, in[0]));
    });
    CHECK(r1.max_rel < 1e-6);
    auto r2 = gradcheck({base}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
      return ops::sum_squares(t, ops::leaky_relu(t, in[0], 0.2));
    });
    CHECK(r2.max_rel < 1e-6);
    auto r3 = gradcheck({base}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
      return ops::sum_squares(t, ops::sigmoid(t, in[0]));
    });
    CHECK(r3.max_rel < 1e-6);
  }
}

TEST_CASE("maxpool2 picks argmax and routes gradient") {
  TensorD x({1, 2, 2}, {1.0, 7.0, 3.0, 2.0});
  TapeD t;
  auto in = t.input(x);
  auto y = ops::maxpool2(t, in);
  CHECK(t.val(y).item() == 7.0);
  t.backward(ops::sum_squares(t, y));
  CHECK(t.grad(in)[1] == 14.0);
  CHECK(t.grad(in)[0] == 0.0);

  Rng rng(14);
  auto r = gradcheck({random_tensor<double>({2, 4, 6}, rng)},
                     [](TapeD& t2, const std::vector<TapeD::Ref>& in2) {
                       return ops::sum_squares(t2, ops::maxpool2(t2, in2[0]));
                     });
  CHECK(r.max_rel < 1e-6);
}

TEST_CASE("upsampling gradients") {
  Rng rng(15);
  auto r1 = gradcheck({random_tensor<double>({2, 3, 4}, rng)},
                      [](TapeD& t, const std::vector<TapeD::Ref>& in) {
                        return ops::sum_squares(t, ops::upsample_nearest2(t, in[0]));
                      });
  CHECK(r1.max_rel < 1e-6);
  auto r2 = gradcheck({random_tensor<double>({2, 3, 4}, rng)},
                      [](TapeD& t, const std::vector<TapeD::Ref>& in) {
                        return ops::sum_squares(t, ops::upsample_bilinear2(t, in[0]));
                      });
  CHECK(r2.max_rel < 1e-6);
}

TEST_CASE("elementwise and reshaping op gradients") {
  Rng rng(16);
  auto a = random_tensor<double>({2, 3, 3}, rng);
  auto b = random_tensor<double>({2, 3, 3}, rng);
  auto c = random_tensor<double>({3, 3, 3}, rng);
  auto s = random_tensor<double>({2}, rng, 0.1, 2.0);

  auto r1 = gradcheck({a, b}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::sum_squares(t, ops::add(t, in[0], ops::scale(t, in[1], -1.7)));
  });
  CHECK(r1.max_rel < 1e-6);
  auto r2 = gradcheck({a, b}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::sum_squares(t, ops::sub(t, in[0], in[1]));
  });
  CHECK(r2.max_rel < 1e-6);
  auto r3 = gradcheck({a, c}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::sum_squares(t, ops::concat_ch(t, in[0], in[1]));
  });
  CHECK(r3.max_rel < 1e-6);
  auto r4 = gradcheck({a, s}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::sum_squares(t, ops::channel_scale(t, in[0], in[1]));
  });
  CHECK(r4.max_rel < 1e-6);
  auto r5 = gradcheck({a}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::sum_squares(t, ops::global_avg_pool(t, in[0]));
  });
  CHECK(r5.max_rel < 1e-6);
}

TEST_CASE("fc and loss gradients") {
  Rng rng(17);
  auto x = random_tensor<double>({5}, rng);
  auto w = random_tensor<double>({3, 5}, rng);
  auto b = random_tensor<double>({3}, rng);
  auto r1 = gradcheck({x, w, b}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::sum_squares(t, ops::fc(t, in[0], in[1], in[2]));
  });
  CHECK(r1.max_rel < 1e-6);

  auto p = random_tensor<double>({2, 4, 4}, rng);
  auto q = random_tensor<double>({2, 4, 4}, rng);
  auto r2 = gradcheck({p, q}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::mse(t, in[0], in[1]);
  });
  CHECK(r2.max_rel < 1e-6);
  auto r3 = gradcheck({p, q}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::l1(t, in[0], in[1]);
  });
  CHECK(r3.max_rel < 1e-6);

  auto logits = random_tensor<double>({4}, rng, -2.0, 2.0);
  auto r4 = gradcheck({logits}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::softmax_ce(t, in[0], 2);
  });
  CHECK(r4.max_rel < 1e-6);
}

TEST_CASE("gram and sum_squares gradients") {
  Rng rng(18);
  auto phi = random_tensor<double>({3, 4, 4}, rng);
  auto r1 = gradcheck({phi}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::sum_squares(t, ops::gram(t, in[0]));
  });
  CHECK(r1.max_rel < 1e-6);
}

TEST_CASE("gram normalization") {
  // G[c,c'] = sum_hw phi_c phi_c' / (C*H*W)
  TensorD phi({2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  TapeD t;
  auto g = t.val(ops::gram(t, t.constant(phi)));
  CHECK(g[0] == doctest::Approx((1 + 4) / 4.0));
  CHECK(g[1] == doctest::Approx((3 + 8) / 4.0));
  CHECK(g[2] == doctest::Approx((3 + 8) / 4.0));
  CHECK(g[3] == doctest::Approx((9 + 16) / 4.0));
}

TEST_CASE("warp with zero displacement is bit-exact identity") {
  Rng rng(19);
  auto img = random_tensor<float>({2, 8, 8}, rng, -1000.0, 200.0);
  Tape t;
  auto out = ops::warp(t, t.constant(img), t.constant(Tensor({2, 8, 8})));
  for (std::size_t i = 0; i < img.numel(); ++i)
    CHECK(t.val(out)[i] == img[i]);
}

TEST_CASE("warp gradients in image and field") {
  Rng rng(20);
  auto img = random_tensor<double>({2, 6, 6}, rng);
  // keep displacements away from integer lattice points (floor kinks)
  auto dvf = random_tensor<double>({2, 6, 6}, rng, 0.15, 0.85);
  auto r = gradcheck({img, dvf}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return ops::sum_squares(t, ops::warp(t, in[0], in[1]));
  });
  CHECK(r.max_rel < 1e-6);
}

TEST_CASE("needs_grad gates graph construction and collection") {
  Rng rng(21);
  auto x = random_tensor<float>({1, 4, 4}, rng);
  nn::ParamStore ps;
  auto& w = ps.create("w", random_tensor<float>({2, 1, 3, 3}, rng));

  // frozen weights: input gradient flows, no parameter gradient collected
  Tape t;
  auto in = t.input(x);
  auto y = ops::conv2d(t, in, t.param(w, false), (Tape::Ref) nullptr, 1, 1);
  auto loss = ops::sum_squares(t, y);
  t.backward(loss);
  CHECK(t.grad(in).numel() == x.numel());
  ParamGradsT<float> g;
  t.collect_param_grads(g);
  CHECK(g.g.empty());

  // all-constant graph stays forward-only
  Tape t2;
  auto y2 = ops::conv2d(t2, t2.constant(x), t2.param(w, false),
                        (Tape::Ref) nullptr, 1, 1);
  CHECK(!y2->needs_grad);
  CHECK_THROWS(t2.backward(ops::sum_squares(t2, y2)));
}

TEST_CASE("param gradients accumulate across reuse") {
  // same weight applied twice: collected grad is the sum of both uses
  nn::ParamStoreT<double> ps;
  auto& w = ps.create("w", TensorD({1}, {2.0}));
  TapeD t;
  auto a = t.constant(TensorD({1}, {3.0}));
  auto w1 = t.param(w, true);
  auto w2 = t.param(w, true);
  // loss = (w*3)^2 + (w*3)^2 via two separate param nodes
  auto u = ops::channel_scale(t, a, w1);
  auto v = ops::channel_scale(t, a, w2);
  auto loss = ops::add(t, ops::sum_squares(t, u), ops::sum_squares(t, v));
  t.backward(loss);
  ParamGradsT<double> g;
  t.collect_param_grads(g);
  // d/dw of 2*(3w)^2 = 36w = 72
  CHECK(g.g[0][0] == doctest::Approx(72.0));
}

#include <doctest.h>

#include <Eigen/Dense>

#include "cbct/cfp.hpp"
#include "support.hpp"

using namespace cbct;
using namespace cbct::cfp;
using testsup::gradcheck;

namespace {

double content_oracle(const TensorD& a, const TensorD& b) {
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  double s = 0;
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const double d = a.at(c, h, w) - b.at(c, h, w);
        s += d * d;
      }
  return s / (C * H * W);
}

TensorD gram_oracle(const TensorD& p) {
  const int C = p.dim(0), H = p.dim(1), W = p.dim(2);
  TensorD g({C, C});
  for (int c1 = 0; c1 < C; ++c1)
    for (int c2 = 0; c2 < C; ++c2) {
      double s = 0;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) s += p.at(c1, h, w) * p.at(c2, h, w);
      g[static_cast<std::size_t>(c1 * C + c2)] = s / (C * H * W);
    }
  return g;
}

double style_oracle(const TensorD& a, const TensorD& b) {
  const auto ga = gram_oracle(a), gb = gram_oracle(b);
  double s = 0;
  for (std::size_t i = 0; i < ga.numel(); ++i) {
    const double d = ga[i] - gb[i];
    s += d * d;
  }
  return s;
}

FeaturePyramidD random_pyramid(Rng& rng, int base_size = 16) {
  const int ch[4] = {4, 8, 16, 32};
  FeaturePyramidD p;
  for (int l = 0; l < 4; ++l)
    p.push_back(random_tensor<double>({ch[l], base_size >> l, base_size >> l}, rng));
  return p;
}

}  // namespace

TEST_CASE("content loss basics and oracle") {
  Rng rng(31);
  auto a = random_tensor<double>({2, 3, 3}, rng);
  CHECK(content_loss(a, a) == 0.0);

  auto b = a;
  for (std::size_t i = 0; i < b.numel(); ++i) b[i] += 1.0;
  CHECK(content_loss(a, b) == doctest::Approx(1.0).epsilon(1e-12));

  for (int i = 0; i < 20; ++i) {
    auto x = random_tensor<double>({2, 3, 3}, rng);
    auto y = random_tensor<double>({2, 3, 3}, rng);
    CHECK(content_loss(x, y) == doctest::Approx(content_oracle(x, y)).epsilon(1e-9));
    CHECK(content_loss(x, y) == content_loss(y, x));
    CHECK(content_loss(x, y) >= 0.0);
  }
  auto z = random_tensor<double>({2, 3, 4}, rng);
  CHECK_THROWS_AS(content_loss(a, z), ShapeError);
}

TEST_CASE("gram matrix values, symmetry, psd") {
  TensorD ones = TensorD::full({2, 2, 2}, 1.0);
  auto g = gram_matrix(ones);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(0.5));

  TensorD zero({3, 2, 2});
  auto gz = gram_matrix(zero);
  for (std::size_t i = 0; i < gz.numel(); ++i) CHECK(gz[i] == 0.0);

  Rng rng(32);
  for (int i = 0; i < 20; ++i) {
    auto p = random_tensor<double>({4, 3, 5}, rng);
    auto gm = gram_matrix(p);
    auto go = gram_oracle(p);
    for (std::size_t k = 0; k < gm.numel(); ++k)
      CHECK(gm[k] == doctest::Approx(go[k]).epsilon(1e-9));
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        M(gm.data(), 4, 4);
    CHECK((M - M.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
    CHECK(es.eigenvalues().minCoeff() >= -1e-8);
  }
}

TEST_CASE("style loss oracle and permutation invariance") {
  Rng rng(33);
  auto a = random_tensor<double>({2, 2, 2}, rng);
  auto b = random_tensor<double>({2, 2, 2}, rng);
  CHECK(style_loss(a, a) == 0.0);
  CHECK(style_loss(a, b) == doctest::Approx(style_oracle(a, b)).epsilon(1e-9));
  CHECK(style_loss(a, b) == style_loss(b, a));

  // permute the spatial positions identically in every channel
  auto p = random_tensor<double>({3, 4, 4}, rng);
  std::vector<int> perm(16);
  for (int i = 0; i < 16; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);
  TensorD q({3, 4, 4});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i)
      q[static_cast<std::size_t>(c * 16 + i)] =
          p[static_cast<std::size_t>(c * 16 + perm[static_cast<std::size_t>(i)])];
  CHECK(style_loss(p, q) < 1e-18);

  // spatial sizes may differ; channels may not
  auto wide = random_tensor<double>({3, 8, 8}, rng);
  CHECK(style_loss(p, wide) >= 0.0);
  auto badc = random_tensor<double>({4, 4, 4}, rng);
  CHECK_THROWS_AS(style_loss(p, badc), ShapeError);
}

TEST_CASE("cfp loss composition") {
  Rng rng(34);
  auto a = random_pyramid(rng);
  auto b = random_pyramid(rng);

  CHECK(cfp_loss(a, a, CfpConfig{}) == 0.0);

  CfpConfig degenerate;
  degenerate.b = 0.0;
  degenerate.s1 = 1;
  CHECK(cfp_loss(a, b, degenerate) ==
        doctest::Approx(0.5 * content_loss(a[0], b[0])).epsilon(1e-12));

  CfpConfig def;
  double hand = 0;
  for (int l = 0; l < 2; ++l)
    hand += 0.5 / 2 * content_oracle(a[static_cast<std::size_t>(l)],
                                     b[static_cast<std::size_t>(l)]);
  for (int l = 0; l < 4; ++l)
    hand += 0.5 / 4 * style_oracle(a[static_cast<std::size_t>(l)],
                                   b[static_cast<std::size_t>(l)]);
  CHECK(cfp_loss(a, b, def) == doctest::Approx(hand).epsilon(1e-9));
}

TEST_CASE("cfp validation") {
  Rng rng(35);
  auto a = random_pyramid(rng);
  auto b = random_pyramid(rng);

  CfpConfig bad;
  bad.s1 = 5;
  CHECK_THROWS(cfp_loss(a, b, bad));
  bad = CfpConfig{};
  bad.a = -0.1;
  CHECK_THROWS(cfp_loss(a, b, bad));

  auto short_pyr = a;
  short_pyr.pop_back();
  CHECK_THROWS(cfp_loss(short_pyr, b, CfpConfig{}));

  // coarser-first ordering must be rejected
  auto rev = a;
  std::reverse(rev.begin(), rev.end());
  CHECK_THROWS(cfp_loss(rev, rev, CfpConfig{}));
}

TEST_CASE("tape builders match the scalar api") {
  Rng rng(36);
  auto a = random_pyramid(rng, 8);
  auto b = random_pyramid(rng, 8);
  TapeD t;
  std::vector<TapeD::Ref> ra, rb;
  for (auto& x : a) ra.push_back(t.constant(x));
  for (auto& x : b) rb.push_back(t.constant(x));
  CHECK(t.val(cfp_node(t, ra, rb, CfpConfig{})).item() ==
        doctest::Approx(cfp_loss(a, b, CfpConfig{})).epsilon(1e-12));
  CHECK(t.val(content_node(t, ra[0], rb[0])).item() ==
        doctest::Approx(content_loss(a[0], b[0])).epsilon(1e-12));
  CHECK(t.val(style_node(t, ra[3], rb[3])).item() ==
        doctest::Approx(style_loss(a[3], b[3])).epsilon(1e-12));
}

TEST_CASE("cfp gradients against finite differences") {
  Rng rng(37);
  auto a = random_tensor<double>({3, 4, 4}, rng);
  auto b = random_tensor<double>({3, 4, 4}, rng);
  auto r1 = gradcheck({a, b}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return content_node(t, in[0], in[1]);
  });
  CHECK(r1.max_rel < 1e-6);
  auto r2 = gradcheck({a, b}, [](TapeD& t, const std::vector<TapeD::Ref>& in) {
    return style_node(t, in[0], in[1]);
  });
  CHECK(r2.max_rel < 1e-6);

  // gradient of the full composite with respect to the finest level of one side
  auto pa = random_pyramid(rng, 8);
  auto pb = random_pyramid(rng, 8);
  auto r3 = gradcheck({pa[0]}, [&](TapeD& t, const std::vector<TapeD::Ref>& in) {
    std::vector<TapeD::Ref> ra{in[0]}, rb;
    for (std::size_t l = 1; l < 4; ++l) ra.push_back(t.constant(pa[l]));
    for (std::size_t l = 0; l < 4; ++l) rb.push_back(t.constant(pb[l]));
    return cfp_node(t, ra, rb, CfpConfig{});
  });
  CHECK(r3.max_rel < 1e-6);
}

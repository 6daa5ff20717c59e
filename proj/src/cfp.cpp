#include "cbct/cfp.hpp"

#include <Eigen/Core>

#include "cbct/jsonutil.hpp"

namespace cbct::cfp {

void CfpConfig::validate() const {
  require(a >= 0.0 && b >= 0.0, "cfp weights must be non-negative");
  require(s1 >= 1 && s1 <= 4, "cfp s1 must be in 1..4");
  require(s2 >= 1 && s2 <= 4, "cfp s2 must be in 1..4");
}

nlohmann::json CfpConfig::to_json() const {
  return {{"a", a}, {"b", b}, {"s1", s1}, {"s2", s2}};
}

CfpConfig CfpConfig::from_json(const nlohmann::json& j) {
  require_known_keys(j, {"a", "b", "s1", "s2"}, "cfp config");
  CfpConfig c;
  c.a = j.value("a", c.a);
  c.b = j.value("b", c.b);
  c.s1 = j.value("s1", c.s1);
  c.s2 = j.value("s2", c.s2);
  c.validate();
  return c;
}

double content_loss(const TensorT<double>& a, const TensorT<double>& b) {
  require(a.rank() == 3, "content loss expects (C,H,W)");
  if (!a.same_shape(b)) throw ShapeError("content loss: shape mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

TensorT<double> gram_matrix(const TensorT<double>& phi) {
  require(phi.rank() == 3, "gram expects (C,H,W)");
  const int C = phi.dim(0);
  const Eigen::Index hw = static_cast<Eigen::Index>(phi.numel()) / C;
  TensorT<double> g({C, C});
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      pm(phi.data(), C, hw);
  Eigen::Map<
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      gm(g.data(), C, C);
  gm.noalias() = pm * pm.transpose() / static_cast<double>(phi.numel());
  return g;
}

double style_loss(const TensorT<double>& a, const TensorT<double>& b) {
  require(a.rank() == 3 && b.rank() == 3, "style loss expects (C,H,W)");
  if (a.dim(0) != b.dim(0)) throw ShapeError("style loss: channel mismatch");
  const auto ga = gram_matrix(a);
  const auto gb = gram_matrix(b);
  double acc = 0;
  for (std::size_t i = 0; i < ga.numel(); ++i) {
    const double d = ga[i] - gb[i];
    acc += d * d;
  }
  return acc;
}

template <class R>
void validate_pyramid_pair(const FeaturePyramidT<R>& a,
                           const FeaturePyramidT<R>& b, const CfpConfig& cfg) {
  cfg.validate();
  require(a.size() == 4 && b.size() == 4, "cfp expects 4-level pyramids");
  for (std::size_t l = 0; l < 4; ++l) {
    require(a[l].rank() == 3 && b[l].rank() == 3, "pyramid level must be (C,H,W)");
    require(a[l].dim(0) == b[l].dim(0), "pyramid channel mismatch at a level");
    if (l > 0)
      require(a[l].dim(1) <= a[l - 1].dim(1) && a[l].dim(2) <= a[l - 1].dim(2),
              "pyramid must be ordered finest to coarsest");
  }
  for (int l = 0; l < cfg.s1; ++l)
    require(a[static_cast<std::size_t>(l)].same_shape(b[static_cast<std::size_t>(l)]),
            "content levels require identical shapes");
}

template void validate_pyramid_pair<float>(const FeaturePyramidT<float>&,
                                           const FeaturePyramidT<float>&,
                                           const CfpConfig&);
template void validate_pyramid_pair<double>(const FeaturePyramidT<double>&,
                                            const FeaturePyramidT<double>&,
                                            const CfpConfig&);

double cfp_loss(const FeaturePyramidD& a, const FeaturePyramidD& b,
                const CfpConfig& cfg) {
  validate_pyramid_pair(a, b, cfg);
  double total = 0;
  if (cfg.a > 0) {
    double c = 0;
    for (int l = 0; l < cfg.s1; ++l)
      c += content_loss(a[static_cast<std::size_t>(l)],
                        b[static_cast<std::size_t>(l)]);
    total += cfg.a / cfg.s1 * c;
  }
  if (cfg.b > 0) {
    double s = 0;
    for (int l = 0; l < cfg.s2; ++l)
      s += style_loss(a[static_cast<std::size_t>(l)],
                      b[static_cast<std::size_t>(l)]);
    total += cfg.b / cfg.s2 * s;
  }
  return total;
}

}  // namespace cbct::cfp

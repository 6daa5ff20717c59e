#pragma once

#include <vector>

#include <json.hpp>

#include "cbct/tape.hpp"
#include "cbct/tensor.hpp"

namespace cbct::cfp {

// Feature pyramid: 4 maps ordered finest (full resolution, fewest channels)
// to coarsest (1/8 resolution, most channels).
template <class R>
using FeaturePyramidT = std::vector<TensorT<R>>;
using FeaturePyramid = FeaturePyramidT<float>;
using FeaturePyramidD = FeaturePyramidT<double>;

struct CfpConfig {
  double a = 0.5;  // content weight
  double b = 0.5;  // style weight
  int s1 = 2;      // content levels, counted from the finest
  int s2 = 4;      // style levels, counted from the finest

  void validate() const;
  nlohmann::json to_json() const;
  static CfpConfig from_json(const nlohmann::json& j);
};

// Scalar API in double, used by evaluation and reports.
double content_loss(const TensorT<double>& a, const TensorT<double>& b);
TensorT<double> gram_matrix(const TensorT<double>& phi);
double style_loss(const TensorT<double>& a, const TensorT<double>& b);
double cfp_loss(const FeaturePyramidD& a, const FeaturePyramidD& b,
                const CfpConfig& cfg);

template <class R>
void validate_pyramid_pair(const FeaturePyramidT<R>& a,
                           const FeaturePyramidT<R>& b, const CfpConfig& cfg);

// ---------------------------------------------------------------------------
// Tape builders for training. Same math as the scalar API, differentiable.
// ---------------------------------------------------------------------------

template <class R>
typename TapeT<R>::Ref content_node(TapeT<R>& t, typename TapeT<R>::Ref a,
                                    typename TapeT<R>::Ref b) {
  require(t.val(a).rank() == 3 && t.val(a).same_shape(t.val(b)),
          "content loss requires identical (C,H,W) shapes");
  return ops::mse(t, a, b);
}

template <class R>
typename TapeT<R>::Ref style_node(TapeT<R>& t, typename TapeT<R>::Ref a,
                                  typename TapeT<R>::Ref b) {
  require(t.val(a).rank() == 3 && t.val(b).rank() == 3 &&
              t.val(a).dim(0) == t.val(b).dim(0),
          "style loss requires matching channel counts");
  return ops::sum_squares(t, ops::sub(t, ops::gram(t, a), ops::gram(t, b)));
}

template <class R>
typename TapeT<R>::Ref cfp_node(TapeT<R>& t,
                                const std::vector<typename TapeT<R>::Ref>& a,
                                const std::vector<typename TapeT<R>::Ref>& b,
                                const CfpConfig& cfg) {
  cfg.validate();
  require(a.size() == 4 && b.size() == 4, "cfp expects 4-level pyramids");
  for (std::size_t l = 0; l < 4; ++l) {
    require(t.val(a[l]).rank() == 3 && t.val(b[l]).rank() == 3,
            "pyramid level must be (C,H,W)");
    require(t.val(a[l]).dim(0) == t.val(b[l]).dim(0),
            "pyramid channel mismatch at a level");
    if (l > 0)
      require(t.val(a[l]).dim(1) <= t.val(a[l - 1]).dim(1),
              "pyramid must be ordered finest to coarsest");
  }
  typename TapeT<R>::Ref total = t.constant(TensorT<R>::scalar(R(0)));
  if (cfg.a > 0) {
    typename TapeT<R>::Ref c = nullptr;
    for (int l = 0; l < cfg.s1; ++l) {
      auto term = content_node(t, a[static_cast<std::size_t>(l)],
                               b[static_cast<std::size_t>(l)]);
      c = c ? ops::add(t, c, term) : term;
    }
    total = ops::add(t, total, ops::scale(t, c, static_cast<R>(cfg.a / cfg.s1)));
  }
  if (cfg.b > 0) {
    typename TapeT<R>::Ref s = nullptr;
    for (int l = 0; l < cfg.s2; ++l) {
      auto term = style_node(t, a[static_cast<std::size_t>(l)],
                             b[static_cast<std::size_t>(l)]);
      s = s ? ops::add(t, s, term) : term;
    }
    total = ops::add(t, total, ops::scale(t, s, static_cast<R>(cfg.b / cfg.s2)));
  }
  return total;
}

}  // namespace cbct::cfp

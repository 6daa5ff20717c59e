#pragma once

#include <Eigen/Core>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "cbct/common.hpp"
#include "cbct/tensor.hpp"

namespace cbct {

template <class R>
struct ParamT {
  int id = -1;
  std::string name;
  TensorT<R> value;
};

// Per-parameter gradient accumulator, indexed by param id.
template <class R>
struct ParamGradsT {
  std::vector<TensorT<R>> g;
  std::vector<char> has;

  void ensure(std::size_t n) {
    if (g.size() < n) {
      g.resize(n);
      has.resize(n, 0);
    }
  }

  void add(int id, const TensorT<R>& grad, R scale = R(1)) {
    ensure(static_cast<std::size_t>(id) + 1);
    auto& dst = g[static_cast<std::size_t>(id)];
    if (!has[static_cast<std::size_t>(id)]) {
      dst = TensorT<R>(grad.shape());
      has[static_cast<std::size_t>(id)] = 1;
    }
    const R* s = grad.data();
    R* d = dst.data();
    const std::size_t n = grad.numel();
    for (std::size_t i = 0; i < n; ++i) d[i] += scale * s[i];
  }

  void add_scaled(const ParamGradsT& o, R w) {
    ensure(o.g.size());
    for (std::size_t i = 0; i < o.g.size(); ++i)
      if (o.has[i]) add(static_cast<int>(i), o.g[i], w);
  }

  void scale_all(R s) {
    for (std::size_t i = 0; i < g.size(); ++i)
      if (has[i]) g[i].scale_(s);
  }

  double l2_norm(int id) const {
    if (static_cast<std::size_t>(id) >= g.size() ||
        !has[static_cast<std::size_t>(id)])
      return 0.0;
    double s = 0.0;
    const auto& t = g[static_cast<std::size_t>(id)];
    for (std::size_t i = 0; i < t.numel(); ++i)
      s += static_cast<double>(t[i]) * static_cast<double>(t[i]);
    return std::sqrt(s);
  }

  void clear() {
    g.clear();
    has.clear();
  }
};

// Reverse-mode tape. Nodes are created in topological order by the op
// builders below; backward() walks them in reverse. Ops only record a
// backward closure when some parent needs a gradient, so forward-only
// evaluation (frozen loss net, inference) pays no graph overhead.
template <class R>
class TapeT {
 public:
  struct Node {
    TensorT<R> storage;
    const TensorT<R>* v = nullptr;  // value view (param leaves alias weights)
    TensorT<R> grad;
    bool needs_grad = false;
    bool grad_ready = false;
    const ParamT<R>* param = nullptr;
    bool trainable = false;
    std::function<void(Node&)> back;
  };
  using Ref = Node*;

  Ref constant(TensorT<R> v) {
    Node& n = fresh();
    n.storage = std::move(v);
    n.v = &n.storage;
    return &n;
  }

  Ref input(TensorT<R> v) {
    Node& n = fresh();
    n.storage = std::move(v);
    n.v = &n.storage;
    n.needs_grad = true;
    return &n;
  }

  Ref param(const ParamT<R>& p, bool trainable = true) {
    Node& n = fresh();
    n.v = &p.value;
    n.param = &p;
    n.trainable = trainable;
    n.needs_grad = trainable;
    return &n;
  }

  const TensorT<R>& val(Ref r) const { return *r->v; }

  TensorT<R>& grad(Ref r) {
    require(r->grad_ready, "gradient not computed for this node");
    return r->grad;
  }

  Node& make(TensorT<R> value, bool needs_grad) {
    Node& n = fresh();
    n.storage = std::move(value);
    n.v = &n.storage;
    n.needs_grad = needs_grad;
    return n;
  }

  static void accum(Node* n, const TensorT<R>& delta) {
    if (!n->needs_grad) return;
    if (!n->grad_ready) {
      n->grad = TensorT<R>(n->v->shape());
      n->grad_ready = true;
    }
    n->grad.add_(delta);
  }

  // Grad buffer for in-place accumulation by op closures.
  static TensorT<R>& grad_buf(Node* n) {
    if (!n->grad_ready) {
      n->grad = TensorT<R>(n->v->shape());
      n->grad_ready = true;
    }
    return n->grad;
  }

  void backward(Ref loss) {
    require(loss->v->numel() == 1, "backward target must be scalar");
    require(loss->needs_grad, "backward target does not require grad");
    loss->grad = TensorT<R>::scalar(R(1));
    loss->grad_ready = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = *it;
      if (n.grad_ready && n.back) n.back(n);
    }
  }

  // Adds the gradients of trainable parameter leaves into `out`.
  void collect_param_grads(ParamGradsT<R>& out, R scale = R(1)) const {
    for (const Node& n : nodes_) {
      if (n.param && n.trainable && n.grad_ready)
        out.add(n.param->id, n.grad, scale);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  Node& fresh() {
    nodes_.emplace_back();
    return nodes_.back();
  }

  std::deque<Node> nodes_;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------
namespace ops {

template <class R>
using Mat = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class R>
using MatMap = Eigen::Map<Mat<R>>;
template <class R>
using CMatMap = Eigen::Map<const Mat<R>>;

namespace detail {

inline int conv_out(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <class R>
void im2col(const TensorT<R>& x, int k, int stride, int pad, Mat<R>& col) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = conv_out(H, k, stride, pad), Wo = conv_out(W, k, stride, pad);
  col.resize(C * k * k, Ho * Wo);
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        R* row = col.data() +
                 static_cast<std::size_t>((c * k + ki) * k + kj) *
                     static_cast<std::size_t>(Ho * Wo);
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            for (int ow = 0; ow < Wo; ++ow) row[oh * Wo + ow] = R(0);
            continue;
          }
          const R* src = x.data() + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            row[oh * Wo + ow] = (iw >= 0 && iw < W) ? src[iw] : R(0);
          }
        }
      }
    }
  }
}

template <class R>
void col2im_add(const Mat<R>& col, int k, int stride, int pad, TensorT<R>& gx) {
  const int C = gx.dim(0), H = gx.dim(1), W = gx.dim(2);
  const int Ho = conv_out(H, k, stride, pad), Wo = conv_out(W, k, stride, pad);
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const R* row = col.data() +
                       static_cast<std::size_t>((c * k + ki) * k + kj) *
                           static_cast<std::size_t>(Ho * Wo);
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          R* dst = gx.data() + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += row[oh * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// conv2d: x (Cin,H,W), w (Cout,Cin,k,k), optional bias (Cout).
template <class R>
typename TapeT<R>::Ref conv2d(TapeT<R>& t, typename TapeT<R>::Ref x,
                              typename TapeT<R>::Ref w,
                              typename TapeT<R>::Ref b, int stride = 1,
                              int pad = 1) {
  const TensorT<R>& xv = t.val(x);
  const TensorT<R>& wv = t.val(w);
  require(xv.rank() == 3 && wv.rank() == 4, "conv2d: bad ranks");
  require(xv.dim(0) == wv.dim(1), "conv2d: channel mismatch");
  require(wv.dim(2) == wv.dim(3), "conv2d: non-square kernel");
  const int Cin = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int Cout = wv.dim(0), k = wv.dim(2);
  const int Ho = detail::conv_out(H, k, stride, pad);
  const int Wo = detail::conv_out(W, k, stride, pad);
  require(Ho > 0 && Wo > 0, "conv2d: output collapsed");

  Mat<R> col;
  detail::im2col(xv, k, stride, pad, col);
  CMatMap<R> wm(wv.data(), Cout, Cin * k * k);

  TensorT<R> out({Cout, Ho, Wo});
  MatMap<R> om(out.data(), Cout, Ho * Wo);
  om.noalias() = wm * col;
  if (b) {
    const TensorT<R>& bv = t.val(b);
    require(bv.rank() == 1 && bv.dim(0) == Cout, "conv2d: bad bias");
    for (int c = 0; c < Cout; ++c)
      om.row(c).array() += bv[static_cast<std::size_t>(c)];
  }

  const bool ng = x->needs_grad || w->needs_grad || (b && b->needs_grad);
  auto& n = t.make(std::move(out), ng);
  if (ng) {
    auto* xp = x;
    auto* wp = w;
    auto* bp = b;
    n.back = [&t, xp, wp, bp, stride, pad, k, Cin, Cout, Ho,
              Wo](typename TapeT<R>::Node& self) {
      CMatMap<R> gom(self.grad.data(), Cout, Ho * Wo);
      if (bp && bp->needs_grad) {
        auto& gb = TapeT<R>::grad_buf(bp);
        for (int c = 0; c < Cout; ++c)
          gb[static_cast<std::size_t>(c)] += gom.row(c).sum();
      }
      if (wp->needs_grad) {
        Mat<R> col;
        detail::im2col(t.val(xp), k, stride, pad, col);
        auto& gw = TapeT<R>::grad_buf(wp);
        MatMap<R> gwm(gw.data(), Cout, Cin * k * k);
        gwm.noalias() += gom * col.transpose();
      }
      if (xp->needs_grad) {
        CMatMap<R> wm(t.val(wp).data(), Cout, Cin * k * k);
        Mat<R> gcol = wm.transpose() * gom;
        detail::col2im_add(gcol, k, stride, pad, TapeT<R>::grad_buf(xp));
      }
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref relu(TapeT<R>& t, typename TapeT<R>::Ref x) {
  const auto& xv = t.val(x);
  TensorT<R> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i)
    out[i] = xv[i] > R(0) ? xv[i] : R(0);
  auto& n = t.make(std::move(out), x->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    n.back = [&t, xp](typename TapeT<R>::Node& self) {
      auto& gx = TapeT<R>::grad_buf(xp);
      const auto& xv = t.val(xp);
      for (std::size_t i = 0; i < xv.numel(); ++i)
        if (xv[i] > R(0)) gx[i] += self.grad[i];
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref leaky_relu(TapeT<R>& t, typename TapeT<R>::Ref x,
                                  R slope = R(0.2)) {
  const auto& xv = t.val(x);
  TensorT<R> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i)
    out[i] = xv[i] > R(0) ? xv[i] : slope * xv[i];
  auto& n = t.make(std::move(out), x->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    n.back = [&t, xp, slope](typename TapeT<R>::Node& self) {
      auto& gx = TapeT<R>::grad_buf(xp);
      const auto& xv = t.val(xp);
      for (std::size_t i = 0; i < xv.numel(); ++i)
        gx[i] += (xv[i] > R(0) ? R(1) : slope) * self.grad[i];
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref sigmoid(TapeT<R>& t, typename TapeT<R>::Ref x) {
  const auto& xv = t.val(x);
  TensorT<R> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i)
    out[i] = R(1) / (R(1) + std::exp(-xv[i]));
  auto& n = t.make(std::move(out), x->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    auto* np = &n;
    n.back = [xp, np](typename TapeT<R>::Node& self) {
      auto& gx = TapeT<R>::grad_buf(xp);
      const auto& y = *np->v;
      for (std::size_t i = 0; i < y.numel(); ++i)
        gx[i] += y[i] * (R(1) - y[i]) * self.grad[i];
    };
  }
  return &n;
}

// 2x2 max pooling, stride 2. Requires even spatial dims.
template <class R>
typename TapeT<R>::Ref maxpool2(TapeT<R>& t, typename TapeT<R>::Ref x) {
  const auto& xv = t.val(x);
  require(xv.rank() == 3, "maxpool2: rank");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2: odd spatial dims");
  const int Ho = H / 2, Wo = W / 2;
  TensorT<R> out({C, Ho, Wo});
  auto idx = std::make_shared<std::vector<std::int32_t>>(out.numel());
  std::size_t o = 0;
  for (int c = 0; c < C; ++c) {
    for (int oh = 0; oh < Ho; ++oh) {
      for (int ow = 0; ow < Wo; ++ow, ++o) {
        R best = xv.at(c, 2 * oh, 2 * ow);
        int bi = (2 * oh) * W + 2 * ow;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const R v = xv.at(c, 2 * oh + di, 2 * ow + dj);
            if (v > best) {
              best = v;
              bi = (2 * oh + di) * W + 2 * ow + dj;
            }
          }
        out[o] = best;
        (*idx)[o] = static_cast<std::int32_t>(c * H * W + bi);
      }
    }
  }
  auto& n = t.make(std::move(out), x->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    n.back = [xp, idx](typename TapeT<R>::Node& self) {
      auto& gx = TapeT<R>::grad_buf(xp);
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        gx[static_cast<std::size_t>((*idx)[i])] += self.grad[i];
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref upsample_nearest2(TapeT<R>& t,
                                         typename TapeT<R>::Ref x) {
  const auto& xv = t.val(x);
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  TensorT<R> out({C, 2 * H, 2 * W});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < 2 * H; ++h)
      for (int w = 0; w < 2 * W; ++w)
        out.at(c, h, w) = xv.at(c, h / 2, w / 2);
  auto& n = t.make(std::move(out), x->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    n.back = [&t, xp](typename TapeT<R>::Node& self) {
      auto& gx = TapeT<R>::grad_buf(xp);
      const auto& xv = t.val(xp);
      const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < 2 * H; ++h)
          for (int w = 0; w < 2 * W; ++w)
            gx.at(c, h / 2, w / 2) += self.grad.at(c, h, w);
    };
  }
  return &n;
}

// Bilinear 2x upsampling (half-pixel centres). Used on displacement fields.
template <class R>
typename TapeT<R>::Ref upsample_bilinear2(TapeT<R>& t,
                                          typename TapeT<R>::Ref x) {
  const auto& xv = t.val(x);
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int Ho = 2 * H, Wo = 2 * W;
  // Each output row/col interpolates two source rows/cols with fixed weights.
  auto prep = [](int o, int n, int& i0, R& w1) {
    R src = (static_cast<R>(o) + R(0.5)) / R(2) - R(0.5);
    if (src < R(0)) src = R(0);
    if (src > static_cast<R>(n - 1)) src = static_cast<R>(n - 1);
    i0 = static_cast<int>(std::floor(static_cast<double>(src)));
    if (i0 > n - 2) i0 = n - 2;
    if (i0 < 0) i0 = 0;
    w1 = src - static_cast<R>(i0);
  };
  TensorT<R> out({C, Ho, Wo});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < Ho; ++h) {
      int h0;
      R wh;
      prep(h, H, h0, wh);
      for (int w = 0; w < Wo; ++w) {
        int w0;
        R ww;
        prep(w, W, w0, ww);
        out.at(c, h, w) = (R(1) - wh) * ((R(1) - ww) * xv.at(c, h0, w0) +
                                         ww * xv.at(c, h0, w0 + 1)) +
                          wh * ((R(1) - ww) * xv.at(c, h0 + 1, w0) +
                                ww * xv.at(c, h0 + 1, w0 + 1));
      }
    }
  auto& n = t.make(std::move(out), x->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    n.back = [&t, xp, prep](typename TapeT<R>::Node& self) {
      auto& gx = TapeT<R>::grad_buf(xp);
      const auto& xv = t.val(xp);
      const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < 2 * H; ++h) {
          int h0;
          R wh;
          prep(h, H, h0, wh);
          for (int w = 0; w < 2 * W; ++w) {
            int w0;
            R ww;
            prep(w, W, w0, ww);
            const R g = self.grad.at(c, h, w);
            gx.at(c, h0, w0) += (R(1) - wh) * (R(1) - ww) * g;
            gx.at(c, h0, w0 + 1) += (R(1) - wh) * ww * g;
            gx.at(c, h0 + 1, w0) += wh * (R(1) - ww) * g;
            gx.at(c, h0 + 1, w0 + 1) += wh * ww * g;
          }
        }
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref concat_ch(TapeT<R>& t, typename TapeT<R>::Ref a,
                                 typename TapeT<R>::Ref b) {
  const auto& av = t.val(a);
  const auto& bv = t.val(b);
  require(av.rank() == 3 && bv.rank() == 3 && av.dim(1) == bv.dim(1) &&
              av.dim(2) == bv.dim(2),
          "concat_ch: spatial mismatch");
  const int Ca = av.dim(0), Cb = bv.dim(0), H = av.dim(1), W = av.dim(2);
  TensorT<R> out({Ca + Cb, H, W});
  std::copy(av.data(), av.data() + av.numel(), out.data());
  std::copy(bv.data(), bv.data() + bv.numel(), out.data() + av.numel());
  auto& n = t.make(std::move(out), a->needs_grad || b->needs_grad);
  if (n.needs_grad) {
    auto* ap = a;
    auto* bp = b;
    const std::size_t na = av.numel();
    n.back = [ap, bp, na](typename TapeT<R>::Node& self) {
      if (ap->needs_grad) {
        auto& ga = TapeT<R>::grad_buf(ap);
        for (std::size_t i = 0; i < na; ++i) ga[i] += self.grad[i];
      }
      if (bp->needs_grad) {
        auto& gb = TapeT<R>::grad_buf(bp);
        for (std::size_t i = 0; i < gb.numel(); ++i)
          gb[i] += self.grad[na + i];
      }
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref add(TapeT<R>& t, typename TapeT<R>::Ref a,
                           typename TapeT<R>::Ref b) {
  const auto& av = t.val(a);
  const auto& bv = t.val(b);
  require(av.same_shape(bv), "add: shape mismatch");
  TensorT<R> out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  auto& n = t.make(std::move(out), a->needs_grad || b->needs_grad);
  if (n.needs_grad) {
    auto* ap = a;
    auto* bp = b;
    n.back = [ap, bp](typename TapeT<R>::Node& self) {
      TapeT<R>::accum(ap, self.grad);
      TapeT<R>::accum(bp, self.grad);
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref sub(TapeT<R>& t, typename TapeT<R>::Ref a,
                           typename TapeT<R>::Ref b) {
  const auto& av = t.val(a);
  const auto& bv = t.val(b);
  require(av.same_shape(bv), "sub: shape mismatch");
  TensorT<R> out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
  auto& n = t.make(std::move(out), a->needs_grad || b->needs_grad);
  if (n.needs_grad) {
    auto* ap = a;
    auto* bp = b;
    n.back = [ap, bp](typename TapeT<R>::Node& self) {
      TapeT<R>::accum(ap, self.grad);
      if (bp->needs_grad) {
        auto& gb = TapeT<R>::grad_buf(bp);
        for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] -= self.grad[i];
      }
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref scale(TapeT<R>& t, typename TapeT<R>::Ref a, R s) {
  const auto& av = t.val(a);
  TensorT<R> out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = s * av[i];
  auto& n = t.make(std::move(out), a->needs_grad);
  if (n.needs_grad) {
    auto* ap = a;
    n.back = [ap, s](typename TapeT<R>::Node& self) {
      auto& ga = TapeT<R>::grad_buf(ap);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += s * self.grad[i];
    };
  }
  return &n;
}

// Per-channel scaling: x (C,H,W) * s (C). The squeeze-excite gate.
template <class R>
typename TapeT<R>::Ref channel_scale(TapeT<R>& t, typename TapeT<R>::Ref x,
                                     typename TapeT<R>::Ref s) {
  const auto& xv = t.val(x);
  const auto& sv = t.val(s);
  require(sv.rank() == 1 && sv.dim(0) == xv.dim(0), "channel_scale: shape");
  const int C = xv.dim(0);
  const std::size_t hw = xv.numel() / static_cast<std::size_t>(C);
  TensorT<R> out(xv.shape());
  for (int c = 0; c < C; ++c) {
    const R sc = sv[static_cast<std::size_t>(c)];
    const R* src = xv.data() + static_cast<std::size_t>(c) * hw;
    R* dst = out.data() + static_cast<std::size_t>(c) * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] = sc * src[i];
  }
  auto& n = t.make(std::move(out), x->needs_grad || s->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    auto* sp = s;
    n.back = [&t, xp, sp, C, hw](typename TapeT<R>::Node& self) {
      const auto& xv = t.val(xp);
      const auto& sv = t.val(sp);
      if (xp->needs_grad) {
        auto& gx = TapeT<R>::grad_buf(xp);
        for (int c = 0; c < C; ++c) {
          const R sc = sv[static_cast<std::size_t>(c)];
          for (std::size_t i = 0; i < hw; ++i)
            gx[static_cast<std::size_t>(c) * hw + i] +=
                sc * self.grad[static_cast<std::size_t>(c) * hw + i];
        }
      }
      if (sp->needs_grad) {
        auto& gs = TapeT<R>::grad_buf(sp);
        for (int c = 0; c < C; ++c) {
          R acc = R(0);
          for (std::size_t i = 0; i < hw; ++i)
            acc += xv[static_cast<std::size_t>(c) * hw + i] *
                   self.grad[static_cast<std::size_t>(c) * hw + i];
          gs[static_cast<std::size_t>(c)] += acc;
        }
      }
    };
  }
  return &n;
}

template <class R>
typename TapeT<R>::Ref global_avg_pool(TapeT<R>& t, typename TapeT<R>::Ref x) {
  const auto& xv = t.val(x);
  require(xv.rank() == 3, "global_avg_pool: rank");
  const int C = xv.dim(0);
  const std::size_t hw = xv.numel() / static_cast<std::size_t>(C);
  TensorT<R> out({C});
  for (int c = 0; c < C; ++c) {
    R acc = R(0);
    const R* src = xv.data() + static_cast<std::size_t>(c) * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += src[i];
    out[static_cast<std::size_t>(c)] = acc / static_cast<R>(hw);
  }
  auto& n = t.make(std::move(out), x->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    n.back = [xp, C, hw](typename TapeT<R>::Node& self) {
      auto& gx = TapeT<R>::grad_buf(xp);
      for (int c = 0; c < C; ++c) {
        const R g = self.grad[static_cast<std::size_t>(c)] / static_cast<R>(hw);
        for (std::size_t i = 0; i < hw; ++i)
          gx[static_cast<std::size_t>(c) * hw + i] += g;
      }
    };
  }
  return &n;
}

// Fully connected: x (Cin) -> (Cout), w (Cout,Cin), b (Cout).
template <class R>
typename TapeT<R>::Ref fc(TapeT<R>& t, typename TapeT<R>::Ref x,
                          typename TapeT<R>::Ref w, typename TapeT<R>::Ref b) {
  const auto& xv = t.val(x);
  const auto& wv = t.val(w);
  require(xv.rank() == 1 && wv.rank() == 2 && wv.dim(1) == xv.dim(0),
          "fc: shape mismatch");
  const int Cout = wv.dim(0), Cin = wv.dim(1);
  TensorT<R> out({Cout});
  CMatMap<R> wm(wv.data(), Cout, Cin);
  Eigen::Map<const Eigen::Vector<R, Eigen::Dynamic>> xm(xv.data(), Cin);
  Eigen::Map<Eigen::Vector<R, Eigen::Dynamic>> om(out.data(), Cout);
  om.noalias() = wm * xm;
  if (b) {
    const auto& bv = t.val(b);
    for (int c = 0; c < Cout; ++c) out[static_cast<std::size_t>(c)] += bv[static_cast<std::size_t>(c)];
  }
  const bool ng = x->needs_grad || w->needs_grad || (b && b->needs_grad);
  auto& n = t.make(std::move(out), ng);
  if (ng) {
    auto* xp = x;
    auto* wp = w;
    auto* bp = b;
    n.back = [&t, xp, wp, bp, Cout, Cin](typename TapeT<R>::Node& self) {
      const auto& xv = t.val(xp);
      const auto& wv = t.val(wp);
      if (bp && bp->needs_grad) {
        auto& gb = TapeT<R>::grad_buf(bp);
        for (int c = 0; c < Cout; ++c) gb[static_cast<std::size_t>(c)] += self.grad[static_cast<std::size_t>(c)];
      }
      if (wp->needs_grad) {
        auto& gw = TapeT<R>::grad_buf(wp);
        for (int c = 0; c < Cout; ++c)
          for (int i = 0; i < Cin; ++i)
            gw[static_cast<std::size_t>(c * Cin + i)] +=
                self.grad[static_cast<std::size_t>(c)] * xv[static_cast<std::size_t>(i)];
      }
      if (xp->needs_grad) {
        auto& gx = TapeT<R>::grad_buf(xp);
        for (int i = 0; i < Cin; ++i) {
          R acc = R(0);
          for (int c = 0; c < Cout; ++c)
            acc += wv[static_cast<std::size_t>(c * Cin + i)] * self.grad[static_cast<std::size_t>(c)];
          gx[static_cast<std::size_t>(i)] += acc;
        }
      }
    };
  }
  return &n;
}

// Mean squared error over all elements.
template <class R>
typename TapeT<R>::Ref mse(TapeT<R>& t, typename TapeT<R>::Ref a,
                           typename TapeT<R>::Ref b) {
  const auto& av = t.val(a);
  const auto& bv = t.val(b);
  require(av.same_shape(bv), "mse: shape mismatch");
  const std::size_t n0 = av.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n0; ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  auto& n = t.make(TensorT<R>::scalar(static_cast<R>(acc / static_cast<double>(n0))),
                   a->needs_grad || b->needs_grad);
  if (n.needs_grad) {
    auto* ap = a;
    auto* bp = b;
    n.back = [&t, ap, bp, n0](typename TapeT<R>::Node& self) {
      const auto& av = t.val(ap);
      const auto& bv = t.val(bp);
      const R g = self.grad.item() * R(2) / static_cast<R>(n0);
      if (ap->needs_grad) {
        auto& ga = TapeT<R>::grad_buf(ap);
        for (std::size_t i = 0; i < n0; ++i) ga[i] += g * (av[i] - bv[i]);
      }
      if (bp->needs_grad) {
        auto& gb = TapeT<R>::grad_buf(bp);
        for (std::size_t i = 0; i < n0; ++i) gb[i] -= g * (av[i] - bv[i]);
      }
    };
  }
  return &n;
}

// Mean absolute error; subgradient 0 at ties.
template <class R>
typename TapeT<R>::Ref l1(TapeT<R>& t, typename TapeT<R>::Ref a,
                          typename TapeT<R>::Ref b) {
  const auto& av = t.val(a);
  const auto& bv = t.val(b);
  require(av.same_shape(bv), "l1: shape mismatch");
  const std::size_t n0 = av.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n0; ++i)
    acc += std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i]));
  auto& n = t.make(TensorT<R>::scalar(static_cast<R>(acc / static_cast<double>(n0))),
                   a->needs_grad || b->needs_grad);
  if (n.needs_grad) {
    auto* ap = a;
    auto* bp = b;
    n.back = [&t, ap, bp, n0](typename TapeT<R>::Node& self) {
      const auto& av = t.val(ap);
      const auto& bv = t.val(bp);
      const R g = self.grad.item() / static_cast<R>(n0);
      for (std::size_t i = 0; i < n0; ++i) {
        const R d = av[i] - bv[i];
        const R s = d > R(0) ? R(1) : (d < R(0) ? R(-1) : R(0));
        if (ap->needs_grad) TapeT<R>::grad_buf(ap)[i] += g * s;
        if (bp->needs_grad) TapeT<R>::grad_buf(bp)[i] -= g * s;
      }
    };
  }
  return &n;
}

// Softmax cross-entropy against an integer class label.
template <class R>
typename TapeT<R>::Ref softmax_ce(TapeT<R>& t, typename TapeT<R>::Ref logits,
                                  int label) {
  const auto& lv = t.val(logits);
  require(lv.rank() == 1, "softmax_ce: logits rank");
  const int K = lv.dim(0);
  require(label >= 0 && label < K, "softmax_ce: label out of range");
  double m = lv[0];
  for (int i = 1; i < K; ++i) m = std::max(m, static_cast<double>(lv[static_cast<std::size_t>(i)]));
  double z = 0.0;
  for (int i = 0; i < K; ++i) z += std::exp(static_cast<double>(lv[static_cast<std::size_t>(i)]) - m);
  const double loss = std::log(z) - (static_cast<double>(lv[static_cast<std::size_t>(label)]) - m);
  auto& n = t.make(TensorT<R>::scalar(static_cast<R>(loss)), logits->needs_grad);
  if (n.needs_grad) {
    auto* lp = logits;
    n.back = [&t, lp, label, K, m, z](typename TapeT<R>::Node& self) {
      auto& gl = TapeT<R>::grad_buf(lp);
      const auto& lv = t.val(lp);
      const R g = self.grad.item();
      for (int i = 0; i < K; ++i) {
        const double p = std::exp(static_cast<double>(lv[static_cast<std::size_t>(i)]) - m) / z;
        gl[static_cast<std::size_t>(i)] += g * static_cast<R>(p - (i == label ? 1.0 : 0.0));
      }
    };
  }
  return &n;
}

// Gram matrix: G[c,c'] = sum_hw phi[c,h,w] phi[c',h,w] / (C*H*W).
template <class R>
typename TapeT<R>::Ref gram(TapeT<R>& t, typename TapeT<R>::Ref phi) {
  const auto& pv = t.val(phi);
  require(pv.rank() == 3, "gram: rank");
  const int C = pv.dim(0);
  const std::size_t hw = pv.numel() / static_cast<std::size_t>(C);
  const R norm = R(1) / static_cast<R>(pv.numel());
  TensorT<R> out({C, C});
  CMatMap<R> pm(pv.data(), C, static_cast<Eigen::Index>(hw));
  MatMap<R> gm(out.data(), C, C);
  gm.noalias() = pm * pm.transpose() * norm;
  auto& n = t.make(std::move(out), phi->needs_grad);
  if (n.needs_grad) {
    auto* pp = phi;
    n.back = [&t, pp, C, hw, norm](typename TapeT<R>::Node& self) {
      const auto& pv = t.val(pp);
      auto& gp = TapeT<R>::grad_buf(pp);
      CMatMap<R> pm(pv.data(), C, static_cast<Eigen::Index>(hw));
      CMatMap<R> go(self.grad.data(), C, C);
      MatMap<R> gm(gp.data(), C, static_cast<Eigen::Index>(hw));
      gm.noalias() += (go + go.transpose()) * pm * norm;
    };
  }
  return &n;
}

// Sum of squares of all elements (squared Frobenius norm).
template <class R>
typename TapeT<R>::Ref sum_squares(TapeT<R>& t, typename TapeT<R>::Ref x) {
  const auto& xv = t.val(x);
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.numel(); ++i)
    acc += static_cast<double>(xv[i]) * static_cast<double>(xv[i]);
  auto& n = t.make(TensorT<R>::scalar(static_cast<R>(acc)), x->needs_grad);
  if (n.needs_grad) {
    auto* xp = x;
    n.back = [&t, xp](typename TapeT<R>::Node& self) {
      const auto& xv = t.val(xp);
      auto& gx = TapeT<R>::grad_buf(xp);
      const R g = R(2) * self.grad.item();
      for (std::size_t i = 0; i < xv.numel(); ++i) gx[i] += g * xv[i];
    };
  }
  return &n;
}

// Backward warp by a dense displacement field.
// out[c,y,x] = img[c, y + dvf[1,y,x], x + dvf[0,y,x]] with bilinear sampling
// and zero fill outside. Differentiable in both the image and the field;
// the zero-displacement case reproduces the image bit-exactly.
template <class R>
typename TapeT<R>::Ref warp(TapeT<R>& t, typename TapeT<R>::Ref img,
                            typename TapeT<R>::Ref dvf) {
  const auto& iv = t.val(img);
  const auto& dv = t.val(dvf);
  require(iv.rank() == 3 && dv.rank() == 3 && dv.dim(0) == 2 &&
              dv.dim(1) == iv.dim(1) && dv.dim(2) == iv.dim(2),
          "warp: shape mismatch");
  const int C = iv.dim(0), H = iv.dim(1), W = iv.dim(2);
  TensorT<R> out({C, H, W});
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const R u = static_cast<R>(x) + dv.at(0, y, x);
      const R v = static_cast<R>(y) + dv.at(1, y, x);
      const int x0 = static_cast<int>(std::floor(static_cast<double>(u)));
      const int y0 = static_cast<int>(std::floor(static_cast<double>(v)));
      const R fx = u - static_cast<R>(x0);
      const R fy = v - static_cast<R>(y0);
      for (int c = 0; c < C; ++c) {
        auto pix = [&](int yy, int xx) -> R {
          return (yy >= 0 && yy < H && xx >= 0 && xx < W) ? iv.at(c, yy, xx)
                                                          : R(0);
        };
        out.at(c, y, x) = (R(1) - fy) * ((R(1) - fx) * pix(y0, x0) +
                                         fx * pix(y0, x0 + 1)) +
                          fy * ((R(1) - fx) * pix(y0 + 1, x0) +
                                fx * pix(y0 + 1, x0 + 1));
      }
    }
  }
  auto& n = t.make(std::move(out), img->needs_grad || dvf->needs_grad);
  if (n.needs_grad) {
    auto* ip = img;
    auto* dp = dvf;
    n.back = [&t, ip, dp, C, H, W](typename TapeT<R>::Node& self) {
      const auto& iv = t.val(ip);
      const auto& dv = t.val(dp);
      TensorT<R>* gi = ip->needs_grad ? &TapeT<R>::grad_buf(ip) : nullptr;
      TensorT<R>* gd = dp->needs_grad ? &TapeT<R>::grad_buf(dp) : nullptr;
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const R u = static_cast<R>(x) + dv.at(0, y, x);
          const R v = static_cast<R>(y) + dv.at(1, y, x);
          const int x0 = static_cast<int>(std::floor(static_cast<double>(u)));
          const int y0 = static_cast<int>(std::floor(static_cast<double>(v)));
          const R fx = u - static_cast<R>(x0);
          const R fy = v - static_cast<R>(y0);
          R du_acc = R(0), dv_acc = R(0);
          for (int c = 0; c < C; ++c) {
            const R g = self.grad.at(c, y, x);
            if (g == R(0) && gi == nullptr) continue;
            auto in_b = [&](int yy, int xx) {
              return yy >= 0 && yy < H && xx >= 0 && xx < W;
            };
            auto pix = [&](int yy, int xx) -> R {
              return in_b(yy, xx) ? iv.at(c, yy, xx) : R(0);
            };
            if (gi) {
              if (in_b(y0, x0)) gi->at(c, y0, x0) += g * (R(1) - fy) * (R(1) - fx);
              if (in_b(y0, x0 + 1)) gi->at(c, y0, x0 + 1) += g * (R(1) - fy) * fx;
              if (in_b(y0 + 1, x0)) gi->at(c, y0 + 1, x0) += g * fy * (R(1) - fx);
              if (in_b(y0 + 1, x0 + 1)) gi->at(c, y0 + 1, x0 + 1) += g * fy * fx;
            }
            if (gd) {
              du_acc += g * ((R(1) - fy) * (pix(y0, x0 + 1) - pix(y0, x0)) +
                             fy * (pix(y0 + 1, x0 + 1) - pix(y0 + 1, x0)));
              dv_acc += g * ((R(1) - fx) * (pix(y0 + 1, x0) - pix(y0, x0)) +
                             fx * (pix(y0 + 1, x0 + 1) - pix(y0, x0 + 1)));
            }
          }
          if (gd) {
            gd->at(0, y, x) += du_acc;
            gd->at(1, y, x) += dv_acc;
          }
        }
      }
    };
  }
  return &n;
}

}  // namespace ops
}  // namespace cbct

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "cbct/common.hpp"

namespace cbct {

// Dense row-major tensor of rank <= 4. Rank-3 tensors follow the (C, H, W)
// convention used throughout the networks; rank-1 is used for vectors and
// rank-0 (a single scalar) for losses.
template <class R>
class TensorT {
 public:
  using value_type = R;

  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    for (int d : shape_) require(d > 0, "tensor dims must be positive");
    data_.assign(shape_numel(), R(0));
  }

  TensorT(std::vector<int> shape, std::vector<R> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_numel(), "tensor data size mismatch");
  }

  static TensorT scalar(R v) {
    TensorT t{std::vector<int>{}};
    t.data_.assign(1, v);
    return t;
  }

  static TensorT zeros_like(const TensorT& o) { return TensorT(o.shape_); }

  static TensorT full(std::vector<int> shape, R v) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }

  // Number of stored elements. A default-constructed tensor reports 0;
  // a rank-0 scalar reports 1.
  std::size_t numel() const { return data_.size(); }

  std::size_t shape_numel() const {
    std::size_t n = 1;
    for (int d : shape_) n *= static_cast<std::size_t>(d);
    return n;
  }

  R* data() { return data_.data(); }
  const R* data() const { return data_.data(); }

  R& operator[](std::size_t i) { return data_[i]; }
  R operator[](std::size_t i) const { return data_[i]; }

  // (c, h, w) accessors for rank-3 tensors.
  R& at(int c, int h, int w) {
    return data_[idx3(c, h, w)];
  }
  R at(int c, int h, int w) const { return data_[idx3(c, h, w)]; }

  // (h, w) accessors for rank-2 tensors.
  R& at(int h, int w) { return data_[idx2(h, w)]; }
  R at(int h, int w) const { return data_[idx2(h, w)]; }

  R item() const {
    require(numel() == 1, "item() on non-scalar tensor");
    return data_[0];
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  void fill(R v) { std::fill(data_.begin(), data_.end(), v); }

  void add_(const TensorT& o) {
    require(same_shape(o), "add_: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  }

  void scale_(R s) {
    for (auto& v : data_) v *= s;
  }

  bool all_finite() const {
    for (R v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i)
      os << (i ? "," : "") << shape_[i];
    os << ")";
    return os.str();
  }

  template <class R2>
  TensorT<R2> cast() const {
    std::vector<R2> d(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i)
      d[i] = static_cast<R2>(data_[i]);
    return TensorT<R2>(shape_, std::move(d));
  }

 private:
  std::size_t idx2(int h, int w) const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(shape_[1]) +
           static_cast<std::size_t>(w);
  }

  std::size_t idx3(int c, int h, int w) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(shape_[1]) +
            static_cast<std::size_t>(h)) *
               static_cast<std::size_t>(shape_[2]) +
           static_cast<std::size_t>(w);
  }

  std::vector<int> shape_;
  std::vector<R> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <class R>
TensorT<R> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                         double hi = 1.0) {
  TensorT<R> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<R>(rng.uniform(lo, hi));
  return t;
}

}  // namespace cbct

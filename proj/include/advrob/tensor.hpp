#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advrob/error.hpp"

namespace advrob {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major tensor. The first extent is the batch dimension wherever
/// a tensor holds a batch (images are [N, C, H, W], logits [N, K]).
template <std::floating_point Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real{0})
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}
  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_volume(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::span<Real> span() noexcept { return data_; }
  std::span<const Real> span() const noexcept { return data_; }
  std::vector<Real>& values() noexcept { return data_; }
  const std::vector<Real>& values() const noexcept { return data_; }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  const Real& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Number of elements per leading-axis entry (per sample for batches).
  std::size_t row_size() const {
    if (shape_.empty()) return 1;
    return shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  }
  std::size_t batch() const { return shape_.empty() ? 1 : shape_[0]; }

  std::span<Real> row(std::size_t i) {
    const std::size_t n = row_size();
    return std::span<Real>(data_).subspan(i * n, n);
  }
  std::span<const Real> row(std::size_t i) const {
    const std::size_t n = row_size();
    return std::span<const Real>(data_).subspan(i * n, n);
  }

  /// Same data, different shape; the volume must match.
  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  void reshape(Shape shape) {
    if (shape_volume(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  /// Rows [first, first + count) of the leading axis.
  Tensor slice_rows(std::size_t first, std::size_t count) const {
    Shape s = shape_;
    s.at(0) = count;
    const std::size_t n = row_size();
    std::vector<Real> d(data_.begin() + static_cast<std::ptrdiff_t>(first * n),
                        data_.begin() + static_cast<std::ptrdiff_t>((first + count) * n));
    return Tensor(std::move(s), std::move(d));
  }

  /// Rows picked by index, in the given order.
  Tensor gather_rows(std::span<const std::size_t> idx) const {
    Shape s = shape_;
    s.at(0) = idx.size();
    const std::size_t n = row_size();
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(idx[i] * n), n,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    return out;
  }

  template <std::floating_point Other>
  Tensor<Other> cast() const {
    std::vector<Other> d(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(d));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

/// Batch shape with a leading batch extent prepended to a per-sample shape.
inline Shape batched(std::size_t n, const Shape& sample) {
  Shape s;
  s.reserve(sample.size() + 1);
  s.push_back(n);
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

inline Shape sample_shape(const Shape& batch_shape) {
  if (batch_shape.empty()) return {};
  return Shape(batch_shape.begin() + 1, batch_shape.end());
}

}  // namespace advrob

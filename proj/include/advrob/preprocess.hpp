#pragma once

#include <cfenv>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advrob/error.hpp"
#include "advrob/tensor.hpp"

namespace advrob {

enum class TransformKind { Identity, MeanPixelSubtract, PerChannelNormalize };

inline std::string_view to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Identity: return "identity";
    case TransformKind::MeanPixelSubtract: return "mean_pixel_subtract";
    case TransformKind::PerChannelNormalize: return "per_channel_normalize";
  }
  return "?";
}

inline TransformKind parse_transform_kind(std::string_view s) {
  if (s == "identity") return TransformKind::Identity;
  if (s == "mean_pixel_subtract") return TransformKind::MeanPixelSubtract;
  if (s == "per_channel_normalize") return TransformKind::PerChannelNormalize;
  throw InvalidArgument("unknown transform kind '" + std::string(s) + "'");
}

/// Model-specific input normalization applied in front of the first layer.
///
///   Identity             z = x
///   MeanPixelSubtract    z = x - mean[c,h,w]       (mean has the sample shape)
///   PerChannelNormalize  z = (x - mean[c]) / std[c]
///
/// All three are affine, so a perturbation d in [0,1] space shows up as
/// amplification_factor() * d in network space.
template <std::floating_point Real>
class Transform {
 public:
  static Transform identity(std::size_t channels) {
    Transform t;
    t.kind_ = TransformKind::Identity;
    t.channels_ = channels;
    return t;
  }

  static Transform mean_pixel_subtract(Tensor<Real> mean) {
    if (mean.rank() != 3) throw ShapeError("mean-pixel transform needs a [C,H,W] mean, got " + shape_str(mean.shape()));
    if (!mean.all_finite()) throw InvalidArgument("mean-pixel transform has non-finite mean");
    Transform t;
    t.kind_ = TransformKind::MeanPixelSubtract;
    t.channels_ = mean.extent(0);
    t.mean_ = std::move(mean);
    return t;
  }

  static Transform per_channel_normalize(std::vector<Real> mean, std::vector<Real> std) {
    if (mean.size() != std.size() || mean.empty())
      throw ShapeError("per-channel transform needs matching non-empty mean/std");
    for (Real s : std)
      if (!(s > Real(0)) || !std::isfinite(s)) throw InvalidArgument("per-channel std entries must be positive");
    Transform t;
    t.kind_ = TransformKind::PerChannelNormalize;
    const std::size_t c = mean.size();
    t.channels_ = c;
    t.mean_ = Tensor<Real>({c}, std::move(mean));
    t.std_ = Tensor<Real>({c}, std::move(std));
    return t;
  }

  TransformKind kind() const noexcept { return kind_; }
  std::size_t channels() const noexcept { return channels_; }
  const Tensor<Real>& mean() const noexcept { return mean_; }
  const Tensor<Real>& stddev() const noexcept { return std_; }

  /// Throws when a per-sample shape cannot be fed through this transform.
  void check_sample_shape(const Shape& s) const {
    if (s.empty() || s[0] != channels_)
      throw ShapeError("transform has " + std::to_string(channels_) + " channels, input sample is " + shape_str(s));
    if (kind_ == TransformKind::MeanPixelSubtract && mean_.shape() != s)
      throw ShapeError("mean-pixel shape " + shape_str(mean_.shape()) + " does not match input " + shape_str(s));
  }

  Tensor<Real> apply(const Tensor<Real>& x) const {
    return map(x, [](Real v, Real m, Real s) { return (v - m) / s; },
               [](Real v, Real m) { return v - m; });
  }

  Tensor<Real> invert(const Tensor<Real>& z) const {
    return map(z, [](Real v, Real m, Real s) { return v * s + m; },
               [](Real v, Real m) { return v + m; });
  }

  /// Pull a network-space gradient back to [0,1] space.
  Tensor<Real> backward(const Tensor<Real>& grad_z) const {
    return map(grad_z, [](Real g, Real, Real s) { return g / s; }, [](Real g, Real) { return g; });
  }

  /// Per-channel factor by which apply() scales a perturbation.
  std::vector<Real> amplification_factor() const {
    std::vector<Real> f(channels_, Real(1));
    if (kind_ == TransformKind::PerChannelNormalize)
      for (std::size_t c = 0; c < channels_; ++c) f[c] = Real(1) / std_[c];
    return f;
  }

 private:
  template <class Affine, class Shift>
  Tensor<Real> map(const Tensor<Real>& x, Affine affine, Shift shift) const {
    check_sample_shape(sample_shape(x.shape()));
    if (kind_ == TransformKind::Identity) return x;
    Tensor<Real> out(x.shape());
    const std::size_t row = x.row_size();
    const std::size_t per_c = row / channels_;
    for (std::size_t b = 0; b < x.batch(); ++b) {
      const Real* in = x.data() + b * row;
      Real* o = out.data() + b * row;
      if (kind_ == TransformKind::MeanPixelSubtract) {
        for (std::size_t i = 0; i < row; ++i) o[i] = shift(in[i], mean_[i]);
      } else {
        for (std::size_t c = 0; c < channels_; ++c)
          for (std::size_t i = c * per_c; i < (c + 1) * per_c; ++i) o[i] = affine(in[i], mean_[c], std_[c]);
      }
    }
    return out;
  }

  TransformKind kind_ = TransformKind::Identity;
  std::size_t channels_ = 0;
  Tensor<Real> mean_;
  Tensor<Real> std_;
};

/// Element-wise image of the pixel range [0,1] under a transform, for one
/// sample of shape `sample`. Used as the valid data range in network space.
template <std::floating_point Real>
std::pair<Tensor<Real>, Tensor<Real>> transformed_unit_box(const Transform<Real>& t, const Shape& sample) {
  Tensor<Real> lo(batched(1, sample), Real(0));
  Tensor<Real> hi(batched(1, sample), Real(1));
  return {t.apply(lo), t.apply(hi)};
}

/// v -> round_half_even(255 v) / 255. Values must already lie in [0,1].
template <std::floating_point Real>
Tensor<Real> quantize_round_even(const Tensor<Real>& x) {
  Tensor<Real> out(x.shape());
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real v = x[i];
    if (!(v >= Real(0) && v <= Real(1))) {
      std::fesetround(saved);
      throw InvalidArgument("quantize_round_even: value " + std::to_string(v) + " at index " +
                            std::to_string(i) + " outside [0,1]");
    }
    out[i] = std::nearbyint(v * Real(255)) / Real(255);
  }
  std::fesetround(saved);
  return out;
}

}  // namespace advrob

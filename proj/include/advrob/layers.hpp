#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "advrob/error.hpp"
#include "advrob/tensor.hpp"

namespace advrob {

/// 2-D convolution over [C, H, W] samples with symmetric zero padding.
/// weight is [out, in, kh, kw], bias is [out].
template <std::floating_point Real>
struct Conv2D {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor<Real> weight;
  Tensor<Real> bias;

  static Conv2D make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                     std::size_t padding = 0) {
    return Conv2D{in,     out,     kernel,
                  kernel, stride,  padding,
                  Tensor<Real>({out, in, kernel, kernel}), Tensor<Real>({out})};
  }
};

/// Fully connected layer; weight is [out, in].
template <std::floating_point Real>
struct Dense {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  Tensor<Real> weight;
  Tensor<Real> bias;

  static Dense make(std::size_t in, std::size_t out) {
    return Dense{in, out, Tensor<Real>({out, in}), Tensor<Real>({out})};
  }
};

struct ReLU {};

struct MaxPool2D {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

struct AvgPool2D {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

/// Batch normalization with frozen running statistics. gamma and beta are
/// trainable; running_mean and running_var never receive gradients.
/// Works per channel on [C, H, W] samples and per feature on [F] samples.
template <std::floating_point Real>
struct BatchNormInference {
  std::size_t channels = 0;
  Tensor<Real> gamma;
  Tensor<Real> beta;
  Tensor<Real> running_mean;
  Tensor<Real> running_var;
  Real epsilon = Real(1e-5);

  static BatchNormInference make(std::size_t c) {
    return BatchNormInference{c,
                              Tensor<Real>({c}, Real(1)),
                              Tensor<Real>({c}, Real(0)),
                              Tensor<Real>({c}, Real(0)),
                              Tensor<Real>({c}, Real(1)),
                              Real(1e-5)};
  }
};

struct Flatten {};

template <std::floating_point Real>
using Layer =
    std::variant<Conv2D<Real>, Dense<Real>, ReLU, MaxPool2D, AvgPool2D, BatchNormInference<Real>, Flatten>;

template <class... Fs>
struct overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

template <std::floating_point Real>
std::string_view layer_kind(const Layer<Real>& layer) {
  return std::visit(overloaded{
                        [](const Conv2D<Real>&) { return std::string_view("conv2d"); },
                        [](const Dense<Real>&) { return std::string_view("dense"); },
                        [](const ReLU&) { return std::string_view("relu"); },
                        [](const MaxPool2D&) { return std::string_view("maxpool2d"); },
                        [](const AvgPool2D&) { return std::string_view("avgpool2d"); },
                        [](const BatchNormInference<Real>&) { return std::string_view("batchnorm"); },
                        [](const Flatten&) { return std::string_view("flatten"); },
                    },
                    layer);
}

/// Trainable tensors of a layer, in a fixed order (weight then bias,
/// gamma then beta).
template <std::floating_point Real>
std::vector<Tensor<Real>*> trainable_tensors(Layer<Real>& layer) {
  return std::visit(overloaded{
                        [](Conv2D<Real>& l) { return std::vector<Tensor<Real>*>{&l.weight, &l.bias}; },
                        [](Dense<Real>& l) { return std::vector<Tensor<Real>*>{&l.weight, &l.bias}; },
                        [](BatchNormInference<Real>& l) {
                          return std::vector<Tensor<Real>*>{&l.gamma, &l.beta};
                        },
                        [](auto&) { return std::vector<Tensor<Real>*>{}; },
                    },
                    layer);
}

template <std::floating_point Real>
std::vector<const Tensor<Real>*> trainable_tensors(const Layer<Real>& layer) {
  auto v = trainable_tensors(const_cast<Layer<Real>&>(layer));
  return std::vector<const Tensor<Real>*>(v.begin(), v.end());
}

namespace detail {

inline std::size_t pooled_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
  return in < kernel ? 0 : (in - kernel) / stride + 1;
}

inline std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding) {
  const std::size_t padded = in + 2 * padding;
  return padded < kernel ? 0 : (padded - kernel) / stride + 1;
}

}  // namespace detail

/// Per-sample output shape, or a ShapeError describing why `in` is not
/// an acceptable input.
template <std::floating_point Real>
Shape layer_output_shape(const Layer<Real>& layer, const Shape& in) {
  return std::visit(
      overloaded{
          [&](const Conv2D<Real>& l) -> Shape {
            if (in.size() != 3 || in[0] != l.in_channels)
              throw ShapeError("conv2d expects [" + std::to_string(l.in_channels) + ",H,W], got " +
                               shape_str(in));
            if (l.weight.shape() != Shape{l.out_channels, l.in_channels, l.kernel_h, l.kernel_w} ||
                l.bias.shape() != Shape{l.out_channels})
              throw ShapeError("conv2d parameter shapes inconsistent: weight " +
                               shape_str(l.weight.shape()) + ", bias " + shape_str(l.bias.shape()));
            if (l.stride == 0) throw ShapeError("conv2d stride must be positive");
            const auto oh = detail::conv_extent(in[1], l.kernel_h, l.stride, l.padding);
            const auto ow = detail::conv_extent(in[2], l.kernel_w, l.stride, l.padding);
            if (oh == 0 || ow == 0) throw ShapeError("conv2d kernel larger than input " + shape_str(in));
            return {l.out_channels, oh, ow};
          },
          [&](const Dense<Real>& l) -> Shape {
            if (in.size() != 1 || in[0] != l.in_features)
              throw ShapeError("dense expects [" + std::to_string(l.in_features) + "], got " +
                               shape_str(in));
            if (l.weight.shape() != Shape{l.out_features, l.in_features} ||
                l.bias.shape() != Shape{l.out_features})
              throw ShapeError("dense parameter shapes inconsistent: weight " +
                               shape_str(l.weight.shape()) + ", bias " + shape_str(l.bias.shape()));
            return {l.out_features};
          },
          [&](const ReLU&) -> Shape { return in; },
          [&](const auto& l) -> Shape
            requires std::is_same_v<std::decay_t<decltype(l)>, MaxPool2D> ||
                     std::is_same_v<std::decay_t<decltype(l)>, AvgPool2D>
          {
            if (in.size() != 3) throw ShapeError("pooling expects [C,H,W], got " + shape_str(in));
            if (l.kernel == 0 || l.stride == 0) throw ShapeError("pooling kernel and stride must be positive");
            const auto oh = detail::pooled_extent(in[1], l.kernel, l.stride);
            const auto ow = detail::pooled_extent(in[2], l.kernel, l.stride);
            if (oh == 0 || ow == 0) throw ShapeError("pooling window larger than input " + shape_str(in));
            return {in[0], oh, ow};
          },
          [&](const BatchNormInference<Real>& l) -> Shape {
            if (in.empty() || in[0] != l.channels)
              throw ShapeError("batchnorm expects " + std::to_string(l.channels) +
                               " channels, got " + shape_str(in));
            for (const auto* t : {&l.gamma, &l.beta, &l.running_mean, &l.running_var})
              if (t->shape() != Shape{l.channels})
                throw ShapeError("batchnorm parameter shape " + shape_str(t->shape()));
            for (std::size_t c = 0; c < l.channels; ++c)
              if (!(l.running_var[c] > Real(0)))
                throw InvalidArgument("batchnorm running variance must be strictly positive");
            return in;
          },
          [&](const Flatten&) -> Shape { return {shape_volume(in)}; },
      },
      layer);
}

namespace detail {

/// im2col for one [C, H, W] sample into [C*kh*kw, oh*ow].
template <class Real>
void im2col(const Real* x, std::size_t c, std::size_t h, std::size_t w, const Conv2D<Real>& l,
            std::size_t oh, std::size_t ow, Real* col) {
  const std::size_t p_total = oh * ow;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < l.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < l.kernel_w; ++kx) {
        Real* row = col + ((ci * l.kernel_h + ky) * l.kernel_w + kx) * p_total;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                                    static_cast<std::ptrdiff_t>(l.padding);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                                      static_cast<std::ptrdiff_t>(l.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            row[oy * ow + ox] = inside ? x[(ci * h + static_cast<std::size_t>(iy)) * w +
                                           static_cast<std::size_t>(ix)]
                                       : Real(0);
          }
        }
      }
}

template <class Real>
void col2im_add(const Real* col, std::size_t c, std::size_t h, std::size_t w, const Conv2D<Real>& l,
                std::size_t oh, std::size_t ow, Real* x) {
  const std::size_t p_total = oh * ow;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < l.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < l.kernel_w; ++kx) {
        const Real* row = col + ((ci * l.kernel_h + ky) * l.kernel_w + kx) * p_total;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) -
                                    static_cast<std::ptrdiff_t>(l.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * l.stride + kx) -
                                      static_cast<std::ptrdiff_t>(l.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                row[oy * ow + ox];
          }
        }
      }
}

template <class Real>
Real bn_scale(const BatchNormInference<Real>& l, std::size_t c) {
  return l.gamma[c] / std::sqrt(l.running_var[c] + l.epsilon);
}

}  // namespace detail

/// Forward pass of one layer over a batch. `out_shape` is the per-sample
/// output shape already computed by layer_output_shape.
template <std::floating_point Real>
Tensor<Real> layer_forward(const Layer<Real>& layer, const Tensor<Real>& in, const Shape& out_shape) {
  const std::size_t n = in.batch();
  const Shape in_s = sample_shape(in.shape());
  Tensor<Real> out(batched(n, out_shape));
  const std::size_t in_row = in.row_size();
  const std::size_t out_row = out.row_size();

  std::visit(
      overloaded{
          [&](const Conv2D<Real>& l) {
            const std::size_t oh = out_shape[1], ow = out_shape[2];
            const std::size_t p_total = oh * ow;
            const std::size_t k_total = l.in_channels * l.kernel_h * l.kernel_w;
            std::vector<Real> col(k_total * p_total);
            for (std::size_t b = 0; b < n; ++b) {
              detail::im2col(in.data() + b * in_row, in_s[0], in_s[1], in_s[2], l, oh, ow, col.data());
              Real* y = out.data() + b * out_row;
              for (std::size_t o = 0; o < l.out_channels; ++o) {
                Real* yo = y + o * p_total;
                std::fill_n(yo, p_total, l.bias[o]);
                const Real* wo = l.weight.data() + o * k_total;
                for (std::size_t k = 0; k < k_total; ++k) {
                  const Real wk = wo[k];
                  const Real* ck = col.data() + k * p_total;
                  for (std::size_t p = 0; p < p_total; ++p) yo[p] += wk * ck[p];
                }
              }
            }
          },
          [&](const Dense<Real>& l) {
            for (std::size_t b = 0; b < n; ++b) {
              const Real* x = in.data() + b * in_row;
              Real* y = out.data() + b * out_row;
              for (std::size_t o = 0; o < l.out_features; ++o) {
                const Real* wo = l.weight.data() + o * l.in_features;
                Real acc = Real(0);
                for (std::size_t i = 0; i < l.in_features; ++i) acc += wo[i] * x[i];
                y[o] = acc + l.bias[o];
              }
            }
          },
          [&](const ReLU&) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > Real(0) ? in[i] : Real(0);
          },
          [&](const MaxPool2D& l) {
            const std::size_t c = in_s[0], h = in_s[1], w = in_s[2];
            const std::size_t oh = out_shape[1], ow = out_shape[2];
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t ci = 0; ci < c; ++ci) {
                const Real* x = in.data() + b * in_row + ci * h * w;
                Real* y = out.data() + b * out_row + ci * oh * ow;
                for (std::size_t oy = 0; oy < oh; ++oy)
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    Real best = x[(oy * l.stride) * w + ox * l.stride];
                    for (std::size_t ky = 0; ky < l.kernel; ++ky)
                      for (std::size_t kx = 0; kx < l.kernel; ++kx)
                        best = std::max(best, x[(oy * l.stride + ky) * w + ox * l.stride + kx]);
                    y[oy * ow + ox] = best;
                  }
              }
          },
          [&](const AvgPool2D& l) {
            const std::size_t c = in_s[0], h = in_s[1], w = in_s[2];
            const std::size_t oh = out_shape[1], ow = out_shape[2];
            const Real inv = Real(1) / static_cast<Real>(l.kernel * l.kernel);
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t ci = 0; ci < c; ++ci) {
                const Real* x = in.data() + b * in_row + ci * h * w;
                Real* y = out.data() + b * out_row + ci * oh * ow;
                for (std::size_t oy = 0; oy < oh; ++oy)
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    Real acc = Real(0);
                    for (std::size_t ky = 0; ky < l.kernel; ++ky)
                      for (std::size_t kx = 0; kx < l.kernel; ++kx)
                        acc += x[(oy * l.stride + ky) * w + ox * l.stride + kx];
                    y[oy * ow + ox] = acc * inv;
                  }
              }
          },
          [&](const BatchNormInference<Real>& l) {
            const std::size_t per_c = in_row / l.channels;
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t c = 0; c < l.channels; ++c) {
                const Real scale = detail::bn_scale(l, c);
                const Real* x = in.data() + b * in_row + c * per_c;
                Real* y = out.data() + b * out_row + c * per_c;
                for (std::size_t i = 0; i < per_c; ++i)
                  y[i] = (x[i] - l.running_mean[c]) * scale + l.beta[c];
              }
          },
          [&](const Flatten&) { std::copy(in.values().begin(), in.values().end(), out.values().begin()); },
      },
      layer);
  return out;
}

/// Backward pass of one layer. Returns the gradient with respect to the
/// layer input; when `param_grads` is non-null the parameter gradients
/// (matching trainable_tensors order) are accumulated into it.
template <std::floating_point Real>
Tensor<Real> layer_backward(const Layer<Real>& layer, const Tensor<Real>& in, const Tensor<Real>& out,
                            const Tensor<Real>& grad_out, std::vector<Tensor<Real>>* param_grads) {
  const std::size_t n = in.batch();
  const Shape in_s = sample_shape(in.shape());
  const Shape out_s = sample_shape(out.shape());
  Tensor<Real> grad_in(in.shape());
  const std::size_t in_row = in.row_size();
  const std::size_t out_row = out.row_size();

  std::visit(
      overloaded{
          [&](const Conv2D<Real>& l) {
            const std::size_t oh = out_s[1], ow = out_s[2];
            const std::size_t p_total = oh * ow;
            const std::size_t k_total = l.in_channels * l.kernel_h * l.kernel_w;
            std::vector<Real> col(k_total * p_total);
            std::vector<Real> gcol(k_total * p_total);
            for (std::size_t b = 0; b < n; ++b) {
              const Real* gy = grad_out.data() + b * out_row;
              if (param_grads) {
                detail::im2col(in.data() + b * in_row, in_s[0], in_s[1], in_s[2], l, oh, ow, col.data());
                Real* gw = (*param_grads)[0].data();
                Real* gb = (*param_grads)[1].data();
                for (std::size_t o = 0; o < l.out_channels; ++o) {
                  const Real* gyo = gy + o * p_total;
                  Real sb = Real(0);
                  for (std::size_t p = 0; p < p_total; ++p) sb += gyo[p];
                  gb[o] += sb;
                  for (std::size_t k = 0; k < k_total; ++k) {
                    const Real* ck = col.data() + k * p_total;
                    Real acc = Real(0);
                    for (std::size_t p = 0; p < p_total; ++p) acc += gyo[p] * ck[p];
                    gw[o * k_total + k] += acc;
                  }
                }
              }
              std::fill(gcol.begin(), gcol.end(), Real(0));
              for (std::size_t o = 0; o < l.out_channels; ++o) {
                const Real* gyo = gy + o * p_total;
                const Real* wo = l.weight.data() + o * k_total;
                for (std::size_t k = 0; k < k_total; ++k) {
                  const Real wk = wo[k];
                  Real* gk = gcol.data() + k * p_total;
                  for (std::size_t p = 0; p < p_total; ++p) gk[p] += wk * gyo[p];
                }
              }
              detail::col2im_add(gcol.data(), in_s[0], in_s[1], in_s[2], l, oh, ow,
                                 grad_in.data() + b * in_row);
            }
          },
          [&](const Dense<Real>& l) {
            for (std::size_t b = 0; b < n; ++b) {
              const Real* x = in.data() + b * in_row;
              const Real* gy = grad_out.data() + b * out_row;
              Real* gx = grad_in.data() + b * in_row;
              for (std::size_t o = 0; o < l.out_features; ++o) {
                const Real g = gy[o];
                const Real* wo = l.weight.data() + o * l.in_features;
                for (std::size_t i = 0; i < l.in_features; ++i) gx[i] += wo[i] * g;
              }
              if (param_grads) {
                Real* gw = (*param_grads)[0].data();
                Real* gb = (*param_grads)[1].data();
                for (std::size_t o = 0; o < l.out_features; ++o) {
                  const Real g = gy[o];
                  gb[o] += g;
                  Real* gwo = gw + o * l.in_features;
                  for (std::size_t i = 0; i < l.in_features; ++i) gwo[i] += g * x[i];
                }
              }
            }
          },
          [&](const ReLU&) {
            // Subgradient at exactly 0 is 0.
            for (std::size_t i = 0; i < in.size(); ++i) grad_in[i] = in[i] > Real(0) ? grad_out[i] : Real(0);
          },
          [&](const MaxPool2D& l) {
            const std::size_t c = in_s[0], h = in_s[1], w = in_s[2];
            const std::size_t oh = out_s[1], ow = out_s[2];
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t ci = 0; ci < c; ++ci) {
                const Real* x = in.data() + b * in_row + ci * h * w;
                const Real* gy = grad_out.data() + b * out_row + ci * oh * ow;
                Real* gx = grad_in.data() + b * in_row + ci * h * w;
                for (std::size_t oy = 0; oy < oh; ++oy)
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    // Ties route to the first maximal element in scan order.
                    std::size_t arg = (oy * l.stride) * w + ox * l.stride;
                    for (std::size_t ky = 0; ky < l.kernel; ++ky)
                      for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                        const std::size_t idx = (oy * l.stride + ky) * w + ox * l.stride + kx;
                        if (x[idx] > x[arg]) arg = idx;
                      }
                    gx[arg] += gy[oy * ow + ox];
                  }
              }
          },
          [&](const AvgPool2D& l) {
            const std::size_t c = in_s[0], h = in_s[1], w = in_s[2];
            const std::size_t oh = out_s[1], ow = out_s[2];
            const Real inv = Real(1) / static_cast<Real>(l.kernel * l.kernel);
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t ci = 0; ci < c; ++ci) {
                const Real* gy = grad_out.data() + b * out_row + ci * oh * ow;
                Real* gx = grad_in.data() + b * in_row + ci * h * w;
                for (std::size_t oy = 0; oy < oh; ++oy)
                  for (std::size_t ox = 0; ox < ow; ++ox) {
                    const Real g = gy[oy * ow + ox] * inv;
                    for (std::size_t ky = 0; ky < l.kernel; ++ky)
                      for (std::size_t kx = 0; kx < l.kernel; ++kx)
                        gx[(oy * l.stride + ky) * w + ox * l.stride + kx] += g;
                  }
              }
          },
          [&](const BatchNormInference<Real>& l) {
            const std::size_t per_c = in_row / l.channels;
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t c = 0; c < l.channels; ++c) {
                const Real scale = detail::bn_scale(l, c);
                const Real inv_std = Real(1) / std::sqrt(l.running_var[c] + l.epsilon);
                const Real* x = in.data() + b * in_row + c * per_c;
                const Real* gy = grad_out.data() + b * out_row + c * per_c;
                Real* gx = grad_in.data() + b * in_row + c * per_c;
                Real g_gamma = Real(0), g_beta = Real(0);
                for (std::size_t i = 0; i < per_c; ++i) {
                  gx[i] = gy[i] * scale;
                  g_gamma += gy[i] * (x[i] - l.running_mean[c]) * inv_std;
                  g_beta += gy[i];
                }
                if (param_grads) {
                  (*param_grads)[0][c] += g_gamma;
                  (*param_grads)[1][c] += g_beta;
                }
              }
          },
          [&](const Flatten&) {
            std::copy(grad_out.values().begin(), grad_out.values().end(), grad_in.values().begin());
          },
      },
      layer);
  return grad_in;
}

}  // namespace advrob

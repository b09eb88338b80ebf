#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "advrob/error.hpp"
#include "advrob/layers.hpp"
#include "advrob/tensor.hpp"

namespace advrob {

/// Class indices, one per batch element.
using LabelBatch = std::vector<std::size_t>;

/// Shape problem located at a specific layer of a network. The index is
/// the layer whose input did not match (layer count means "network output").
class LayerShapeError : public ShapeError {
 public:
  LayerShapeError(std::size_t layer_index, Shape expected, Shape actual, const std::string& detail)
      : ShapeError("layer " + std::to_string(layer_index) + ": expected " + shape_str(expected) +
                   ", got " + shape_str(actual) + (detail.empty() ? "" : " (" + detail + ")")),
        layer_index_(layer_index),
        expected_(std::move(expected)),
        actual_(std::move(actual)) {}

  std::size_t layer_index() const noexcept { return layer_index_; }
  const Shape& expected() const noexcept { return expected_; }
  const Shape& actual() const noexcept { return actual_; }

 private:
  std::size_t layer_index_;
  Shape expected_;
  Shape actual_;
};

/// Per-layer gradients, parallel to each layer's trainable_tensors().
template <std::floating_point Real>
using ParamGrads = std::vector<std::vector<Tensor<Real>>>;

/// Sequential feed-forward classifier. Immutable through the const
/// interface, so concurrent forward/gradient calls are safe.
template <std::floating_point Real>
class Network {
 public:
  Network() = default;

  Network(Shape input_shape, std::size_t num_classes, std::vector<Layer<Real>> layers)
      : input_shape_(std::move(input_shape)), num_classes_(num_classes), layers_(std::move(layers)) {
    validate();
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  const std::vector<Layer<Real>>& layers() const noexcept { return layers_; }
  std::size_t input_size() const { return shape_volume(input_shape_); }

  /// Per-sample shape entering layer i; i == layers().size() is the output.
  const Shape& activation_shape(std::size_t i) const { return shapes_.at(i); }

  /// Mutable access for trainers and loaders. Call validate() after
  /// changing anything that affects shapes.
  std::vector<Layer<Real>>& mutable_layers() noexcept { return layers_; }

  void validate() {
    if (num_classes_ == 0) throw InvalidArgument("network needs at least one class");
    shapes_.clear();
    shapes_.push_back(input_shape_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      try {
        shapes_.push_back(layer_output_shape(layers_[i], shapes_.back()));
      } catch (const ShapeError& e) {
        throw LayerShapeError(i, {}, shapes_.back(), std::string(layer_kind<Real>(layers_[i])) + ": " + e.what());
      }
    }
    if (shapes_.back() != Shape{num_classes_}) {
      throw LayerShapeError(layers_.size(), Shape{num_classes_}, shapes_.back(), "final output");
    }
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& l : layers_)
      for (const auto* t : trainable_tensors(l)) total += t->size();
    return total;
  }

  /// Zero-filled gradient holder with the network's trainable shapes.
  ParamGrads<Real> zero_grads() const {
    ParamGrads<Real> g;
    g.reserve(layers_.size());
    for (const auto& l : layers_) {
      std::vector<Tensor<Real>> lg;
      for (const auto* t : trainable_tensors(l)) lg.emplace_back(t->shape());
      g.push_back(std::move(lg));
    }
    return g;
  }

  void check_input(const Tensor<Real>& batch) const {
    if (batch.rank() != input_shape_.size() + 1 || sample_shape(batch.shape()) != input_shape_) {
      throw LayerShapeError(0, input_shape_, batch.rank() ? sample_shape(batch.shape()) : Shape{},
                            "network input");
    }
    if (!batch.all_finite()) throw NonFiniteError("network input contains non-finite values");
  }

  /// Activations entering every layer plus the logits (last element).
  std::vector<Tensor<Real>> forward_trace(const Tensor<Real>& batch) const {
    check_input(batch);
    std::vector<Tensor<Real>> acts;
    acts.reserve(layers_.size() + 1);
    acts.push_back(batch);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      acts.push_back(layer_forward(layers_[i], acts.back(), shapes_[i + 1]));
      if (!acts.back().all_finite())
        throw NonFiniteError("layer " + std::to_string(i) + " (" + std::string(layer_kind<Real>(layers_[i])) +
                             ") produced non-finite output");
    }
    return acts;
  }

  /// Reverse pass from dL/dlogits. Returns dL/dinput; parameter gradients
  /// are accumulated into `param_grads` when it is non-null.
  Tensor<Real> backward(const std::vector<Tensor<Real>>& acts, Tensor<Real> grad,
                        ParamGrads<Real>* param_grads) const {
    for (std::size_t i = layers_.size(); i-- > 0;) {
      grad = layer_backward(layers_[i], acts[i], acts[i + 1], grad, param_grads ? &(*param_grads)[i] : nullptr);
      if (!grad.all_finite())
        throw NonFiniteError("gradient through layer " + std::to_string(i) + " (" +
                             std::string(layer_kind<Real>(layers_[i])) + ") is non-finite");
    }
    return grad;
  }

 private:
  Shape input_shape_;
  std::size_t num_classes_ = 0;
  std::vector<Layer<Real>> layers_;
  std::vector<Shape> shapes_;
};

/// Pre-softmax logits, [N, num_classes].
template <std::floating_point Real>
Tensor<Real> forward(const Network<Real>& net, const Tensor<Real>& batch) {
  return net.forward_trace(batch).back();
}

namespace detail {

template <std::floating_point Real>
void check_labels(const Tensor<Real>& logits, const LabelBatch& labels) {
  if (logits.rank() != 2) throw ShapeError("logits must be [N, K], got " + shape_str(logits.shape()));
  if (labels.size() != logits.extent(0))
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(logits.extent(0)));
  const std::size_t k = logits.extent(1);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= k)
      throw InvalidArgument("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                            " outside [0, " + std::to_string(k) + ")");
}

}  // namespace detail

/// Row-wise softmax with max subtraction.
template <std::floating_point Real>
Tensor<Real> softmax(const Tensor<Real>& logits) {
  Tensor<Real> out(logits.shape());
  const std::size_t k = logits.row_size();
  for (std::size_t b = 0; b < logits.batch(); ++b) {
    auto z = logits.row(b);
    auto p = out.row(b);
    const Real m = *std::max_element(z.begin(), z.end());
    Real s = Real(0);
    for (std::size_t j = 0; j < k; ++j) s += (p[j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < k; ++j) p[j] /= s;
  }
  return out;
}

/// -log softmax(logits)[label] for each sample, computed as
/// logsumexp(z - max) - (z_label - max) so nothing overflows.
template <std::floating_point Real>
std::vector<Real> per_sample_cross_entropy(const Tensor<Real>& logits, const LabelBatch& labels) {
  detail::check_labels(logits, labels);
  std::vector<Real> losses(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    auto z = logits.row(b);
    const Real m = *std::max_element(z.begin(), z.end());
    Real s = Real(0);
    for (Real v : z) s += std::exp(v - m);
    losses[b] = std::log(s) - (z[labels[b]] - m);
  }
  return losses;
}

/// Mean cross-entropy over the batch.
template <std::floating_point Real>
Real cross_entropy(const Tensor<Real>& logits, const LabelBatch& labels) {
  const auto losses = per_sample_cross_entropy(logits, labels);
  if (losses.empty()) throw InvalidArgument("cross_entropy on an empty batch");
  Real total = Real(0);
  for (Real l : losses) total += l;
  return total / static_cast<Real>(losses.size());
}

/// Per-sample argmax; ties go to the lowest class index.
template <std::floating_point Real>
LabelBatch argmax_rows(const Tensor<Real>& logits) {
  LabelBatch out(logits.batch());
  for (std::size_t b = 0; b < out.size(); ++b) {
    auto z = logits.row(b);
    out[b] = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

template <std::floating_point Real>
LabelBatch predict(const Network<Real>& net, const Tensor<Real>& batch) {
  return argmax_rows(forward(net, batch));
}

template <std::floating_point Real>
struct LossAndGradient {
  std::vector<Real> losses;  // per sample
  Tensor<Real> gradient;     // same shape as the input batch
  LabelBatch predictions;    // argmax of the logits at the evaluated point
};

/// Per-sample losses and the gradient of each sample's own loss with
/// respect to its input. Samples never interact, so the result for sample i
/// does not depend on the rest of the batch.
template <std::floating_point Real>
LossAndGradient<Real> loss_and_input_gradient(const Network<Real>& net, const Tensor<Real>& batch,
                                              const LabelBatch& labels) {
  auto acts = net.forward_trace(batch);
  const Tensor<Real>& logits = acts.back();
  LossAndGradient<Real> r;
  r.losses = per_sample_cross_entropy(logits, labels);
  r.predictions = argmax_rows(logits);
  Tensor<Real> g = softmax(logits);
  const std::size_t k = g.row_size();
  for (std::size_t b = 0; b < labels.size(); ++b) g[b * k + labels[b]] -= Real(1);
  r.gradient = net.backward(acts, std::move(g), nullptr);
  return r;
}

/// Gradient of each sample's cross-entropy with respect to that sample.
template <std::floating_point Real>
Tensor<Real> input_gradient(const Network<Real>& net, const Tensor<Real>& batch, const LabelBatch& labels) {
  return loss_and_input_gradient(net, batch, labels).gradient;
}

template <std::floating_point Real>
struct ParamGradResult {
  Real loss = Real(0);  // batch mean
  ParamGrads<Real> grads;
};

/// Gradients of the mean batch loss with respect to every trainable tensor.
/// BatchNorm running statistics are frozen and have no entry.
template <std::floating_point Real>
ParamGradResult<Real> parameter_gradients(const Network<Real>& net, const Tensor<Real>& batch,
                                          const LabelBatch& labels) {
  auto acts = net.forward_trace(batch);
  const Tensor<Real>& logits = acts.back();
  ParamGradResult<Real> r;
  r.loss = cross_entropy(logits, labels);
  Tensor<Real> g = softmax(logits);
  const std::size_t k = g.row_size();
  const Real inv_n = Real(1) / static_cast<Real>(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    g[b * k + labels[b]] -= Real(1);
    for (std::size_t j = 0; j < k; ++j) g[b * k + j] *= inv_n;
  }
  r.grads = net.zero_grads();
  net.backward(acts, std::move(g), &r.grads);
  return r;
}

}  // namespace advrob

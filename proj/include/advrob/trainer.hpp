#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "advrob/dataset.hpp"
#include "advrob/error.hpp"
#include "advrob/layers.hpp"
#include "advrob/network.hpp"
#include "advrob/preprocess.hpp"
#include "advrob/rng.hpp"

namespace advrob {

enum class InitScheme { HeNormal, HeUniform, XavierUniform };

inline InitScheme parse_init_scheme(std::string_view s) {
  if (s == "he_normal") return InitScheme::HeNormal;
  if (s == "he_uniform") return InitScheme::HeUniform;
  if (s == "xavier_uniform") return InitScheme::XavierUniform;
  throw InvalidArgument("unknown weight init scheme '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  InitScheme init = InitScheme::HeNormal;
  double lr_decay = 1.0;            // multiply the rate by this ...
  std::size_t lr_decay_every = 0;   // ... every this many epochs (0 = never)

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw InvalidArgument("learning rate must be >= 0");
    if (epochs == 0) throw InvalidArgument("epochs must be >= 1");
    if (batch_size == 0) throw InvalidArgument("batch size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0, 1)");
    if (!(lr_decay > 0.0)) throw InvalidArgument("lr_decay must be positive");
  }

  double rate_at(std::size_t epoch) const {
    if (lr_decay_every == 0) return learning_rate;
    return learning_rate * std::pow(lr_decay, static_cast<double>(epoch / lr_decay_every));
  }
};

/// Draws fresh weights; biases and BatchNorm shifts start at zero, BatchNorm
/// scales at one. Running statistics are left untouched.
template <std::floating_point Real>
void initialize(Network<Real>& net, InitScheme scheme, std::uint64_t seed) {
  Rng rng(seed, 0x1217);
  auto fill = [&](Tensor<Real>& w, std::size_t fan_in, std::size_t fan_out) {
    for (Real& v : w.values()) {
      double x = 0.0;
      switch (scheme) {
        case InitScheme::HeNormal: x = rng.normal() * std::sqrt(2.0 / static_cast<double>(fan_in)); break;
        case InitScheme::HeUniform: {
          const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
          x = rng.uniform(-a, a);
          break;
        }
        case InitScheme::XavierUniform: {
          const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
          x = rng.uniform(-a, a);
          break;
        }
      }
      v = static_cast<Real>(x);
    }
  };
  for (auto& layer : net.mutable_layers()) {
    std::visit(overloaded{
                   [&](Conv2D<Real>& l) {
                     const std::size_t k = l.kernel_h * l.kernel_w;
                     fill(l.weight, l.in_channels * k, l.out_channels * k);
                     l.bias.fill(Real(0));
                   },
                   [&](Dense<Real>& l) {
                     fill(l.weight, l.in_features, l.out_features);
                     l.bias.fill(Real(0));
                   },
                   [&](BatchNormInference<Real>& l) {
                     l.gamma.fill(Real(1));
                     l.beta.fill(Real(0));
                   },
                   [](auto&) {},
               },
               layer);
  }
}

/// Momentum buffers, one per trainable tensor.
template <std::floating_point Real>
using Velocity = ParamGrads<Real>;

/// Classical momentum: v <- mu v + g; w <- w - lr v.
template <std::floating_point Real>
void sgd_step(std::vector<Tensor<Real>*> params, const std::vector<const Tensor<Real>*>& grads,
              std::vector<Tensor<Real>*> velocity, Real lr, Real momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw ShapeError("sgd_step: parameter, gradient and velocity counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Real>& w = *params[i];
    const Tensor<Real>& g = *grads[i];
    Tensor<Real>& v = *velocity[i];
    if (w.shape() != g.shape() || w.shape() != v.shape())
      throw ShapeError("sgd_step: shape mismatch at tensor " + std::to_string(i) + ": " + shape_str(w.shape()) +
                       " vs " + shape_str(g.shape()));
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      w[j] -= lr * v[j];
    }
  }
}

/// Network-level convenience over sgd_step.
template <std::floating_point Real>
void sgd_step(Network<Real>& net, const ParamGrads<Real>& grads, Velocity<Real>& velocity, Real lr, Real momentum) {
  std::vector<Tensor<Real>*> params, vel;
  std::vector<const Tensor<Real>*> gs;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto ts = trainable_tensors(net.mutable_layers()[l]);
    for (std::size_t k = 0; k < ts.size(); ++k) {
      params.push_back(ts[k]);
      gs.push_back(&grads.at(l).at(k));
      vel.push_back(&velocity.at(l).at(k));
    }
  }
  sgd_step(std::move(params), gs, std::move(vel), lr, momentum);
}

template <std::floating_point Real>
struct TrainResult {
  Network<Real> network;
  std::vector<double> loss_curve;  // mean training loss per epoch
};

/// Mini-batch SGD with momentum on transform(images). The network is used
/// as given (call initialize() first for fresh weights). The sample order
/// of every epoch comes from `config.seed`, so runs are reproducible.
template <std::floating_point Real>
TrainResult<Real> train(Network<Real> net, const Dataset<Real>& data, const Transform<Real>& transform,
                        const TrainConfig& config) {
  config.validate();
  if (data.size() == 0) throw InvalidArgument("cannot train on an empty dataset");
  if (data.sample() != net.input_shape())
    throw ShapeError("dataset samples " + shape_str(data.sample()) + " do not match network input " +
                     shape_str(net.input_shape()));
  const Tensor<Real> inputs = transform.apply(data.images);
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  Velocity<Real> velocity = net.zero_grads();
  TrainResult<Real> result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(config.seed, 0x7A1, epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const Real lr = static_cast<Real>(config.rate_at(epoch));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, n - start);
      std::span<const std::size_t> idx(order.data() + start, count);
      const Tensor<Real> xb = inputs.gather_rows(idx);
      LabelBatch yb(count);
      for (std::size_t i = 0; i < count; ++i) yb[i] = data.labels[idx[i]];
      ParamGradResult<Real> pg;
      try {
        pg = parameter_gradients(net, xb, yb);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(pg.loss)) throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch));
      loss_sum += static_cast<double>(pg.loss) * static_cast<double>(count);
      sgd_step(net, pg.grads, velocity, lr, static_cast<Real>(config.momentum));
    }
    const double mean_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(mean_loss)) throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch));
    result.loss_curve.push_back(mean_loss);
  }
  result.network = std::move(net);
  return result;
}

// ---------------------------------------------------------------------------
// Stock architectures

/// Conv(16)-ReLU-MaxPool-Conv(32)-ReLU-MaxPool-Dense(128)-ReLU-Dense(K) with
/// 3x3 same-padded convolutions: about 0.27M parameters on 32x32x3 inputs.
template <std::floating_point Real>
Network<Real> reference_cnn(const Shape& input = {3, 32, 32}, std::size_t classes = 10) {
  const std::size_t c = input.at(0), h = input.at(1), w = input.at(2);
  std::vector<Layer<Real>> layers;
  layers.emplace_back(Conv2D<Real>::make(c, 16, 3, 1, 1));
  layers.emplace_back(ReLU{});
  layers.emplace_back(MaxPool2D{2, 2});
  layers.emplace_back(Conv2D<Real>::make(16, 32, 3, 1, 1));
  layers.emplace_back(ReLU{});
  layers.emplace_back(MaxPool2D{2, 2});
  layers.emplace_back(Flatten{});
  layers.emplace_back(Dense<Real>::make(32 * (h / 4) * (w / 4), 128));
  layers.emplace_back(ReLU{});
  layers.emplace_back(Dense<Real>::make(128, classes));
  return Network<Real>(input, classes, std::move(layers));
}

/// Conv(8)-ReLU-MaxPool-Dense(32)-ReLU-Dense(K): a small CNN that trains in
/// seconds on synthetic 8x8 or 16x16 images.
template <std::floating_point Real>
Network<Real> small_cnn(const Shape& input, std::size_t classes) {
  const std::size_t c = input.at(0), h = input.at(1), w = input.at(2);
  std::vector<Layer<Real>> layers;
  layers.emplace_back(Conv2D<Real>::make(c, 8, 3, 1, 1));
  layers.emplace_back(ReLU{});
  layers.emplace_back(MaxPool2D{2, 2});
  layers.emplace_back(Flatten{});
  layers.emplace_back(Dense<Real>::make(8 * (h / 2) * (w / 2), 32));
  layers.emplace_back(ReLU{});
  layers.emplace_back(Dense<Real>::make(32, classes));
  return Network<Real>(input, classes, std::move(layers));
}

/// Single dense layer on flattened pixels.
template <std::floating_point Real>
Network<Real> linear_classifier(const Shape& input, std::size_t classes) {
  std::vector<Layer<Real>> layers;
  layers.emplace_back(Flatten{});
  layers.emplace_back(Dense<Real>::make(shape_volume(input), classes));
  return Network<Real>(input, classes, std::move(layers));
}

}  // namespace advrob

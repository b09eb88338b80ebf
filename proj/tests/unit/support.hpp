#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advrob/layers.hpp"
#include "advrob/network.hpp"
#include "advrob/dataset.hpp"
#include "advrob/preprocess.hpp"
#include "advrob/rng.hpp"
#include "advrob/trainer.hpp"

namespace advrob::testing {

template <class Real>
Tensor<Real> random_tensor(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<Real> t(shape);
  for (Real& v : t.values()) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

template <class Real>
void randomize_parameters(Network<Real>& net, Rng& rng) {
  for (auto& layer : net.mutable_layers()) {
    std::visit(overloaded{
                   [&](Conv2D<Real>& l) {
                     const double s = 1.0 / std::sqrt(static_cast<double>(l.in_channels * l.kernel_h * l.kernel_w));
                     for (Real& v : l.weight.values()) v = static_cast<Real>(rng.normal() * s);
                     for (Real& v : l.bias.values()) v = static_cast<Real>(rng.uniform(-0.2, 0.2));
                   },
                   [&](Dense<Real>& l) {
                     const double s = 1.0 / std::sqrt(static_cast<double>(l.in_features));
                     for (Real& v : l.weight.values()) v = static_cast<Real>(rng.normal() * s);
                     for (Real& v : l.bias.values()) v = static_cast<Real>(rng.uniform(-0.2, 0.2));
                   },
                   [&](BatchNormInference<Real>& l) {
                     for (Real& v : l.gamma.values()) v = static_cast<Real>(rng.uniform(0.5, 1.5));
                     for (Real& v : l.beta.values()) v = static_cast<Real>(rng.uniform(-0.3, 0.3));
                     for (Real& v : l.running_mean.values()) v = static_cast<Real>(rng.uniform(0.3, 0.7));
                     for (Real& v : l.running_var.values()) v = static_cast<Real>(rng.uniform(0.05, 0.5));
                   },
                   [](auto&) {},
               },
               layer);
  }
}

/// A random network of at most 5 layers and 500 parameters, drawn from a
/// handful of families that together exercise every layer kind.
template <class Real>
Network<Real> random_network(std::uint64_t seed) {
  Rng rng(seed, 0xBEEF);
  const std::size_t family = rng.below(5);
  const std::size_t k = 2 + rng.below(3);
  std::vector<Layer<Real>> layers;
  Shape input;
  switch (family) {
    case 0: {  // MLP on flat input
      const std::size_t d = 4 + rng.below(8), h = 4 + rng.below(12);
      input = {d};
      layers.emplace_back(Dense<Real>::make(d, h));
      layers.emplace_back(ReLU{});
      layers.emplace_back(Dense<Real>::make(h, k));
      break;
    }
    case 1: {  // conv + maxpool
      const std::size_t c = 1 + rng.below(2), f = 2 + rng.below(2);
      input = {c, 6, 6};
      layers.emplace_back(Conv2D<Real>::make(c, f, 3, 1, 1));
      layers.emplace_back(ReLU{});
      layers.emplace_back(MaxPool2D{2, 2});
      layers.emplace_back(Flatten{});
      layers.emplace_back(Dense<Real>::make(f * 9, k));
      break;
    }
    case 2: {  // strided conv + avgpool
      const std::size_t c = 1 + rng.below(3), f = 2 + rng.below(3);
      input = {c, 7, 7};
      layers.emplace_back(Conv2D<Real>::make(c, f, 3, 2, 1));
      layers.emplace_back(AvgPool2D{2, 2});
      layers.emplace_back(ReLU{});
      layers.emplace_back(Flatten{});
      layers.emplace_back(Dense<Real>::make(f * 4, k));
      break;
    }
    case 3: {  // batchnorm front end
      const std::size_t c = 2 + rng.below(2), f = 2 + rng.below(2);
      input = {c, 5, 5};
      layers.emplace_back(BatchNormInference<Real>::make(c));
      layers.emplace_back(Conv2D<Real>::make(c, f, 2, 1, 0));
      layers.emplace_back(ReLU{});
      layers.emplace_back(Flatten{});
      layers.emplace_back(Dense<Real>::make(f * 16, k));
      break;
    }
    default: {  // deeper MLP with feature batchnorm
      const std::size_t d = 3 + rng.below(6), h = 3 + rng.below(8);
      input = {d};
      layers.emplace_back(Dense<Real>::make(d, h));
      layers.emplace_back(BatchNormInference<Real>::make(h));
      layers.emplace_back(ReLU{});
      layers.emplace_back(Dense<Real>::make(h, h));
      layers.emplace_back(Dense<Real>::make(h, k));
      break;
    }
  }
  Network<Real> net(input, k, std::move(layers));
  randomize_parameters(net, rng);
  return net;
}

inline LabelBatch random_labels(std::size_t n, std::size_t k, Rng& rng) {
  LabelBatch y(n);
  for (auto& v : y) v = rng.below(k);
  return y;
}

/// Which linear piece of every ReLU and MaxPool the input falls in. Two
/// points with equal signatures lie in the same smooth region.
template <class Real>
std::vector<std::uint32_t> activation_signature(const Network<Real>& net, const Tensor<Real>& batch) {
  const auto acts = net.forward_trace(batch);
  std::vector<std::uint32_t> sig;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& in = acts[i];
    if (std::holds_alternative<ReLU>(net.layers()[i])) {
      for (Real v : in.values()) sig.push_back(v > Real(0));
    } else if (const auto* p = std::get_if<MaxPool2D>(&net.layers()[i])) {
      const std::size_t n = in.extent(0), c = in.extent(1), h = in.extent(2), w = in.extent(3);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t oy = 0; oy + p->kernel <= h; oy += p->stride)
            for (std::size_t ox = 0; ox + p->kernel <= w; ox += p->stride) {
              std::uint32_t best = 0;
              Real bv = -INFINITY;
              for (std::size_t ky = 0; ky < p->kernel; ++ky)
                for (std::size_t kx = 0; kx < p->kernel; ++kx) {
                  const Real v = in[((b * c + ch) * h + oy + ky) * w + ox + kx];
                  if (v > bv) {
                    bv = v;
                    best = static_cast<std::uint32_t>(ky * p->kernel + kx);
                  }
                }
              sig.push_back(best);
            }
    }
  }
  return sig;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct FdStats {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose +-h probes straddle a kink
};

/// Central finite differences of the per-sample loss sum against
/// input_gradient, over every input coordinate.
inline FdStats check_input_gradient(const Network<double>& net, const Tensor<double>& x, const LabelBatch& y,
                                    double h = 1e-5) {
  const auto g = input_gradient(net, x, y);
  const auto total = [&](const Tensor<double>& t) {
    double s = 0.0;
    for (double v : per_sample_cross_entropy(forward(net, t), y)) s += v;
    return s;
  };
  const auto base_sig = activation_signature(net, x);
  FdStats st;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = total(probe);
    const auto sig_up = activation_signature(net, probe);
    probe[i] = x[i] - h;
    const double down = total(probe);
    const auto sig_down = activation_signature(net, probe);
    probe[i] = x[i];
    if (sig_up != base_sig || sig_down != base_sig) {
      ++st.skipped;
      continue;
    }
    st.max_rel_error = std::max(st.max_rel_error, relative_error(g[i], (up - down) / (2.0 * h)));
    ++st.checked;
  }
  return st;
}

/// Same for every trainable parameter against parameter_gradients.
inline FdStats check_parameter_gradients(const Network<double>& net, const Tensor<double>& x, const LabelBatch& y,
                                         double h = 1e-5) {
  const auto pg = parameter_gradients(net, x, y);
  Network<double> probe = net;
  const auto base_sig = activation_signature(net, x);
  FdStats st;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto tensors = trainable_tensors(probe.mutable_layers()[l]);
    for (std::size_t t = 0; t < tensors.size(); ++t) {
      Tensor<double>& w = *tensors[t];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double orig = w[i];
        w[i] = orig + h;
        const double up = cross_entropy(forward(probe, x), y);
        const auto sig_up = activation_signature(probe, x);
        w[i] = orig - h;
        const double down = cross_entropy(forward(probe, x), y);
        const auto sig_down = activation_signature(probe, x);
        w[i] = orig;
        if (sig_up != base_sig || sig_down != base_sig) {
          ++st.skipped;
          continue;
        }
        st.max_rel_error = std::max(st.max_rel_error, relative_error(pg.grads[l][t][i], (up - down) / (2.0 * h)));
        ++st.checked;
      }
    }
  }
  return st;
}

/// A small CNN trained on synthetic 3x8x8 blobs, plus held-out data.
struct DeskModel {
  Network<float> network;
  Transform<float> transform;
  Dataset<float> test;
};

inline DeskModel train_desk_model(std::uint64_t seed = 1, std::size_t n_test = 200, double noise = 0.08,
                                  std::size_t classes = 10) {
  SyntheticOptions opt;
  opt.noise = noise;
  const auto all = synthetic_dataset<float>(seed, 600 + n_test, classes, {3, 8, 8}, opt);
  const auto train_set = all.slice(0, 600);
  DeskModel m{small_cnn<float>({3, 8, 8}, classes), Transform<float>::identity(3), all.slice(600, n_test)};
  initialize(m.network, InitScheme::HeNormal, seed);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  cfg.seed = seed;
  m.network = train(std::move(m.network), train_set, m.transform, cfg).network;
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("advrob_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace advrob::testing

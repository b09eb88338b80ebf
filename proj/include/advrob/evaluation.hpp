#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "advrob/attacks.hpp"
#include "advrob/dataset.hpp"
#include "advrob/error.hpp"
#include "advrob/network.hpp"
#include "advrob/parallel.hpp"
#include "advrob/preprocess.hpp"

namespace advrob {

/// rows = true class, columns = predicted class.
using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;

struct EvalConfig {
  ThreatModel threat;
  std::string attack_preset = "FGSM";
  bool post_quantize = false;
  std::uint64_t seed = 0;
  std::size_t batch_size = 128;
  std::size_t workers = 1;

  void validate() const {
    if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
    parse_preset(attack_preset);
    threat.validate();
    if (post_quantize && threat.space != AttackSpace::Input)
      throw InvalidArgument("post_quantize is only defined for input-space attacks");
  }
};

struct EvalReport {
  std::size_t num_samples = 0;
  std::size_t num_classes = 0;
  std::size_t clean_correct = 0;
  std::size_t robust_correct = 0;
  std::size_t attacked = 0;  // samples that were correct on clean input
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<std::optional<double>> per_class_robust_accuracy;
  /// Normalized entropy of each class's misclassifications (absent when a
  /// class has none). Not part of the reference tables.
  std::vector<std::optional<double>> misclassification_spread;
  double max_perturbation_norm = 0.0;
  EvalConfig config;
  double duration_seconds = 0.0;
};

inline ConfusionMatrix confusion_matrix(const LabelBatch& truths, const LabelBatch& predictions,
                                        std::size_t num_classes) {
  if (truths.size() != predictions.size())
    throw ShapeError("confusion_matrix: " + std::to_string(truths.size()) + " truths vs " +
                     std::to_string(predictions.size()) + " predictions");
  ConfusionMatrix m(num_classes, std::vector<std::uint64_t>(num_classes, 0));
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] >= num_classes || predictions[i] >= num_classes)
      throw InvalidArgument("confusion_matrix: label out of range at index " + std::to_string(i));
    ++m[truths[i]][predictions[i]];
  }
  return m;
}

/// Per true class: entropy of the off-diagonal row distribution divided by
/// log(K-1). 0 when all errors land in one class, 1 when they are spread
/// evenly over the other K-1 classes; absent for classes with no errors.
inline std::vector<std::optional<double>> misclassification_spread(const ConfusionMatrix& m) {
  const std::size_t k = m.size();
  std::vector<std::optional<double>> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (m[i].size() != k) throw ShapeError("confusion matrix is not square");
    std::uint64_t errors = 0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) errors += m[i][j];
    if (errors == 0) continue;
    if (k <= 2) {
      out[i] = 0.0;
      continue;
    }
    double h = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j == i || m[i][j] == 0) continue;
      const double p = static_cast<double>(m[i][j]) / static_cast<double>(errors);
      h -= p * std::log(p);
    }
    out[i] = h / std::log(static_cast<double>(k - 1));
  }
  return out;
}

template <std::floating_point Real>
LabelBatch predict_batched(const Network<Real>& net, const Transform<Real>& transform, const Tensor<Real>& images,
                           std::size_t batch_size, std::size_t workers = 1) {
  const std::size_t n = images.batch();
  LabelBatch preds(n);
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  parallel_for(batches, workers, [&](std::size_t bi) {
    const std::size_t start = bi * batch_size;
    const std::size_t count = std::min(batch_size, n - start);
    auto p = predict(net, transform.apply(images.slice_rows(start, count)));
    std::copy(p.begin(), p.end(), preds.begin() + static_cast<std::ptrdiff_t>(start));
  });
  return preds;
}

/// Fraction of samples with predict(net, transform(x)) == y.
template <std::floating_point Real>
double clean_accuracy(const Network<Real>& net, const Transform<Real>& transform, const Dataset<Real>& data,
                      std::size_t batch_size = 256, std::size_t workers = 1) {
  if (data.size() == 0) throw InvalidArgument("clean_accuracy on an empty dataset");
  if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
  const auto preds = predict_batched(net, transform, data.images, batch_size, workers);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace detail {

struct BatchOutcome {
  LabelBatch final_pred;
  std::vector<bool> clean_correct;
  std::vector<double> perturbation;
};

template <class Real>
BatchOutcome evaluate_batch(const Network<Real>& net, const Transform<Real>& transform, const AttackTarget<Real>& target,
                            const AttackPreset& preset, const EvalConfig& cfg, const Tensor<Real>& x,
                            const LabelBatch& y, std::size_t first_id) {
  BatchOutcome out;
  const std::size_t n = y.size();
  const Tensor<Real> z = transform.apply(x);
  out.final_pred = predict(net, z);
  out.clean_correct.resize(n);
  out.perturbation.assign(n, 0.0);
  std::vector<std::size_t> rows, ids;
  for (std::size_t i = 0; i < n; ++i) {
    out.clean_correct[i] = out.final_pred[i] == y[i];
    if (out.clean_correct[i]) {
      rows.push_back(i);
      ids.push_back(first_id + i);
    }
  }
  if (rows.empty()) return out;
  const Tensor<Real> start = (cfg.threat.space == AttackSpace::Input ? x : z).gather_rows(rows);
  LabelBatch ys(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) ys[i] = y[rows[i]];
  auto res = run_preset(preset, target, start, ys, cfg.threat, cfg.seed, ids);
  LabelBatch adv_pred = res.predictions;
  if (cfg.post_quantize) adv_pred = predict(net, transform.apply(quantize_round_even(res.adversarial)));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.final_pred[rows[i]] = adv_pred[i];
    out.perturbation[rows[i]] = res.perturbation_norm[i];
  }
  return out;
}

}  // namespace detail

/// Robust accuracy under the configured attack, reported over the whole
/// dataset. Samples misclassified on clean input are not attacked and keep
/// their clean prediction; the rest are attacked and their adversarial
/// prediction is recorded. Input space: the attack perturbs x in [0,1] and
/// the transform runs inside the model. Network space: the attack perturbs
/// transform(x) under the same budget. With post_quantize the adversarial
/// image is snapped to the 8-bit grid and re-classified.
///
/// Each sample's random stream depends only on (seed, sample index), so the
/// report is identical for any batch size or worker count.
template <std::floating_point Real>
EvalReport robust_accuracy(const Network<Real>& net, const Transform<Real>& transform, const Dataset<Real>& data,
                           const EvalConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  if (data.size() == 0) throw InvalidArgument("robust_accuracy on an empty dataset");
  if (data.num_classes != net.num_classes())
    throw ShapeError("dataset has " + std::to_string(data.num_classes) + " classes, network " +
                     std::to_string(net.num_classes()));
  const AttackPreset preset = parse_preset(cfg.attack_preset);
  const AttackTarget<Real> target(net, transform, cfg.threat.space);
  const std::size_t n = data.size();
  LabelBatch final_pred(n);
  std::vector<bool> clean_ok(n);
  std::vector<double> pert(n);

  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  parallel_for(batches, cfg.workers, [&](std::size_t bi) {
    const std::size_t start = bi * cfg.batch_size;
    const std::size_t count = std::min(cfg.batch_size, n - start);
    const Tensor<Real> x = data.images.slice_rows(start, count);
    const LabelBatch y(data.labels.begin() + static_cast<std::ptrdiff_t>(start),
                       data.labels.begin() + static_cast<std::ptrdiff_t>(start + count));
    detail::BatchOutcome o;
    try {
      o = detail::evaluate_batch(net, transform, target, preset, cfg, x, y, start);
    } catch (const NonFiniteError&) {
      // Re-run sample by sample to name the one that failed.
      for (std::size_t i = 0; i < count; ++i) {
        try {
          detail::evaluate_batch(net, transform, target, preset, cfg, x.slice_rows(i, 1), LabelBatch{y[i]}, start + i);
        } catch (const NonFiniteError& e) {
          throw NonFiniteError("attack failed on sample " + std::to_string(start + i) + ": " + e.what());
        }
      }
      throw;
    }
    for (std::size_t i = 0; i < count; ++i) {
      final_pred[start + i] = o.final_pred[i];
      clean_ok[start + i] = o.clean_correct[i];
      pert[start + i] = o.perturbation[i];
    }
  });

  EvalReport r;
  r.config = cfg;
  r.num_samples = n;
  r.num_classes = net.num_classes();
  r.confusion = confusion_matrix(data.labels, final_pred, r.num_classes);
  std::vector<std::uint64_t> class_total(r.num_classes, 0), class_correct(r.num_classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    r.clean_correct += clean_ok[i];
    r.attacked += clean_ok[i];
    r.robust_correct += final_pred[i] == data.labels[i];
    ++class_total[data.labels[i]];
    class_correct[data.labels[i]] += final_pred[i] == data.labels[i];
    r.max_perturbation_norm = std::max(r.max_perturbation_norm, pert[i]);
  }
  r.clean_accuracy = static_cast<double>(r.clean_correct) / static_cast<double>(n);
  r.robust_accuracy = static_cast<double>(r.robust_correct) / static_cast<double>(n);
  r.per_class_robust_accuracy.resize(r.num_classes);
  for (std::size_t c = 0; c < r.num_classes; ++c)
    if (class_total[c] > 0)
      r.per_class_robust_accuracy[c] = static_cast<double>(class_correct[c]) / static_cast<double>(class_total[c]);
  r.misclassification_spread = misclassification_spread(r.confusion);
  r.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace advrob

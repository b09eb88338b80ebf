#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advrob/error.hpp"
#include "advrob/network.hpp"
#include "advrob/preprocess.hpp"
#include "advrob/rng.hpp"
#include "advrob/tensor.hpp"

namespace advrob {

enum class Norm { Linf, L2 };
enum class AttackSpace { Input, Network };

inline std::string_view to_string(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }
inline std::string_view to_string(AttackSpace s) { return s == AttackSpace::Input ? "input" : "network"; }

inline Norm parse_norm(std::string_view s) {
  if (s == "linf" || s == "Linf" || s == "inf") return Norm::Linf;
  if (s == "l2" || s == "L2") return Norm::L2;
  throw InvalidArgument("unknown norm '" + std::string(s) + "'");
}

inline AttackSpace parse_space(std::string_view s) {
  if (s == "input") return AttackSpace::Input;
  if (s == "network") return AttackSpace::Network;
  throw InvalidArgument("unknown attack space '" + std::string(s) + "'");
}

/// Attacker constraints. epsilon == 0 is accepted and means "no
/// perturbation possible"; every attack then returns its input.
struct ThreatModel {
  Norm norm = Norm::Linf;
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  std::size_t iterations = 1;
  std::size_t restarts = 0;
  AttackSpace space = AttackSpace::Input;

  /// Throws on hard violations; returns a warning when alpha > epsilon.
  std::optional<std::string> validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw InvalidArgument("epsilon must be finite and >= 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw InvalidArgument("alpha must be finite and >= 0");
    if (iterations == 0) throw InvalidArgument("iterations must be >= 1");
    if (iterations > 1 && alpha > epsilon)
      return "step size alpha=" + std::to_string(alpha) + " exceeds epsilon=" + std::to_string(epsilon);
    return std::nullopt;
  }
};

/// Outcome of an attack over a batch.
template <std::floating_point Real>
struct AttackResult {
  Tensor<Real> adversarial;
  std::vector<bool> success;               // prediction != label
  std::vector<Real> loss;                  // final per-sample loss
  std::vector<double> perturbation_norm;   // ||x_adv - x|| under the threat norm
  LabelBatch predictions;                  // predictions on x_adv
};

/// The classifier as seen by the attacker. In input space the model
/// includes the pre-processing transform and the valid range is [0,1]; in
/// network space the attacker already holds transformed data and the valid
/// range is the transform's image of [0,1].
///
/// Holds references; the network and transform must outlive it.
template <std::floating_point Real>
class AttackTarget {
 public:
  AttackTarget(const Network<Real>& net, const Transform<Real>& transform, AttackSpace space)
      : net_(&net), transform_(&transform), space_(space) {
    transform.check_sample_shape(net.input_shape());
    if (space == AttackSpace::Input) {
      lower_.assign(net.input_size(), Real(0));
      upper_.assign(net.input_size(), Real(1));
    } else {
      auto [lo, hi] = transformed_unit_box(transform, net.input_shape());
      lower_ = lo.values();
      upper_ = hi.values();
    }
  }

  const Network<Real>& network() const noexcept { return *net_; }
  const Transform<Real>& transform() const noexcept { return *transform_; }
  AttackSpace space() const noexcept { return space_; }
  std::span<const Real> lower() const noexcept { return lower_; }
  std::span<const Real> upper() const noexcept { return upper_; }

  Tensor<Real> to_network(const Tensor<Real>& x) const {
    return space_ == AttackSpace::Input ? transform_->apply(x) : x;
  }

  LossAndGradient<Real> loss_and_gradient(const Tensor<Real>& x, const LabelBatch& y) const {
    auto r = loss_and_input_gradient(*net_, to_network(x), y);
    if (space_ == AttackSpace::Input) r.gradient = transform_->backward(r.gradient);
    return r;
  }

  Tensor<Real> logits(const Tensor<Real>& x) const { return forward(*net_, to_network(x)); }
  LabelBatch predict(const Tensor<Real>& x) const { return argmax_rows(logits(x)); }

 private:
  const Network<Real>* net_;
  const Transform<Real>* transform_;
  AttackSpace space_;
  std::vector<Real> lower_;
  std::vector<Real> upper_;
};

// ---------------------------------------------------------------------------
// Norm-ball helpers

template <class Real>
double l2_norm(std::span<const Real> v) {
  double s = 0.0;
  for (Real x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <class Real>
double linf_norm(std::span<const Real> v) {
  double m = 0.0;
  for (Real x : v) m = std::max(m, std::abs(static_cast<double>(x)));
  return m;
}

template <class Real>
double norm_of(std::span<const Real> v, Norm n) {
  return n == Norm::Linf ? linf_norm(v) : l2_norm(v);
}

namespace detail {

template <class Real>
void clip_linf_inplace(std::span<Real> d, Real eps) {
  for (Real& v : d) v = std::clamp(v, -eps, eps);
}

template <class Real>
void project_l2_inplace(std::span<Real> d, Real eps) {
  const double n = l2_norm<Real>(d);
  if (n <= static_cast<double>(eps)) return;
  const Real scale = static_cast<Real>(static_cast<double>(eps) / n);
  for (Real& v : d) v *= scale;
}

template <class Real>
Real sign(Real g) {
  return g > Real(0) ? Real(1) : (g < Real(0) ? Real(-1) : Real(0));
}

template <class Real>
void check_batch(const AttackTarget<Real>& target, const Tensor<Real>& x, const LabelBatch& y) {
  target.network().check_input(x);
  if (y.size() != x.batch()) throw ShapeError("label count does not match batch size");
}

/// x_adv = clamp(x + delta, lower, upper); delta is rewritten to x_adv - x.
template <class Real>
void apply_range(const AttackTarget<Real>& target, const Tensor<Real>& x, Tensor<Real>& delta, Tensor<Real>& x_adv) {
  const auto lo = target.lower();
  const auto hi = target.upper();
  const std::size_t row = x.row_size();
  for (std::size_t b = 0; b < x.batch(); ++b)
    for (std::size_t j = 0; j < row; ++j) {
      const std::size_t i = b * row + j;
      x_adv[i] = std::clamp(static_cast<Real>(x[i] + delta[i]), lo[j], hi[j]);
      delta[i] = x_adv[i] - x[i];
    }
}

template <class Real>
void check_gradient(const Tensor<Real>& g, std::size_t iteration) {
  if (!g.all_finite())
    throw NonFiniteError("non-finite input gradient at iteration " + std::to_string(iteration));
}

template <class Real>
AttackResult<Real> finish(const AttackTarget<Real>& target, const Tensor<Real>& x, Tensor<Real> x_adv,
                          const LabelBatch& y, Norm norm) {
  AttackResult<Real> r;
  auto logits = target.logits(x_adv);
  r.loss = per_sample_cross_entropy(logits, y);
  r.predictions = argmax_rows(logits);
  r.success.resize(y.size());
  r.perturbation_norm.resize(y.size());
  std::vector<Real> d(x.row_size());
  for (std::size_t b = 0; b < y.size(); ++b) {
    r.success[b] = r.predictions[b] != y[b];
    auto xa = x_adv.row(b);
    auto xo = x.row(b);
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = xa[j] - xo[j];
    r.perturbation_norm[b] = norm_of<Real>(d, norm);
  }
  r.adversarial = std::move(x_adv);
  return r;
}

}  // namespace detail

/// Coordinate-wise clamp of delta to [-epsilon, epsilon].
template <std::floating_point Real>
Tensor<Real> clip_linf(const Tensor<Real>& delta, Real epsilon) {
  Tensor<Real> out = delta;
  detail::clip_linf_inplace(out.span(), epsilon);
  return out;
}

/// Per-sample radial projection onto the L2 ball of radius epsilon. A
/// rank-1 tensor is treated as a single sample.
template <std::floating_point Real>
Tensor<Real> project_l2(const Tensor<Real>& delta, Real epsilon) {
  Tensor<Real> out = delta;
  if (out.rank() <= 1) {
    detail::project_l2_inplace(out.span(), epsilon);
  } else {
    for (std::size_t b = 0; b < out.batch(); ++b) detail::project_l2_inplace(out.row(b), epsilon);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Randomness

/// Identifies the random stream of each sample: (seed, sample id, restart).
/// `sample_ids` holds the dataset-wide index of each batch row so results do
/// not depend on how the dataset was split into batches; when empty, row
/// indices are used.
struct SeedKey {
  std::uint64_t seed = 0;
  std::size_t restart = 0;
  std::span<const std::size_t> sample_ids = {};

  std::size_t id(std::size_t row) const { return sample_ids.empty() ? row : sample_ids[row]; }
};

/// Fills one sample's starting perturbation.
template <std::floating_point Real>
using InitSampler = std::function<void(std::span<Real> delta, Norm norm, Real epsilon, Rng& rng)>;

/// Uniform over the epsilon-ball: per coordinate in [-eps, eps] for Linf;
/// isotropic direction with radius eps * u^(1/d) for L2.
template <std::floating_point Real>
void uniform_ball_init(std::span<Real> delta, Norm norm, Real epsilon, Rng& rng) {
  const double eps = static_cast<double>(epsilon);
  if (norm == Norm::Linf) {
    for (Real& v : delta) v = static_cast<Real>(eps * (2.0 * rng.uniform() - 1.0));
    detail::clip_linf_inplace(delta, epsilon);
    return;
  }
  std::vector<double> dir(delta.size());
  double n2 = 0.0;
  for (double& v : dir) {
    v = rng.normal();
    n2 += v * v;
  }
  const double r = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(delta.size()));
  const double scale = n2 > 0.0 ? r / std::sqrt(n2) : 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = static_cast<Real>(dir[i] * scale);
  detail::project_l2_inplace(delta, epsilon);
}

/// Degenerate source: every start is the clean input.
template <std::floating_point Real>
void zero_init(std::span<Real> delta, Norm, Real, Rng&) {
  std::fill(delta.begin(), delta.end(), Real(0));
}

/// Called once per iteration with the per-sample loss at the current iterate
/// (before the step), and once more with the final loss.
template <std::floating_point Real>
using IterationObserver = std::function<void(std::size_t iteration, const std::vector<Real>& loss)>;

// ---------------------------------------------------------------------------
// Attacks

/// Single signed-gradient step: x_adv = clip(x + eps * sign(grad)).
template <std::floating_point Real>
AttackResult<Real> fgsm(const AttackTarget<Real>& target, const Tensor<Real>& x, const LabelBatch& y,
                        const ThreatModel& tm) {
  tm.validate();
  if (tm.norm != Norm::Linf) throw InvalidArgument("fgsm requires the Linf threat model");
  detail::check_batch(target, x, y);
  const auto g = target.loss_and_gradient(x, y).gradient;
  detail::check_gradient(g, 0);
  const Real eps = static_cast<Real>(tm.epsilon);
  Tensor<Real> delta(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) delta[i] = eps * detail::sign(g[i]);
  Tensor<Real> x_adv(x.shape());
  detail::apply_range(target, x, delta, x_adv);
  return detail::finish(target, x, std::move(x_adv), y, tm.norm);
}

/// Single normalized-gradient step of L2 length eps per sample. Samples with
/// a zero gradient are returned unchanged.
template <std::floating_point Real>
AttackResult<Real> fgm(const AttackTarget<Real>& target, const Tensor<Real>& x, const LabelBatch& y,
                       const ThreatModel& tm) {
  tm.validate();
  if (tm.norm != Norm::L2) throw InvalidArgument("fgm requires the L2 threat model");
  detail::check_batch(target, x, y);
  const auto g = target.loss_and_gradient(x, y).gradient;
  detail::check_gradient(g, 0);
  Tensor<Real> delta(x.shape());
  for (std::size_t b = 0; b < x.batch(); ++b) {
    const double n = l2_norm<Real>(g.row(b));
    if (n == 0.0) continue;
    const Real scale = static_cast<Real>(tm.epsilon / n);
    auto gr = g.row(b);
    auto dr = delta.row(b);
    for (std::size_t j = 0; j < dr.size(); ++j) dr[j] = gr[j] * scale;
    detail::project_l2_inplace(dr, static_cast<Real>(tm.epsilon));
  }
  Tensor<Real> x_adv(x.shape());
  detail::apply_range(target, x, delta, x_adv);
  return detail::finish(target, x, std::move(x_adv), y, tm.norm);
}

namespace detail {

/// Iterated projected steps from x + delta0. Runs the full iteration count
/// for every sample (no early stopping) and reports the final iterate.
template <class Real>
AttackResult<Real> iterate(const AttackTarget<Real>& target, const Tensor<Real>& x, const LabelBatch& y,
                           const ThreatModel& tm, Tensor<Real> delta, const IterationObserver<Real>& observer) {
  const Real eps = static_cast<Real>(tm.epsilon);
  const Real alpha = static_cast<Real>(tm.alpha);
  Tensor<Real> x_adv(x.shape());
  apply_range(target, x, delta, x_adv);
  for (std::size_t it = 0; it < tm.iterations; ++it) {
    LossAndGradient<Real> lg;
    try {
      lg = target.loss_and_gradient(x_adv, y);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("iteration " + std::to_string(it) + ": " + e.what());
    }
    check_gradient(lg.gradient, it);
    if (observer) observer(it, lg.losses);
    const Tensor<Real>& g = lg.gradient;
    if (tm.norm == Norm::Linf) {
      for (std::size_t i = 0; i < x.size(); ++i) delta[i] += alpha * sign(g[i]);
      clip_linf_inplace(delta.span(), eps);
    } else {
      for (std::size_t b = 0; b < x.batch(); ++b) {
        const double n = l2_norm<Real>(g.row(b));
        auto dr = delta.row(b);
        if (n > 0.0) {
          const Real scale = static_cast<Real>(static_cast<double>(alpha) / n);
          auto gr = g.row(b);
          for (std::size_t j = 0; j < dr.size(); ++j) dr[j] += gr[j] * scale;
        }
        project_l2_inplace(dr, eps);
      }
    }
    apply_range(target, x, delta, x_adv);
  }
  auto result = finish(target, x, std::move(x_adv), y, tm.norm);
  if (observer) observer(tm.iterations, result.loss);
  return result;
}

}  // namespace detail

/// Basic iterative method: tm.iterations projected steps of size alpha
/// starting from the clean input (signed steps for Linf, normalized steps
/// followed by L2-ball projection for L2).
template <std::floating_point Real>
AttackResult<Real> bim(const AttackTarget<Real>& target, const Tensor<Real>& x, const LabelBatch& y,
                       const ThreatModel& tm, const IterationObserver<Real>& observer = {}) {
  tm.validate();
  detail::check_batch(target, x, y);
  return detail::iterate(target, x, y, tm, Tensor<Real>(x.shape()), observer);
}

/// BIM started from a random point of the epsilon-ball around x.
template <std::floating_point Real>
AttackResult<Real> pgd(const AttackTarget<Real>& target, const Tensor<Real>& x, const LabelBatch& y,
                       const ThreatModel& tm, const SeedKey& key,
                       const InitSampler<Real>& sampler = uniform_ball_init<Real>,
                       const IterationObserver<Real>& observer = {}) {
  tm.validate();
  detail::check_batch(target, x, y);
  if (!key.sample_ids.empty() && key.sample_ids.size() != x.batch())
    throw ShapeError("sample id count does not match batch size");
  Tensor<Real> delta(x.shape());
  const Real eps = static_cast<Real>(tm.epsilon);
  for (std::size_t b = 0; b < x.batch(); ++b) {
    Rng rng(key.seed, key.id(b), key.restart);
    sampler(delta.row(b), tm.norm, eps, rng);
  }
  return detail::iterate(target, x, y, tm, std::move(delta), observer);
}

/// A randomized attack run under a given restart index.
template <std::floating_point Real>
using RestartableAttack = std::function<AttackResult<Real>(const AttackTarget<Real>&, const Tensor<Real>&,
                                                           const LabelBatch&, const ThreatModel&, const SeedKey&)>;

/// Runs `attack` up to k times per sample with restart indices 0..k-1 and
/// keeps, per sample, the first restart that misclassifies; when none does,
/// the restart with the largest final loss (earliest on ties). Samples that
/// already succeeded are not re-attacked, which leaves the result unchanged.
template <std::floating_point Real>
AttackResult<Real> with_restarts(const RestartableAttack<Real>& attack, std::size_t k,
                                 const AttackTarget<Real>& target, const Tensor<Real>& x, const LabelBatch& y,
                                 const ThreatModel& tm, std::uint64_t seed,
                                 std::span<const std::size_t> sample_ids = {}) {
  if (k == 0) throw InvalidArgument("restart count must be >= 1");
  const std::size_t n = x.batch();
  std::vector<std::size_t> ids(n);
  for (std::size_t b = 0; b < n; ++b) ids[b] = sample_ids.empty() ? b : sample_ids[b];

  AttackResult<Real> best;
  std::vector<std::size_t> active(n);
  std::iota(active.begin(), active.end(), std::size_t{0});
  for (std::size_t r = 0; r < k && !active.empty(); ++r) {
    const Tensor<Real> xs = r == 0 ? x : x.gather_rows(active);
    LabelBatch ys(active.size());
    std::vector<std::size_t> sub_ids(active.size());
    for (std::size_t i = 0; i < active.size(); ++i) {
      ys[i] = y[active[i]];
      sub_ids[i] = ids[active[i]];
    }
    auto cand = attack(target, xs, ys, tm, SeedKey{seed, r, sub_ids});
    if (r == 0) {
      best = std::move(cand);
    } else {
      const std::size_t row = x.row_size();
      for (std::size_t i = 0; i < active.size(); ++i) {
        const std::size_t b = active[i];
        if (cand.success[i] || cand.loss[i] > best.loss[b]) {
          std::copy_n(cand.adversarial.data() + i * row, row, best.adversarial.data() + b * row);
          best.success[b] = cand.success[i];
          best.loss[b] = cand.loss[i];
          best.perturbation_norm[b] = cand.perturbation_norm[i];
          best.predictions[b] = cand.predictions[i];
        }
      }
    }
    std::vector<std::size_t> still;
    for (std::size_t b : active)
      if (!best.success[b]) still.push_back(b);
    active = std::move(still);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Named configurations

enum class AttackKind {
  SingleStep,             // FGSM (Linf) / FGM (L2)
  RandomStartSingleStep,  // FGSM-k / FGM-k: random start + one eps step, k restarts
  Iterative,              // BIM-n
  Pgd,                    // PGD-n-k
};

struct AttackPreset {
  std::string name;
  AttackKind kind = AttackKind::SingleStep;
  std::size_t iterations = 1;
  std::size_t restarts = 1;
  std::optional<Norm> required_norm;
};

namespace detail {

inline std::optional<std::size_t> parse_count(std::string_view s) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || v == 0) return std::nullopt;
  return v;
}

}  // namespace detail

/// Resolves FGSM, FGM, FGSM-<k>, FGM-<k>, BIM-<n> and PGD-<n>-<k>.
inline AttackPreset parse_preset(std::string_view name) {
  const auto bad = [&] { return InvalidArgument("unknown attack preset '" + std::string(name) + "'"); };
  AttackPreset p;
  p.name = std::string(name);
  if (name == "FGSM" || name == "FGM") {
    p.kind = AttackKind::SingleStep;
    p.required_norm = name == "FGSM" ? Norm::Linf : Norm::L2;
    return p;
  }
  const auto dash = name.find('-');
  if (dash == std::string_view::npos) throw bad();
  const auto head = name.substr(0, dash);
  const auto tail = name.substr(dash + 1);
  if (head == "FGSM" || head == "FGM") {
    auto k = detail::parse_count(tail);
    if (!k) throw bad();
    p.kind = AttackKind::RandomStartSingleStep;
    p.restarts = *k;
    p.required_norm = head == "FGSM" ? Norm::Linf : Norm::L2;
    return p;
  }
  if (head == "BIM") {
    auto n = detail::parse_count(tail);
    if (!n) throw bad();
    p.kind = AttackKind::Iterative;
    p.iterations = *n;
    return p;
  }
  if (head == "PGD") {
    const auto dash2 = tail.find('-');
    if (dash2 == std::string_view::npos) throw bad();
    auto n = detail::parse_count(tail.substr(0, dash2));
    auto k = detail::parse_count(tail.substr(dash2 + 1));
    if (!n || !k) throw bad();
    p.kind = AttackKind::Pgd;
    p.iterations = *n;
    p.restarts = *k;
    return p;
  }
  throw bad();
}

/// The configurations evaluated in the reference tables.
inline const std::vector<std::string>& standard_presets() {
  static const std::vector<std::string> names = {"FGSM",   "FGSM-10", "FGM",      "BIM-10",
                                                 "BIM-50", "BIM-100", "PGD-50-10"};
  return names;
}

/// Default step size for iterative attacks: a quarter of the budget.
inline double default_alpha(double epsilon) { return epsilon / 4.0; }

/// Threat model for a preset under the given norm/budget/space. alpha
/// defaults to epsilon/4 for BIM and PGD; single-step attacks always use a
/// step of epsilon.
inline ThreatModel make_threat(const AttackPreset& p, Norm norm, double epsilon, std::optional<double> alpha,
                               AttackSpace space) {
  if (p.required_norm && *p.required_norm != norm)
    throw InvalidArgument("preset " + p.name + " requires the " + std::string(to_string(*p.required_norm)) +
                          " norm");
  ThreatModel tm;
  tm.norm = norm;
  tm.epsilon = epsilon;
  tm.space = space;
  tm.iterations = p.iterations;
  tm.restarts = p.kind == AttackKind::SingleStep || p.kind == AttackKind::Iterative ? 0 : p.restarts;
  const bool single = p.kind == AttackKind::SingleStep || p.kind == AttackKind::RandomStartSingleStep;
  tm.alpha = single ? epsilon : alpha.value_or(default_alpha(epsilon));
  return tm;
}

/// Runs a preset on a batch. `seed` and `sample_ids` feed the per-sample
/// random streams of randomized presets.
template <std::floating_point Real>
AttackResult<Real> run_preset(const AttackPreset& p, const AttackTarget<Real>& target, const Tensor<Real>& x,
                              const LabelBatch& y, const ThreatModel& tm, std::uint64_t seed,
                              std::span<const std::size_t> sample_ids = {}) {
  switch (p.kind) {
    case AttackKind::SingleStep:
      return tm.norm == Norm::Linf ? fgsm(target, x, y, tm) : fgm(target, x, y, tm);
    case AttackKind::Iterative:
      return bim(target, x, y, tm);
    case AttackKind::RandomStartSingleStep:
    case AttackKind::Pgd: {
      ThreatModel inner = tm;
      if (p.kind == AttackKind::RandomStartSingleStep) {
        inner.iterations = 1;
        inner.alpha = tm.epsilon;
      }
      RestartableAttack<Real> attack = [](const AttackTarget<Real>& t, const Tensor<Real>& xs, const LabelBatch& ys,
                                          const ThreatModel& m, const SeedKey& key) {
        return pgd(t, xs, ys, m, key);
      };
      return with_restarts(attack, std::max<std::size_t>(p.restarts, 1), target, x, y, inner, seed, sample_ids);
    }
  }
  throw InvalidArgument("unhandled preset kind");
}

}  // namespace advrob

#include <gtest/gtest.h>

#include <cmath>

#include "advrob/evaluation.hpp"
#include "advrob/report_io.hpp"
#include "support.hpp"

using namespace advrob;
using advrob::testing::DeskModel;
using advrob::testing::train_desk_model;

namespace {

const DeskModel& desk() {
  static const DeskModel m = train_desk_model();
  return m;
}

/// Always predicts class 0.
Network<float> constant_model(std::size_t classes) {
  auto d = Dense<float>::make(3 * 4 * 4, classes);
  d.bias[0] = 1.0f;
  return Network<float>({3, 4, 4}, classes, {Flatten{}, d});
}

Dataset<float> labelled(std::vector<std::size_t> labels, std::size_t classes) {
  Dataset<float> d;
  d.images = Tensor<float>({labels.size(), 3, 4, 4}, 0.5f);
  d.labels = std::move(labels);
  d.num_classes = classes;
  return d;
}

EvalConfig config(const std::string& preset, Norm norm, double eps, AttackSpace space = AttackSpace::Input) {
  EvalConfig c;
  c.attack_preset = preset;
  c.threat = make_threat(parse_preset(preset), norm, eps, std::nullopt, space);
  c.seed = 5;
  c.batch_size = 64;
  return c;
}

void expect_consistent(const EvalReport& r, const Dataset<float>& data) {
  std::uint64_t trace = 0, total = 0;
  std::vector<std::uint64_t> counts(r.num_classes, 0);
  for (auto y : data.labels) ++counts[y];
  for (std::size_t i = 0; i < r.num_classes; ++i) {
    std::uint64_t row = 0;
    for (auto v : r.confusion[i]) row += v;
    EXPECT_EQ(row, counts[i]);
    trace += r.confusion[i][i];
    total += row;
  }
  EXPECT_EQ(total, data.size());
  EXPECT_EQ(trace, r.robust_correct);
  EXPECT_EQ(static_cast<double>(trace) / static_cast<double>(total), r.robust_accuracy);
  EXPECT_LE(r.robust_accuracy, r.clean_accuracy);
  EXPECT_LE(r.max_perturbation_norm, r.config.threat.epsilon * (1 + 1e-5));
}

}  // namespace

TEST(Confusion, Examples) {
  EXPECT_EQ(confusion_matrix({0, 1}, {0, 1}, 2), (ConfusionMatrix{{1, 0}, {0, 1}}));
  EXPECT_EQ(confusion_matrix({0, 0}, {1, 1}, 2), (ConfusionMatrix{{0, 2}, {0, 0}}));
  EXPECT_THROW(confusion_matrix({0, 1}, {0}, 2), ShapeError);
  EXPECT_THROW(confusion_matrix({0, 2}, {0, 0}, 2), InvalidArgument);
}

TEST(Confusion, RowSumsMatchClassCounts) {
  Rng rng(3);
  const auto truths = advrob::testing::random_labels(1000, 7, rng);
  const auto preds = advrob::testing::random_labels(1000, 7, rng);
  const auto m = confusion_matrix(truths, preds, 7);
  for (std::size_t c = 0; c < 7; ++c) {
    std::uint64_t row = 0, expect = 0;
    for (auto v : m[c]) row += v;
    for (auto t : truths) expect += t == c;
    EXPECT_EQ(row, expect);
  }
}

TEST(Spread, Examples) {
  ConfusionMatrix degenerate(10, std::vector<std::uint64_t>(10, 0));
  degenerate[0][0] = 5;
  degenerate[0][3] = 7;
  ConfusionMatrix uniform(10, std::vector<std::uint64_t>(10, 0));
  for (std::size_t j = 1; j < 10; ++j) uniform[0][j] = 4;
  const auto d = misclassification_spread(degenerate);
  EXPECT_EQ(d[0], 0.0);
  EXPECT_FALSE(d[1].has_value());
  EXPECT_NEAR(*misclassification_spread(uniform)[0], 1.0, 1e-12);
  const ConfusionMatrix trio{{0, 2, 2}, {0, 1, 0}, {3, 0, 0}};
  const auto s = misclassification_spread(trio);
  EXPECT_NEAR(*s[0], std::log(2.0) / std::log(2.0), 1e-12);
  EXPECT_FALSE(s[1].has_value());
  EXPECT_EQ(*s[2], 0.0);
  EXPECT_EQ(*misclassification_spread({{1, 3}, {0, 2}})[0], 0.0);
}

TEST(CleanAccuracy, ConstantModel) {
  const auto net = constant_model(10);
  const auto t = Transform<float>::identity(3);
  EXPECT_EQ(clean_accuracy(net, t, labelled(std::vector<std::size_t>(20, 0), 10)), 1.0);
  std::vector<std::size_t> balanced(100);
  for (std::size_t i = 0; i < 100; ++i) balanced[i] = i % 10;
  EXPECT_DOUBLE_EQ(clean_accuracy(net, t, labelled(balanced, 10)), 0.10);
  EXPECT_THROW(clean_accuracy(net, t, labelled({}, 10)), InvalidArgument);
}

TEST(CleanAccuracy, MatchesPerSampleTally) {
  const auto& m = desk();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < m.test.size(); ++i) {
    const auto z = m.transform.apply(m.test.images.slice_rows(i, 1));
    correct += predict(m.network, z)[0] == m.test.labels[i];
  }
  const double acc = clean_accuracy(m.network, m.transform, m.test, 17, 2);
  EXPECT_EQ(acc, static_cast<double>(correct) / static_cast<double>(m.test.size()));
  EXPECT_GT(acc, 0.6);
}

TEST(RobustAccuracy, ZeroBudgetEqualsClean) {
  const auto& m = desk();
  for (const auto& name : standard_presets()) {
    const auto p = parse_preset(name);
    const auto r = robust_accuracy(m.network, m.transform, m.test, config(name, p.required_norm.value_or(Norm::Linf), 0.0));
    EXPECT_EQ(r.robust_accuracy, r.clean_accuracy) << name;
    EXPECT_EQ(r.robust_correct, r.clean_correct) << name;
  }
}

TEST(RobustAccuracy, AlwaysWrongModelScoresZero) {
  const auto net = constant_model(3);
  const auto t = Transform<float>::identity(3);
  const auto data = labelled({1, 2, 1, 2}, 3);
  const auto r = robust_accuracy(net, t, data, config("BIM-10", Norm::Linf, 8.0 / 255.0));
  EXPECT_EQ(r.robust_accuracy, 0.0);
  EXPECT_EQ(r.attacked, 0u);
  EXPECT_EQ(r.confusion, (ConfusionMatrix{{0, 0, 0}, {2, 0, 0}, {2, 0, 0}}));
}

TEST(RobustAccuracy, InvariantsOnEveryPreset) {
  const auto& m = desk();
  double prev = 1.0;
  for (const char* name : {"FGSM", "BIM-10", "BIM-50"}) {
    const auto r = robust_accuracy(m.network, m.transform, m.test, config(name, Norm::Linf, 8.0 / 255.0));
    expect_consistent(r, m.test);
    EXPECT_LE(r.robust_accuracy, prev) << name;
    prev = r.robust_accuracy;
  }
  for (const char* name : {"FGSM-10", "PGD-50-10"}) {
    expect_consistent(robust_accuracy(m.network, m.transform, m.test, config(name, Norm::Linf, 8.0 / 255.0)),
                      m.test);
  }
  for (const char* name : {"FGM", "BIM-10", "BIM-100"})
    expect_consistent(robust_accuracy(m.network, m.transform, m.test, config(name, Norm::L2, 0.5)), m.test);
}

TEST(RobustAccuracy, CleanErrorsAreKept) {
  const auto& m = desk();
  const auto clean = robust_accuracy(m.network, m.transform, m.test, config("FGSM", Norm::Linf, 0.0));
  const auto adv = robust_accuracy(m.network, m.transform, m.test, config("BIM-10", Norm::Linf, 8.0 / 255.0));
  ASSERT_LT(clean.clean_correct, m.test.size());
  for (std::size_t i = 0; i < clean.num_classes; ++i)
    for (std::size_t j = 0; j < clean.num_classes; ++j)
      if (i != j) EXPECT_GE(adv.confusion[i][j], clean.confusion[i][j]);
}

TEST(RobustAccuracy, IndependentOfBatchingAndWorkers) {
  const auto& m = desk();
  for (const char* name : {"FGSM-10", "PGD-5-3"}) {
    auto a = config(name, Norm::Linf, 8.0 / 255.0);
    auto b = a;
    a.batch_size = 7;
    a.workers = 1;
    b.batch_size = 64;
    b.workers = 3;
    auto ra = robust_accuracy(m.network, m.transform, m.test, a);
    auto rb = robust_accuracy(m.network, m.transform, m.test, b);
    EXPECT_EQ(ra.confusion, rb.confusion);
    EXPECT_EQ(ra.max_perturbation_norm, rb.max_perturbation_norm);
    ra.config.batch_size = rb.config.batch_size;
    EXPECT_EQ(report_to_json(ra, "m", "r").dump(), report_to_json(rb, "m", "r").dump());
  }
}

TEST(RobustAccuracy, IdentityTransformRegimesCoincide) {
  const auto& m = desk();
  const auto a = robust_accuracy(m.network, m.transform, m.test, config("BIM-10", Norm::L2, 0.5));
  const auto b =
      robust_accuracy(m.network, m.transform, m.test, config("BIM-10", Norm::L2, 0.5, AttackSpace::Network));
  EXPECT_EQ(a.confusion, b.confusion);
}

TEST(RobustAccuracy, NetworkSpaceIsWeakerUnderStandardization) {
  const auto& m = desk();
  // Same classifier expressed as "normalize, then a rescaled first layer".
  auto net = m.network;
  auto& conv = std::get<Conv2D<float>>(net.mutable_layers()[0]);
  for (float& w : conv.weight.values()) w *= 0.25f;
  const auto t = Transform<float>::per_channel_normalize({0.0f, 0.0f, 0.0f}, {0.25f, 0.25f, 0.25f});
  EXPECT_NEAR(clean_accuracy(net, t, m.test), clean_accuracy(m.network, m.transform, m.test), 0.011);
  for (Norm n : {Norm::Linf, Norm::L2}) {
    const double eps = n == Norm::Linf ? 8.0 / 255.0 : 0.5;
    const auto in = robust_accuracy(net, t, m.test, config("BIM-10", n, eps));
    const auto ns = robust_accuracy(net, t, m.test, config("BIM-10", n, eps, AttackSpace::Network));
    EXPECT_GE(ns.robust_accuracy, in.robust_accuracy);
  }
}

TEST(RobustAccuracy, PostQuantizeStaysClose) {
  const auto& m = desk();
  for (auto [name, norm, eps] : {std::tuple{"FGSM", Norm::Linf, 8.0 / 255.0}, std::tuple{"FGM", Norm::L2, 0.5}}) {
    auto c = config(name, norm, eps);
    const auto plain = robust_accuracy(m.network, m.transform, m.test, c);
    c.post_quantize = true;
    const auto q = robust_accuracy(m.network, m.transform, m.test, c);
    expect_consistent(q, m.test);
    EXPECT_LE(std::abs(plain.robust_accuracy - q.robust_accuracy), 0.01 + 1e-12) << name;
  }
}

TEST(RobustAccuracy, ConfigValidation) {
  const auto& m = desk();
  auto c = config("FGSM", Norm::Linf, 8.0 / 255.0, AttackSpace::Network);
  c.post_quantize = true;
  EXPECT_THROW(robust_accuracy(m.network, m.transform, m.test, c), InvalidArgument);
  auto z = config("FGSM", Norm::Linf, 8.0 / 255.0);
  z.batch_size = 0;
  EXPECT_THROW(robust_accuracy(m.network, m.transform, m.test, z), InvalidArgument);
  z = config("FGSM", Norm::Linf, 8.0 / 255.0);
  z.attack_preset = "DeepFool";
  EXPECT_THROW(robust_accuracy(m.network, m.transform, m.test, z), InvalidArgument);
}

TEST(RobustAccuracy, NonFiniteFailureNamesSample) {
  auto d = Dense<float>::make(3 * 4 * 4, 2);
  d.weight.fill(3e38f);
  const Network<float> net({3, 4, 4}, 2, {Flatten{}, d});
  auto data = labelled({0, 0, 0}, 2);
  data.images.fill(0.0f);
  data.images[2 * 48 + 5] = 1.0f;  // only sample 2 overflows
  data.images[2 * 48 + 6] = 1.0f;
  EvalConfig c = config("FGSM", Norm::Linf, 8.0 / 255.0);
  try {
    robust_accuracy(net, Transform<float>::identity(3), data, c);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 2"), std::string::npos) << e.what();
  }
}

TEST(ReportJson, HasNoTimingAndEchoesConfig) {
  const auto& m = desk();
  const auto r = robust_accuracy(m.network, m.transform, m.test, config("FGSM", Norm::Linf, 8.0 / 255.0));
  const auto j = report_to_json(r, "desk", "fgsm");
  EXPECT_FALSE(j.contains("duration_seconds"));
  EXPECT_EQ(j["config"]["preset"], "FGSM");
  EXPECT_EQ(j["confusion"].size(), 10u);
  EXPECT_EQ(j["schema_version"], kReportSchemaVersion);
}

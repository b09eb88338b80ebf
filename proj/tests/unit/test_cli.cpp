#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "advrob/cli/commands.hpp"
#include "support.hpp"

using namespace advrob;
using namespace advrob::cli;
using advrob::testing::temp_dir;

namespace {

namespace fs = std::filesystem;

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2);
}

std::string slurp(const fs::path& p) { return read_file(p); }

json synthetic_set(std::size_t n, std::size_t offset, const json& shape = {3, 8, 8}) {
  return {{"kind", "synthetic"}, {"seed", 3},   {"n", n},         {"offset", offset},
          {"classes", 10},       {"shape", shape}, {"noise", 0.08}};
}

json small_train_config(const std::string& output) {
  return {{"seed", 3},
          {"train",
           {{"dataset", synthetic_set(600, 0)},
            {"architecture", "small"},
            {"epochs", 8},
            {"batch_size", 32},
            {"learning_rate", 0.05},
            {"output", output}}}};
}

json run(const std::string& preset, double eps, bool quantize = false, const std::string& norm = "linf") {
  return {{"preset", preset}, {"norm", norm}, {"epsilon", eps}, {"post_quantize", quantize}};
}

json evaluate_config(const std::string& model, const std::string& out_dir, const std::vector<json>& runs) {
  return {{"seed", 5},
          {"evaluate",
           {{"models", {{{"name", "desk"}, {"path", model}}}},
            {"dataset", synthetic_set(150, 600)},
            {"batch_size", 32},
            {"runs", runs},
            {"output_dir", out_dir}}}};
}

int run_binary(const std::string& args, const fs::path& err_file = {}, const std::string& env = "") {
  std::string cmd = env + (env.empty() ? "" : " ") + std::string(ADVROB_CLI_PATH) + " " + args + " > /dev/null";
  cmd += err_file.empty() ? " 2>/dev/null" : " 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double report_robust(const fs::path& dir, const std::string& label) {
  const auto j = json::parse(slurp(dir / "reports" / ("desk__" + file_stem(label) + ".json")));
  return j.at("robust_accuracy").get<double>();
}

class CliDesk : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = temp_dir("cli_desk");
    write_json(dir_ / "train.json", small_train_config("desk.advrob"));
    std::ostringstream log;
    run_train<float>(load_run_config(dir_ / "train.json"), {log, 1});
  }
  static fs::path dir_;
};
fs::path CliDesk::dir_;

}  // namespace

TEST(CliTrain, ReferenceRecipeOnSyntheticData) {
  const auto dir = temp_dir("cli_reference");
  json cfg = {{"seed", 7},
              {"train",
               {{"dataset", synthetic_set(600, 0, {3, 16, 16})},
                {"test_dataset", synthetic_set(300, 600, {3, 16, 16})},
                {"architecture", "reference"},
                {"epochs", 5},
                {"batch_size", 32},
                {"learning_rate", 0.02},
                {"output", "ref.advrob"}}}};
  write_json(dir / "train.json", cfg);
  std::ostringstream log;
  EXPECT_EQ(run_train<float>(load_run_config(dir / "train.json"), {log, 1}), 0);
  ASSERT_TRUE(fs::is_regular_file(dir / "ref.advrob"));
  EXPECT_NE(log.str().find("test accuracy"), std::string::npos);
  const auto bundle = load_model<float>(dir / "ref.advrob");
  const auto test = synthetic_dataset<float>(3, 300, 10, {3, 16, 16}, [] {
    SyntheticOptions o;
    o.offset = 600;
    return o;
  }());
  EXPECT_GE(clean_accuracy(bundle.network, bundle.transform, test), 0.95);
}

TEST(CliTrain, MissingDatasetNamesField) {
  const auto dir = temp_dir("cli_missing");
  json cfg = small_train_config("m.advrob");
  cfg["train"].erase("dataset");
  write_json(dir / "train.json", cfg);
  try {
    std::ostringstream log;
    run_train<float>(load_run_config(dir / "train.json"), {log, 1});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "train.dataset");
  }
  EXPECT_EQ(run_binary("train " + (dir / "train.json").string(), dir / "err.txt"), 2);
  EXPECT_NE(slurp(dir / "err.txt").find("train.dataset"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "m.advrob"));

  cfg = small_train_config("m.advrob");
  cfg["train"]["dataset"] = {{"kind", "cifar10"}, {"path", "no/such/dir"}};
  write_json(dir / "train.json", cfg);
  EXPECT_EQ(run_binary("train " + (dir / "train.json").string(), dir / "err.txt"), 2);
  EXPECT_NE(slurp(dir / "err.txt").find("train.dataset.path"), std::string::npos);
}

TEST(CliTrain, SameConfigByteIdenticalModel) {
  const auto dir = temp_dir("cli_det_train");
  json cfg = small_train_config("a.advrob");
  cfg["train"]["epochs"] = 2;
  write_json(dir / "train.json", cfg);
  const std::string path = (dir / "train.json").string();
  ASSERT_EQ(run_binary("train " + path, {}, "ADVROB_WORKERS=1"), 0);
  ASSERT_EQ(run_binary("train " + path + " --set train.output=b.advrob", {}, "ADVROB_WORKERS=3"), 0);
  EXPECT_EQ(slurp(dir / "a.advrob"), slurp(dir / "b.advrob"));
  ASSERT_EQ(run_binary("train " + path + " --set train.output=c.advrob seed=4"), 0);
  EXPECT_NE(slurp(dir / "a.advrob"), slurp(dir / "c.advrob"));
}

TEST(CliConfig, OverridesAndValidation) {
  const auto dir = temp_dir("cli_config");
  write_json(dir / "c.json", small_train_config("x.advrob"));
  const auto cfg = load_run_config(dir / "c.json", {"train.epochs=3", "train.dataset.shape=[1,4,4]",
                                                   "train.architecture=linear"});
  const Section root(cfg.root, "");
  EXPECT_EQ(root.section("train").count("epochs"), 3u);
  EXPECT_EQ(root.section("train").str("architecture"), "linear");
  EXPECT_EQ(root.section("train").section("dataset").numbers("shape"), (std::vector<double>{1, 4, 4}));
  EXPECT_THROW(load_run_config(dir / "c.json", {"noequals"}), ConfigError);
  EXPECT_THROW(load_run_config(dir / "absent.json"), ConfigError);

  json bad_run = {{"preset", "BIM-10"}, {"norm", "l3"}};
  EXPECT_THROW(parse_run(Section(bad_run, "evaluate.runs[0]")), ConfigError);
  json bad_preset = {{"preset", "DEEPFOOL"}};
  try {
    parse_run(Section(bad_preset, "evaluate.runs[0]"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "evaluate.runs[0].preset");
  }
  json frac = {{"preset", "BIM-10"}, {"epsilon", "8/255"}};
  const auto r = parse_run(Section(frac, "r"));
  EXPECT_EQ(r.threat.epsilon, 8.0 / 255.0);
  EXPECT_EQ(r.threat.alpha, 2.0 / 255.0);
  EXPECT_EQ(r.threat.iterations, 10u);
  json fgm = {{"preset", "FGM"}};
  EXPECT_EQ(parse_run(Section(fgm, "r")).threat.epsilon, 0.5);
  json q_net = {{"preset", "FGSM"}, {"space", "network"}, {"post_quantize", true}};
  EXPECT_THROW(parse_run(Section(q_net, "r")), ConfigError);
}

TEST_F(CliDesk, ZeroEpsilonMatchesClean) {
  write_json(dir_ / "eval0.json", evaluate_config("desk.advrob", "eval0", {run("FGSM", 0.0), run("PGD-5-2", 0.0)}));
  std::ostringstream log;
  const auto out = run_evaluate<float>(load_run_config(dir_ / "eval0.json"), {log, 1});
  for (const auto& label : out.table.runs) {
    const auto j = json::parse(slurp(out.dir / "reports" / ("desk__" + file_stem(label) + ".json")));
    EXPECT_EQ(j.at("robust_accuracy"), j.at("clean_accuracy")) << label;
  }
  EXPECT_TRUE(fs::is_regular_file(out.dir / "summary.json"));
  EXPECT_TRUE(fs::is_regular_file(out.dir / "table.csv"));
  EXPECT_TRUE(fs::is_regular_file(out.dir / "timing.json"));
}

TEST_F(CliDesk, PresetOrderingAndQuantization) {
  const double eps = 8.0 / 255.0;
  write_json(dir_ / "eval1.json",
             evaluate_config("desk.advrob", "eval1",
                             {run("FGSM", eps), run("BIM-10", eps), run("BIM-50", eps), run("FGSM", eps, true),
                              run("FGM", 0.5, false, "l2"), run("FGM", 0.5, true, "l2")}));
  std::ostringstream log;
  const auto out = run_evaluate<float>(load_run_config(dir_ / "eval1.json"), {log, 1});
  const auto& t = out.table;
  ASSERT_EQ(t.runs.size(), 6u);
  const double fgsm = *t.at("desk", t.runs[0]), bim10 = *t.at("desk", t.runs[1]), bim50 = *t.at("desk", t.runs[2]);
  EXPECT_GE(fgsm, bim10);
  EXPECT_GE(bim10, bim50);
  EXPECT_LE(std::abs(*t.at("desk", t.runs[3]) - fgsm), 0.01);
  EXPECT_LE(std::abs(*t.at("desk", t.runs[5]) - *t.at("desk", t.runs[4])), 0.01);
  EXPECT_EQ(report_robust(out.dir, t.runs[0]), fgsm);

  const auto csv = slurp(out.dir / "confusion" / ("desk__" + file_stem(t.runs[1]) + ".csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
}

TEST_F(CliDesk, ReportsIndependentOfWorkerCount) {
  write_json(dir_ / "eval2.json", evaluate_config("desk.advrob", "eval_w1", {run("FGSM-3", 8.0 / 255.0), run("PGD-5-3", 0.5, false, "l2")}));
  const std::string path = (dir_ / "eval2.json").string();
  ASSERT_EQ(run_binary("evaluate " + path, {}, "ADVROB_WORKERS=1"), 0);
  ASSERT_EQ(run_binary("evaluate " + path + " --set evaluate.output_dir=eval_w3", {}, "ADVROB_WORKERS=3"), 0);
  ASSERT_EQ(run_binary("evaluate " + path + " --set evaluate.output_dir=eval_b7 evaluate.batch_size=7"), 0);
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "eval_w1" / "reports")) {
    const auto name = e.path().filename();
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "eval_w3" / "reports" / name)) << name;
    auto a = json::parse(slurp(e.path())), b = json::parse(slurp(dir_ / "eval_b7" / "reports" / name));
    EXPECT_EQ(b["config"]["batch_size"], 7);
    a["config"].erase("batch_size");
    b["config"].erase("batch_size");
    EXPECT_EQ(a, b) << name;
    ++compared;
  }
  EXPECT_EQ(compared, 2u);
  EXPECT_EQ(slurp(dir_ / "eval_w1" / "summary.json"), slurp(dir_ / "eval_w3" / "summary.json"));
  EXPECT_EQ(slurp(dir_ / "eval_w1" / "table.csv"), slurp(dir_ / "eval_w3" / "table.csv"));
}

TEST_F(CliDesk, FailureLeavesNoPartialOutput) {
  write_json(dir_ / "mismatch.json", small_train_config("wide.advrob"));
  {
    std::ostringstream log;
    auto cfg = load_run_config(dir_ / "mismatch.json", {"train.dataset.shape=[3,6,6]", "train.epochs=1"});
    run_train<float>(cfg, {log, 1});
  }
  json cfg = evaluate_config("desk.advrob", "partial", {run("FGSM", 8.0 / 255.0)});
  cfg["evaluate"]["models"].push_back({{"name", "wide"}, {"path", "wide.advrob"}});
  write_json(dir_ / "partial.json", cfg);
  std::ostringstream log;
  EXPECT_THROW(run_evaluate<float>(load_run_config(dir_ / "partial.json"), {log, 1}), ShapeError);
  EXPECT_FALSE(fs::exists(dir_ / "partial"));
  EXPECT_EQ(run_binary("evaluate " + (dir_ / "partial.json").string()), 1);
  EXPECT_FALSE(fs::exists(dir_ / "partial"));
}

TEST_F(CliDesk, InspectModel) {
  std::ostringstream out;
  inspect_model(dir_ / "desk.advrob", out);
  EXPECT_NE(out.str().find("classes 10"), std::string::npos);
  EXPECT_NE(out.str().find("meta seed = 3"), std::string::npos);
  EXPECT_EQ(run_binary("inspect-model " + (dir_ / "desk.advrob").string()), 0);
  EXPECT_EQ(run_binary("inspect-model " + (dir_ / "nope.advrob").string()), 1);
}

namespace {

json summary(const std::map<std::string, std::map<std::string, double>>& values) {
  ResultTable t;
  for (const auto& [m, row] : values)
    for (const auto& [r, v] : row) t.add(m, r, v);
  return t.to_json();
}

ResultTable report_of(const fs::path& dir, const std::vector<json>& inputs) {
  json cfg = {{"report", {{"inputs", json::array()}, {"output_dir", "cmp"}}}};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto name = "s" + std::to_string(i) + ".json";
    write_json(dir / name, inputs[i]);
    cfg["report"]["inputs"].push_back(name);
  }
  write_json(dir / "report.json", cfg);
  std::ostringstream log;
  return run_report(load_run_config(dir / "report.json"), {log, 1});
}

}  // namespace

TEST(CliReport, SingleInputPassthrough) {
  const auto dir = temp_dir("cli_report1");
  const auto in = summary({{"A", {{"FGSM", 0.4}, {"BIM-10", 0.1}}}});
  const auto t = report_of(dir, {in});
  for (const auto& r : t.runs) EXPECT_EQ(t.best(r), std::vector<std::string>{"A"});
  const auto out = json::parse(slurp(dir / "cmp" / "comparison.json"));
  EXPECT_EQ(out.at("robust_accuracy"), in.at("robust_accuracy"));
  EXPECT_TRUE(fs::is_regular_file(dir / "cmp" / "comparison.csv"));
}

TEST(CliReport, DominatingModelFlaggedEverywhere) {
  const auto dir = temp_dir("cli_report2");
  const auto t = report_of(dir, {summary({{"A", {{"FGSM", 0.5}, {"BIM-10", 0.2}, {"BIM-50", 0.01}}}}),
                                 summary({{"B", {{"FGSM", 0.3}, {"BIM-10", 0.1}, {"BIM-50", 0.0}}}})});
  const auto out = json::parse(slurp(dir / "cmp" / "comparison.json"));
  for (const auto& r : t.runs) EXPECT_EQ(out.at("best").at(r), json::array({"A"})) << r;
  const auto csv = slurp(dir / "cmp" / "comparison.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "run,A,B,best");
}

TEST(CliReport, TrioFlagsMatchRecount) {
  const auto dir = temp_dir("cli_report3");
  Rng rng(17);
  std::vector<json> inputs;
  std::map<std::string, std::map<std::string, double>> all;
  const std::vector<std::string> runs{"FGSM", "FGSM-10", "BIM-10", "BIM-50", "PGD-50-10"};
  for (const std::string m : {"X", "Y", "Z"}) {
    std::map<std::string, std::map<std::string, double>> v;
    for (const auto& r : runs) {
      const double x = static_cast<double>(rng.below(5)) / 4.0;
      v[m][r] = x;
      all[r][m] = x;
    }
    inputs.push_back(summary(v));
  }
  report_of(dir, inputs);
  const auto out = json::parse(slurp(dir / "cmp" / "comparison.json"));
  for (const auto& r : runs) {
    double top = -1.0;
    for (const auto& [m, v] : all[r]) top = std::max(top, v);
    std::vector<std::string> expect;
    for (const std::string m : {"X", "Y", "Z"})
      if (all[r][m] == top) expect.push_back(m);
    EXPECT_EQ(out.at("best").at(r).get<std::vector<std::string>>(), expect) << r;
  }
}

TEST(CliReport, SchemaMismatchRejected) {
  const auto dir = temp_dir("cli_report4");
  auto old = summary({{"A", {{"FGSM", 0.5}}}});
  old["schema_version"] = 0;
  EXPECT_THROW(report_of(dir, {summary({{"B", {{"FGSM", 0.4}}}}), old}), VersionError);
  EXPECT_FALSE(fs::exists(dir / "cmp"));
}

TEST(CliConfig, ShippedExamplesParse) {
  std::size_t seen = 0;
  for (const auto& e : fs::directory_iterator(ADVROB_CONFIG_DIR)) {
    const auto cfg = load_run_config(e.path());
    const Section root(cfg.root, "");
    if (root.has("train")) {
      const auto s = root.section("train");
      parse_train_config(s, 0);
      EXPECT_TRUE(s.has("dataset")) << e.path();
    }
    if (root.has("evaluate"))
      for (const auto& r : root.section("evaluate").sections("runs")) EXPECT_NO_THROW(parse_run(r)) << e.path();
    if (root.has("report")) EXPECT_FALSE(root.section("report").raw("inputs").empty());
    ++seen;
  }
  EXPECT_GE(seen, 5u);
}

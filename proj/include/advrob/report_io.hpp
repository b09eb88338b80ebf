#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "advrob/attacks.hpp"
#include "advrob/error.hpp"
#include "advrob/evaluation.hpp"

namespace advrob {

/// Version of the report and summary JSON layouts below.
inline constexpr int kReportSchemaVersion = 1;

using json = nlohmann::ordered_json;

namespace detail {

inline json optional_array(const std::vector<std::optional<double>>& v) {
  json a = json::array();
  for (const auto& x : v) a.push_back(x ? json(*x) : json(nullptr));
  return a;
}

}  // namespace detail

/// One (model, run) evaluation. Contains no wall-clock data: the output is a
/// pure function of the model, data and config.
inline json report_to_json(const EvalReport& r, const std::string& model, const std::string& run) {
  const auto& c = r.config;
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["model"] = model;
  j["run"] = run;
  j["config"] = {
      {"preset", c.attack_preset},
      {"norm", std::string(to_string(c.threat.norm))},
      {"epsilon", c.threat.epsilon},
      {"alpha", c.threat.alpha},
      {"iterations", c.threat.iterations},
      {"restarts", c.threat.restarts},
      {"space", std::string(to_string(c.threat.space))},
      {"post_quantize", c.post_quantize},
      {"seed", c.seed},
      {"batch_size", c.batch_size},
  };
  j["num_samples"] = r.num_samples;
  j["num_classes"] = r.num_classes;
  j["clean_correct"] = r.clean_correct;
  j["robust_correct"] = r.robust_correct;
  j["attacked"] = r.attacked;
  j["clean_accuracy"] = r.clean_accuracy;
  j["robust_accuracy"] = r.robust_accuracy;
  j["max_perturbation_norm"] = r.max_perturbation_norm;
  j["confusion"] = r.confusion;
  j["per_class_robust_accuracy"] = detail::optional_array(r.per_class_robust_accuracy);
  j["misclassification_spread"] = detail::optional_array(r.misclassification_spread);
  j["misclassification_spread_note"] =
      "normalized entropy of each true class's off-diagonal row; 0 = all errors into one class, 1 = uniform";
  return j;
}

/// Confusion matrix as CSV with a header row of predicted classes.
inline std::string confusion_to_csv(const ConfusionMatrix& m, const std::vector<std::string>& names = {}) {
  const auto name = [&](std::size_t i) { return i < names.size() ? names[i] : std::to_string(i); };
  std::ostringstream os;
  os << "true\\pred";
  for (std::size_t j = 0; j < m.size(); ++j) os << ',' << name(j);
  os << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << name(i);
    for (auto v : m[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
  return buf;
}

/// Table of robust accuracies: rows = runs, columns = models.
struct ResultTable {
  std::vector<std::string> runs;
  std::vector<std::string> models;
  std::map<std::string, std::map<std::string, double>> value;  // model -> run -> fraction
  std::map<std::string, double> clean;                         // model -> clean accuracy

  std::optional<double> at(const std::string& model, const std::string& run) const {
    auto m = value.find(model);
    if (m == value.end()) return std::nullopt;
    auto r = m->second.find(run);
    if (r == m->second.end()) return std::nullopt;
    return r->second;
  }

  void add(const std::string& model, const std::string& run, double v) {
    if (std::find(models.begin(), models.end(), model) == models.end()) models.push_back(model);
    if (std::find(runs.begin(), runs.end(), run) == runs.end()) runs.push_back(run);
    value[model][run] = v;
  }

  /// Models holding the row maximum (several on ties).
  std::vector<std::string> best(const std::string& run) const {
    std::optional<double> top;
    for (const auto& m : models)
      if (auto v = at(m, run); v && (!top || *v > *top)) top = v;
    std::vector<std::string> out;
    for (const auto& m : models)
      if (auto v = at(m, run); v && top && *v == *top) out.push_back(m);
    return out;
  }

  /// Percentages with two decimals and a final column naming the best model.
  std::string to_csv() const {
    std::ostringstream os;
    os << "run";
    for (const auto& m : models) os << ',' << m;
    os << ",best\n";
    for (const auto& r : runs) {
      os << r;
      for (const auto& m : models) {
        os << ',';
        if (auto v = at(m, r)) os << format_percent(*v);
      }
      os << ',';
      const auto b = best(r);
      for (std::size_t i = 0; i < b.size(); ++i) os << (i ? ";" : "") << b[i];
      os << '\n';
    }
    return os.str();
  }

  json to_json() const {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["runs"] = runs;
    j["models"] = models;
    json res = json::object();
    for (const auto& m : models) {
      json row = json::object();
      for (const auto& r : runs)
        if (auto v = at(m, r)) row[r] = *v;
      res[m] = row;
    }
    j["robust_accuracy"] = res;
    json cl = json::object();
    for (const auto& m : models)
      if (clean.count(m)) cl[m] = clean.at(m);
    j["clean_accuracy"] = cl;
    json best_j = json::object();
    for (const auto& r : runs) best_j[r] = best(r);
    j["best"] = best_j;
    return j;
  }

  static ResultTable from_json(const json& j) {
    if (!j.contains("schema_version") || j["schema_version"] != kReportSchemaVersion)
      throw VersionError("summary schema version " +
                         (j.contains("schema_version") ? j["schema_version"].dump() : std::string("<missing>")) +
                         " does not match " + std::to_string(kReportSchemaVersion));
    ResultTable t;
    try {
      for (const auto& m : j.at("models")) t.models.push_back(m.get<std::string>());
      for (const auto& r : j.at("runs")) t.runs.push_back(r.get<std::string>());
      for (const auto& [m, row] : j.at("robust_accuracy").items())
        for (const auto& [r, v] : row.items()) t.value[m][r] = v.get<double>();
      if (j.contains("clean_accuracy"))
        for (const auto& [m, v] : j["clean_accuracy"].items()) t.clean[m] = v.get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed summary: ") + e.what());
    }
    return t;
  }
};

/// Column-wise union of tables; model names must be unique across inputs.
inline ResultTable merge_tables(const std::vector<ResultTable>& tables) {
  ResultTable out;
  for (const auto& t : tables) {
    for (const auto& m : t.models) {
      if (std::find(out.models.begin(), out.models.end(), m) != out.models.end())
        throw InvalidArgument("model '" + m + "' appears in more than one report");
      out.models.push_back(m);
      if (t.clean.count(m)) out.clean[m] = t.clean.at(m);
    }
    for (const auto& r : t.runs)
      if (std::find(out.runs.begin(), out.runs.end(), r) == out.runs.end()) out.runs.push_back(r);
    for (const auto& [m, row] : t.value)
      for (const auto& [r, v] : row) out.value[m][r] = v;
  }
  return out;
}

}  // namespace advrob

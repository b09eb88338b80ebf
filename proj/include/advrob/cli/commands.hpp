#pragma once

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "advrob/attacks.hpp"
#include "advrob/cli/run_config.hpp"
#include "advrob/dataset.hpp"
#include "advrob/evaluation.hpp"
#include "advrob/model_io.hpp"
#include "advrob/parallel.hpp"
#include "advrob/report_io.hpp"
#include "advrob/trainer.hpp"

namespace advrob::cli {

struct CommandContext {
  std::ostream& out;
  std::size_t workers = 1;
};

// ---------------------------------------------------------------------------
// Config sections

template <std::floating_point Real>
Dataset<Real> load_dataset(const RunConfig& cfg, const Section& s) {
  const std::string kind = s.str("kind");
  if (kind == "synthetic") {
    SyntheticOptions opt;
    opt.noise = s.number("noise", opt.noise);
    opt.amplitude = s.number("amplitude", opt.amplitude);
    opt.blob_sigma = s.number("blob_sigma", opt.blob_sigma);
    opt.jitter = s.count("jitter", opt.jitter);
    opt.offset = s.count("offset", opt.offset);
    const auto shape_v = s.numbers("shape");
    Shape shape;
    for (double v : shape_v) {
      if (v < 1 || v != std::floor(v)) throw ConfigError(s.field("shape"), "extents must be positive integers");
      shape.push_back(static_cast<std::size_t>(v));
    }
    const auto n = s.count("n");
    const auto k = s.count("classes");
    if (n < k || k == 0) throw ConfigError(s.field("n"), "need n >= classes >= 1");
    return synthetic_dataset<Real>(s.count("seed", 0), n, k, shape, opt);
  }
  if (kind == "cifar10") {
    const auto path = cfg.resolve(s.str("path"));
    if (!std::filesystem::exists(path)) throw ConfigError(s.field("path"), "not found: " + path.string());
    const std::string split = s.str("split", "test");
    if (split != "train" && split != "test") throw ConfigError(s.field("split"), "must be 'train' or 'test'");
    auto d = load_cifar10<Real>(path, split == "train" ? Split::Train : Split::Test);
    if (s.has("limit")) {
      const auto lim = s.count("limit");
      if (lim < d.size()) d = d.slice(0, lim);
    }
    return d;
  }
  throw ConfigError(s.field("kind"), "unknown dataset kind '" + kind + "' (expected synthetic or cifar10)");
}

template <std::floating_point Real>
Network<Real> build_architecture(const Section& s, const Shape& input, std::size_t classes) {
  const std::string arch = s.str("architecture", "reference");
  if (arch == "reference") return reference_cnn<Real>(input, classes);
  if (arch == "small") return small_cnn<Real>(input, classes);
  if (arch == "linear") return linear_classifier<Real>(input, classes);
  throw ConfigError(s.field("architecture"), "unknown architecture '" + arch + "' (reference, small, linear)");
}

template <std::floating_point Real>
Transform<Real> build_transform(const Section& parent, const Dataset<Real>& train) {
  const std::size_t c = train.sample().at(0);
  if (!parent.has("transform")) return Transform<Real>::identity(c);
  const Section s = parent.section("transform");
  const std::string kind = s.str("kind");
  if (kind == "identity") return Transform<Real>::identity(c);
  if (kind == "mean_pixel_subtract") {
    // Mean image of the training set, stored with the model.
    Tensor<Real> mean(train.sample());
    std::vector<double> acc(mean.size(), 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
      auto row = train.images.row(i);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += static_cast<double>(row[j]);
    }
    for (std::size_t j = 0; j < acc.size(); ++j) mean[j] = static_cast<Real>(acc[j] / static_cast<double>(train.size()));
    return Transform<Real>::mean_pixel_subtract(std::move(mean));
  }
  if (kind == "per_channel_normalize") {
    const auto m = s.numbers("mean");
    const auto sd = s.numbers("std");
    if (m.size() != c || sd.size() != c)
      throw ConfigError(s.path(), "mean and std need one entry per channel (" + std::to_string(c) + ")");
    for (double v : sd)
      if (!(v > 0.0)) throw ConfigError(s.field("std"), "entries must be positive");
    return Transform<Real>::per_channel_normalize(std::vector<Real>(m.begin(), m.end()),
                                                  std::vector<Real>(sd.begin(), sd.end()));
  }
  throw ConfigError(s.field("kind"), "unknown transform kind '" + kind + "'");
}

inline TrainConfig parse_train_config(const Section& s, std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = s.count("epochs", tc.epochs);
  tc.batch_size = s.count("batch_size", tc.batch_size);
  tc.learning_rate = s.number("learning_rate", tc.learning_rate);
  tc.momentum = s.number("momentum", tc.momentum);
  tc.lr_decay = s.number("lr_decay", tc.lr_decay);
  tc.lr_decay_every = s.count("lr_decay_every", tc.lr_decay_every);
  tc.seed = seed;
  try {
    if (s.has("init")) tc.init = parse_init_scheme(s.str("init"));
    tc.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(s.path(), e.what());
  }
  return tc;
}

/// One requested attack configuration of the evaluate command.
struct RunSpec {
  std::string label;
  std::string preset;
  ThreatModel threat;
  bool post_quantize = false;
};

inline std::string default_run_label(const RunSpec& r) {
  char eps[32];
  std::snprintf(eps, sizeof eps, "%.6g", r.threat.epsilon);
  std::string label = std::string(to_string(r.threat.norm)) + " eps=" + eps + " " + r.preset;
  if (r.threat.space == AttackSpace::Network) label += " [network]";
  if (r.post_quantize) label += " [quantized]";
  return label;
}

inline RunSpec parse_run(const Section& s) {
  RunSpec r;
  r.preset = s.str("preset");
  AttackPreset preset;
  try {
    preset = parse_preset(r.preset);
  } catch (const InvalidArgument& e) {
    throw ConfigError(s.field("preset"), e.what());
  }
  Norm norm = Norm::Linf;
  AttackSpace space = AttackSpace::Input;
  try {
    norm = parse_norm(s.str("norm", preset.required_norm ? std::string(to_string(*preset.required_norm)) : "linf"));
    space = parse_space(s.str("space", "input"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(s.path(), e.what());
  }
  const double default_eps = norm == Norm::Linf ? 8.0 / 255.0 : 0.5;
  const double eps = s.number("epsilon", default_eps);
  if (!(eps >= 0.0)) throw ConfigError(s.field("epsilon"), "must be >= 0");
  const auto alpha = s.optional_number("alpha");
  if (alpha && !(*alpha >= 0.0)) throw ConfigError(s.field("alpha"), "must be >= 0");
  try {
    r.threat = make_threat(preset, norm, eps, alpha, space);
    r.threat.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(s.path(), e.what());
  }
  r.post_quantize = s.boolean("post_quantize", false);
  if (r.post_quantize && space != AttackSpace::Input)
    throw ConfigError(s.field("post_quantize"), "only supported for input-space attacks");
  r.label = s.str("label", default_run_label(r));
  return r;
}

inline std::string file_stem(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' ? c : '_';
  return out;
}

// ---------------------------------------------------------------------------
// train

template <std::floating_point Real>
int run_train(const RunConfig& cfg, const CommandContext& ctx) {
  const Section root(cfg.root, "");
  const Section s = root.section("train");
  const std::uint64_t seed = root.count("seed", 0);
  auto train_data = load_dataset<Real>(cfg, s.section("dataset"));
  std::optional<Dataset<Real>> test_data;
  if (s.has("test_dataset")) test_data = load_dataset<Real>(cfg, s.section("test_dataset"));
  const auto out_path = cfg.resolve(s.str("output"));
  if (out_path.has_parent_path() && !std::filesystem::is_directory(out_path.parent_path()))
    throw ConfigError(s.field("output"), "directory does not exist: " + out_path.parent_path().string());
  const TrainConfig tc = parse_train_config(s, seed);
  const Transform<Real> transform = build_transform(s, train_data);
  Network<Real> net = build_architecture<Real>(s, train_data.sample(), train_data.num_classes);
  initialize(net, tc.init, seed);

  auto result = train(std::move(net), train_data, transform, tc);
  for (std::size_t e = 0; e < result.loss_curve.size(); ++e)
    ctx.out << "epoch " << (e + 1) << " loss " << std::setprecision(6) << result.loss_curve[e] << "\n";
  const double train_acc = clean_accuracy(result.network, transform, train_data, 256, ctx.workers);
  ctx.out << "train accuracy " << format_percent(train_acc) << "%\n";
  ModelMeta meta{{"seed", std::to_string(seed)},
                 {"epochs", std::to_string(tc.epochs)},
                 {"architecture", s.str("architecture", "reference")},
                 {"train_accuracy", format_percent(train_acc)}};
  if (test_data) {
    const double test_acc = clean_accuracy(result.network, transform, *test_data, 256, ctx.workers);
    ctx.out << "test accuracy " << format_percent(test_acc) << "%\n";
    meta["test_accuracy"] = format_percent(test_acc);
  }
  save_model(result.network, transform, out_path, meta);
  ctx.out << "wrote " << out_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOutput {
  std::filesystem::path dir;
  ResultTable table;
};

template <std::floating_point Real>
EvaluateOutput run_evaluate(const RunConfig& cfg, const CommandContext& ctx) {
  const Section root(cfg.root, "");
  const Section s = root.section("evaluate");
  const std::uint64_t seed = root.count("seed", 0);
  const std::size_t batch_size = s.count("batch_size", 128);
  if (batch_size == 0) throw ConfigError(s.field("batch_size"), "must be >= 1");

  struct ModelEntry {
    std::string name;
    std::filesystem::path path;
  };
  std::vector<ModelEntry> models;
  for (const auto& m : s.sections("models")) {
    ModelEntry e{m.str("name"), cfg.resolve(m.str("path"))};
    if (!std::filesystem::is_regular_file(e.path)) throw ConfigError(m.field("path"), "file not found: " + e.path.string());
    models.push_back(e);
  }
  if (models.empty()) throw ConfigError(s.field("models"), "at least one model is required");
  std::vector<RunSpec> runs;
  for (const auto& r : s.sections("runs")) runs.push_back(parse_run(r));
  if (runs.empty()) throw ConfigError(s.field("runs"), "at least one run is required");
  const auto out_dir = cfg.resolve(s.str("output_dir"));
  auto data = load_dataset<Real>(cfg, s.section("dataset"));
  if (s.has("limit")) {
    const auto lim = s.count("limit");
    if (lim == 0) throw ConfigError(s.field("limit"), "must be >= 1");
    if (lim < data.size()) data = data.slice(0, lim);
  }

  // Everything is computed before anything is written.
  struct Pending {
    std::string rel;
    std::string content;
  };
  std::vector<Pending> files;
  EvaluateOutput result{out_dir, {}};
  json timing = json::object();
  for (const auto& m : models) {
    auto bundle = load_model<Real>(m.path);
    if (bundle.network.input_shape() != data.sample())
      throw ShapeError("model " + m.name + " expects " + shape_str(bundle.network.input_shape()) + ", dataset has " +
                       shape_str(data.sample()));
    for (const auto& r : runs) {
      EvalConfig ec;
      ec.threat = r.threat;
      ec.attack_preset = r.preset;
      ec.post_quantize = r.post_quantize;
      ec.seed = seed;
      ec.batch_size = batch_size;
      ec.workers = ctx.workers;
      const EvalReport rep = robust_accuracy(bundle.network, bundle.transform, data, ec);
      ctx.out << m.name << " | " << r.label << " | clean " << format_percent(rep.clean_accuracy) << "% robust "
              << format_percent(rep.robust_accuracy) << "%\n";
      const std::string stem = file_stem(m.name) + "__" + file_stem(r.label);
      files.push_back({"reports/" + stem + ".json", report_to_json(rep, m.name, r.label).dump(2) + "\n"});
      files.push_back({"confusion/" + stem + ".csv", confusion_to_csv(rep.confusion, data.class_names)});
      result.table.add(m.name, r.label, rep.robust_accuracy);
      result.table.clean[m.name] = rep.clean_accuracy;
      timing[m.name][r.label] = rep.duration_seconds;
    }
  }
  files.push_back({"summary.json", result.table.to_json().dump(2) + "\n"});
  files.push_back({"table.csv", result.table.to_csv()});
  files.push_back({"timing.json", timing.dump(2) + "\n"});

  std::filesystem::create_directories(out_dir / "reports");
  std::filesystem::create_directories(out_dir / "confusion");
  for (const auto& f : files) write_file_atomic(out_dir / f.rel, f.content);
  ctx.out << "wrote " << files.size() << " files to " << out_dir.string() << "\n";
  return result;
}

// ---------------------------------------------------------------------------
// report

inline ResultTable run_report(const RunConfig& cfg, const CommandContext& ctx) {
  const Section root(cfg.root, "");
  const Section s = root.section("report");
  const json& inputs = s.raw("inputs");
  if (!inputs.is_array() || inputs.empty()) throw ConfigError(s.field("inputs"), "expected a non-empty array of paths");
  std::vector<ResultTable> tables;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::string field = s.field("inputs") + "[" + std::to_string(i) + "]";
    if (!inputs[i].is_string()) throw ConfigError(field, "expected a path");
    const auto p = cfg.resolve(inputs[i].get<std::string>());
    if (!std::filesystem::is_regular_file(p)) throw ConfigError(field, "file not found: " + p.string());
    json j;
    try {
      j = json::parse(read_file(p));
    } catch (const json::parse_error& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
    tables.push_back(ResultTable::from_json(j));
  }
  ResultTable merged = merge_tables(tables);
  const auto out_dir = cfg.resolve(s.str("output_dir"));
  std::filesystem::create_directories(out_dir);
  write_file_atomic(out_dir / "comparison.csv", merged.to_csv());
  write_file_atomic(out_dir / "comparison.json", merged.to_json().dump(2) + "\n");
  ctx.out << merged.to_csv();
  return merged;
}

// ---------------------------------------------------------------------------
// inspect-model

inline void inspect_model(const std::filesystem::path& path, std::ostream& out) {
  const auto bundle = load_model<double>(path);
  const auto& net = bundle.network;
  out << "input " << shape_str(net.input_shape()) << "  classes " << net.num_classes() << "  parameters "
      << net.parameter_count() << "\n";
  out << "transform " << to_string(bundle.transform.kind());
  const auto amp = bundle.transform.amplification_factor();
  out << "  amplification";
  for (double a : amp) out << ' ' << a;
  out << "\n";
  for (std::size_t i = 0; i < net.layers().size(); ++i)
    out << "  [" << i << "] " << layer_kind<double>(net.layers()[i]) << " -> " << shape_str(net.activation_shape(i + 1))
        << "\n";
  for (const auto& [k, v] : bundle.meta) out << "meta " << k << " = " << v << "\n";
}

/// dtype from the top-level "dtype" field ("f32" default, or "f64").
inline bool wants_double(const RunConfig& cfg) {
  const Section root(cfg.root, "");
  const std::string d = root.str("dtype", "f32");
  if (d != "f32" && d != "f64") throw ConfigError("dtype", "must be f32 or f64");
  return d == "f64";
}

}  // namespace advrob::cli

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "advrob/cli/commands.hpp"

namespace {

using namespace advrob;
using namespace advrob::cli;

int dispatch(const std::string& command, const std::string& config_path, const std::vector<std::string>& overrides) {
  const RunConfig cfg = load_run_config(config_path, overrides);
  const CommandContext ctx{std::cout, default_workers()};
  if (command == "train") return wants_double(cfg) ? run_train<double>(cfg, ctx) : run_train<float>(cfg, ctx);
  if (command == "evaluate") {
    if (wants_double(cfg))
      run_evaluate<double>(cfg, ctx);
    else
      run_evaluate<float>(cfg, ctx);
    return 0;
  }
  run_report(cfg, ctx);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"White-box adversarial robustness evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  for (const char* name : {"train", "evaluate", "report"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("config", config_path, "run-config JSON file")->required();
    sub->add_option("--set", overrides, "override a config field, e.g. --set train.epochs=3")->take_all();
  }
  std::string model_path;
  auto* inspect = app.add_subcommand("inspect-model", "print a model file's architecture and metadata");
  inspect->add_option("model", model_path)->required();

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (command == "inspect-model") {
      inspect_model(model_path, std::cout);
      return 0;
    }
    return dispatch(command, config_path, overrides);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

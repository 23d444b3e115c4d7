// steerkit command line: stage-by-stage driver for the SAE steering
// experiment pipeline. Exit codes: 0 success, 2 validation, 3 missing
// dependency, 4 judge/transport, 1 anything else.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "steerkit/errors.hpp"
#include "steerkit/pipeline.hpp"

namespace {

using steerkit::ExperimentConfig;
using steerkit::Stage;
using steerkit::StageOptions;

struct CliOptions {
  std::string config_path;
  bool force = false;
  std::string runs_filter;
  std::vector<std::string> seed_overrides;  // name=value
  std::string stage_flag;
};

nlohmann::json load_config_json(const CliOptions& opt) {
  nlohmann::json j;
  if (opt.config_path.empty()) {
    j = steerkit::default_desk_config();
  } else {
    std::ifstream in(opt.config_path);
    if (!in)
      throw steerkit::ValidationError("config file '" + opt.config_path +
                                      "' missing");
    j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded())
      throw steerkit::ValidationError("config file '" + opt.config_path +
                                      "' is not valid JSON");
  }
  for (const auto& kv : opt.seed_overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw steerkit::ValidationError(
          "--seed-override expects name=value, got '" + kv + "'");
    j["seeds"][kv.substr(0, eq)] =
        std::uint64_t(std::stoull(kv.substr(eq + 1)));
  }
  return j;
}

int dispatch(const CliOptions& opt, const std::vector<Stage>& stages,
             bool whole_pipeline) {
  const ExperimentConfig config =
      steerkit::config_from_json(load_config_json(opt));
  StageOptions stage_opt;
  stage_opt.force = opt.force;
  stage_opt.runs_filter = opt.runs_filter;
  if (whole_pipeline) {
    steerkit::run_pipeline(config, stage_opt);
  } else {
    for (Stage s : stages) steerkit::run_stage(config, s, stage_opt);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steerkit: sparse-autoencoder steering experiment harness"};
  app.require_subcommand(0, 1);

  CliOptions opt;
  app.add_option("--config", opt.config_path,
                 "Experiment config JSON (defaults to the built-in desk run)");
  app.add_flag("--force", opt.force, "Redo stages even when up to date");
  app.add_option("--runs-filter", opt.runs_filter,
                 "Only process run ids containing this substring");
  app.add_option("--seed-override", opt.seed_overrides,
                 "Override a named seed, name=value (repeatable)");
  app.add_option("--stage", opt.stage_flag,
                 "Run one stage by name (alternative to the subcommands)");

  const std::vector<std::string> stage_names = {
      "gen-data",        "train-sae",     "eval-interp", "eval-steering",
      "select-features", "rank-analysis", "report"};
  for (const auto& name : stage_names)
    app.add_subcommand(name, "Run the " + name + " stage");
  auto* pipeline_cmd =
      app.add_subcommand("pipeline", "Run every stage in order");
  auto* print_cmd = app.add_subcommand(
      "print-config", "Print the fully resolved config JSON and exit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (print_cmd->parsed()) {
      nlohmann::json j = load_config_json(opt);
      steerkit::config_from_json(j);  // validate
      std::cout << j.dump(2) << "\n";
      return 0;
    }
    std::vector<Stage> stages;
    bool whole = pipeline_cmd->parsed();
    for (const auto& name : stage_names)
      if (app.get_subcommand(name)->parsed())
        stages.push_back(steerkit::parse_stage(name));
    if (!whole && stages.empty()) {
      if (opt.stage_flag.empty()) {
        std::cerr << "nothing to do: pass a stage subcommand, --stage, or "
                     "'pipeline'\n";
        return 2;
      }
      if (opt.stage_flag == "pipeline")
        whole = true;
      else
        stages.push_back(steerkit::parse_stage(opt.stage_flag));
    }
    return dispatch(opt, stages, whole);
  } catch (const steerkit::MissingDependencyError& e) {
    std::cerr << "missing dependency: " << e.what() << "\n";
    return 3;
  } catch (const steerkit::JudgeError& e) {
    std::cerr << "judge error: " << e.what() << "\n";
    return 4;
  } catch (const steerkit::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const steerkit::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerkit/autointerp.hpp"
#include "steerkit/confidence.hpp"
#include "steerkit/judge.hpp"
#include "steerkit/rank_stats.hpp"
#include "steerkit/sae.hpp"
#include "steerkit/sae_train.hpp"
#include "steerkit/steering.hpp"
#include "steerkit/toy_lm.hpp"

namespace steerkit {

/// One SAE of the experiment matrix.
struct RunSpec {
  std::string run_id;
  SaeConfig sae;
  std::string sparsity_label;  // the configured knob, e.g. "k=8"
};

struct ExperimentConfig {
  std::filesystem::path output;

  ToyLmConfig lm;
  int corpus_tokens = 120000;

  std::vector<RunSpec> runs;
  TrainConfig train;

  InterpConfig interp;
  std::string interp_judge = "keyword";  // keyword | oracle | external
  double oracle_rho = 0.0;

  std::vector<double> factor_grid{0.5, 1, 2, 4, 8, 16};
  int steer_max_tokens = 32;
  std::string steering_judge = "synthetic";  // synthetic | external
  SteeringMode steering_mode = SteeringMode::DecoderAtom;

  double select_alpha = 10.0;
  int select_k = 1;
  InterventionMode select_intervention = InterventionMode::Additive;
  TierMode tier_mode = TierMode::Abs;
  std::vector<int> tier_topk{1, 2, 3, 4, 5};
  std::string probe_prefix = kDefaultProbePrefix;

  StatsSettings stats;
  ExternalJudgeConfig external;

  std::map<std::string, std::uint64_t> seeds;  // corpus/train/interp/steer/...
  int threads = 0;

  std::string config_hash;  // of the resolved config

  std::uint64_t seed(const std::string& name) const;
  const RunSpec& run(const std::string& run_id) const;
};

/// Parses, applies defaults, expands the matrix and validates. Throws
/// ValidationError on unknown architectures, k > F, duplicate run ids.
ExperimentConfig validate_config(const std::filesystem::path& path);
ExperimentConfig config_from_json(nlohmann::json j);

/// The built-in desk-scale experiment (5 architectures x 2 sparsity levels
/// on the toy LM).
nlohmann::json default_desk_config();

enum class Stage {
  GenData,
  TrainSae,
  EvalInterp,
  EvalSteering,
  SelectFeatures,
  RankAnalysis,
  Report,
};

Stage parse_stage(const std::string& name);
std::string to_string(Stage stage);

struct StageOptions {
  bool force = false;
  std::string runs_filter;  // substring filter on run ids, empty = all
};

/// Runs one stage; stages are idempotent per (config hash, seeds) and check
/// their input stages. Throws MissingDependencyError when inputs are absent.
void run_stage(const ExperimentConfig& config, Stage stage,
               const StageOptions& options = {});

/// gen-data through report, in order.
void run_pipeline(const ExperimentConfig& config,
                  const StageOptions& options = {});

/// Ten deterministic instruction texts around a concept keyword.
std::vector<std::string> concept_instructions(const std::string& keyword,
                                              std::uint64_t seed);

/// Table-3-style row: one base/selected pair per model.
struct MethodComparisonRow {
  std::string model;
  double base = 0.0;
  double selected = 0.0;
};

/// Renders the method-comparison table; the lift column uses steering_gain.
std::string render_method_table(const std::vector<MethodComparisonRow>& rows);

}  // namespace steerkit

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "steerkit/judge.hpp"
#include "steerkit/sae.hpp"
#include "steerkit/toy_lm.hpp"

namespace steerkit {

enum class SteeringMode {
  DecoderAtom,  // x + (alpha * m_f) * v_f
  CodeAmplify,  // x + alpha * h_f(x) * v_f, h_f from the SAE encode of x
};

struct SteeringSpec {
  int feature = 0;
  double factor = 0.0;  // alpha
  double scale = 0.0;   // m_f, the feature's max activation
  int layer = 0;
  SteeringMode mode = SteeringMode::DecoderAtom;
};

/// The intervention on one residual vector.
Eigen::VectorXd apply_steering(const Eigen::VectorXd& x,
                               const SteeringSpec& spec,
                               const SaeParams& params);

/// HookPoint applying the intervention at spec.layer during a forward pass
/// (and hence at every prompt and generated position while decoding).
HookPoint steering_hook(const SteeringSpec& spec, const SaeParams& params);

/// One steering concept: a feature, its description, and ten instructions
/// split 5/5 into factor-selection and held-out halves.
struct ConceptTask {
  std::string concept_id;
  int feature = 0;
  std::string description;
  std::vector<std::string> instructions;
  std::vector<int> dev_split;
  std::vector<int> heldout_split;

  void validate() const;
};

/// Builds the disjoint 5/5 split deterministically from a seed.
void assign_splits(ConceptTask& task, std::uint64_t seed);

struct GenerationRecord {
  int instruction_index = -1;
  double factor = 0.0;
  std::string text;
  Rating rating;
  double hm = 0.0;
  bool judge_failed = false;
};

struct SteeringOutcome {
  std::vector<double> factor_grid;
  std::vector<double> dev_mean;  // mean HM per factor over the dev split
  double best_factor = 0.0;
  double heldout_mean = -1.0;  // set by heldout_score
  std::vector<GenerationRecord> dev_records;
  std::vector<GenerationRecord> heldout_records;
};

struct SteeringEvalConfig {
  int max_tokens = 48;
  int judge_retries = 3;
  double judge_backoff_seconds = 0.0;  // synthetic judges need no waiting
  std::uint64_t seed = 0;
};

/// Generates one continuation per (dev instruction x factor), scores each
/// with the judge's harmonic mean and picks the dev-mean argmax factor
/// (ties to the smaller factor). Judge failures after the retry budget score
/// 0 and are flagged.
SteeringOutcome sweep_factors(const ConceptTask& task,
                              const std::vector<double>& grid,
                              const SteeringSpec& spec_template,
                              const ToyLm& lm, const SaeParams& params,
                              SteeringJudge& judge,
                              const SteeringEvalConfig& config);

/// Scores the held-out split at the selected factor; returns the mean HM
/// and records it in the outcome.
double heldout_score(const ConceptTask& task, SteeringOutcome& outcome,
                     const SteeringSpec& spec_template, const ToyLm& lm,
                     const SaeParams& params, SteeringJudge& judge,
                     const SteeringEvalConfig& config);

/// Arithmetic mean of per-concept held-out scores.
double sae_steering_score(const std::vector<double>& per_concept_scores);

/// Percentage lift of the selected score over the base score.
double steering_gain(double base, double selected);

}  // namespace steerkit

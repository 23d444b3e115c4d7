#include "steerkit/steering.hpp"

#include <algorithm>
#include <chrono>
#include <set>
#include <thread>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

Eigen::VectorXd apply_steering(const Eigen::VectorXd& x,
                               const SteeringSpec& spec,
                               const SaeParams& params) {
  if (spec.feature < 0 || spec.feature >= params.dict_size())
    throw ValidationError("apply_steering: feature index out of range");
  if (x.size() != params.d())
    throw ValidationError("apply_steering: width mismatch");
  if (spec.scale < 0.0)
    throw ValidationError("apply_steering: scale must be >= 0");

  double coeff = 0.0;
  switch (spec.mode) {
    case SteeringMode::DecoderAtom:
      coeff = spec.factor * spec.scale;
      break;
    case SteeringMode::CodeAmplify:
      coeff = spec.factor * encode(params, x).values(spec.feature);
      break;
  }
  if (coeff == 0.0) return x;
  return x + coeff * params.w_dec.col(spec.feature);
}

HookPoint steering_hook(const SteeringSpec& spec, const SaeParams& params) {
  HookPoint hook;
  hook.layer = spec.layer;
  hook.transform = [spec, &params](const Eigen::VectorXd& x) {
    return apply_steering(x, spec, params);
  };
  return hook;
}

void ConceptTask::validate() const {
  if (instructions.size() != 10)
    throw ValidationError("concept task: exactly 10 instructions required");
  if (dev_split.size() != 5 || heldout_split.size() != 5)
    throw ValidationError("concept task: splits must be 5/5");
  std::set<int> all(dev_split.begin(), dev_split.end());
  for (int i : heldout_split) all.insert(i);
  if (all.size() != 10 || *all.begin() != 0 || *all.rbegin() != 9)
    throw ValidationError("concept task: splits must partition 0..9");
}

void assign_splits(ConceptTask& task, std::uint64_t seed) {
  std::vector<int> order(task.instructions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  Rng rng(derive_seed(seed, 0x5b117));
  rng.shuffle(order);
  task.dev_split.assign(order.begin(), order.begin() + 5);
  task.heldout_split.assign(order.begin() + 5, order.end());
  std::sort(task.dev_split.begin(), task.dev_split.end());
  std::sort(task.heldout_split.begin(), task.heldout_split.end());
}

namespace {

GenerationRecord steer_and_judge(const ConceptTask& task, int instruction_index,
                                 double factor, const SteeringSpec& templ,
                                 const ToyLm& lm, const SaeParams& params,
                                 SteeringJudge& judge,
                                 const SteeringEvalConfig& config) {
  GenerationRecord rec;
  rec.instruction_index = instruction_index;
  rec.factor = factor;

  SteeringSpec spec = templ;
  spec.factor = factor;
  const HookPoint hook = steering_hook(spec, params);

  const std::string& instruction =
      task.instructions[std::size_t(instruction_index)];
  std::vector<int> prompt;
  prompt.push_back(ToyLm::kDocSep);
  for (int t : text_to_tokens(instruction)) prompt.push_back(t);

  const std::uint64_t decode_seed =
      derive_seed(config.seed, std::uint64_t(task.feature),
                  std::uint64_t(instruction_index),
                  std::uint64_t(std::llround(factor * 1024.0)));
  const std::vector<int> full =
      lm.generate(prompt, config.max_tokens, hook, decode_seed);
  rec.text = tokens_to_text(
      std::span<const int>(full.data() + prompt.size(),
                           full.size() - prompt.size()));

  for (int attempt = 0; attempt <= config.judge_retries; ++attempt) {
    if (attempt > 0 && config.judge_backoff_seconds > 0.0)
      std::this_thread::sleep_for(std::chrono::duration<double>(
          config.judge_backoff_seconds * double(1 << (attempt - 1))));
    try {
      rec.rating = judge.rate(rec.text, task.description, instruction);
      rec.hm = harmonic_mean(rec.rating);
      return rec;
    } catch (const JudgeError&) {
      // retry, then flag
    }
  }
  rec.judge_failed = true;
  rec.rating = Rating(0, 0, 0);
  rec.hm = 0.0;
  return rec;
}

}  // namespace

SteeringOutcome sweep_factors(const ConceptTask& task,
                              const std::vector<double>& grid,
                              const SteeringSpec& spec_template,
                              const ToyLm& lm, const SaeParams& params,
                              SteeringJudge& judge,
                              const SteeringEvalConfig& config) {
  if (grid.empty()) throw ValidationError("sweep_factors: empty factor grid");
  task.validate();

  SteeringOutcome outcome;
  outcome.factor_grid = grid;
  outcome.dev_mean.reserve(grid.size());

  for (double factor : grid) {
    double acc = 0.0;
    for (int idx : task.dev_split) {
      GenerationRecord rec = steer_and_judge(task, idx, factor, spec_template,
                                             lm, params, judge, config);
      acc += rec.hm;
      outcome.dev_records.push_back(std::move(rec));
    }
    outcome.dev_mean.push_back(acc / double(task.dev_split.size()));
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (outcome.dev_mean[i] > outcome.dev_mean[best] ||
        (outcome.dev_mean[i] == outcome.dev_mean[best] &&
         grid[i] < grid[best]))
      best = i;
  }
  outcome.best_factor = grid[best];
  return outcome;
}

double heldout_score(const ConceptTask& task, SteeringOutcome& outcome,
                     const SteeringSpec& spec_template, const ToyLm& lm,
                     const SaeParams& params, SteeringJudge& judge,
                     const SteeringEvalConfig& config) {
  if (outcome.dev_mean.empty())
    throw ValidationError("heldout_score: run sweep_factors first");
  task.validate();

  double acc = 0.0;
  for (int idx : task.heldout_split) {
    GenerationRecord rec =
        steer_and_judge(task, idx, outcome.best_factor, spec_template, lm,
                        params, judge, config);
    acc += rec.hm;
    outcome.heldout_records.push_back(std::move(rec));
  }
  outcome.heldout_mean = acc / double(task.heldout_split.size());
  return outcome.heldout_mean;
}

double sae_steering_score(const std::vector<double>& per_concept_scores) {
  if (per_concept_scores.empty())
    throw ValidationError("sae_steering_score: empty task set");
  double acc = 0.0;
  for (double s : per_concept_scores) acc += s;
  return acc / double(per_concept_scores.size());
}

double steering_gain(double base, double selected) {
  if (base <= 0.0)
    throw ValidationError("steering_gain: undefined for base <= 0");
  return 100.0 * (selected - base) / base;
}

}  // namespace steerkit

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "steerkit/distribution.hpp"
#include "steerkit/sae.hpp"
#include "steerkit/toy_lm.hpp"

namespace steerkit {

/// Natural-log Shannon entropy; 0 * log 0 counts as 0.
double token_entropy(const TokenDistribution& p);

/// Negative mean log-probability of the k largest probabilities, ties at
/// the k-th value broken by lower token index. Lower means sharper.
double token_confidence(const TokenDistribution& p, int k);

/// How the single-feature intervention enters the residual stream:
///   Additive: x + alpha * h_f(x) * v_f        (identity at alpha = 0)
///   Amplify:  x + (alpha - 1) * h_f(x) * v_f  (identity at alpha = 1)
enum class InterventionMode { Additive, Amplify };

enum class DeltaDirection { Down, Neutral, Up };

struct DeltaRecord {
  int feature = 0;
  double delta = 0.0;  // C_k(intervened) - C_k(baseline)
  DeltaDirection direction = DeltaDirection::Neutral;
  int k = 1;
  double alpha = 10.0;
};

inline DeltaDirection delta_direction(double delta) {
  if (delta > 0.0) return DeltaDirection::Up;
  if (delta < 0.0) return DeltaDirection::Down;
  return DeltaDirection::Neutral;
}

/// Default probe prefix for the confidence selector.
extern const char* const kDefaultProbePrefix;  // "From my experience,"

/// Two single-step forward passes on the same prefix: baseline and with the
/// feature's own code scaled into the residual at `layer`. The hook lives
/// only for the intervened pass.
DeltaRecord delta_confidence(const ToyLm& lm, const SaeParams& params,
                             int feature, double alpha, int k,
                             std::span<const int> prefix,
                             InterventionMode mode, int layer);

/// Every feature's DeltaRecord (one baseline pass shared). Features whose
/// code is zero at every prefix position get delta exactly 0 in additive
/// mode and stay in the pool.
std::vector<DeltaRecord> delta_confidence_all(const ToyLm& lm,
                                              const SaeParams& params,
                                              double alpha, int k,
                                              std::span<const int> prefix,
                                              InterventionMode mode, int layer,
                                              int threads = 0);

enum class TierMode { Abs, Up, Down };

struct TierRule {
  enum class Kind { TopK, Quantile } kind = Kind::TopK;
  int top_k = 1;     // K per direction, 1..5
  double q = 0.99;   // tail quantile, mirrored for Down
};

struct SelectionSet {
  std::vector<int> features;  // ordered, most extreme first
  TierMode mode = TierMode::Abs;
  std::string rule;
};

/// Ranks the pool (abs: by |delta|; up: positive deltas descending; down:
/// negative deltas ascending) and cuts either the top-K or the quantile
/// tail. Deterministic tie-break by feature index; output independent of
/// the pool's input order.
SelectionSet rank_and_tier(const std::vector<DeltaRecord>& records,
                           const TierRule& rule, TierMode mode);

/// Evaluates each tier with the supplied dev-protocol steering evaluator and
/// returns the argmax tier; ties go to the smaller tier (fewer features,
/// then earlier in the list).
SelectionSet select_best_tier(
    const std::vector<SelectionSet>& tiers,
    const std::function<double(const SelectionSet&)>& dev_score);

}  // namespace steerkit

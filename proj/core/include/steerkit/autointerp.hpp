#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "steerkit/dataset.hpp"
#include "steerkit/judge.hpp"
#include "steerkit/sae.hpp"

namespace steerkit {

enum class WindowKind { Top, ImportanceWeighted, Random };

/// A 21-token window (buffer 10 per side) that never crosses a document
/// boundary; special positions never serve as centers.
struct WindowSample {
  int center = 0;  // dataset position of the center token
  std::vector<int> tokens;
  Eigen::VectorXd activations;  // per-token latent activations
  WindowKind kind = WindowKind::Top;

  std::string text() const;
};

/// Sampled windows for one latent: 12 Top + 7 IW + 10 Random, split into a
/// 15-window generation set (10 Top + 5 IW) and a shuffled 14-window scoring
/// set (2 Top + 2 IW + 10 Random). tau_act = 0.01 * v_max.
struct LatentEvalSet {
  int latent = 0;
  std::vector<WindowSample> generation;
  std::vector<WindowSample> scoring;
  double v_max = 0.0;
  double tau_act = 0.0;
};

inline constexpr int kWindowBuffer = 10;
inline constexpr int kWindowLength = 2 * kWindowBuffer + 1;
inline constexpr int kTopWindows = 12;
inline constexpr int kIwWindows = 7;
inline constexpr int kRandomWindows = 10;
inline constexpr int kGenerationTop = 10;
inline constexpr int kGenerationIw = 5;
inline constexpr int kScoringWindows = 14;
inline constexpr double kTauFraction = 0.01;

/// Samples the window sets for one latent from its activation vector over
/// the dataset. Throws InsufficientDataError when the required counts cannot
/// be met (e.g. the latent never fires).
LatentEvalSet collect_windows(const Eigen::VectorXd& activations,
                              const ActivationDataset& dataset, int latent,
                              std::uint64_t seed);

/// 1 iff the window's max activation strictly exceeds tau_act.
int ground_truth(const WindowSample& window, double tau_act);

/// Drafts a description from generation windows, predicts which scoring
/// windows fire.
class InterpJudge {
 public:
  virtual ~InterpJudge() = default;
  virtual std::string describe(const std::vector<WindowSample>& generation,
                               double tau_act) = 0;
  /// 0-based indices into the scoring vector.
  virtual std::set<int> predict(const std::string& description,
                                const std::vector<WindowSample>& scoring) = 0;
};

/// Deterministic desk-scale judge: the description is the most frequent
/// word overlapping highlighted tokens, and a window is predicted active iff
/// its text contains that word. Accuracy then reflects how keyword-aligned
/// the latent actually is.
class KeywordInterpJudge final : public InterpJudge {
 public:
  std::string describe(const std::vector<WindowSample>& generation,
                       double tau_act) override;
  std::set<int> predict(const std::string& description,
                        const std::vector<WindowSample>& scoring) override;
};

/// Test oracle: reads the true labels off the windows and flips each with
/// probability rho (seeded); expected accuracy is 1 - rho.
class OracleInterpJudge final : public InterpJudge {
 public:
  OracleInterpJudge(double rho, std::uint64_t seed, bool inverted = false);
  std::string describe(const std::vector<WindowSample>& generation,
                       double tau_act) override;
  std::set<int> predict(const std::string& description,
                        const std::vector<WindowSample>& scoring) override;

 private:
  double rho_;
  std::uint64_t seed_;
  bool inverted_;
  double tau_act_ = 0.0;
};

/// External LLM judge over the autointerp templates.
class LlmInterpJudge final : public InterpJudge {
 public:
  explicit LlmInterpJudge(std::shared_ptr<LlmClient> client);
  std::string describe(const std::vector<WindowSample>& generation,
                       double tau_act) override;
  std::set<int> predict(const std::string& description,
                        const std::vector<WindowSample>& scoring) override;

 private:
  std::shared_ptr<LlmClient> client_;
};

struct InterpScore {
  int latent = 0;
  double accuracy = 0.0;  // correct / 14
  std::string description;
};

InterpScore score_latent(const LatentEvalSet& evalset, InterpJudge& judge);

struct ConceptEntry {
  int latent = 0;
  std::string concept_id;  // "<layer>_<latent>"
  std::string description;
  double accuracy = 0.0;
};

struct InterpResult {
  double mu = 0.0;  // mean accuracy over the concept subset
  std::vector<InterpScore> scored;
  std::vector<ConceptEntry> concepts;
};

struct InterpConfig {
  int n_latents = 200;     // latents to score (paper-scale: 1000)
  int concept_count = 25;  // sampled concept subset (paper-scale: 100)
  int threads = 0;         // 0 = hardware concurrency
};

/// Scores latents in index order until n_latents succeed, samples the
/// concept subset with the run seed, and returns the mean accuracy over it.
/// Latents with too little data or judge failures are skipped/flagged.
InterpResult sae_interp_score(const SaeParams& params,
                              const ActivationDataset& dataset,
                              InterpJudge& judge, std::uint64_t seed,
                              const InterpConfig& config = {});

}  // namespace steerkit

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>

namespace steerkit {

/// Judge subscores, each clamped to [0, 2].
struct Rating {
  double concept_score = 0.0;
  double instruction = 0.0;
  double fluency = 0.0;

  Rating() = default;
  Rating(double c, double i, double f);
};

enum class TemplateKind {
  Concept,
  Instruction,
  Fluency,
  AutointerpDescribe,
  AutointerpPredict,
};

/// Instantiates the fixed judge prompt for `kind`, substituting every
/// {slot} placeholder. Throws ValidationError on a missing slot.
std::string render_template(TemplateKind kind,
                            const std::map<std::string, std::string>& slots);

/// Parses the last "Rating: [[score]]" occurrence, clamped to [0, 2].
/// Throws JudgeError when the pattern is absent.
double parse_rating(const std::string& response);

/// 0 if any subscore <= 0, else 3 / (1/C + 1/I + 1/F). Range [0, 2].
double harmonic_mean(const Rating& r);

/// Scores one generated continuation against a concept and an instruction.
class SteeringJudge {
 public:
  virtual ~SteeringJudge() = default;
  virtual Rating rate(const std::string& sentence, const std::string& concept_text,
                      const std::string& instruction) = 0;
};

/// Deterministic rule-based judge for desk-scale runs:
///   C: occurrences of the concept keyword (quoted substring of the concept
///      text when present) — absent 0, once 1, twice or more 2.
///   I: fraction of the instruction's unique words present in the sentence —
///      < 0.1 -> 0, < 0.3 -> 1, else 2.
///   F: max n-gram repetition (n <= 3) — >= 8 -> 0, >= 4 -> 1, else 2;
///      a sentence with no words scores 0.
Rating synthetic_judge_rules(const std::string& sentence,
                             const std::string& concept_text,
                             const std::string& instruction,
                             std::uint64_t seed);

class SyntheticSteeringJudge final : public SteeringJudge {
 public:
  explicit SyntheticSteeringJudge(std::uint64_t seed = 0) : seed_(seed) {}
  Rating rate(const std::string& sentence, const std::string& concept_text,
              const std::string& instruction) override;

 private:
  std::uint64_t seed_;
};

Rating judge_steering(SteeringJudge& backend, const std::string& sentence,
                      const std::string& concept_text,
                      const std::string& instruction);

/// Keyword used by the synthetic judge for a concept description: the first
/// double-quoted substring if any, else the trimmed description.
std::string concept_keyword(const std::string& concept_text);

// ---------------------------------------------------------------------------
// External LLM transport

struct ExternalJudgeConfig {
  std::string endpoint;  // http://host[:port]/path (chat-completions shape)
  std::string model;
  std::string auth_env = "JUDGE_API_KEY";
  int timeout_seconds = 30;
  int max_retries = 3;
  double backoff_seconds = 0.5;
  int max_in_flight = 4;
  std::string audit_log;  // JSONL of prompts/responses, auth redacted
};

/// One-prompt completion client with bounded concurrency, retries with
/// exponential backoff, and optional audit logging.
class LlmClient {
 public:
  explicit LlmClient(ExternalJudgeConfig config);
  ~LlmClient();

  std::string complete(const std::string& prompt);

  const ExternalJudgeConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Steering judge backed by an external LLM: one template call per subscore.
class ExternalSteeringJudge final : public SteeringJudge {
 public:
  explicit ExternalSteeringJudge(std::shared_ptr<LlmClient> client);
  Rating rate(const std::string& sentence, const std::string& concept_text,
              const std::string& instruction) override;

 private:
  std::shared_ptr<LlmClient> client_;
};

}  // namespace steerkit

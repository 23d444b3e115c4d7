#include "steerkit/judge.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <regex>
#include <set>
#include <vector>

#include "steerkit/errors.hpp"

namespace steerkit {

namespace {

double clamp02(double v) { return std::clamp(v, 0.0, 2.0); }

const char* kConceptTemplate =
    "[System]\n"
    "Please act as an impartial judge and evaluate whether the specified "
    "concept is presented in the sentence fragment provided below. Focus "
    "solely on whether the concept is clearly incorporated, without regard "
    "for grammar or logical coherence.\n"
    "Begin your evaluation by providing a short explanation of whether the "
    "concept is clearly incorporated. Point out references to the concept in "
    "the fragment, noting any minimal or awkward incorporations. After "
    "providing your explanation, rate the concept's relevance on a scale "
    "from 0 to 2, where 0 indicates the concept is not present at all, 1 "
    "indicates the concept is somewhat present but minimally or awkwardly "
    "incorporated, and 2 indicates the concept is more fully and effectively "
    "incorporated, with stronger and more natural integration. Provide your "
    "rating using this exact format: \"Rating: [[score]]\".\n"
    "[Concept Start] {concept} [Concept End]\n"
    "[Sentence Fragment Start] {sentence} [Sentence Fragment End]";

const char* kInstructionTemplate =
    "[System]\n"
    "Please act as an impartial judge and evaluate whether the sentence "
    "fragment provided below is related to the instruction. Focus solely on "
    "the degree of relatedness in terms of topic, regardless of grammar, "
    "coherence, or informativeness.\n"
    "Begin your evaluation by providing a brief explanation of whether the "
    "sentence is related to the instruction, and point out references "
    "related to the instruction. After providing your explanation, rate the "
    "instruction relevance on a scale from 0 to 2, where 0 indicates the "
    "sentence is unrelated to the instruction, 1 indicates it is somewhat "
    "related but only minimally or indirectly relevant in terms of topic, "
    "and 2 indicates it is more clearly and directly related to the "
    "instruction. Provide your rating using this exact format: \"Rating: "
    "[[score]]\".\n"
    "[Instruction Start] {instruction} [Instruction End]\n"
    "[Sentence Fragment Start] {sentence} [Sentence Fragment End]";

const char* kFluencyTemplate =
    "[System]\n"
    "Please act as an impartial judge and evaluate the fluency of the "
    "sentence fragment provided below. Focus solely on fluency, disregarding "
    "its completeness, relevance, coherence with any broader context, or "
    "informativeness.\n"
    "Begin your evaluation by briefly describing the fluency of the "
    "sentence, noting any unnatural phrasing, awkward transitions, "
    "grammatical errors, or repetitive structures that may hinder "
    "readability. After providing your explanation, rate the sentence's "
    "fluency on a scale from 0 to 2, where 0 indicates the sentence is not "
    "fluent and highly unnatural (e.g., incomprehensible or repetitive), 1 "
    "indicates it is somewhat fluent but contains noticeable errors or "
    "awkward phrasing, and 2 indicates the sentence is fluent and almost "
    "perfect. Provide your rating using this exact format: \"Rating: "
    "[[score]]\".\n"
    "[Sentence Fragment Start] {sentence} [Sentence Fragment End]";

const char* kDescribeTemplate =
    "You are analyzing one latent unit of a sparse autoencoder attached to a "
    "language model. Below are text windows in which the unit fires. Tokens "
    "between << and >> carry strong activation.\n"
    "{examples}\n"
    "Write one short English description of when the unit fires. Reply with "
    "the description only.";

const char* kPredictTemplate =
    "A latent unit of a sparse autoencoder fires according to this "
    "description: {description}\n"
    "Below are numbered text windows.\n"
    "{examples}\n"
    "Reply with a comma-separated list of the numbers of the windows where "
    "the unit would fire, or None if it fires in none of them.";

struct TemplateInfo {
  const char* text;
  std::vector<std::string> slots;
};

TemplateInfo template_info(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::Concept:
      return {kConceptTemplate, {"concept", "sentence"}};
    case TemplateKind::Instruction:
      return {kInstructionTemplate, {"instruction", "sentence"}};
    case TemplateKind::Fluency:
      return {kFluencyTemplate, {"sentence"}};
    case TemplateKind::AutointerpDescribe:
      return {kDescribeTemplate, {"examples"}};
    case TemplateKind::AutointerpPredict:
      return {kPredictTemplate, {"description", "examples"}};
  }
  throw ValidationError("unknown template kind");
}

}  // namespace

Rating::Rating(double c, double i, double f)
    : concept_score(clamp02(c)), instruction(clamp02(i)), fluency(clamp02(f)) {}

std::string render_template(TemplateKind kind,
                            const std::map<std::string, std::string>& slots) {
  const TemplateInfo info = template_info(kind);
  std::string out = info.text;
  for (const auto& slot : info.slots) {
    auto it = slots.find(slot);
    if (it == slots.end())
      throw ValidationError("render_template: missing slot '" + slot + "'");
    const std::string needle = "{" + slot + "}";
    std::size_t pos;
    while ((pos = out.find(needle)) != std::string::npos)
      out.replace(pos, needle.size(), it->second);
  }
  return out;
}

double parse_rating(const std::string& response) {
  static const std::regex pattern(
      R"(Rating: \[\[([+-]?[0-9]+(?:\.[0-9]+)?)\]\])");
  auto begin = std::sregex_iterator(response.begin(), response.end(), pattern);
  auto end = std::sregex_iterator();
  if (begin == end)
    throw JudgeError("parse_rating: no 'Rating: [[score]]' in response");
  std::smatch last;
  for (auto it = begin; it != end; ++it) last = *it;
  return clamp02(std::stod(last[1].str()));
}

double harmonic_mean(const Rating& r) {
  const double c = clamp02(r.concept_score);
  const double i = clamp02(r.instruction);
  const double f = clamp02(r.fluency);
  if (c <= 0.0 || i <= 0.0 || f <= 0.0) return 0.0;
  return 3.0 / (1.0 / c + 1.0 / i + 1.0 / f);
}

// ---------------------------------------------------------------------------
// Synthetic judge

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  return s;
}

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

int count_occurrences(const std::string& haystack, const std::string& needle) {
  if (needle.empty()) return 0;
  int count = 0;
  std::size_t pos = 0;
  while ((pos = haystack.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

// Largest repetition count of any n-gram, n in {1,2,3}. A run of one
// repeated character counts too, so single-character floods score as
// repetition even without word boundaries.
int max_ngram_repetition(const std::vector<std::string>& words,
                         const std::string& raw) {
  int best = 0;
  for (int n = 1; n <= 3; ++n) {
    if (int(words.size()) < n) break;
    std::map<std::string, int> counts;
    for (std::size_t i = 0; i + std::size_t(n) <= words.size(); ++i) {
      std::string gram;
      for (int j = 0; j < n; ++j) {
        if (j) gram += ' ';
        gram += words[i + std::size_t(j)];
      }
      best = std::max(best, ++counts[gram]);
    }
  }
  int run = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    run = (i > 0 && raw[i] == raw[i - 1]) ? run + 1 : 1;
    best = std::max(best, run);
  }
  return best;
}

}  // namespace

std::string concept_keyword(const std::string& concept_text) {
  const std::size_t open = concept_text.find('"');
  if (open != std::string::npos) {
    const std::size_t close = concept_text.find('"', open + 1);
    if (close != std::string::npos && close > open + 1)
      return lower(concept_text.substr(open + 1, close - open - 1));
  }
  // trim whitespace
  std::size_t b = concept_text.find_first_not_of(" \t\n");
  std::size_t e = concept_text.find_last_not_of(" \t\n");
  if (b == std::string::npos) return "";
  return lower(concept_text.substr(b, e - b + 1));
}

Rating synthetic_judge_rules(const std::string& sentence,
                             const std::string& concept_text,
                             const std::string& instruction,
                             std::uint64_t /*seed*/) {
  const std::string text = lower(sentence);
  const std::string keyword = concept_keyword(concept_text);

  const int hits = count_occurrences(text, keyword);
  const double c = hits >= 2 ? 2.0 : (hits == 1 ? 1.0 : 0.0);

  const std::vector<std::string> sent_words = words_of(sentence);
  const std::vector<std::string> instr_words = words_of(instruction);
  std::set<std::string> sent_set(sent_words.begin(), sent_words.end());
  std::set<std::string> instr_set(instr_words.begin(), instr_words.end());
  double overlap = 0.0;
  if (!instr_set.empty()) {
    int common = 0;
    for (const auto& w : instr_set) common += sent_set.count(w) ? 1 : 0;
    overlap = double(common) / double(instr_set.size());
  }
  const double i = overlap < 0.1 ? 0.0 : (overlap < 0.3 ? 1.0 : 2.0);

  double f;
  if (sent_words.empty()) {
    f = 0.0;
  } else {
    const int rep = max_ngram_repetition(sent_words, text);
    f = rep >= 8 ? 0.0 : (rep >= 4 ? 1.0 : 2.0);
  }
  return Rating(c, i, f);
}

Rating SyntheticSteeringJudge::rate(const std::string& sentence,
                                    const std::string& concept_text,
                                    const std::string& instruction) {
  return synthetic_judge_rules(sentence, concept_text, instruction, seed_);
}

Rating judge_steering(SteeringJudge& backend, const std::string& sentence,
                      const std::string& concept_text,
                      const std::string& instruction) {
  return backend.rate(sentence, concept_text, instruction);
}

}  // namespace steerkit

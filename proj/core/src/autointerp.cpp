#include "steerkit/autointerp.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <sstream>

#include "steerkit/errors.hpp"
#include "steerkit/parallel.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/toy_lm.hpp"

namespace steerkit {

std::string WindowSample::text() const { return tokens_to_text(tokens); }

namespace {

WindowSample make_window(const Eigen::VectorXd& acts,
                         const ActivationDataset& ds, int center,
                         WindowKind kind) {
  WindowSample w;
  w.center = center;
  w.kind = kind;
  w.tokens.reserve(kWindowLength);
  w.activations.resize(kWindowLength);
  for (int i = 0; i < kWindowLength; ++i) {
    const int pos = center - kWindowBuffer + i;
    w.tokens.push_back(ds.tokens[std::size_t(pos)]);
    w.activations(i) = acts(pos);
  }
  return w;
}

// Centers whose full window stays inside one document and touches no
// special position.
std::vector<int> valid_centers(const ActivationDataset& ds) {
  const int n = int(ds.size());
  std::vector<int> special_prefix(std::size_t(n) + 1, 0);
  std::vector<int> doc_change_prefix(std::size_t(n) + 1, 0);
  for (int i = 0; i < n; ++i) {
    special_prefix[std::size_t(i) + 1] =
        special_prefix[std::size_t(i)] + (ds.special_mask[std::size_t(i)] != 0);
    const bool change = i > 0 && ds.doc_ids[std::size_t(i)] !=
                                     ds.doc_ids[std::size_t(i) - 1];
    doc_change_prefix[std::size_t(i) + 1] =
        doc_change_prefix[std::size_t(i)] + (change ? 1 : 0);
  }
  std::vector<int> centers;
  for (int c = kWindowBuffer; c + kWindowBuffer < n; ++c) {
    const int lo = c - kWindowBuffer;
    const int hi = c + kWindowBuffer;
    if (special_prefix[std::size_t(hi) + 1] - special_prefix[std::size_t(lo)] >
        0)
      continue;
    if (doc_change_prefix[std::size_t(hi) + 1] -
            doc_change_prefix[std::size_t(lo) + 1] >
        0)
      continue;
    centers.push_back(c);
  }
  return centers;
}

}  // namespace

LatentEvalSet collect_windows(const Eigen::VectorXd& activations,
                              const ActivationDataset& dataset, int latent,
                              std::uint64_t seed) {
  if (Eigen::Index(dataset.size()) != activations.size())
    throw ValidationError("collect_windows: activation length mismatch");
  const std::vector<int> centers = valid_centers(dataset);
  Rng rng(derive_seed(seed, 0x819d0, std::uint64_t(latent)));

  // Top: greedy non-overlapping peaks in descending activation order.
  std::vector<int> by_act;
  for (int c : centers)
    if (activations(c) > 0.0) by_act.push_back(c);
  std::sort(by_act.begin(), by_act.end(), [&](int a, int b) {
    if (activations(a) != activations(b))
      return activations(a) > activations(b);
    return a < b;
  });
  std::vector<int> top;
  for (int c : by_act) {
    bool overlaps = false;
    for (int chosen : top)
      if (std::abs(chosen - c) < kWindowLength) {
        overlaps = true;
        break;
      }
    if (!overlaps) {
      top.push_back(c);
      if (int(top.size()) == kTopWindows) break;
    }
  }
  if (int(top.size()) < kTopWindows)
    throw InsufficientDataError(
        "latent " + std::to_string(latent) + ": only " +
        std::to_string(top.size()) + " non-overlapping positive peaks");

  LatentEvalSet out;
  out.latent = latent;
  double v_max = 0.0;
  for (int c : top)
    for (int i = -kWindowBuffer; i <= kWindowBuffer; ++i)
      v_max = std::max(v_max, activations(c + i));
  out.v_max = v_max;
  out.tau_act = kTauFraction * v_max;
  const double min_top_peak = activations(top.back());

  std::vector<std::uint8_t> used(dataset.size(), 0);
  for (int c : top) used[std::size_t(c)] = 1;

  // Importance-weighted: proportional to activation, after removing values
  // at least as large as the smallest Top peak. Without replacement.
  std::vector<int> iw_pool;
  for (int c : centers)
    if (!used[std::size_t(c)] && activations(c) > 0.0 &&
        activations(c) < min_top_peak)
      iw_pool.push_back(c);
  if (int(iw_pool.size()) < kIwWindows)
    throw InsufficientDataError("latent " + std::to_string(latent) +
                                ": too few importance-weighted candidates");
  std::vector<int> iw;
  std::vector<double> weights;
  weights.reserve(iw_pool.size());
  for (int c : iw_pool) weights.push_back(activations(c));
  for (int pick = 0; pick < kIwWindows; ++pick) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = rng.uniform01() * total;
    std::size_t chosen = weights.size() - 1;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) {
        chosen = i;
        break;
      }
    }
    iw.push_back(iw_pool[chosen]);
    used[std::size_t(iw_pool[chosen])] = 1;
    iw_pool.erase(iw_pool.begin() + long(chosen));
    weights.erase(weights.begin() + long(chosen));
  }

  // Random: uniform over remaining valid centers (center collisions only).
  std::vector<int> random_pool;
  for (int c : centers)
    if (!used[std::size_t(c)]) random_pool.push_back(c);
  if (int(random_pool.size()) < kRandomWindows)
    throw InsufficientDataError("latent " + std::to_string(latent) +
                                ": too few random candidates");
  std::vector<int> randoms;
  for (int pick = 0; pick < kRandomWindows; ++pick) {
    const std::size_t i = rng.index(random_pool.size());
    randoms.push_back(random_pool[i]);
    used[std::size_t(random_pool[i])] = 1;
    random_pool.erase(random_pool.begin() + long(i));
  }

  // Split: 10 Top + 5 IW for generation; 2 Top + 2 IW + 10 Random, shuffled,
  // for scoring.
  rng.shuffle(top);
  rng.shuffle(iw);
  for (int i = 0; i < kGenerationTop; ++i)
    out.generation.push_back(
        make_window(activations, dataset, top[std::size_t(i)], WindowKind::Top));
  for (int i = 0; i < kGenerationIw; ++i)
    out.generation.push_back(make_window(activations, dataset,
                                         iw[std::size_t(i)],
                                         WindowKind::ImportanceWeighted));
  std::vector<WindowSample> scoring;
  for (int i = kGenerationTop; i < kTopWindows; ++i)
    scoring.push_back(
        make_window(activations, dataset, top[std::size_t(i)], WindowKind::Top));
  for (int i = kGenerationIw; i < kIwWindows; ++i)
    scoring.push_back(make_window(activations, dataset, iw[std::size_t(i)],
                                  WindowKind::ImportanceWeighted));
  for (int c : randoms)
    scoring.push_back(make_window(activations, dataset, c, WindowKind::Random));
  rng.shuffle(scoring);
  out.scoring = std::move(scoring);
  return out;
}

int ground_truth(const WindowSample& window, double tau_act) {
  return window.activations.maxCoeff() > tau_act ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Judges

namespace {

std::string lower_copy(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  return s;
}

// Words of the window text together with their token-index spans.
struct SpannedWord {
  std::string word;
  int begin = 0, end = 0;  // token indices [begin, end)
};

std::vector<SpannedWord> spanned_words(const WindowSample& w) {
  std::vector<SpannedWord> words;
  SpannedWord cur;
  bool in_word = false;
  for (int i = 0; i < int(w.tokens.size()); ++i) {
    const int t = w.tokens[std::size_t(i)];
    const bool alnum =
        t < 256 && std::isalnum(static_cast<unsigned char>(t)) != 0;
    if (alnum) {
      if (!in_word) {
        cur = SpannedWord{};
        cur.begin = i;
        in_word = true;
      }
      cur.word.push_back(char(std::tolower(t)));
      cur.end = i + 1;
    } else if (in_word) {
      words.push_back(cur);
      in_word = false;
    }
  }
  if (in_word) words.push_back(cur);
  return words;
}

}  // namespace

std::string KeywordInterpJudge::describe(
    const std::vector<WindowSample>& generation, double tau_act) {
  std::map<std::string, int> counts;
  for (const auto& w : generation) {
    for (const auto& sw : spanned_words(w)) {
      bool highlighted = false;
      for (int i = sw.begin; i < sw.end; ++i)
        if (w.activations(i) > tau_act) {
          highlighted = true;
          break;
        }
      if (highlighted) ++counts[sw.word];
    }
  }
  std::string best;
  int best_count = 0;
  for (const auto& [word, count] : counts) {
    if (count > best_count) {
      best = word;
      best_count = count;
    }
  }
  if (best.empty()) return "no consistent activation pattern";
  return "occurrences of the word \"" + best + "\"";
}

std::set<int> KeywordInterpJudge::predict(
    const std::string& description, const std::vector<WindowSample>& scoring) {
  std::set<int> hits;
  const std::size_t open = description.find('"');
  if (open == std::string::npos) return hits;
  const std::size_t close = description.find('"', open + 1);
  if (close == std::string::npos || close == open + 1) return hits;
  const std::string keyword =
      lower_copy(description.substr(open + 1, close - open - 1));
  for (int i = 0; i < int(scoring.size()); ++i)
    if (lower_copy(scoring[std::size_t(i)].text()).find(keyword) !=
        std::string::npos)
      hits.insert(i);
  return hits;
}

OracleInterpJudge::OracleInterpJudge(double rho, std::uint64_t seed,
                                     bool inverted)
    : rho_(rho), seed_(seed), inverted_(inverted) {}

std::string OracleInterpJudge::describe(
    const std::vector<WindowSample>& /*generation*/, double tau_act) {
  tau_act_ = tau_act;
  return "oracle label reader";
}

std::set<int> OracleInterpJudge::predict(
    const std::string& /*description*/,
    const std::vector<WindowSample>& scoring) {
  std::set<int> out;
  for (int i = 0; i < int(scoring.size()); ++i) {
    const WindowSample& w = scoring[std::size_t(i)];
    int label = ground_truth(w, tau_act_);
    if (inverted_) label = 1 - label;
    if (rho_ > 0.0) {
      Rng flip(derive_seed(seed_, std::uint64_t(w.center), std::uint64_t(i)));
      if (flip.uniform01() < rho_) label = 1 - label;
    }
    if (label) out.insert(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// External LLM interp judge

namespace {

std::string highlighted_text(const WindowSample& w, double tau_act) {
  std::string out;
  bool open = false;
  for (int i = 0; i < int(w.tokens.size()); ++i) {
    const bool hot = w.activations(i) > tau_act;
    if (hot && !open) {
      out += "<<";
      open = true;
    } else if (!hot && open) {
      out += ">>";
      open = false;
    }
    const int t = w.tokens[std::size_t(i)];
    if (t != ToyLm::kDocSep) out.push_back(char(std::uint8_t(t)));
  }
  if (open) out += ">>";
  return out;
}

}  // namespace

LlmInterpJudge::LlmInterpJudge(std::shared_ptr<LlmClient> client)
    : client_(std::move(client)) {}

std::string LlmInterpJudge::describe(const std::vector<WindowSample>& generation,
                                     double tau_act) {
  std::string examples;
  for (const auto& w : generation) {
    examples += "- ";
    examples += highlighted_text(w, tau_act);
    examples += "\n";
  }
  const std::string prompt = render_template(TemplateKind::AutointerpDescribe,
                                             {{"examples", examples}});
  return client_->complete(prompt);
}

std::set<int> LlmInterpJudge::predict(const std::string& description,
                                      const std::vector<WindowSample>& scoring) {
  std::string examples;
  for (int i = 0; i < int(scoring.size()); ++i) {
    examples += std::to_string(i + 1);
    examples += ". ";
    examples += scoring[std::size_t(i)].text();
    examples += "\n";
  }
  const std::string prompt =
      render_template(TemplateKind::AutointerpPredict,
                      {{"description", description}, {"examples", examples}});

  std::string last_error;
  for (int attempt = 0; attempt <= client_->config().max_retries; ++attempt) {
    const std::string reply = client_->complete(prompt);
    const std::string cleaned = lower_copy(reply);
    if (cleaned.find("none") != std::string::npos) return {};
    std::set<int> out;
    bool ok = false;
    std::istringstream in(reply);
    std::string tokenized;
    while (std::getline(in, tokenized, ',')) {
      try {
        const int idx = std::stoi(tokenized);
        if (idx >= 1 && idx <= int(scoring.size())) {
          out.insert(idx - 1);
          ok = true;
        }
      } catch (...) {
        // keep scanning; stray prose around the list is tolerated
      }
    }
    if (ok) return out;
    last_error = "no indices in reply";
  }
  throw JudgeError("interp judge: unparseable prediction: " + last_error);
}

// ---------------------------------------------------------------------------

InterpScore score_latent(const LatentEvalSet& evalset, InterpJudge& judge) {
  InterpScore score;
  score.latent = evalset.latent;
  score.description = judge.describe(evalset.generation, evalset.tau_act);
  const std::set<int> predicted =
      judge.predict(score.description, evalset.scoring);
  int correct = 0;
  for (int m = 0; m < int(evalset.scoring.size()); ++m) {
    const int truth = ground_truth(evalset.scoring[std::size_t(m)],
                                   evalset.tau_act);
    const int guess = predicted.count(m) ? 1 : 0;
    correct += (truth == guess);
  }
  score.accuracy = double(correct) / double(evalset.scoring.size());
  return score;
}

InterpResult sae_interp_score(const SaeParams& params,
                              const ActivationDataset& dataset,
                              InterpJudge& judge, std::uint64_t seed,
                              const InterpConfig& config) {
  const int F = params.dict_size();

  // One inference pass; per-latent activations kept sparse.
  std::vector<std::vector<std::pair<int, double>>> sparse(
      static_cast<std::size_t>(F));
  {
    const Eigen::MatrixXd codes = encode_dataset(params, dataset);
    for (Eigen::Index r = 0; r < codes.rows(); ++r) {
      if (dataset.special_mask[std::size_t(r)]) continue;
      for (int f = 0; f < F; ++f)
        if (codes(r, f) > 0.0)
          sparse[std::size_t(f)].emplace_back(int(r), codes(r, f));
    }
  }

  const Eigen::Index n = Eigen::Index(dataset.size());
  auto dense_activations = [&](int f) {
    Eigen::VectorXd acts = Eigen::VectorXd::Zero(n);
    for (const auto& [pos, val] : sparse[std::size_t(f)]) acts(pos) = val;
    return acts;
  };

  // Eval sets for the first n_latents scorable latents, in index order.
  std::vector<LatentEvalSet> evalsets;
  for (int f = 0; f < F && int(evalsets.size()) < config.n_latents; ++f) {
    if (sparse[std::size_t(f)].empty()) continue;
    try {
      evalsets.push_back(collect_windows(dense_activations(f), dataset, f,
                                         derive_seed(seed, 0x11a7e27)));
    } catch (const InsufficientDataError&) {
      continue;
    }
  }
  if (int(evalsets.size()) < config.concept_count)
    throw InsufficientDataError(
        "sae_interp_score: only " + std::to_string(evalsets.size()) +
        " scorable latents, need at least " +
        std::to_string(config.concept_count));

  std::vector<std::optional<InterpScore>> results(evalsets.size());
  parallel_for(evalsets.size(), config.threads, [&](std::size_t i) {
    try {
      results[i] = score_latent(evalsets[i], judge);
    } catch (const JudgeError&) {
      results[i] = std::nullopt;  // flagged, excluded from the mean
    }
  });

  InterpResult out;
  for (const auto& r : results)
    if (r) out.scored.push_back(*r);
  if (int(out.scored.size()) < config.concept_count)
    throw InsufficientDataError(
        "sae_interp_score: too few latents survived judging");

  // Concept subset, sampled uniformly with the run seed.
  std::vector<std::size_t> order(out.scored.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0xc09ce7));
  rng.shuffle(order);
  order.resize(std::size_t(config.concept_count));
  std::sort(order.begin(), order.end());

  double acc = 0.0;
  for (std::size_t i : order) {
    const InterpScore& s = out.scored[i];
    acc += s.accuracy;
    ConceptEntry entry;
    entry.latent = s.latent;
    entry.concept_id =
        std::to_string(dataset.layer) + "_" + std::to_string(s.latent);
    entry.description = s.description;
    entry.accuracy = s.accuracy;
    out.concepts.push_back(entry);
  }
  out.mu = acc / double(config.concept_count);
  return out;
}

}  // namespace steerkit

#include "steerkit/confidence.hpp"

#include <algorithm>
#include <cmath>

#include "steerkit/errors.hpp"
#include "steerkit/parallel.hpp"

namespace steerkit {

const char* const kDefaultProbePrefix = "From my experience,";

double token_entropy(const TokenDistribution& p) {
  p.validate();
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.probs.size(); ++i) {
    const double v = p.probs(i);
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double token_confidence(const TokenDistribution& p, int k) {
  p.validate();
  if (k < 1 || Eigen::Index(k) > p.probs.size())
    throw ValidationError("token_confidence: k must be in [1, V]");
  std::vector<int> idx(std::size_t(p.probs.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (p.probs(a) != p.probs(b)) return p.probs(a) > p.probs(b);
    return a < b;
  });
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    const double v = p.probs(idx[std::size_t(i)]);
    if (v <= 0.0)
      throw ValidationError(
          "token_confidence: zero probability inside the top-k (k exceeds "
          "the support size)");
    acc -= std::log(v);
  }
  return acc / double(k);
}

namespace {

HookPoint intervention_hook(const SaeParams& params, int feature, double coeff,
                            int layer) {
  HookPoint hook;
  hook.layer = layer;
  hook.transform = [&params, feature, coeff](const Eigen::VectorXd& x) {
    const double h = encode(params, x).values(feature);
    const double c = coeff * h;
    if (c == 0.0) return x;
    return Eigen::VectorXd(x + c * params.w_dec.col(feature));
  };
  return hook;
}

}  // namespace

DeltaRecord delta_confidence(const ToyLm& lm, const SaeParams& params,
                             int feature, double alpha, int k,
                             std::span<const int> prefix,
                             InterventionMode mode, int layer) {
  if (feature < 0 || feature >= params.dict_size())
    throw ValidationError("delta_confidence: feature index out of range");

  const TokenDistribution base = lm.next_token_distribution(prefix, {});
  const double c_base = token_confidence(base, k);

  const double coeff =
      mode == InterventionMode::Additive ? alpha : (alpha - 1.0);
  TokenDistribution intervened;
  if (coeff == 0.0) {
    intervened = base;  // identity intervention, delta exactly 0
  } else {
    intervened = lm.next_token_distribution(
        prefix, intervention_hook(params, feature, coeff, layer));
  }
  intervened.source = "intervened:" + std::to_string(feature) + ":" +
                      std::to_string(alpha);

  DeltaRecord rec;
  rec.feature = feature;
  rec.k = k;
  rec.alpha = alpha;
  rec.delta = token_confidence(intervened, k) - c_base;
  rec.direction = delta_direction(rec.delta);
  return rec;
}

std::vector<DeltaRecord> delta_confidence_all(const ToyLm& lm,
                                              const SaeParams& params,
                                              double alpha, int k,
                                              std::span<const int> prefix,
                                              InterventionMode mode, int layer,
                                              int threads) {
  const TokenDistribution base = lm.next_token_distribution(prefix, {});
  const double c_base = token_confidence(base, k);
  const double coeff =
      mode == InterventionMode::Additive ? alpha : (alpha - 1.0);

  // The feature codes over the prefix decide which features can act at all.
  HookPoint capture{layer, nullptr};
  const Eigen::MatrixXd residual =
      lm.forward_with_hook(prefix, capture).residual_at_layer;
  std::vector<std::uint8_t> fires(std::size_t(params.dict_size()), 0);
  for (Eigen::Index r = 0; r < residual.rows(); ++r) {
    const LatentCode code = encode(params, residual.row(r).transpose());
    for (int f = 0; f < params.dict_size(); ++f)
      if (code.values(f) > 0.0) fires[std::size_t(f)] = 1;
  }

  std::vector<DeltaRecord> records(std::size_t(params.dict_size()));
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const int f = int(i);
    DeltaRecord rec;
    rec.feature = f;
    rec.k = k;
    rec.alpha = alpha;
    if (coeff == 0.0 || !fires[i]) {
      rec.delta = 0.0;  // inactive on the probe prefix: retained at 0
    } else {
      const TokenDistribution intervened = lm.next_token_distribution(
          prefix, intervention_hook(params, f, coeff, layer));
      rec.delta = token_confidence(intervened, k) - c_base;
    }
    rec.direction = delta_direction(rec.delta);
    records[i] = rec;
  });
  return records;
}

SelectionSet rank_and_tier(const std::vector<DeltaRecord>& records,
                           const TierRule& rule, TierMode mode) {
  if (records.empty()) throw ValidationError("rank_and_tier: empty pool");

  std::vector<DeltaRecord> pool = records;
  // Canonical order first so the result ignores input ordering.
  std::sort(pool.begin(), pool.end(),
            [](const DeltaRecord& a, const DeltaRecord& b) {
              return a.feature < b.feature;
            });

  std::vector<const DeltaRecord*> ranked;
  for (const auto& r : pool) {
    switch (mode) {
      case TierMode::Abs:
        ranked.push_back(&r);
        break;
      case TierMode::Up:
        if (r.delta > 0.0) ranked.push_back(&r);
        break;
      case TierMode::Down:
        if (r.delta < 0.0) ranked.push_back(&r);
        break;
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [mode](const DeltaRecord* a, const DeltaRecord* b) {
                     double va = a->delta, vb = b->delta;
                     if (mode == TierMode::Abs) {
                       va = std::abs(va);
                       vb = std::abs(vb);
                     } else if (mode == TierMode::Down) {
                       va = -va;
                       vb = -vb;
                     }
                     if (va != vb) return va > vb;
                     return a->feature < b->feature;
                   });

  std::size_t count = 0;
  std::string rule_text;
  if (rule.kind == TierRule::Kind::TopK) {
    if (rule.top_k < 1) throw ValidationError("rank_and_tier: top_k >= 1");
    count = std::min(ranked.size(), std::size_t(rule.top_k));
    rule_text = "top" + std::to_string(rule.top_k);
  } else {
    if (rule.q <= 0.0 || rule.q >= 1.0)
      throw ValidationError("rank_and_tier: quantile must be in (0, 1)");
    const double tail = double(records.size()) * (1.0 - rule.q);
    count = std::size_t(std::max(1.0, std::floor(tail + 1e-9)));
    count = std::min(count, ranked.size());
    rule_text = "q" + std::to_string(rule.q);
  }

  SelectionSet set;
  set.mode = mode;
  set.rule = rule_text;
  for (std::size_t i = 0; i < count; ++i)
    set.features.push_back(ranked[i]->feature);
  return set;
}

SelectionSet select_best_tier(
    const std::vector<SelectionSet>& tiers,
    const std::function<double(const SelectionSet&)>& dev_score) {
  if (tiers.empty()) throw ValidationError("select_best_tier: no tiers");
  std::size_t best = 0;
  double best_score = dev_score(tiers[0]);
  for (std::size_t i = 1; i < tiers.size(); ++i) {
    const double score = dev_score(tiers[i]);
    const bool smaller = tiers[i].features.size() < tiers[best].features.size();
    if (score > best_score || (score == best_score && smaller)) {
      best = i;
      best_score = score;
    }
  }
  return tiers[best];
}

}  // namespace steerkit

#include "steerkit/rank_stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"

namespace steerkit {

double field_value(const ScoreRecord& record, Field field) {
  switch (field) {
    case Field::Mu: return record.mu;
    case Field::G: return record.g;
    case Field::Gain:
      if (!record.gain)
        throw ValidationError("score record '" + record.sae_id +
                              "' has no gain value");
      return *record.gain;
  }
  throw ValidationError("unknown field");
}

namespace {
int sign_of(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }
}  // namespace

int concordance(const ScoreRecord& a, const ScoreRecord& b, Field x, Field y) {
  return sign_of(field_value(a, x) - field_value(b, x)) *
         sign_of(field_value(a, y) - field_value(b, y));
}

TauResult kendall_tau_b(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2)
    throw ValidationError("kendall_tau_b: need two equal-length lists, n >= 2");

  long p_conc = 0, q_disc = 0, tx_only = 0, ty_only = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const int sx = sign_of(x[i] - x[j]);
      const int sy = sign_of(y[i] - y[j]);
      if (sx != 0 && sy != 0) {
        if (sx == sy)
          ++p_conc;
        else
          ++q_disc;
      } else if (sx == 0 && sy != 0) {
        ++tx_only;
      } else if (sx != 0 && sy == 0) {
        ++ty_only;
      }
      // ties on both sides enter neither factor
    }
  }
  const double fx = double(p_conc + q_disc + tx_only);
  const double fy = double(p_conc + q_disc + ty_only);
  if (fx == 0.0 || fy == 0.0)
    throw DegenerateInputError(
        "kendall_tau_b: all values tied on one side, tau_b undefined");

  TauResult r;
  r.n = int(n);
  r.pairs = long(n) * long(n - 1) / 2;
  r.tau_b = double(p_conc - q_disc) / std::sqrt(fx * fy);
  return r;
}

std::string to_string(Axis axis) {
  switch (axis) {
    case Axis::Architecture: return "Architecture";
    case Axis::MatchedSparsity: return "Sparsity";
    case Axis::Model: return "Model";
  }
  return "?";
}

namespace {

const std::string& axis_label(const ScoreRecord& r, Axis axis) {
  switch (axis) {
    case Axis::Architecture: return r.arch_label;
    case Axis::MatchedSparsity: return r.sparsity_slot;
    case Axis::Model: return r.model_label;
  }
  throw ValidationError("unknown axis");
}

}  // namespace

AxisSummary granulated_psi(const std::vector<ScoreRecord>& records, Axis axis,
                           Field x, Field y, const StatsSettings& settings) {
  std::map<std::string, std::vector<const ScoreRecord*>> groups;
  for (const auto& r : records) groups[axis_label(r, axis)].push_back(&r);
  if (groups.empty()) throw ValidationError("granulated_psi: no records");

  AxisSummary summary;
  summary.axis = axis;
  std::vector<double> taus;
  for (const auto& [label, members] : groups) {
    if (members.size() < 2)
      throw DegenerateInputError("granulated_psi: group '" + label +
                                 "' has fewer than 2 records");
    std::vector<double> gx, gy;
    gx.reserve(members.size());
    for (const auto* m : members) {
      gx.push_back(field_value(*m, x));
      gy.push_back(field_value(*m, y));
    }
    TauResult tau = kendall_tau_b(gx, gy);
    if (settings.per_group_tests && members.size() >= 3) {
      const PermutationResult perm = permutation_test(
          gx, gy, settings.n_perm,
          derive_seed(settings.seed, std::hash<std::string>{}(label)));
      tau.p_value = perm.p_value;
      tau.ci = perm.null_ci;
      tau.ci_method = "permutation_null";
    }
    taus.push_back(tau.tau_b);
    summary.groups.push_back(GroupTau{label, std::move(tau)});
  }

  const std::size_t g = taus.size();
  double mean = 0.0;
  for (double t : taus) mean += t;
  mean /= double(g);
  summary.psi = mean;

  // Jackknife over groups.
  if (g > 1) {
    std::vector<double> loo(g);
    double loo_mean = 0.0;
    for (std::size_t i = 0; i < g; ++i) {
      loo[i] = (mean * double(g) - taus[i]) / double(g - 1);
      loo_mean += loo[i];
    }
    loo_mean /= double(g);
    double ss = 0.0;
    for (double v : loo) ss += (v - loo_mean) * (v - loo_mean);
    summary.se = std::sqrt(ss * double(g - 1) / double(g));
  }

  // Percentile bootstrap over group tau values.
  {
    Rng rng(derive_seed(settings.seed, 0xb007, std::uint64_t(axis)));
    std::vector<double> boots;
    boots.reserve(std::size_t(settings.n_boot));
    for (int b = 0; b < settings.n_boot; ++b) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g; ++i) acc += taus[rng.index(g)];
      boots.push_back(acc / double(g));
    }
    std::sort(boots.begin(), boots.end());
    const double alpha = (1.0 - settings.level) / 2.0;
    summary.boot_ci = {stats_detail::percentile(boots, alpha),
                       stats_detail::percentile(boots, 1.0 - alpha)};
  }
  return summary;
}

double aggregate_psi(const std::vector<double>& psis) {
  if (psis.empty()) throw ValidationError("aggregate_psi: empty");
  double acc = 0.0;
  for (double p : psis) acc += p;
  return acc / double(psis.size());
}

double aggregate_psi(const std::vector<AxisSummary>& summaries) {
  std::vector<double> psis;
  psis.reserve(summaries.size());
  for (const auto& s : summaries) psis.push_back(s.psi);
  return aggregate_psi(psis);
}

PermutationResult permutation_test(std::span<const double> x,
                                   std::span<const double> y, int n_perm,
                                   std::uint64_t seed) {
  if (x.size() < 3)
    throw ValidationError("permutation_test: need length >= 3");
  if (n_perm <= 0) throw ValidationError("permutation_test: n_perm must be > 0");

  const double observed = kendall_tau_b(x, y).tau_b;
  std::vector<double> permuted(y.begin(), y.end());
  Rng rng(derive_seed(seed, 0x9e21));
  std::vector<double> null_taus;
  null_taus.reserve(std::size_t(n_perm));
  long exceed = 0;
  for (int p = 0; p < n_perm; ++p) {
    rng.shuffle(permuted);
    const double tau = kendall_tau_b(x, permuted).tau_b;
    null_taus.push_back(tau);
    if (std::abs(tau) >= std::abs(observed)) ++exceed;
  }
  std::sort(null_taus.begin(), null_taus.end());

  PermutationResult result;
  result.p_value = double(1 + exceed) / double(n_perm + 1);
  result.null_ci = {stats_detail::percentile(null_taus, 0.025),
                    stats_detail::percentile(null_taus, 0.975)};
  return result;
}

namespace stats_detail {

double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.7071067811865475244); }

// Acklam's rational approximation of the standard normal quantile,
// refined with one Halley step.
double normal_quantile(double p) {
  if (p <= 0.0 || p >= 1.0)
    throw ValidationError("normal_quantile: p must be in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // One Halley refinement.
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * 3.14159265358979323846) *
                   std::exp(x * x / 2.0);
  x = x - u / (1.0 + x * u / 2.0);
  return x;
}

double percentile(std::vector<double> sorted, double p) {
  if (sorted.empty()) throw ValidationError("percentile: empty sample");
  if (p <= 0.0) return sorted.front();
  if (p >= 1.0) return sorted.back();
  const double pos = p * double(sorted.size() - 1);
  const std::size_t lo = std::size_t(pos);
  const double frac = pos - double(lo);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

double bca_adjusted_level(double alpha, double z0, double accel) {
  const double za = normal_quantile(alpha);
  const double num = z0 + za;
  const double denom = 1.0 - accel * num;
  return normal_cdf(z0 + num / denom);
}

}  // namespace stats_detail

std::pair<double, double> bca_bootstrap_ci(std::span<const double> x,
                                           std::span<const double> y,
                                           int n_boot, std::uint64_t seed,
                                           double level) {
  const std::size_t n = x.size();
  if (n < 8) throw ValidationError("bca_bootstrap_ci: need length >= 8");
  if (n_boot < 1000)
    throw ValidationError("bca_bootstrap_ci: n_boot must be >= 1000");
  if (level <= 0.0 || level >= 1.0)
    throw ValidationError("bca_bootstrap_ci: level in (0, 1)");

  const double observed = kendall_tau_b(x, y).tau_b;

  Rng rng(derive_seed(seed, 0xbca));
  std::vector<double> boots;
  boots.reserve(std::size_t(n_boot));
  std::vector<double> bx(n), by(n);
  long skipped = 0;
  for (int b = 0; b < n_boot; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = rng.index(n);
      bx[i] = x[j];
      by[i] = y[j];
    }
    try {
      boots.push_back(kendall_tau_b(bx, by).tau_b);
    } catch (const DegenerateInputError&) {
      ++skipped;
    }
  }
  if (boots.size() < std::size_t(n_boot) / 2)
    throw DegenerateInputError(
        "bca_bootstrap_ci: more than half of the resamples were degenerate (" +
        std::to_string(skipped) + " skipped)");

  // Bias correction from the fraction of bootstrap values below the
  // observed statistic, clamped away from 0/1.
  std::size_t below = 0;
  for (double t : boots) below += (t < observed);
  const double bsz = double(boots.size());
  double frac = double(below) / bsz;
  frac = std::clamp(frac, 1.0 / (bsz + 1.0), bsz / (bsz + 1.0));
  const double z0 = stats_detail::normal_quantile(frac);

  // Acceleration from the jackknife skewness over records.
  double accel = 0.0;
  if (n > 2) {
    std::vector<double> loo;
    loo.reserve(n);
    std::vector<double> jx, jy;
    jx.reserve(n - 1);
    jy.reserve(n - 1);
    for (std::size_t drop = 0; drop < n; ++drop) {
      jx.clear();
      jy.clear();
      for (std::size_t i = 0; i < n; ++i) {
        if (i == drop) continue;
        jx.push_back(x[i]);
        jy.push_back(y[i]);
      }
      try {
        loo.push_back(kendall_tau_b(jx, jy).tau_b);
      } catch (const DegenerateInputError&) {
        loo.push_back(observed);
      }
    }
    double mean = 0.0;
    for (double v : loo) mean += v;
    mean /= double(loo.size());
    double num = 0.0, den = 0.0;
    for (double v : loo) {
      const double dlt = mean - v;
      num += dlt * dlt * dlt;
      den += dlt * dlt;
    }
    if (den > 0.0) accel = num / (6.0 * std::pow(den, 1.5));
  }

  std::sort(boots.begin(), boots.end());
  const double alpha = (1.0 - level) / 2.0;
  const double a1 = stats_detail::bca_adjusted_level(alpha, z0, accel);
  const double a2 = stats_detail::bca_adjusted_level(1.0 - alpha, z0, accel);
  return {stats_detail::percentile(boots, a1),
          stats_detail::percentile(boots, a2)};
}

}  // namespace steerkit

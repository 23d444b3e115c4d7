#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace steerkit {

/// One SAE's design-axis labels plus its interpretability score mu, steering
/// score g and optional steering gain L.
struct ScoreRecord {
  std::string sae_id;
  std::string arch_label;
  std::string sparsity_slot;
  std::string model_label;
  double mu = 0.0;
  double g = 0.0;
  std::optional<double> gain;
};

enum class Field { Mu, G, Gain };
double field_value(const ScoreRecord& record, Field field);

/// sign(x_a - x_b) * sign(y_a - y_b) in {-1, 0, +1}.
int concordance(const ScoreRecord& a, const ScoreRecord& b, Field x, Field y);

struct TauResult {
  double tau_b = 0.0;
  int n = 0;
  long pairs = 0;  // n(n-1)/2
  std::optional<double> p_value;
  std::optional<std::pair<double, double>> ci;
  std::string ci_method;  // "bca_bootstrap" or "permutation_null"
};

/// Tie-corrected Kendall rank coefficient
///   tau_b = (P - Q) / sqrt((P + Q + Tx)(P + Q + Ty))
/// with Tx/Ty the pairs tied in x/y only. Reduces to average concordance
/// when there are no ties. Throws DegenerateInputError when either side is
/// all ties.
TauResult kendall_tau_b(std::span<const double> x, std::span<const double> y);

enum class Axis { Architecture, MatchedSparsity, Model };
std::string to_string(Axis axis);

struct GroupTau {
  std::string label;
  TauResult tau;
};

struct AxisSummary {
  Axis axis = Axis::Architecture;
  std::vector<GroupTau> groups;
  double psi = 0.0;  // unweighted mean of group tau_b values
  double se = 0.0;   // jackknife over groups
  std::pair<double, double> boot_ci{0.0, 0.0};
};

struct StatsSettings {
  int n_perm = 10000;
  int n_boot = 10000;
  double level = 0.95;
  std::uint64_t seed = 0;
  bool per_group_tests = true;  // permutation p + null CI per group (n >= 3)
};

/// Partitions records by the axis label, computes tau_b within each group
/// (between fields x and y), and averages across groups. Groups need >= 2
/// non-degenerate records.
AxisSummary granulated_psi(const std::vector<ScoreRecord>& records, Axis axis,
                           Field x, Field y, const StatsSettings& settings);

/// Unweighted mean of the per-axis psi values.
double aggregate_psi(const std::vector<AxisSummary>& summaries);
double aggregate_psi(const std::vector<double>& psis);

struct PermutationResult {
  double p_value = 1.0;
  std::pair<double, double> null_ci{0.0, 0.0};  // 2.5/97.5 null percentiles
};

/// Permutes y, recomputes tau_b; two-sided
/// p = (1 + #{|tau_null| >= |tau_obs|}) / (n_perm + 1).
PermutationResult permutation_test(std::span<const double> x,
                                   std::span<const double> y, int n_perm,
                                   std::uint64_t seed);

/// BCa bootstrap interval for tau_b over record pairs. Degenerate resamples
/// are skipped; more than half skipped is an error.
std::pair<double, double> bca_bootstrap_ci(std::span<const double> x,
                                           std::span<const double> y,
                                           int n_boot, std::uint64_t seed,
                                           double level);

/// Internals exposed for the dual-implementation cross-checks.
namespace stats_detail {
double normal_cdf(double z);
double normal_quantile(double p);
double percentile(std::vector<double> sorted_ascending, double p);
/// BCa-adjusted percentile level for one endpoint.
double bca_adjusted_level(double alpha, double z0, double accel);
}  // namespace stats_detail

}  // namespace steerkit

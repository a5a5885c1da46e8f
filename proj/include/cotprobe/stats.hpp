#pragma once

#include <cstdint>
#include <vector>

namespace cotprobe::stats {

// Reusable statistics toolkit: bootstrap CIs, unpaired and paired sign-flip
// permutation tests, Mann-Whitney U, Holm-Bonferroni step-down, and the
// exact-binomial / Hoeffding concentration oracles the probe guarantees
// are checked against.
//
// Every Monte-Carlo routine takes an explicit seed; derivation from the
// master seed is the caller's job (rng::derive with a call-site label).

// ======================================================================
// == Results
// ======================================================================

struct BootstrapResult {
    double point = 0.0;   // sample statistic (mean)
    double ci_low = 0.0;  // percentile method on the resample distribution
    double ci_high = 0.0;
    std::size_t n_resamples = 0;
    double level = 0.0;
};

struct PermutationResult {
    double statistic = 0.0;
    double p_value = 1.0;  // >= 1/(n_permutations+1), add-one smoothing
    std::size_t n_permutations = 0;
    bool paired = false;
};

struct MannWhitneyResult {
    double u = 0.0;       // U for group a: #{a_i > b_j} + 0.5 #{a_i == b_j}
    double p_value = 1.0; // two-sided
    bool exact = false;   // exact enumeration used (combined n < 12)
};

struct BinomialDeviation {
    double exact_tail = 0.0;  // P(|X/n - p| >= eps), or > eps when strict
    double hoeffding = 0.0;   // 2 exp(-2 n eps^2)
};

// ======================================================================
// == Operations
// ======================================================================

/// Percentile bootstrap CI for the mean from seeded resampling with
/// replacement. Throws on empty samples.
BootstrapResult bootstrap_ci(const std::vector<double>& samples,
                             std::size_t n_resamples, double level, std::uint64_t seed);

/// Two-sided permutation test on the difference of means with add-one
/// smoothing: p = (1 + #{|stat_perm| >= |stat_obs|}) / (n_perms + 1).
PermutationResult permutation_test(const std::vector<double>& group_a,
                                   const std::vector<double>& group_b,
                                   std::size_t n_perms, std::uint64_t seed);

/// Paired sign-flip test on the mean difference, two-sided, add-one smoothed.
PermutationResult paired_signflip_test(const std::vector<double>& differences,
                                       std::size_t n_perms, std::uint64_t seed);

/// Exact sign-flip enumeration over all 2^n patterns (oracle; n <= 24).
double paired_signflip_exact(const std::vector<double>& differences);

/// Mann-Whitney U with midranks for ties. Exact enumeration over all group
/// assignments below combined n = 12, tie-corrected normal approximation
/// (with continuity correction) otherwise.
MannWhitneyResult mann_whitney_u(const std::vector<double>& group_a,
                                 const std::vector<double>& group_b);

/// Holm-Bonferroni step-down adjustment, monotone, clamped at 1, returned in
/// the input order.
std::vector<double> holm_bonferroni(const std::vector<double>& p_values);

/// Exact deviation probability P(|X/n - p| >= eps) (or strictly > when
/// strict) by summation over the binomial pmf, plus the Hoeffding bound
/// 2 exp(-2 n eps^2) for comparison.
BinomialDeviation binomial_tail(unsigned n, double p, double eps, bool strict = false);

double hoeffding_bound(unsigned n, double eps);

/// Standard normal CDF.
double normal_cdf(double z);

/// Spearman rank correlation with midranks for ties.
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);

/// Midranks (1-based, ties averaged) of a value vector.
std::vector<double> midranks(const std::vector<double>& values);

double mean(const std::vector<double>& v);
/// Population variance (divide by n).
double population_variance(const std::vector<double>& v);

} // namespace cotprobe::stats

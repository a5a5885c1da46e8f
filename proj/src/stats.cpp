#include "cotprobe/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "cotprobe/rng.hpp"

namespace cotprobe::stats {

double mean(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("mean of empty vector");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double population_variance(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("variance of empty vector");
    double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double hoeffding_bound(unsigned n, double eps) {
    return 2.0 * std::exp(-2.0 * static_cast<double>(n) * eps * eps);
}

// ======================================================================
// == Bootstrap
// ======================================================================

BootstrapResult bootstrap_ci(const std::vector<double>& samples,
                             std::size_t n_resamples, double level, std::uint64_t seed) {
    if (samples.empty()) throw std::invalid_argument("bootstrap_ci: empty samples");
    if (n_resamples < 1) throw std::invalid_argument("bootstrap_ci: need >= 1 resample");
    if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("bootstrap_ci: level must lie in (0,1)");

    const std::size_t n = samples.size();
    rng::Rng gen(seed);

    std::vector<double> resample_means(n_resamples);
    for (std::size_t b = 0; b < n_resamples; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += samples[gen.below(n)];
        resample_means[b] = s / static_cast<double>(n);
    }
    std::sort(resample_means.begin(), resample_means.end());

    auto percentile = [&](double q) {
        double pos = q * static_cast<double>(n_resamples - 1);
        auto lo = static_cast<std::size_t>(std::floor(pos));
        auto hi = static_cast<std::size_t>(std::ceil(pos));
        double w = pos - static_cast<double>(lo);
        return resample_means[lo] * (1.0 - w) + resample_means[hi] * w;
    };

    BootstrapResult r;
    r.point = mean(samples);
    r.ci_low = percentile((1.0 - level) / 2.0);
    r.ci_high = percentile(1.0 - (1.0 - level) / 2.0);
    r.n_resamples = n_resamples;
    r.level = level;
    return r;
}

// ======================================================================
// == Permutation tests
// ======================================================================

PermutationResult permutation_test(const std::vector<double>& group_a,
                                   const std::vector<double>& group_b,
                                   std::size_t n_perms, std::uint64_t seed) {
    if (group_a.empty() || group_b.empty())
        throw std::invalid_argument("permutation_test: both groups must be nonempty");

    const double obs = mean(group_a) - mean(group_b);

    std::vector<double> pool = group_a;
    pool.insert(pool.end(), group_b.begin(), group_b.end());
    const std::size_t na = group_a.size();
    const double inv_a = 1.0 / static_cast<double>(na);
    const double inv_b = 1.0 / static_cast<double>(group_b.size());

    rng::Rng gen(seed);
    std::size_t hits = 0;
    for (std::size_t t = 0; t < n_perms; ++t) {
        gen.shuffle(pool);
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < na; ++i) sa += pool[i];
        for (std::size_t i = na; i < pool.size(); ++i) sb += pool[i];
        double stat = sa * inv_a - sb * inv_b;
        if (std::fabs(stat) >= std::fabs(obs)) ++hits;
    }

    PermutationResult r;
    r.statistic = obs;
    r.p_value = static_cast<double>(1 + hits) / static_cast<double>(n_perms + 1);
    r.n_permutations = n_perms;
    r.paired = false;
    return r;
}

PermutationResult paired_signflip_test(const std::vector<double>& differences,
                                       std::size_t n_perms, std::uint64_t seed) {
    if (differences.empty()) throw std::invalid_argument("paired_signflip_test: empty differences");

    const double obs = mean(differences);
    const double inv_n = 1.0 / static_cast<double>(differences.size());

    rng::Rng gen(seed);
    std::size_t hits = 0;
    for (std::size_t t = 0; t < n_perms; ++t) {
        double s = 0.0;
        for (double d : differences) s += (gen.next_u64() & 1ULL) ? d : -d;
        if (std::fabs(s * inv_n) >= std::fabs(obs)) ++hits;
    }

    PermutationResult r;
    r.statistic = obs;
    r.p_value = static_cast<double>(1 + hits) / static_cast<double>(n_perms + 1);
    r.n_permutations = n_perms;
    r.paired = true;
    return r;
}

double paired_signflip_exact(const std::vector<double>& differences) {
    const std::size_t n = differences.size();
    if (n == 0) throw std::invalid_argument("paired_signflip_exact: empty differences");
    if (n > 24) throw std::invalid_argument("paired_signflip_exact: n too large for enumeration");

    const double obs = std::fabs(mean(differences));
    const std::uint64_t total = 1ULL << n;
    std::uint64_t hits = 0;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            s += (mask >> i & 1ULL) ? -differences[i] : differences[i];
        if (std::fabs(s / static_cast<double>(n)) >= obs) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

// ======================================================================
// == Mann-Whitney U
// ======================================================================

namespace {

// Doubled U statistic (2U is integral even with 0.5 tie credits).
long long doubled_u(const std::vector<double>& a, const std::vector<double>& b) {
    long long du = 0;
    for (double x : a)
        for (double y : b) {
            if (x > y) du += 2;
            else if (x == y) du += 1;
        }
    return du;
}

} // namespace

MannWhitneyResult mann_whitney_u(const std::vector<double>& group_a,
                                 const std::vector<double>& group_b) {
    if (group_a.empty() || group_b.empty())
        throw std::invalid_argument("mann_whitney_u: both groups must be nonempty");

    const std::size_t n = group_a.size(), m = group_b.size();
    const long long du_obs = doubled_u(group_a, group_b);
    const long long nm = static_cast<long long>(n) * static_cast<long long>(m);

    MannWhitneyResult r;
    r.u = static_cast<double>(du_obs) / 2.0;

    if (n + m < 12) {
        // Exact: enumerate every assignment of pooled values to group a.
        std::vector<double> pool = group_a;
        pool.insert(pool.end(), group_b.begin(), group_b.end());
        std::vector<char> pick(pool.size(), 0);
        std::fill(pick.begin(), pick.begin() + static_cast<long>(n), 1);
        std::sort(pick.begin(), pick.end());  // lexicographically first arrangement

        const long long center_dist = std::llabs(du_obs - nm);
        std::uint64_t hits = 0, total = 0;
        std::vector<double> a(n), b(m);
        do {
            std::size_t ia = 0, ib = 0;
            for (std::size_t i = 0; i < pool.size(); ++i)
                (pick[i] ? a[ia++] : b[ib++]) = pool[i];
            if (std::llabs(doubled_u(a, b) - nm) >= center_dist) ++hits;
            ++total;
        } while (std::next_permutation(pick.begin(), pick.end()));

        r.p_value = static_cast<double>(hits) / static_cast<double>(total);
        r.exact = true;
        return r;
    }

    // Tie-corrected normal approximation with continuity correction.
    std::vector<double> pool = group_a;
    pool.insert(pool.end(), group_b.begin(), group_b.end());
    std::sort(pool.begin(), pool.end());
    const double big_n = static_cast<double>(n + m);
    double tie_term = 0.0;
    for (std::size_t i = 0; i < pool.size();) {
        std::size_t j = i;
        while (j < pool.size() && pool[j] == pool[i]) ++j;
        auto t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    const double mu = static_cast<double>(nm) / 2.0;
    const double var = (static_cast<double>(nm) / 12.0) *
                       ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if (var <= 0.0) {
        r.p_value = 1.0;  // all pooled values identical
        return r;
    }
    const double z = (std::fabs(r.u - mu) - 0.5) / std::sqrt(var);
    r.p_value = std::min(1.0, 2.0 * (1.0 - normal_cdf(std::max(z, 0.0))));
    return r;
}

// ======================================================================
// == Holm-Bonferroni
// ======================================================================

std::vector<double> holm_bonferroni(const std::vector<double>& p_values) {
    const std::size_t m = p_values.size();
    for (double p : p_values)
        if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("holm_bonferroni: p outside [0,1]");

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return p_values[i] < p_values[j]; });

    std::vector<double> adjusted(m, 0.0);
    double running = 0.0;
    for (std::size_t rank = 0; rank < m; ++rank) {
        double adj = static_cast<double>(m - rank) * p_values[order[rank]];
        running = std::max(running, adj);
        adjusted[order[rank]] = std::min(1.0, running);
    }
    return adjusted;
}

// ======================================================================
// == Binomial concentration oracle
// ======================================================================

namespace {

// Row n of Pascal's triangle: exact 64-bit integers for n <= 64 (C(64,32)
// fits), lgamma beyond that.
std::vector<double> binom_row(unsigned n) {
    std::vector<double> coeffs(n + 1, 0.0);
    if (n <= 64) {
        std::vector<std::uint64_t> row(n + 1, 0);
        row[0] = 1;
        for (unsigned i = 1; i <= n; ++i)
            for (unsigned j = i; j > 0; --j) row[j] += row[j - 1];
        for (unsigned k = 0; k <= n; ++k) coeffs[k] = static_cast<double>(row[k]);
    } else {
        for (unsigned k = 0; k <= n; ++k)
            coeffs[k] = std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0));
    }
    return coeffs;
}

} // namespace

BinomialDeviation binomial_tail(unsigned n, double p, double eps, bool strict) {
    if (n < 1) throw std::invalid_argument("binomial_tail: n must be >= 1");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("binomial_tail: p outside [0,1]");
    if (!(eps > 0.0)) throw std::invalid_argument("binomial_tail: eps must be > 0");

    const double q = 1.0 - p;
    const std::vector<double> coeffs = binom_row(n);
    double tail = 0.0;
    for (unsigned k = 0; k <= n; ++k) {
        double dev = std::fabs(static_cast<double>(k) / static_cast<double>(n) - p);
        bool deviant = strict ? (dev > eps) : (dev >= eps);
        if (deviant) tail += coeffs[k] * (std::pow(p, k) * std::pow(q, n - k));
    }

    BinomialDeviation r;
    r.exact_tail = tail;
    r.hoeffding = hoeffding_bound(n, eps);
    return r;
}

// ======================================================================
// == Rank helpers
// ======================================================================

std::vector<double> midranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });

    std::vector<double> ranks(n, 0.0);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && values[order[j]] == values[order[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
        for (std::size_t t = i; t < j; ++t) ranks[order[t]] = avg;
        i = j;
    }
    return ranks;
}

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.empty())
        throw std::invalid_argument("spearman_rho: mismatched or empty inputs");
    auto rx = midranks(x), ry = midranks(y);
    double mx = mean(rx), my = mean(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return sxx == syy ? 1.0 : 0.0;  // constant rank vectors
    return sxy / std::sqrt(sxx * syy);
}

} // namespace cotprobe::stats

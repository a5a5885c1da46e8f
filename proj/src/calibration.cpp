#include "cotprobe/calibration.hpp"

#include <algorithm>
#include <cmath>

#include "cotprobe/rng.hpp"
#include "cotprobe/stats.hpp"

namespace cotprobe::calibration {

void CalibrationConfig::validate() const {
    if (theta_grid.empty()) throw std::invalid_argument("calibration: empty theta grid");
    for (std::size_t i = 0; i < theta_grid.size(); ++i) {
        double t = theta_grid[i];
        if (!(t > 0.0 && t <= 1.0))
            throw std::invalid_argument("calibration: theta outside (0,1]");
        if (i > 0 && theta_grid[i - 1] >= t)
            throw std::invalid_argument("calibration: theta grid must be sorted ascending");
        double m = t * static_cast<double>(n_samples);
        if (std::fabs(m - std::round(m)) > 1e-9)
            throw std::invalid_argument("calibration: theta must align with sample granularity");
    }
    if (!(max_proxy_fp >= 0.0 && max_proxy_fp <= 1.0))
        throw std::invalid_argument("calibration: max_proxy_fp outside [0,1]");
}

namespace {

using baee::ProblemProbeData;

// View over a split: indices into the dataset.
using Index = std::vector<std::size_t>;

baee::BaeePolicy policy_for(const CalibrationConfig& config, double theta) {
    baee::BaeePolicy policy;
    policy.theta = theta;
    policy.n_samples = config.n_samples;
    policy.mode = baee::BaeePolicy::Mode::adaptive;
    policy.trigger = config.trigger;
    policy.tie_fallback = config.tie_fallback;
    return policy;
}

ThetaTraceRow evaluate_theta(const std::vector<ProblemProbeData>& data, const Index& subset,
                             const CalibrationConfig& config, double theta) {
    ThetaTraceRow row;
    row.theta = theta;
    if (subset.empty()) return row;

    auto policy = policy_for(config, theta);
    double correct = 0.0, full_correct = 0.0, reduction = 0.0;
    for (std::size_t i : subset) {
        auto outcome = baee::simulate_baee(data[i], policy);
        correct += outcome.correct ? 1.0 : 0.0;
        full_correct += data[i].full_correct ? 1.0 : 0.0;
        reduction += baee::serial_reduction(outcome);
        if (data[i].n_rollouts_correct == 0) {
            // Wrong-problem proxy: the model cannot solve it, so any trigger
            // is a false positive.
            ++row.wrong_problem_count;
            if (outcome.triggered) ++row.fp_count;
        }
    }
    double n = static_cast<double>(subset.size());
    row.baee_accuracy = correct / n;
    row.full_accuracy = full_correct / n;
    row.mean_reduction = reduction / n;
    row.proxy_fp_rate = row.wrong_problem_count == 0
                            ? 0.0
                            : static_cast<double>(row.fp_count) /
                                  static_cast<double>(row.wrong_problem_count);
    row.accuracy_ok = row.baee_accuracy >= row.full_accuracy;
    row.fp_ok = row.proxy_fp_rate <= config.max_proxy_fp;
    row.feasible = row.accuracy_ok && row.fp_ok;
    return row;
}

std::pair<Index, Index> split_indices(std::size_t n, const CalibrationConfig& config,
                                      std::uint64_t seed) {
    Index order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (config.split == CalibrationConfig::Split::random) {
        rng::Rng gen(seed);
        gen.shuffle(order);
    }
    std::size_t half = n / 2;
    Index calib(order.begin(), order.begin() + half);
    Index test(order.begin() + half, order.end());
    return {std::move(calib), std::move(test)};
}

CalibrationReport calibrate_on_split(const std::vector<ProblemProbeData>& data,
                                     const Index& calib, const Index& test,
                                     const CalibrationConfig& config) {
    CalibrationReport report;
    for (double theta : config.theta_grid) {
        auto row = evaluate_theta(data, calib, config, theta);
        report.constraint_trace.push_back(row);
        if (!report.feasible && row.feasible) {
            report.feasible = true;
            report.theta_star = theta;
            report.calib_accuracy = row.baee_accuracy;
            report.fp_vacuous = row.wrong_problem_count == 0;
        }
    }
    if (report.feasible) {
        auto held_out = evaluate_theta(data, test, config, report.theta_star);
        report.test_accuracy = held_out.baee_accuracy;
        report.test_reduction = held_out.mean_reduction;
        report.proxy_fp_rate = held_out.proxy_fp_rate;
    }
    return report;
}

}  // namespace

CalibrationReport calibrate(const std::vector<ProblemProbeData>& data,
                            const CalibrationConfig& config) {
    config.validate();
    if (data.size() < 2) throw std::invalid_argument("calibration: need at least 2 problems");
    auto [calib, test] = split_indices(data.size(), config, config.seed);
    return calibrate_on_split(data, calib, test, config);
}

StabilityReport stability_bootstrap(const std::vector<ProblemProbeData>& data,
                                    const CalibrationConfig& config) {
    config.validate();
    if (config.n_resplits < 2)
        throw std::invalid_argument("stability_bootstrap: need at least 2 resplits");
    if (data.size() < 2) throw std::invalid_argument("calibration: need at least 2 problems");

    StabilityReport report;
    report.n_resplits = config.n_resplits;
    std::vector<double> accuracies, reductions;
    CalibrationConfig resplit_config = config;
    resplit_config.split = CalibrationConfig::Split::random;
    for (std::size_t r = 0; r < config.n_resplits; ++r) {
        auto [calib, test] =
            split_indices(data.size(), resplit_config, rng::derive(config.seed, "resplit", r));
        auto run = calibrate_on_split(data, calib, test, resplit_config);
        if (!run.feasible) {
            ++report.infeasible_count;
            continue;
        }
        ++report.theta_counts[run.theta_star];
        accuracies.push_back(run.test_accuracy);
        reductions.push_back(run.test_reduction);
    }
    // Modal theta; frequency ties break toward the larger (safer) threshold,
    // which the ascending map order gives us by using >=.
    for (const auto& [theta, count] : report.theta_counts) {
        if (count >= report.modal_count) {
            report.modal_count = count;
            report.modal_theta = theta;
        }
    }
    if (!accuracies.empty()) {
        report.test_accuracy_mean = stats::mean(accuracies);
        report.test_accuracy_stddev = std::sqrt(stats::population_variance(accuracies));
        report.test_reduction_mean = stats::mean(reductions);
        report.test_reduction_stddev = std::sqrt(stats::population_variance(reductions));
    }
    return report;
}

std::vector<ThetaTraceRow> threshold_sweep(const std::vector<ProblemProbeData>& data,
                                           const CalibrationConfig& config) {
    config.validate();
    Index all(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) all[i] = i;
    std::vector<ThetaTraceRow> rows;
    for (double theta : config.theta_grid)
        rows.push_back(evaluate_theta(data, all, config, theta));
    return rows;
}

}  // namespace cotprobe::calibration

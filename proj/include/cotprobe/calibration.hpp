#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cotprobe/baee.hpp"

namespace cotprobe::calibration {

// ======================================================================
// == Configuration
// ======================================================================

struct CalibrationConfig {
    std::vector<double> theta_grid = {0.500, 0.625, 0.750, 0.875, 1.000};
    enum class Split { first_half, random } split = Split::first_half;
    std::uint64_t seed = 0;
    std::size_t n_resplits = 100;
    std::size_t n_samples = 8;
    double max_proxy_fp = 0.05;
    // Offline (correctness-gated) triggering is the default so calibrated
    // thresholds reproduce offline-simulation tables; deployments switch to
    // self-agreement.
    baee::TriggerMode trigger = baee::TriggerMode::correctness;
    bool tie_fallback = true;

    void validate() const;
};

// ======================================================================
// == Reports
// ======================================================================

struct ThetaTraceRow {
    double theta = 0.0;
    double baee_accuracy = 0.0;
    double full_accuracy = 0.0;
    double mean_reduction = 0.0;
    double proxy_fp_rate = 0.0;
    std::size_t fp_count = 0;
    std::size_t wrong_problem_count = 0;  // 0-of-n-rollouts proxy subset size
    bool accuracy_ok = false;
    bool fp_ok = false;
    bool feasible = false;
};

struct CalibrationReport {
    bool feasible = false;  // false = "none feasible"
    double theta_star = 0.0;
    double calib_accuracy = 0.0;
    double test_accuracy = 0.0;
    double test_reduction = 0.0;
    double proxy_fp_rate = 0.0;  // on the test split at theta_star
    bool fp_vacuous = false;     // calibration split had no wrong-problem proxies
    std::vector<ThetaTraceRow> constraint_trace;
};

struct StabilityReport {
    std::size_t n_resplits = 0;
    double modal_theta = 0.0;
    std::size_t modal_count = 0;
    std::size_t infeasible_count = 0;
    std::map<double, std::size_t> theta_counts;
    double test_accuracy_mean = 0.0;
    double test_accuracy_stddev = 0.0;
    double test_reduction_mean = 0.0;
    double test_reduction_stddev = 0.0;
};

// ======================================================================
// == Operations
// ======================================================================

// Splits the dataset 50/50, sweeps the theta grid on the calibration half,
// selects the smallest theta whose BAEE accuracy matches the full-CoT
// baseline and whose wrong-problem trigger rate stays within max_proxy_fp,
// then reports held-out metrics at that theta.
CalibrationReport calibrate(const std::vector<baee::ProblemProbeData>& data,
                            const CalibrationConfig& config);

// Repeats calibrate over seeded random 50/50 resplits and aggregates the
// modal selected theta (frequency ties break toward the larger theta).
StabilityReport stability_bootstrap(const std::vector<baee::ProblemProbeData>& data,
                                    const CalibrationConfig& config);

// Full per-theta frontier over the whole dataset (no split).
std::vector<ThetaTraceRow> threshold_sweep(const std::vector<baee::ProblemProbeData>& data,
                                           const CalibrationConfig& config);

}  // namespace cotprobe::calibration

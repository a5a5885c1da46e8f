#pragma once

// Shared fixture builders for unit and acceptance tests: planted mock
// populations, frozen bound tables, synthetic trajectory generators, and
// calibration datasets. Expected values are frozen here once and asserted
// against module output elsewhere.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cotprobe/baee.hpp"
#include "cotprobe/commitment.hpp"
#include "cotprobe/core.hpp"
#include "cotprobe/modelclient.hpp"
#include "cotprobe/rng.hpp"

namespace fixtures {

using namespace cotprobe;

// ======================================================================
// == Planted mock populations
// ======================================================================

inline core::ProblemRecord planted_problem(std::size_t index) {
    core::ProblemRecord p;
    p.id = "p" + std::to_string(index);
    p.prompt = "Problem " + std::to_string(index) + ": compute the value.";
    p.ground_truth = std::to_string(100 + index);
    p.benchmark = "synthetic";
    return p;
}

inline model::MockModelSpec planted_spec(const core::ProblemRecord& problem,
                                         double commit, double forceable,
                                         model::RecoverabilityCurve curve = {},
                                         std::uint64_t seed = 7, std::size_t total = 40) {
    model::MockModelSpec spec;
    spec.answer = core::make_answer(problem.ground_truth);
    spec.distractors = {core::make_answer(problem.ground_truth + "9"),
                        core::make_answer("-" + problem.ground_truth),
                        core::make_answer(problem.ground_truth + "1")};
    spec.commit_fraction = commit;
    spec.forceable_fraction = forceable;
    spec.curve = curve;
    spec.seed = seed;
    spec.total_tokens = total;
    return spec;
}

// A population with a planted detection-extraction band: continuations
// recover the answer from `commit` on, forcing only works from `forceable`.
inline std::vector<core::ProblemRecord> plant_population(model::MockBackend& mock,
                                                         std::size_t n, double commit,
                                                         double forceable,
                                                         std::uint64_t seed = 7) {
    std::vector<core::ProblemRecord> problems;
    for (std::size_t i = 0; i < n; ++i) {
        auto problem = planted_problem(i);
        mock.register_problem(problem, planted_spec(problem, commit, forceable, {}, seed));
        problems.push_back(std::move(problem));
    }
    return problems;
}

inline core::Rollout canonical_rollout_record(const model::MockBackend& mock,
                                              const core::ProblemRecord& problem) {
    core::Rollout rollout;
    rollout.problem_id = problem.id;
    rollout.tokens = mock.canonical_rollout(problem.id);
    for (const auto& tok : rollout.tokens) rollout.text += tok;
    rollout.correct = true;  // canonical rollout carries the planted answer
    return rollout;
}

// ======================================================================
// == Frozen distribution-shift bound table (20 configuration x fraction
// == cells; each cell stores the cohort rates whose difference is the bound)
// ======================================================================

struct TvFixtureRow {
    std::string configuration;
    double fraction;
    double psc_rate;
    double efa_acc;
    double expected_bound;  // to 2 decimal places
};

inline const std::vector<TvFixtureRow>& tv_fixture_rows() {
    static const std::vector<TvFixtureRow> rows = {
        {"32B-Think", 0.10, 0.88, 0.34, 0.54},  {"32B-Think", 0.20, 0.86, 0.42, 0.44},
        {"32B-Think", 0.30, 0.84, 0.55, 0.29},  {"32B-Think", 0.50, 0.83, 0.74, 0.09},
        {"32B-Think", 0.70, 0.84, 0.79, 0.05},  {"8B-Think", 0.10, 0.81, 0.30, 0.51},
        {"8B-Think", 0.20, 0.78, 0.38, 0.40},   {"8B-Think", 0.30, 0.75, 0.50, 0.25},
        {"8B-Think", 0.50, 0.75, 0.68, 0.07},   {"8B-Think", 0.70, 0.77, 0.73, 0.04},
        {"GPT-OSS", 0.10, 0.92, 0.22, 0.70},    {"GPT-OSS", 0.20, 0.91, 0.36, 0.55},
        {"GPT-OSS", 0.30, 0.90, 0.52, 0.38},    {"GPT-OSS", 0.50, 0.90, 0.78, 0.12},
        {"GPT-OSS", 0.70, 0.90, 0.84, 0.06},    {"32B-NoThink", 0.10, 0.74, 0.33, 0.41},
        {"32B-NoThink", 0.20, 0.72, 0.42, 0.30}, {"32B-NoThink", 0.30, 0.70, 0.52, 0.18},
        {"32B-NoThink", 0.50, 0.69, 0.63, 0.06}, {"32B-NoThink", 0.70, 0.69, 0.66, 0.03},
    };
    return rows;
}

// ======================================================================
// == Frozen suffix-ablation fixture (five templates x three models at the
// == 10% prefix; expected_rank orders by increasing distributional shift)
// ======================================================================

struct SuffixFixtureRow {
    std::string suffix;
    double efa[3];  // 32B-Think, 8B-NoThink, GPT-OSS
    double psc[3];
    double expected_shift_rank;  // 1 = lowest expected shift
};

inline const std::vector<SuffixFixtureRow>& suffix_fixture_rows() {
    static const std::vector<SuffixFixtureRow> rows = {
        {"natural", {0.41, 0.28, 0.23}, {0.80, 0.78, 0.94}, 1},
        {"original", {0.35, 0.27, 0.26}, {0.80, 0.78, 0.94}, 2},
        {"soft", {0.35, 0.29, 0.18}, {0.80, 0.78, 0.94}, 3},
        {"direct", {0.17, 0.16, 0.11}, {0.80, 0.78, 0.94}, 4},
        {"plain", {0.05, 0.22, 0.00}, {0.80, 0.78, 0.94}, 5},
    };
    return rows;
}

// Mean gap across the three models, percentage points, frozen by hand from
// the per-model cells above: (sum of psc-efa)/3.
inline const std::vector<double>& suffix_expected_mean_gaps() {
    static const std::vector<double> gaps = {160.0 / 3.0, 164.0 / 3.0, 170.0 / 3.0,
                                             208.0 / 3.0, 225.0 / 3.0};
    return gaps;
}

// ======================================================================
// == Synthetic trajectory generators (true-positive vs false-positive
// == profiles: early high agreement and few drops vs late volatile peaks)
// ======================================================================

inline double quantize_eighths(double v) {
    return std::clamp(std::round(v * 8.0) / 8.0, 0.0, 1.0);
}

inline std::vector<double> make_tp_trajectory(rng::Rng& gen, std::size_t m = 9) {
    std::vector<double> values(m);
    double start = gen.uniform() < 0.06 ? gen.normal(0.35, 0.10) : gen.normal(0.85, 0.15);
    values[0] = quantize_eighths(start);
    double level = values[0];
    for (std::size_t i = 1; i < m; ++i) {
        if (gen.uniform() < 0.15) {
            level -= 0.125;  // occasional single-step dip
        } else {
            level += std::fabs(gen.normal(0.08, 0.05));
        }
        level = std::clamp(level, 0.0, 1.0);
        values[i] = quantize_eighths(level);
    }
    return values;
}

inline std::vector<double> make_fp_trajectory(rng::Rng& gen, std::size_t m = 9) {
    std::vector<double> values(m);
    values[0] = quantize_eighths(gen.normal(0.33, 0.12));
    if (gen.uniform() < 0.60) {
        // Oscillator: rising base with alternating large swings.
        for (std::size_t i = 1; i < m; ++i) {
            double base = 0.2 + 0.6 * static_cast<double>(i) / static_cast<double>(m - 1);
            double swing = gen.uniform(0.15, 0.35);
            values[i] = quantize_eighths(base + (i % 2 == 0 ? swing : -swing));
        }
    } else {
        // Late drifter: stays low, peaks in the back half.
        std::size_t peak = m / 2 + gen.below(m - m / 2);
        for (std::size_t i = 1; i < m; ++i) {
            double target = i <= peak ? 0.25 + 0.55 * static_cast<double>(i) /
                                                   static_cast<double>(peak == 0 ? 1 : peak)
                                      : 0.45;
            values[i] = quantize_eighths(target + gen.normal(0.0, 0.08));
        }
    }
    return values;
}

inline commitment::PscTrajectory trajectory_from(const std::string& id,
                                                 std::vector<double> values,
                                                 std::size_t rollout_tokens = 400) {
    commitment::PscTrajectory traj;
    traj.problem_id = id;
    traj.grid = core::CheckpointGrid::default_grid();
    traj.values = std::move(values);
    traj.solvable = true;
    traj.rollout_tokens = rollout_tokens;
    return traj;
}

// ======================================================================
// == Calibration fixture
// ======================================================================

struct CalibProblemKind {
    // psc value per checkpoint, majority correctness per checkpoint,
    // full-rollout answer correctness, and how many of 4 rollouts solved it.
    std::vector<double> psc;
    std::vector<bool> majority_correct;
    bool full_correct;
    std::size_t rollouts_correct;
};

inline baee::ProblemProbeData probe_data_from(const std::string& id,
                                              const CalibProblemKind& kind,
                                              std::size_t rollout_tokens = 400) {
    baee::ProblemProbeData data;
    data.problem_id = id;
    data.grid = core::CheckpointGrid::default_grid();
    data.full_answer = core::make_answer(kind.full_correct ? "1" : "0");
    data.full_correct = kind.full_correct;
    data.rollout_tokens = rollout_tokens;
    data.n_rollouts = 4;
    data.n_rollouts_correct = kind.rollouts_correct;
    const auto& fractions = data.grid.fractions();
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        baee::CheckpointProbe cp;
        cp.fraction = fractions[i];
        cp.psc_value = kind.psc[i];
        cp.self_agreement = kind.psc[i];
        cp.majority_correct = kind.majority_correct[i];
        cp.majority = core::make_answer(cp.majority_correct ? "1" : "0");
        cp.probe_tokens = 100;
        data.checkpoints.push_back(std::move(cp));
    }
    return data;
}

// Problem archetypes used across calibration fixtures. PSC values align
// with eighths so every theta in the default grid is decidable.
inline CalibProblemKind calib_clean_tp() {
    // Commits immediately and correctly; full rollout also correct.
    return {{1, 1, 1, 1, 1, 1, 1, 1, 1},
            {true, true, true, true, true, true, true, true, true},
            true,
            4};
}

inline CalibProblemKind calib_flip() {
    // Crosses 0.75 early on a wrong majority, reaches a correct consensus
    // only mid-rollout: early exits at theta <= 0.75 are wrong.
    return {{0.75, 0.75, 0.75, 1, 1, 1, 1, 1, 1},
            {false, false, false, true, true, true, true, true, true},
            true,
            4};
}

inline CalibProblemKind calib_gain() {
    // The full rollout is wrong, but mid-rollout consensus is right: early
    // exit beats the full CoT on these.
    return {{0.375, 0.375, 0.375, 1, 1, 1, 1, 1, 1},
            {false, false, false, true, true, true, true, true, true},
            false,
            1};
}

inline CalibProblemKind calib_unsolvable_quiet() {
    // 0-of-4 proxy member that never crosses any threshold.
    return {{0.25, 0.375, 0.25, 0.375, 0.25, 0.25, 0.375, 0.25, 0.25},
            {false, false, false, false, false, false, false, false, false},
            false,
            0};
}

inline CalibProblemKind calib_unsolvable_crossing() {
    // 0-of-4 proxy member whose agreement spikes to 0.75: a false positive
    // for every theta at or below 0.75.
    return {{0.375, 0.75, 0.5, 0.75, 0.375, 0.5, 0.375, 0.25, 0.375},
            {false, false, false, false, false, false, false, false, false},
            false,
            0};
}

// 500-problem dataset whose smallest feasible threshold is 0.875 on the
// first-half split (and, by symmetry of the interleaving, on random splits
// with overwhelming probability): thresholds <= 0.75 fail both constraints
// via flip problems (accuracy) and crossing proxies (false positives).
inline std::vector<baee::ProblemProbeData> calibration_fixture_500() {
    std::vector<baee::ProblemProbeData> data;
    for (std::size_t i = 0; i < 500; ++i) {
        CalibProblemKind kind;
        if (i % 125 == 0)
            kind = calib_gain();  // 4 total, 2 per half
        else if (i % 31 == 0)
            kind = calib_unsolvable_crossing();  // 16 spread across halves
        else if (i % 13 == 0)
            kind = calib_flip();  // ~36 spread across halves
        else if (i % 29 == 0)
            kind = calib_unsolvable_quiet();
        else
            kind = calib_clean_tp();
        std::string id = "c" + std::string(i < 10 ? "00" : i < 100 ? "0" : "") + std::to_string(i);
        data.push_back(probe_data_from(id, kind));
    }
    return data;
}

// Variant where every threshold fails: all proxies cross even at 1.0.
inline std::vector<baee::ProblemProbeData> calibration_fixture_infeasible() {
    std::vector<baee::ProblemProbeData> data;
    CalibProblemKind crossing_hard = calib_unsolvable_crossing();
    for (auto& v : crossing_hard.psc) v = 1.0;  // crosses every theta
    for (std::size_t i = 0; i < 40; ++i) {
        CalibProblemKind kind = i % 4 == 0 ? crossing_hard : calib_clean_tp();
        data.push_back(probe_data_from("i" + std::to_string(i), kind));
    }
    return data;
}

}  // namespace fixtures

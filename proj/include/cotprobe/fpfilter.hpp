#pragma once

#include <cstddef>

#include "cotprobe/baee.hpp"
#include "cotprobe/commitment.hpp"

namespace cotprobe::fpfilter {

// ======================================================================
// == Trajectory features
// ======================================================================

struct TrajectoryFeatures {
    double psc_at_first = 0.0;
    double mean_psc = 0.0;
    double max_psc = 0.0;
    double spread = 0.0;  // max - min
    std::size_t num_drops = 0;     // strict decreases between consecutive checkpoints
    double argmax_fraction = 0.0;  // earliest grid fraction attaining the max
    std::size_t cot_length = 0;
    bool late_peak = false;  // argmax at fraction >= 0.50
    double variance = 0.0;   // population variance of the PSC values
};

TrajectoryFeatures extract_features(const commitment::PscTrajectory& traj,
                                    std::size_t rollout_length);

// ======================================================================
// == Filters (pass = keep the early exit)
// ======================================================================

// Filter 1: early agreement — PSC at the first checkpoint must be >= 0.50.
bool filter_early_agreement(const TrajectoryFeatures& features);

// Filter 2: monotonicity — at most 2 drops along the trajectory.
bool filter_monotonicity(const TrajectoryFeatures& features);

// Filter 3: volatility flag — variance > 0.06 AND drops >= 3 marks the
// trajectory as a likely false positive. Returns true when flagged.
bool filter_variance_nonmonotone(const TrajectoryFeatures& features);

// ======================================================================
// == Two-stage deployment protocol
// ======================================================================

enum class FinalDecision { early_exit, full_cot_fallback };

// Post-filters a triggered exit: volatile trajectories finish the full CoT
// instead. Calling this on a non-triggered outcome is a contract violation.
FinalDecision two_stage_protocol(const baee::BaeeOutcome& outcome,
                                 const TrajectoryFeatures& features);

}  // namespace cotprobe::fpfilter

#include "cotprobe/fpfilter.hpp"

#include <algorithm>

#include "cotprobe/stats.hpp"

namespace cotprobe::fpfilter {

TrajectoryFeatures extract_features(const commitment::PscTrajectory& traj,
                                    std::size_t rollout_length) {
    traj.validate();
    const auto& values = traj.values;
    const auto& fractions = traj.grid.fractions();

    TrajectoryFeatures f;
    f.psc_at_first = values.front();
    f.mean_psc = stats::mean(values);
    f.max_psc = *std::max_element(values.begin(), values.end());
    f.spread = f.max_psc - *std::min_element(values.begin(), values.end());
    f.variance = stats::population_variance(values);
    f.cot_length = rollout_length;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] < values[i - 1]) ++f.num_drops;
    // Earliest checkpoint attaining the max (conservative toward keeping
    // early exits when the peak repeats).
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] == f.max_psc) {
            f.argmax_fraction = fractions[i];
            break;
        }
    }
    f.late_peak = f.argmax_fraction >= 0.50;
    return f;
}

bool filter_early_agreement(const TrajectoryFeatures& features) {
    return features.psc_at_first >= 0.50;
}

bool filter_monotonicity(const TrajectoryFeatures& features) {
    return features.num_drops <= 2;
}

bool filter_variance_nonmonotone(const TrajectoryFeatures& features) {
    return features.variance > 0.06 && features.num_drops >= 3;
}

FinalDecision two_stage_protocol(const baee::BaeeOutcome& outcome,
                                 const TrajectoryFeatures& features) {
    if (!outcome.triggered)
        throw std::invalid_argument("two_stage_protocol: outcome did not trigger");
    return filter_variance_nonmonotone(features) ? FinalDecision::full_cot_fallback
                                                 : FinalDecision::early_exit;
}

}  // namespace cotprobe::fpfilter

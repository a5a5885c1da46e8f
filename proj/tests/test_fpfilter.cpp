#include <doctest.h>

#include <algorithm>

#include "cotprobe/fpfilter.hpp"
#include "cotprobe/rng.hpp"
#include "fixtures.hpp"

using namespace cotprobe;
using fpfilter::TrajectoryFeatures;

namespace {

commitment::PscTrajectory four_point_traj() {
    commitment::PscTrajectory traj;
    traj.problem_id = "f";
    traj.grid = core::CheckpointGrid({0.1, 0.3, 0.5, 0.7});
    traj.values = {0.9, 0.7, 0.8, 0.6};
    traj.rollout_tokens = 400;
    return traj;
}

TrajectoryFeatures features_of(std::vector<double> values) {
    return fpfilter::extract_features(fixtures::trajectory_from("f", std::move(values)), 400);
}

}  // namespace

// ======================================================================
// == Feature extraction
// ======================================================================

TEST_CASE("features of a short hand-computed trajectory") {
    auto f = fpfilter::extract_features(four_point_traj(), 1234);
    CHECK(f.psc_at_first == 0.9);
    CHECK(f.mean_psc == doctest::Approx(0.75));
    CHECK(f.max_psc == 0.9);
    CHECK(f.spread == doctest::Approx(0.3));
    CHECK(f.num_drops == 2);
    CHECK(f.argmax_fraction == 0.1);
    CHECK_FALSE(f.late_peak);
    CHECK(f.variance == doctest::Approx(0.0125));
    CHECK(f.cot_length == 1234);
}

TEST_CASE("constant trajectories have no drops and no variance") {
    auto f = features_of({0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75});
    CHECK(f.num_drops == 0);
    CHECK(f.variance == 0.0);
    CHECK(f.spread == 0.0);
    CHECK(f.mean_psc == 0.75);
    CHECK(f.argmax_fraction == 0.1);  // earliest attainment of the max
}

TEST_CASE("a repeated peak resolves to its earliest attainment") {
    auto f = features_of({0.5, 0.25, 0.5, 0.25, 0.25, 0.25, 0.25, 0.25, 0.5});
    CHECK(f.argmax_fraction == 0.1);
    CHECK_FALSE(f.late_peak);
}

TEST_CASE("a back-half peak sets the late-peak flag") {
    auto f = features_of({0.25, 0.25, 0.375, 0.25, 0.5, 0.375, 0.25, 0.25, 0.25});
    CHECK(f.argmax_fraction == 0.5);
    CHECK(f.late_peak);
    auto later = features_of({0.25, 0.25, 0.375, 0.25, 0.375, 0.375, 0.25, 0.25, 0.5});
    CHECK(later.argmax_fraction == 0.9);
    CHECK(later.late_peak);
}

TEST_CASE("feature extraction rejects malformed trajectories") {
    auto traj = fixtures::trajectory_from("f", {0.5, 0.5});
    CHECK_THROWS_AS(fpfilter::extract_features(traj, 400), std::invalid_argument);
    traj = fixtures::trajectory_from("f", {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 2.0});
    CHECK_THROWS_AS(fpfilter::extract_features(traj, 400), std::invalid_argument);
    traj = fixtures::trajectory_from("", {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    CHECK_THROWS_AS(fpfilter::extract_features(traj, 400), std::invalid_argument);
}

TEST_CASE("drop counting is order-sensitive while moments are not") {
    std::vector<double> values = {0.25, 0.5, 1.0, 0.75, 0.5, 0.375, 0.25, 0.125, 0.125};
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    auto rough = features_of(values);
    auto smooth = features_of(sorted);
    CHECK(rough.num_drops == 5);
    CHECK(smooth.num_drops == 0);
    CHECK(rough.mean_psc == doctest::Approx(smooth.mean_psc));
    CHECK(rough.variance == doctest::Approx(smooth.variance));
    CHECK(rough.max_psc == smooth.max_psc);
    CHECK_FALSE(fpfilter::filter_monotonicity(rough));
    CHECK(fpfilter::filter_monotonicity(smooth));
}

// ======================================================================
// == Filter boundaries
// ======================================================================

TEST_CASE("early-agreement filter is inclusive at one half") {
    TrajectoryFeatures f;
    f.psc_at_first = 0.50;
    CHECK(fpfilter::filter_early_agreement(f));
    f.psc_at_first = 0.49;
    CHECK_FALSE(fpfilter::filter_early_agreement(f));
}

TEST_CASE("monotonicity filter tolerates at most two drops") {
    TrajectoryFeatures f;
    f.num_drops = 2;
    CHECK(fpfilter::filter_monotonicity(f));
    f.num_drops = 3;
    CHECK_FALSE(fpfilter::filter_monotonicity(f));
}

TEST_CASE("volatility flag needs both high variance and three drops") {
    TrajectoryFeatures f;
    f.variance = 0.06;  // boundary is strict
    f.num_drops = 3;
    CHECK_FALSE(fpfilter::filter_variance_nonmonotone(f));
    f.variance = 0.0601;
    CHECK(fpfilter::filter_variance_nonmonotone(f));
    f.num_drops = 2;
    CHECK_FALSE(fpfilter::filter_variance_nonmonotone(f));

    // The hand-built archetypes hit each leg of the conjunction.
    auto volatile_traj = features_of(
        {0.875, 0.375, 0.875, 0.375, 0.25, 0.875, 0.875, 0.875, 0.875});
    CHECK(volatile_traj.num_drops >= 3);
    CHECK(volatile_traj.variance > 0.06);
    CHECK(fpfilter::filter_variance_nonmonotone(volatile_traj));

    auto choppy_but_tight = features_of(
        {0.625, 0.375, 0.625, 0.375, 0.25, 0.625, 0.625, 0.625, 0.625});
    CHECK(choppy_but_tight.num_drops >= 3);
    CHECK(choppy_but_tight.variance < 0.06);
    CHECK_FALSE(fpfilter::filter_variance_nonmonotone(choppy_but_tight));

    auto one_cliff = features_of({1.0, 0.125, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0});
    CHECK(one_cliff.variance > 0.06);
    CHECK(one_cliff.num_drops == 1);
    CHECK_FALSE(fpfilter::filter_variance_nonmonotone(one_cliff));
}

// ======================================================================
// == Two-stage deployment protocol
// ======================================================================

TEST_CASE("volatile triggered exits fall back to the full rollout") {
    baee::BaeeOutcome outcome;
    outcome.triggered = true;
    outcome.trigger_fraction = 0.2;

    TrajectoryFeatures calm;
    calm.variance = 0.01;
    calm.num_drops = 1;
    CHECK(fpfilter::two_stage_protocol(outcome, calm) == fpfilter::FinalDecision::early_exit);

    TrajectoryFeatures wild;
    wild.variance = 0.2;
    wild.num_drops = 4;
    CHECK(fpfilter::two_stage_protocol(outcome, wild) ==
          fpfilter::FinalDecision::full_cot_fallback);

    baee::BaeeOutcome untriggered;
    CHECK_THROWS_AS(fpfilter::two_stage_protocol(untriggered, calm), std::invalid_argument);
}

// ======================================================================
// == Population-level discrimination
// ======================================================================

TEST_CASE("filters separate planted true positives from false positives") {
    rng::Rng gen(rng::derive(7, "fpfilter-pop"));
    std::vector<TrajectoryFeatures> tp, fp;
    for (int i = 0; i < 400; ++i)
        tp.push_back(features_of(fixtures::make_tp_trajectory(gen)));
    for (int i = 0; i < 400; ++i)
        fp.push_back(features_of(fixtures::make_fp_trajectory(gen)));

    auto share = [](const std::vector<TrajectoryFeatures>& fs, auto pred) {
        double hit = 0.0;
        for (const auto& f : fs) hit += pred(f) ? 1.0 : 0.0;
        return hit / static_cast<double>(fs.size());
    };

    // Early agreement alone removes most false positives while keeping
    // almost all true positives.
    double tp_kept = share(tp, fpfilter::filter_early_agreement);
    double fp_kept = share(fp, fpfilter::filter_early_agreement);
    CHECK(tp_kept >= 0.85);
    CHECK(1.0 - fp_kept >= 0.60);

    // The volatility flag concentrates on false positives.
    double tp_flagged = share(tp, fpfilter::filter_variance_nonmonotone);
    double fp_flagged = share(fp, fpfilter::filter_variance_nonmonotone);
    CHECK(tp_flagged <= 0.15);
    CHECK(fp_flagged >= 0.30);
    CHECK(fp_flagged >= 4.0 * tp_flagged);

    // Late peaks are a false-positive signature in this population.
    double tp_late = share(tp, [](const TrajectoryFeatures& f) { return f.late_peak; });
    double fp_late = share(fp, [](const TrajectoryFeatures& f) { return f.late_peak; });
    CHECK(fp_late > tp_late);
}

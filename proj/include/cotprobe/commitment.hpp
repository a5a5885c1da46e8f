#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cotprobe/core.hpp"

namespace cotprobe::commitment {

// ======================================================================
// == Trajectories
// ======================================================================

struct PscTrajectory {
    std::string problem_id;
    core::CheckpointGrid grid = core::CheckpointGrid::default_grid();
    std::vector<double> values;  // PSC per grid fraction, each in [0,1]
    bool solvable = false;       // at least one full rollout graded correct
    std::size_t rollout_tokens = 0;  // weight for token-share aggregates

    void validate() const;
};

struct EfaTrajectory {
    std::string problem_id;
    core::CheckpointGrid grid = core::CheckpointGrid::default_grid();
    std::vector<bool> correct;

    void validate() const;
};

struct GapProfile {
    core::CheckpointGrid grid = core::CheckpointGrid::default_grid();
    std::vector<double> psc_rate;  // share of problems with PSC >= theta
    std::vector<double> efa_acc;
    std::vector<double> gap;  // psc_rate - efa_acc, may be negative
};

class IncompleteDataError : public std::runtime_error {
public:
    IncompleteDataError(const std::string& what,
                        std::vector<std::pair<std::string, double>> pairs)
        : std::runtime_error(what), missing(std::move(pairs)) {}
    std::vector<std::pair<std::string, double>> missing;  // (problem, fraction)
};

// ======================================================================
// == Commitment quantities
// ======================================================================

// First grid fraction whose PSC reaches theta; absent when none does.
// Trajectories are not monotone, so this is a first crossing, not a
// sustained one; `sustained` additionally requires every later checkpoint
// to stay at or above theta (off by default).
std::optional<double> commitment_fraction(const PscTrajectory& traj, double theta,
                                          bool sustained = false);

std::optional<double> post_commitment_fraction(const std::optional<double>& commit);

GapProfile gap_profile(const std::vector<PscTrajectory>& trajectories,
                       const std::vector<EfaTrajectory>& efa, double theta);

// ======================================================================
// == Distribution-distance bounds
// ======================================================================

struct TvBound {
    double signed_gap = 0.0;  // psc - efa; can be negative
    double bound = 0.0;       // |psc - efa|, a valid total-variation lower bound
};

TvBound tv_lower_bound(double psc_value, double efa_value);

// ======================================================================
// == Commitment maps
// ======================================================================

struct CommitmentMapRow {
    std::string problem_id;
    bool committed = false;
    double commit_fraction = 0.0;   // meaningful only when committed
    double post_commit_share = 0.0; // 1 - commit_fraction, else 0
    std::size_t rollout_tokens = 0;
};

struct CommitmentMap {
    std::vector<CommitmentMapRow> rows;  // solvable problems, sorted by commit fraction
    double aggregate_post_commit_token_share = 0.0;  // weighted by rollout length
    std::size_t n_solvable = 0;
    bool empty_marker = false;  // set when no solvable problems exist
};

CommitmentMap export_commitment_map(const std::vector<PscTrajectory>& trajectories,
                                    double theta);

// Spearman rank correlation between computed suffix gaps and a reference
// ordering; 1.0 means the rankings agree perfectly.
double suffix_ranking_agreement(const std::vector<double>& computed_gaps,
                                const std::vector<double>& reference_gaps);

}  // namespace cotprobe::commitment

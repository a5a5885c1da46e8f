#include "cotprobe/commitment.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cotprobe/stats.hpp"

namespace cotprobe::commitment {

// ======================================================================
// == Validation
// ======================================================================

void PscTrajectory::validate() const {
    if (problem_id.empty()) throw std::invalid_argument("trajectory: empty problem id");
    if (values.size() != grid.fractions().size())
        throw std::invalid_argument("trajectory '" + problem_id +
                                    "': values do not cover the grid");
    for (double v : values)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument("trajectory '" + problem_id + "': PSC outside [0,1]");
}

void EfaTrajectory::validate() const {
    if (problem_id.empty()) throw std::invalid_argument("efa trajectory: empty problem id");
    if (correct.size() != grid.fractions().size())
        throw std::invalid_argument("efa trajectory '" + problem_id +
                                    "': values do not cover the grid");
}

// ======================================================================
// == Commitment quantities
// ======================================================================

std::optional<double> commitment_fraction(const PscTrajectory& traj, double theta,
                                          bool sustained) {
    if (!(theta > 0.0 && theta <= 1.0))
        throw std::invalid_argument("commitment_fraction: theta must lie in (0,1]");
    traj.validate();
    const auto& fractions = traj.grid.fractions();
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        if (traj.values[i] < theta) continue;
        if (sustained) {
            bool holds = true;
            for (std::size_t j = i + 1; j < fractions.size() && holds; ++j)
                holds = traj.values[j] >= theta;
            if (!holds) continue;
        }
        return fractions[i];
    }
    return std::nullopt;
}

std::optional<double> post_commitment_fraction(const std::optional<double>& commit) {
    if (!commit) return std::nullopt;
    return 1.0 - *commit;
}

GapProfile gap_profile(const std::vector<PscTrajectory>& trajectories,
                       const std::vector<EfaTrajectory>& efa, double theta) {
    if (trajectories.empty()) throw std::invalid_argument("gap_profile: no trajectories");
    const core::CheckpointGrid& grid = trajectories[0].grid;
    const auto& fractions = grid.fractions();

    std::map<std::string, const EfaTrajectory*> efa_by_id;
    for (const auto& e : efa) efa_by_id[e.problem_id] = &e;

    // Both probes must cover the full grid for every problem.
    std::vector<std::pair<std::string, double>> missing;
    for (const auto& t : trajectories) {
        t.validate();
        bool grid_ok = t.grid.fractions() == fractions;
        auto it = efa_by_id.find(t.problem_id);
        bool efa_ok = it != efa_by_id.end() && it->second->grid.fractions() == fractions &&
                      it->second->correct.size() == fractions.size();
        if (grid_ok && efa_ok) continue;
        for (double f : fractions) missing.emplace_back(t.problem_id, f);
    }
    if (!missing.empty()) {
        std::string what = "gap_profile: missing probe data for";
        std::size_t shown = 0;
        for (const auto& [id, f] : missing) {
            if (shown++ == 8) {
                what += " ...";
                break;
            }
            what += " (" + id + ", " + std::to_string(f) + ")";
        }
        throw IncompleteDataError(what, std::move(missing));
    }

    GapProfile profile{grid, {}, {}, {}};
    const double n = static_cast<double>(trajectories.size());
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        double triggers = 0.0, hits = 0.0;
        for (const auto& t : trajectories) {
            if (t.values[i] >= theta) triggers += 1.0;
            if (efa_by_id[t.problem_id]->correct[i]) hits += 1.0;
        }
        profile.psc_rate.push_back(triggers / n);
        profile.efa_acc.push_back(hits / n);
        profile.gap.push_back(profile.psc_rate.back() - profile.efa_acc.back());
    }
    return profile;
}

// ======================================================================
// == Distribution-distance bounds
// ======================================================================

TvBound tv_lower_bound(double psc_value, double efa_value) {
    if (!(psc_value >= 0.0 && psc_value <= 1.0) || !(efa_value >= 0.0 && efa_value <= 1.0))
        throw std::invalid_argument("tv_lower_bound: inputs must lie in [0,1]");
    TvBound b;
    b.signed_gap = psc_value - efa_value;
    b.bound = std::fabs(b.signed_gap);
    return b;
}

// ======================================================================
// == Commitment maps
// ======================================================================

CommitmentMap export_commitment_map(const std::vector<PscTrajectory>& trajectories,
                                    double theta) {
    CommitmentMap map;
    double post_tokens = 0.0, total_tokens = 0.0;
    for (const auto& t : trajectories) {
        if (!t.solvable) continue;  // commitment is defined on solvable instances
        ++map.n_solvable;
        CommitmentMapRow row;
        row.problem_id = t.problem_id;
        row.rollout_tokens = t.rollout_tokens;
        auto commit = commitment_fraction(t, theta);
        if (commit) {
            row.committed = true;
            row.commit_fraction = *commit;
            row.post_commit_share = 1.0 - *commit;
        }
        total_tokens += static_cast<double>(t.rollout_tokens);
        post_tokens += row.post_commit_share * static_cast<double>(t.rollout_tokens);
        map.rows.push_back(std::move(row));
    }
    std::sort(map.rows.begin(), map.rows.end(), [](const auto& a, const auto& b) {
        if (a.committed != b.committed) return a.committed;  // non-committed last
        if (a.commit_fraction != b.commit_fraction) return a.commit_fraction < b.commit_fraction;
        return a.problem_id < b.problem_id;
    });
    map.aggregate_post_commit_token_share =
        total_tokens > 0.0 ? post_tokens / total_tokens : 0.0;
    map.empty_marker = map.rows.empty();
    return map;
}

double suffix_ranking_agreement(const std::vector<double>& computed_gaps,
                                const std::vector<double>& reference_gaps) {
    if (computed_gaps.size() != reference_gaps.size() || computed_gaps.size() < 2)
        throw std::invalid_argument("suffix_ranking_agreement: need matched lists of >= 2");
    return stats::spearman_rho(computed_gaps, reference_gaps);
}

}  // namespace cotprobe::commitment

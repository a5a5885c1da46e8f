#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cotprobe/core.hpp"
#include "cotprobe/modelclient.hpp"
#include "cotprobe/probes.hpp"

namespace cotprobe::baee {

// ======================================================================
// == Policy and outcomes
// ======================================================================

// Deployment triggers on self-agreement (no ground truth available at exit
// time); offline simulation can trigger on correctness instead.
enum class TriggerMode { self_agreement, correctness };

struct BaeePolicy {
    core::CheckpointGrid grid = core::CheckpointGrid::default_grid();
    double theta = 1.0;
    std::size_t n_samples = 8;
    enum class Mode { adaptive, all_checkpoints } mode = Mode::adaptive;
    bool tie_fallback = true;  // on a tied majority, continue instead of exiting
    TriggerMode trigger = TriggerMode::self_agreement;
    double temperature = 1.0;
    bool skip_failed_checkpoints = true;  // a failed probe skips that checkpoint

    void validate() const;  // theta must align with sample granularity m/n
};

struct BaeeOutcome {
    std::string problem_id;
    std::string strategy;
    bool triggered = false;
    std::optional<double> trigger_fraction;
    core::Answer answer;
    bool correct = false;
    std::size_t api_calls = 1;  // probes issued plus the main rollout
    std::size_t serial_tokens_used = 0;
    std::size_t serial_tokens_full = 0;
    std::size_t probe_tokens = 0;         // probe completion tokens
    std::size_t probe_prompt_tokens = 0;  // probe prompt tokens (reported separately)
    std::vector<double> skipped_checkpoints;
};

// 1 - trigger_fraction for triggered outcomes, 0 otherwise.
double serial_reduction(const BaeeOutcome& outcome);

// ======================================================================
// == Precomputed probe grids (offline simulation input)
// ======================================================================

struct CheckpointProbe {
    double fraction = 0.0;
    double psc_value = 0.0;
    double self_agreement = 0.0;
    core::Answer majority;
    bool majority_correct = false;
    bool majority_tied = false;
    std::size_t probe_tokens = 0;
    bool efa_present = false;
    core::Answer efa_answer;
    bool efa_correct = false;
};

struct ProblemProbeData {
    std::string problem_id;
    core::CheckpointGrid grid = core::CheckpointGrid::default_grid();
    std::vector<CheckpointProbe> checkpoints;  // one per grid fraction, in order
    core::Answer full_answer;  // the full rollout's answer (fallback path)
    bool full_correct = false;
    std::size_t rollout_tokens = 0;
    std::size_t n_rollouts = 0;
    std::size_t n_rollouts_correct = 0;

    bool solvable() const { return n_rollouts_correct > 0; }
    void validate() const;
};

// ======================================================================
// == Strategies
// ======================================================================

// Live adaptive walk: probes checkpoints in grid order against the given
// rollout, exits at the first trigger with the majority answer, falls back
// to the rollout's own answer when nothing triggers.
BaeeOutcome run_baee_adaptive(model::ModelClient& client, const core::ProblemRecord& problem,
                              const core::Rollout& rollout, const BaeePolicy& policy,
                              const core::Grader& grader);

// Offline replay of the same walk over precomputed probe grids.
BaeeOutcome simulate_baee(const ProblemProbeData& data, const BaeePolicy& policy);

struct BaeeAllReport {
    std::vector<BaeeOutcome> outcomes;
    double accuracy = 0.0;
    double mean_serial_reduction = 0.0;
};

// All-checkpoints variant: every checkpoint is probed (cost reflects that);
// the exit uses the earliest trigger over the whole grid.
BaeeAllReport run_baee_all(const std::vector<ProblemProbeData>& data, const BaeePolicy& policy);

// Exits at the first checkpoint whose forced extraction is non-empty —
// the baseline that walks straight into the detection-extraction gap.
BaeeOutcome run_naive_efa(const ProblemProbeData& data);
BaeeOutcome run_naive_efa(model::ModelClient& client, const core::ProblemRecord& problem,
                          const core::Rollout& rollout, const core::CheckpointGrid& grid,
                          const probes::SuffixTemplate& tpl, const core::Grader& grader);

// Exits at the first checkpoint whose forced extraction grades correct;
// needs ground truth, serves as an upper bound.
BaeeOutcome run_efa_oracle(const ProblemProbeData& data);

// ======================================================================
// == Self-consistency baselines
// ======================================================================

enum class ScVariant { sc8_full, sc8_budget, single_budget };

struct ScOutcome {
    std::string problem_id;
    std::string variant;
    core::Answer answer;
    bool correct = false;
    bool no_answer = false;  // degenerate budget produced no generations
    std::size_t api_calls = 0;
    std::size_t total_tokens = 0;
};

ScOutcome run_sc_baseline(model::ModelClient& client, const core::ProblemRecord& problem,
                          ScVariant variant, std::size_t budget_tokens,
                          const core::Grader& grader, std::size_t n = 8,
                          std::size_t full_tokens = 2048);

// ======================================================================
// == Cost accounting and the trigger guarantee
// ======================================================================

struct CostReport {
    std::size_t n = 0;
    double mean_serial_reduction = 0.0;
    // (serial_tokens_used + probe_tokens) / serial_tokens_full, mean over
    // problems; completion tokens only.
    double token_ratio = 0.0;
    // Same ratio with probe prompt tokens included.
    double token_ratio_with_prompts = 0.0;
    double mean_api_calls = 0.0;
    double median_api_calls = 0.0;
    std::vector<std::pair<double, double>> trigger_rate_per_checkpoint;
};

CostReport cost_report(const std::vector<BaeeOutcome>& outcomes);

struct GuaranteeReport {
    double p_floor = 0.0;               // theta - epsilon
    double confidence_hoeffding = 0.0;  // 1 - 2 exp(-2 n eps^2)
    // Worst case over p of the exact binomial deviation tail, under both
    // deviation readings (the strict reading is the optimistic one).
    double confidence_exact = 0.0;
    double confidence_exact_strict = 0.0;
    double worst_p = 0.0;
};

GuaranteeReport guarantee(std::size_t n, double theta, double epsilon);

}  // namespace cotprobe::baee

#include "cotprobe/baee.hpp"

#include <algorithm>
#include <cmath>

#include "cotprobe/stats.hpp"

namespace cotprobe::baee {

// ======================================================================
// == Validation
// ======================================================================

void BaeePolicy::validate() const {
    if (!(theta > 0.0 && theta <= 1.0))
        throw std::invalid_argument("baee policy: theta must lie in (0,1]");
    if (n_samples < 1) throw std::invalid_argument("baee policy: n_samples must be >= 1");
    // Thresholds must be expressible as m/n so a trigger is decidable from
    // integer sample counts.
    double m = theta * static_cast<double>(n_samples);
    if (std::fabs(m - std::round(m)) > 1e-9)
        throw std::invalid_argument("baee policy: theta must be a multiple of 1/n_samples");
}

void ProblemProbeData::validate() const {
    if (problem_id.empty()) throw std::invalid_argument("probe data: empty problem id");
    const auto& fractions = grid.fractions();
    if (checkpoints.size() != fractions.size())
        throw std::invalid_argument("probe data '" + problem_id +
                                    "': checkpoints do not cover the grid");
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
        if (std::fabs(checkpoints[i].fraction - fractions[i]) > 1e-12)
            throw std::invalid_argument("probe data '" + problem_id +
                                        "': checkpoint fractions out of order");
        if (checkpoints[i].psc_value < 0.0 || checkpoints[i].psc_value > 1.0 ||
            checkpoints[i].self_agreement < 0.0 || checkpoints[i].self_agreement > 1.0)
            throw std::invalid_argument("probe data '" + problem_id + "': values outside [0,1]");
    }
    if (n_rollouts_correct > n_rollouts)
        throw std::invalid_argument("probe data '" + problem_id + "': rollout counts inconsistent");
}

double serial_reduction(const BaeeOutcome& outcome) {
    return outcome.triggered && outcome.trigger_fraction ? 1.0 - *outcome.trigger_fraction : 0.0;
}

// ======================================================================
// == Trigger rule
// ======================================================================

namespace {

bool triggers_at(const CheckpointProbe& cp, const BaeePolicy& policy) {
    double value =
        policy.trigger == TriggerMode::self_agreement ? cp.self_agreement : cp.psc_value;
    if (value < policy.theta) return false;
    if (policy.tie_fallback && cp.majority_tied) return false;  // ambiguous majority
    return true;
}

}  // namespace

// ======================================================================
// == Offline simulation
// ======================================================================

BaeeOutcome simulate_baee(const ProblemProbeData& data, const BaeePolicy& policy) {
    policy.validate();
    data.validate();

    BaeeOutcome outcome;
    outcome.problem_id = data.problem_id;
    outcome.strategy =
        policy.mode == BaeePolicy::Mode::adaptive ? "psc_adaptive" : "psc_all";
    outcome.serial_tokens_full = data.rollout_tokens;

    std::optional<std::size_t> trigger_index;
    for (std::size_t j = 0; j < data.checkpoints.size(); ++j) {
        if (triggers_at(data.checkpoints[j], policy)) {
            trigger_index = j;
            break;
        }
    }

    // Adaptive mode stops probing at the trigger; all-checkpoints mode pays
    // for the whole grid regardless.
    std::size_t visited = data.checkpoints.size();
    if (policy.mode == BaeePolicy::Mode::adaptive && trigger_index)
        visited = *trigger_index + 1;
    outcome.api_calls = visited * policy.n_samples + 1;
    for (std::size_t j = 0; j < visited; ++j)
        outcome.probe_tokens += data.checkpoints[j].probe_tokens;

    if (trigger_index) {
        const CheckpointProbe& cp = data.checkpoints[*trigger_index];
        outcome.triggered = true;
        outcome.trigger_fraction = cp.fraction;
        outcome.answer = cp.majority;
        outcome.correct = cp.majority_correct;
        outcome.serial_tokens_used = core::prefix_length(data.rollout_tokens, cp.fraction);
    } else {
        outcome.answer = data.full_answer;
        outcome.correct = data.full_correct;
        outcome.serial_tokens_used = data.rollout_tokens;
    }
    return outcome;
}

BaeeAllReport run_baee_all(const std::vector<ProblemProbeData>& data, const BaeePolicy& policy) {
    BaeePolicy all_policy = policy;
    all_policy.mode = BaeePolicy::Mode::all_checkpoints;
    BaeeAllReport report;
    double correct = 0.0, reduction = 0.0;
    for (const auto& d : data) {
        auto outcome = simulate_baee(d, all_policy);
        correct += outcome.correct ? 1.0 : 0.0;
        reduction += serial_reduction(outcome);
        report.outcomes.push_back(std::move(outcome));
    }
    if (!data.empty()) {
        report.accuracy = correct / static_cast<double>(data.size());
        report.mean_serial_reduction = reduction / static_cast<double>(data.size());
    }
    return report;
}

// ======================================================================
// == Live adaptive walk
// ======================================================================

BaeeOutcome run_baee_adaptive(model::ModelClient& client, const core::ProblemRecord& problem,
                              const core::Rollout& rollout, const BaeePolicy& policy,
                              const core::Grader& grader) {
    policy.validate();
    if (rollout.tokens.empty()) throw std::invalid_argument("baee: rollout has no tokens");

    BaeeOutcome outcome;
    outcome.problem_id = problem.id;
    outcome.strategy = "psc_adaptive";
    outcome.serial_tokens_full = rollout.tokens.size();

    core::Answer truth = core::make_answer(problem.ground_truth);
    std::size_t completed = 0;
    for (double f : policy.grid.fractions()) {
        auto prefix = probes::make_prefix(rollout.tokens, f);
        probes::PscResult psc;
        try {
            psc = probes::run_psc(client, problem, prefix, policy.n_samples, grader,
                                  policy.temperature);
        } catch (const probes::ProbeError&) {
            if (!policy.skip_failed_checkpoints) throw;
            outcome.skipped_checkpoints.push_back(f);
            continue;
        }
        ++completed;
        outcome.probe_tokens += psc.probe_completion_tokens;
        outcome.probe_prompt_tokens += psc.probe_prompt_tokens;

        CheckpointProbe cp;
        cp.fraction = f;
        cp.psc_value = psc.psc_value;
        cp.self_agreement = psc.self_agreement;
        cp.majority_tied = psc.majority_tied;
        cp.majority_correct = grader(psc.majority, truth);
        if (triggers_at(cp, policy)) {
            outcome.triggered = true;
            outcome.trigger_fraction = f;
            outcome.answer = psc.majority;
            outcome.correct = cp.majority_correct;
            outcome.serial_tokens_used = prefix.k;
            break;
        }
    }
    outcome.api_calls = completed * policy.n_samples + 1;
    if (!outcome.triggered) {
        // Fall back to the answer the full rollout already produced; this
        // costs no additional serial tokens.
        outcome.answer = probes::extract_free_answer(rollout.text);
        outcome.correct = grader(outcome.answer, truth);
        outcome.serial_tokens_used = rollout.tokens.size();
    }
    return outcome;
}

// ======================================================================
// == Forced-extraction baselines
// ======================================================================

BaeeOutcome run_naive_efa(const ProblemProbeData& data) {
    data.validate();
    BaeeOutcome outcome;
    outcome.problem_id = data.problem_id;
    outcome.strategy = "naive_efa";
    outcome.serial_tokens_full = data.rollout_tokens;

    std::size_t visited = 0;
    for (const auto& cp : data.checkpoints) {
        if (!cp.efa_present) continue;
        ++visited;
        if (cp.efa_answer.normalized.empty()) continue;
        outcome.triggered = true;
        outcome.trigger_fraction = cp.fraction;
        outcome.answer = cp.efa_answer;
        outcome.correct = cp.efa_correct;
        outcome.serial_tokens_used = core::prefix_length(data.rollout_tokens, cp.fraction);
        break;
    }
    outcome.api_calls = visited + 1;  // one forced decode per checkpoint probed
    if (!outcome.triggered) {
        outcome.answer = data.full_answer;
        outcome.correct = data.full_correct;
        outcome.serial_tokens_used = data.rollout_tokens;
    }
    return outcome;
}

BaeeOutcome run_naive_efa(model::ModelClient& client, const core::ProblemRecord& problem,
                          const core::Rollout& rollout, const core::CheckpointGrid& grid,
                          const probes::SuffixTemplate& tpl, const core::Grader& grader) {
    if (rollout.tokens.empty()) throw std::invalid_argument("naive efa: rollout has no tokens");
    BaeeOutcome outcome;
    outcome.problem_id = problem.id;
    outcome.strategy = "naive_efa";
    outcome.serial_tokens_full = rollout.tokens.size();

    std::size_t visited = 0;
    for (double f : grid.fractions()) {
        auto prefix = probes::make_prefix(rollout.tokens, f);
        auto efa = probes::run_efa(client, problem, prefix, tpl, grader);
        ++visited;
        if (efa.answer.normalized.empty()) continue;
        outcome.triggered = true;
        outcome.trigger_fraction = f;
        outcome.answer = efa.answer;
        outcome.correct = efa.correct;
        outcome.serial_tokens_used = prefix.k;
        break;
    }
    outcome.api_calls = visited + 1;
    if (!outcome.triggered) {
        outcome.answer = probes::extract_free_answer(rollout.text);
        outcome.correct = grader(outcome.answer, core::make_answer(problem.ground_truth));
        outcome.serial_tokens_used = rollout.tokens.size();
    }
    return outcome;
}

BaeeOutcome run_efa_oracle(const ProblemProbeData& data) {
    data.validate();
    BaeeOutcome outcome;
    outcome.problem_id = data.problem_id;
    outcome.strategy = "efa_oracle";
    outcome.serial_tokens_full = data.rollout_tokens;

    std::size_t visited = 0;
    for (const auto& cp : data.checkpoints) {
        if (!cp.efa_present) continue;
        ++visited;
        if (!cp.efa_correct) continue;
        outcome.triggered = true;
        outcome.trigger_fraction = cp.fraction;
        outcome.answer = cp.efa_answer;
        outcome.correct = true;
        outcome.serial_tokens_used = core::prefix_length(data.rollout_tokens, cp.fraction);
        break;
    }
    outcome.api_calls = visited + 1;
    if (!outcome.triggered) {
        outcome.answer = data.full_answer;
        outcome.correct = data.full_correct;
        outcome.serial_tokens_used = data.rollout_tokens;
    }
    return outcome;
}

// ======================================================================
// == Self-consistency baselines
// ======================================================================

ScOutcome run_sc_baseline(model::ModelClient& client, const core::ProblemRecord& problem,
                          ScVariant variant, std::size_t budget_tokens,
                          const core::Grader& grader, std::size_t n,
                          std::size_t full_tokens) {
    ScOutcome outcome;
    outcome.problem_id = problem.id;

    std::size_t n_generations = n, cap = 0;
    switch (variant) {
        case ScVariant::sc8_full:
            outcome.variant = "sc8_full";
            cap = full_tokens;
            break;
        case ScVariant::sc8_budget:
            outcome.variant = "sc8_budget";
            cap = budget_tokens / n;
            break;
        case ScVariant::single_budget:
            outcome.variant = "single_budget";
            n_generations = 1;
            cap = budget_tokens;
            break;
    }
    if (cap == 0) {
        // A zero per-generation budget admits no tokens at all; report an
        // explicit no-answer outcome rather than a fabricated vote.
        outcome.no_answer = true;
        outcome.answer = core::make_answer("");
        return outcome;
    }

    model::GenerationRequest request;
    request.prompt = problem.prompt;
    request.temperature = 1.0;
    request.max_tokens = cap;
    request.n_samples = n_generations;
    auto generation = client.sample(request);
    outcome.api_calls = n_generations;
    outcome.total_tokens = generation.usage.completion_tokens;

    std::vector<core::Answer> answers;
    for (const auto& text : generation.texts)
        answers.push_back(probes::extract_free_answer(text));
    auto vote = core::majority_vote(answers);
    outcome.answer = vote.winner;
    outcome.no_answer = vote.winner.normalized.empty();
    outcome.correct =
        !outcome.no_answer && grader(vote.winner, core::make_answer(problem.ground_truth));
    return outcome;
}

// ======================================================================
// == Cost accounting
// ======================================================================

CostReport cost_report(const std::vector<BaeeOutcome>& outcomes) {
    CostReport report;
    report.n = outcomes.size();
    if (outcomes.empty()) return report;

    double reduction = 0.0, ratio = 0.0, ratio_p = 0.0, calls = 0.0;
    std::size_t with_full = 0;
    std::map<double, std::size_t> trigger_counts;
    std::vector<double> call_counts;
    for (const auto& o : outcomes) {
        reduction += serial_reduction(o);
        calls += static_cast<double>(o.api_calls);
        call_counts.push_back(static_cast<double>(o.api_calls));
        if (o.serial_tokens_full > 0) {
            ++with_full;
            double full = static_cast<double>(o.serial_tokens_full);
            ratio += (static_cast<double>(o.serial_tokens_used + o.probe_tokens)) / full;
            ratio_p += (static_cast<double>(o.serial_tokens_used + o.probe_tokens +
                                            o.probe_prompt_tokens)) /
                       full;
        }
        if (o.triggered && o.trigger_fraction) ++trigger_counts[*o.trigger_fraction];
    }
    double n = static_cast<double>(outcomes.size());
    report.mean_serial_reduction = reduction / n;
    report.mean_api_calls = calls / n;
    if (with_full > 0) {
        report.token_ratio = ratio / static_cast<double>(with_full);
        report.token_ratio_with_prompts = ratio_p / static_cast<double>(with_full);
    }
    std::sort(call_counts.begin(), call_counts.end());
    std::size_t mid = call_counts.size() / 2;
    report.median_api_calls = call_counts.size() % 2 == 1
                                  ? call_counts[mid]
                                  : 0.5 * (call_counts[mid - 1] + call_counts[mid]);
    for (const auto& [fraction, count] : trigger_counts)
        report.trigger_rate_per_checkpoint.emplace_back(fraction,
                                                        static_cast<double>(count) / n);
    return report;
}

GuaranteeReport guarantee(std::size_t n, double theta, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < theta))
        throw std::invalid_argument("guarantee: need 0 < epsilon < theta");
    if (n < 1) throw std::invalid_argument("guarantee: n must be >= 1");

    GuaranteeReport report;
    report.p_floor = theta - epsilon;
    report.confidence_hoeffding = 1.0 - stats::hoeffding_bound(static_cast<unsigned>(n), epsilon);

    // The exact confidence is 1 minus the worst-case deviation tail over the
    // unknown continuation-correctness probability.
    double worst = 0.0, worst_strict = 0.0, worst_p = 0.0;
    for (int i = 0; i <= 200; ++i) {
        double p = static_cast<double>(i) / 200.0;
        double tail = stats::binomial_tail(static_cast<unsigned>(n), p, epsilon, false).exact_tail;
        double tail_strict =
            stats::binomial_tail(static_cast<unsigned>(n), p, epsilon, true).exact_tail;
        if (tail > worst) {
            worst = tail;
            worst_p = p;
        }
        worst_strict = std::max(worst_strict, tail_strict);
    }
    report.confidence_exact = 1.0 - worst;
    report.confidence_exact_strict = 1.0 - worst_strict;
    report.worst_p = worst_p;
    return report;
}

}  // namespace cotprobe::baee

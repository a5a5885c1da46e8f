#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cotprobe/core.hpp"
#include "cotprobe/modelclient.hpp"

namespace cotprobe::probes {

// ======================================================================
// == Prefixes and suffix templates
// ======================================================================

// The first k tokens of a rollout, joined verbatim, plus the bookkeeping
// needed to size continuation budgets.
struct PrefixSlice {
    std::string text;
    std::size_t k = 0;
    std::size_t total = 0;
    double fraction = 0.0;  // requested checkpoint fraction
};

PrefixSlice make_prefix(const std::vector<std::string>& rollout_tokens, double fraction);

struct SuffixTemplate {
    std::string id;
    std::string text;
};

// Registry of answer-inducing suffixes. Five styles ship by default:
// original (therefore + boxed), natural (so + boxed), soft (plain "answer
// is"), plain (bare newline), direct ("Final answer:").
const SuffixTemplate& suffix_template(const std::string& id);
void register_suffix_template(SuffixTemplate tpl);
std::vector<std::string> suffix_template_ids();

// ======================================================================
// == Results
// ======================================================================

struct PscResult {
    double fraction = 0.0;
    std::vector<core::Answer> sample_answers;
    std::size_t correct_count = 0;
    double psc_value = 0.0;       // correct_count / N
    double self_agreement = 0.0;  // modal-answer share among the N samples
    core::Answer majority;        // modal answer (first-appearance tie-break)
    bool majority_tied = false;
    std::size_t probe_completion_tokens = 0;
    std::size_t probe_prompt_tokens = 0;
};

struct EfaResult {
    double fraction = 0.0;
    std::string suffix_template;
    std::string raw_output;
    core::Answer answer;
    bool correct = false;
};

struct AtltResult {
    bool supported = false;  // scoring capability may be absent
    double mean_logprob = 0.0;
};

struct EntropySeries {
    std::vector<double> per_token_entropy;  // nats
    std::vector<std::size_t> positions;
};

class ProbeError : public std::runtime_error {
public:
    ProbeError(const std::string& what, std::vector<core::Answer> partial = {})
        : std::runtime_error(what), partial_samples(std::move(partial)) {}
    std::vector<core::Answer> partial_samples;
};

// ======================================================================
// == Probe protocols
// ======================================================================

// Samples n independent continuations of problem+prefix at the given
// temperature, with a continuation budget of twice the remaining rollout,
// and grades each extracted answer against ground truth.
PscResult run_psc(model::ModelClient& client, const core::ProblemRecord& problem,
                  const PrefixSlice& prefix, std::size_t n, const core::Grader& grader,
                  double temperature = 1.0, std::uint64_t sample_index_base = 0);

// Greedy-decodes problem+prefix+suffix with stop "}" and a 64-token cap.
EfaResult run_efa(model::ModelClient& client, const core::ProblemRecord& problem,
                  const PrefixSlice& prefix, const SuffixTemplate& tpl,
                  const core::Grader& grader, std::size_t max_tokens = 64);

// Teacher-forced mean logprob of the answer tokens; degrades to an
// unsupported marker when the backend cannot score.
AtltResult run_atlt(model::ModelClient& client, const core::ProblemRecord& problem,
                    const PrefixSlice& prefix, const std::vector<std::string>& answer_tokens);

// Per-token entropy along one sampled continuation, from top-k logprobs.
EntropySeries run_ed(model::ModelClient& client, const core::ProblemRecord& problem,
                     const PrefixSlice& prefix, std::size_t topk = 20);

// H = -sum p_i log p_i - p_tail log p_tail, in nats, with 0 log 0 = 0.
// Throws on negative probabilities or total mass above 1 (beyond rounding).
double entropy_from_topk(const std::vector<double>& probs, double tail_mass);
double entropy_from_topk(const model::TopkPosition& position);

// Answer extraction from a free continuation: last \boxed{...} content,
// else the text after the last "answer is" marker, else the trimmed last
// non-empty line.
core::Answer extract_free_answer(const std::string& completion);

// ======================================================================
// == Batch running
// ======================================================================

// Runs task(0..n_tasks-1) on up to `parallelism` worker threads. Tasks own
// their result slots (indexed by task id), so aggregation never depends on
// completion order. The first exception is rethrown after all workers stop.
void run_parallel(std::size_t parallelism, std::size_t n_tasks,
                  const std::function<void(std::size_t)>& task);

}  // namespace cotprobe::probes

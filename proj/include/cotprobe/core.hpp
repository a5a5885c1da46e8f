#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cotprobe::core {

// Domain types, answer normalization/grading, majority voting, and
// checkpoint-grid arithmetic shared by every other module.

// ======================================================================
// == Domain types
// ======================================================================

/// One benchmark item.
struct ProblemRecord {
    std::string id;            // unique, nonempty within a dataset
    std::string prompt;
    std::string ground_truth;  // canonical answer string, nonempty
    int difficulty = 0;        // optional level 1-5; 0 = unset
    std::string benchmark;     // tag, may be empty
};

/// A full generated trace with token boundaries and correctness.
struct Rollout {
    std::string problem_id;
    std::vector<std::string> tokens;  // concatenate to text, size T >= 1
    std::string text;
    bool correct = false;
    double temperature = 1.0;
    int index = 0;  // which of the n_rollouts samples this is
};

/// An answer in raw and canonical form. Normalization is idempotent.
struct Answer {
    std::string raw;
    std::string normalized;
};

/// Strictly increasing checkpoint fractions, all inside (0, 1).
class CheckpointGrid {
public:
    explicit CheckpointGrid(std::vector<double> fractions);

    const std::vector<double>& fractions() const { return fractions_; }
    std::size_t size() const { return fractions_.size(); }
    double operator[](std::size_t i) const { return fractions_[i]; }

    /// {0.10, 0.20, ..., 0.90}
    static CheckpointGrid default_grid();
    /// The 13-point fine-grained variant reaching down to 2%.
    static CheckpointGrid fine_grid();

private:
    std::vector<double> fractions_;
};

// ======================================================================
// == Operations
// ======================================================================

/// k_f = floor(fraction * total_tokens). Result is clamped to
/// total_tokens - 1 so the real-arithmetic bound k < T survives floating
/// rounding at fractions just below 1.
std::size_t prefix_length(std::size_t total_tokens, double fraction);

/// Normalization pipeline: trim surrounding whitespace, strip any trailing
/// run of '}' and '.' (both characters, regardless of interleaving), strip
/// leading "\boxed{" wrappers, collapse internal whitespace. Applied to a
/// fixpoint so normalizing a normalized answer is a no-op.
std::string normalize_answer(std::string_view raw);

/// Convenience: build an Answer with its normalized form.
Answer make_answer(std::string raw);

enum class GradeMode { exact, numeric };

/// exact: normalized string equality. numeric: parse both as decimal or
/// rational a/b and compare within absolute tolerance 1e-9, falling back to
/// exact string equality when either side fails to parse.
bool grade(const Answer& candidate, const Answer& ground_truth, GradeMode mode);

/// Pluggable grader interface; callers may register richer equivalence
/// checkers under new mode names. Unknown names are a configuration error.
using Grader = std::function<bool(const Answer&, const Answer&)>;
Grader grader_for(const std::string& mode_name);
void register_grader(const std::string& mode_name, Grader g);

struct VoteResult {
    Answer winner;
    int count = 0;
    bool tied = false;
    std::map<std::string, int> counts;  // by normalized form
};

/// Groups by normalized form and returns the modal answer. Ties keep the
/// tied answer that appeared first in input order and set tied = true.
VoteResult majority_vote(const std::vector<Answer>& answers);

// ======================================================================
// == Dataset ingestion
// ======================================================================

/// JSONL, one ProblemRecord per line: id, prompt, ground_truth, optional
/// difficulty / benchmark. Unknown fields are ignored (the mock backend
/// reads its planted-fraction overrides from the same lines).
std::vector<ProblemRecord> load_dataset_jsonl(const std::string& path);

/// Validates dataset invariants: nonempty unique ids, nonempty ground truth.
void validate_dataset(const std::vector<ProblemRecord>& problems);

} // namespace cotprobe::core

#include <algorithm>
#include <cmath>

#include "cotprobe/modelclient.hpp"
#include "cotprobe/rng.hpp"

namespace cotprobe::model {

namespace {

bool whitespace_free(const std::string& s) {
    return !s.empty() &&
           s.find_first_of(" \t\n\r") == std::string::npos;
}

// Token units are space-led by construction, so the token count of a prefix
// segment is simply its space count.
std::size_t count_token_units(std::string_view segment) {
    return static_cast<std::size_t>(std::count(segment.begin(), segment.end(), ' '));
}

std::string answer_tail_token(const core::Answer& a) { return " \\boxed{" + a.raw + "}"; }

}  // namespace

// ======================================================================
// == Registration
// ======================================================================

void MockBackend::register_problem(const core::ProblemRecord& problem, MockModelSpec spec) {
    if (problem.id.empty() || problem.prompt.empty())
        throw std::invalid_argument("mock: problem needs id and prompt");
    if (by_id_.count(problem.id)) throw std::invalid_argument("mock: duplicate problem id " + problem.id);
    if (!(spec.commit_fraction > 0.0 && spec.commit_fraction < 1.0))
        throw std::invalid_argument("mock: commit_fraction must lie in (0,1)");
    if (!(spec.forceable_fraction > 0.0 && spec.forceable_fraction < 1.0))
        throw std::invalid_argument("mock: forceable_fraction must lie in (0,1)");
    if (spec.forceable_fraction < spec.commit_fraction)
        throw std::invalid_argument("mock: forceable_fraction must be >= commit_fraction");
    if (spec.total_tokens < 20)
        throw std::invalid_argument("mock: rollouts shorter than 20 tokens make fraction grids degenerate");
    if (!whitespace_free(spec.answer.raw))
        throw std::invalid_argument("mock: planted answer must be non-empty and whitespace-free");
    if (spec.distractors.empty())
        throw std::invalid_argument("mock: at least one distractor required");
    for (const auto& d : spec.distractors) {
        if (!whitespace_free(d.raw))
            throw std::invalid_argument("mock: distractors must be non-empty and whitespace-free");
        if (d.normalized == spec.answer.normalized)
            throw std::invalid_argument("mock: distractor collides with the planted answer");
    }
    by_id_[problem.id] = entries_.size();
    entries_.push_back(Entry{problem, std::move(spec)});
}

const MockModelSpec& MockBackend::spec_for(const std::string& problem_id) const {
    auto it = by_id_.find(problem_id);
    if (it == by_id_.end()) throw std::invalid_argument("mock: unknown problem id " + problem_id);
    return entries_[it->second].spec;
}

std::vector<std::string> MockBackend::canonical_rollout(const std::string& problem_id) const {
    auto it = by_id_.find(problem_id);
    if (it == by_id_.end()) throw std::invalid_argument("mock: unknown problem id " + problem_id);
    const Entry& e = entries_[it->second];
    const std::size_t T = e.spec.total_tokens;
    // One digit of problem-specific colour so rollouts differ across problems.
    std::uint64_t r = rng::derive(e.spec.seed, "rollout-colour", rng::mix(0, e.problem.id)) % 10;
    std::vector<std::string> tokens;
    tokens.reserve(T);
    for (std::size_t i = 0; i + 4 < T; ++i)
        tokens.push_back(" w" + std::to_string(r) + "x" + std::to_string(i));
    tokens.push_back(" The");
    tokens.push_back(" answer");
    tokens.push_back(" is");
    tokens.push_back(answer_tail_token(e.spec.answer));
    return tokens;
}

// ======================================================================
// == Prompt -> (problem, prefix length) inference
// ======================================================================

MockBackend::Located MockBackend::locate(const std::string& prompt) const {
    const Entry* best = nullptr;
    for (const auto& e : entries_) {
        if (prompt.size() < e.problem.prompt.size()) continue;
        if (prompt.compare(0, e.problem.prompt.size(), e.problem.prompt) != 0) continue;
        if (!best || e.problem.prompt.size() > best->problem.prompt.size()) best = &e;
    }
    if (!best) throw ProtocolError("mock: prompt does not match any registered problem");

    // Everything between the problem statement and the first newline is
    // rollout prefix; suffix templates all start with '\n'. Counting
    // space-led units keeps k stable under shuffle/replace perturbations.
    std::string_view rest(prompt);
    rest.remove_prefix(best->problem.prompt.size());
    auto nl = rest.find('\n');
    if (nl != std::string_view::npos) rest = rest.substr(0, nl);
    std::size_t k = std::min(count_token_units(rest), best->spec.total_tokens);
    double fraction = static_cast<double>(k) / static_cast<double>(best->spec.total_tokens);
    return Located{best, k, fraction};
}

// ======================================================================
// == Generation
// ======================================================================

Capabilities MockBackend::capabilities() const {
    Capabilities c;
    c.sampling = true;
    c.greedy = true;
    c.top_logprobs = true;
    c.scoring = true;
    c.batch_n = true;
    return c;
}

GenerationResult MockBackend::generate(const GenerationRequest& request) {
    request.validate();
    Located loc = locate(request.prompt);
    const Entry& e = *loc.entry;
    const std::size_t T = e.spec.total_tokens;
    const std::size_t n_candidates = 1 + e.spec.distractors.size();

    GenerationResult result;
    result.usage.prompt_tokens = count_token_units(request.prompt) + 1;
    if (request.want_top_logprobs) result.top_logprobs.emplace();

    const auto rollout = canonical_rollout(e.problem.id);
    const bool greedy = request.temperature == 0.0;
    const double p_correct = e.spec.curve.value(loc.fraction, e.spec.commit_fraction);
    const bool committed = loc.fraction >= e.spec.commit_fraction;

    for (std::size_t i = 0; i < request.n_samples; ++i) {
        std::uint64_t sample_index = request.sample_index_base + i;
        std::vector<std::string> tokens;

        if (greedy) {
            // Forced extraction: the planted answer appears iff the prefix
            // reaches forceable_fraction; below it, a deterministic
            // per-problem distractor.
            bool forced_ok = loc.fraction >= e.spec.forceable_fraction;
            const core::Answer& out =
                forced_ok ? e.spec.answer
                          : e.spec.distractors[rng::derive(e.spec.seed, "greedy-distractor",
                                                           rng::mix(0, e.problem.id)) %
                                               e.spec.distractors.size()];
            tokens.push_back(out.raw);
            tokens.push_back("}");
        } else {
            // Free continuation: resume the canonical rollout, swapping the
            // planted tail for a distractor tail on incorrect draws.
            std::uint64_t h_corr = rng::derive(e.spec.seed, "sample-correct",
                                               rng::mix(0, e.problem.id), loc.k, sample_index);
            bool correct = rng::uniform_at(h_corr) < p_correct;
            const core::Answer* out = &e.spec.answer;
            if (!correct) {
                std::uint64_t h_dist = rng::derive(e.spec.seed, "sample-distractor",
                                                   rng::mix(0, e.problem.id), loc.k, sample_index);
                out = &e.spec.distractors[h_dist % e.spec.distractors.size()];
            }
            for (std::size_t t = loc.k; t < T; ++t)
                tokens.push_back(t + 1 == T ? answer_tail_token(*out) : rollout[t]);
        }

        if (tokens.size() > request.max_tokens) tokens.resize(request.max_tokens);

        if (request.want_top_logprobs) {
            const std::size_t topk = *request.want_top_logprobs;
            std::vector<TopkPosition> series(tokens.size());
            for (std::size_t t = 0; t < tokens.size(); ++t) {
                TopkPosition& pos = series[t];
                if (committed) {
                    // Peaked: 0.99 on the emitted token, the rest split over
                    // the remaining slots; no tail.
                    pos.entries.push_back({tokens[t], std::log(0.99)});
                    for (std::size_t j = 1; j < topk; ++j)
                        pos.entries.push_back(
                            {"alt" + std::to_string(j),
                             std::log(0.01 / static_cast<double>(topk - 1))});
                    pos.tail_mass = topk > 1 ? 0.0 : 0.01;
                } else {
                    // Undecided: uniform over answer candidates (fewer than
                    // k slots when the support is smaller), tail = leftover.
                    std::size_t m = std::min(topk, n_candidates);
                    double p = 1.0 / static_cast<double>(n_candidates);
                    pos.entries.push_back({answer_tail_token(e.spec.answer), std::log(p)});
                    for (std::size_t j = 1; j < m; ++j)
                        pos.entries.push_back({answer_tail_token(e.spec.distractors[j - 1]), std::log(p)});
                    pos.tail_mass = std::clamp(
                        1.0 - static_cast<double>(m) * p, 0.0, 1.0);
                }
            }
            result.top_logprobs->push_back(std::move(series));
        }

        std::string text;
        for (const auto& tok : tokens) text += tok;
        result.usage.completion_tokens += tokens.size();
        result.texts.push_back(std::move(text));
        result.tokens_per_completion.push_back(std::move(tokens));
    }
    return result;
}

std::vector<double> MockBackend::score_tokens(const std::string& prompt,
                                              const std::vector<std::string>& target_tokens) {
    Located loc = locate(prompt);
    const Entry& e = *loc.entry;
    bool committed = loc.fraction >= e.spec.commit_fraction;
    double lp = committed
                    ? std::log(0.99)
                    : std::log(1.0 / static_cast<double>(1 + e.spec.distractors.size()));
    return std::vector<double>(target_tokens.size(), lp);
}

}  // namespace cotprobe::model

#include "cotprobe/probes.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <map>
#include <mutex>
#include <thread>

namespace cotprobe::probes {

// ======================================================================
// == Prefixes
// ======================================================================

PrefixSlice make_prefix(const std::vector<std::string>& rollout_tokens, double fraction) {
    if (rollout_tokens.empty()) throw std::invalid_argument("make_prefix: empty rollout");
    PrefixSlice slice;
    slice.total = rollout_tokens.size();
    slice.fraction = fraction;
    slice.k = core::prefix_length(slice.total, fraction);
    for (std::size_t i = 0; i < slice.k; ++i) slice.text += rollout_tokens[i];
    return slice;
}

// ======================================================================
// == Suffix registry
// ======================================================================

namespace {

std::mutex& suffix_mutex() {
    static std::mutex mu;
    return mu;
}

std::map<std::string, SuffixTemplate>& suffix_map() {
    static std::map<std::string, SuffixTemplate> m = {
        {"original", {"original", "\nTherefore, the final answer is \\boxed{"}},
        {"natural", {"natural", "\nSo the final answer is \\boxed{"}},
        {"soft", {"soft", "\nThe answer is "}},
        {"plain", {"plain", "\n"}},
        {"direct", {"direct", "\nFinal answer: "}},
    };
    return m;
}

}  // namespace

const SuffixTemplate& suffix_template(const std::string& id) {
    std::lock_guard<std::mutex> lock(suffix_mutex());
    auto it = suffix_map().find(id);
    if (it == suffix_map().end())
        throw std::invalid_argument("unknown suffix template '" + id + "'");
    return it->second;
}

void register_suffix_template(SuffixTemplate tpl) {
    if (tpl.id.empty()) throw std::invalid_argument("suffix template needs an id");
    std::lock_guard<std::mutex> lock(suffix_mutex());
    if (!suffix_map().emplace(tpl.id, tpl).second)
        throw std::invalid_argument("suffix template '" + tpl.id + "' already registered");
}

std::vector<std::string> suffix_template_ids() {
    std::lock_guard<std::mutex> lock(suffix_mutex());
    std::vector<std::string> ids;
    for (const auto& [id, tpl] : suffix_map()) ids.push_back(id);
    return ids;
}

// ======================================================================
// == Answer extraction
// ======================================================================

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

// Content of the last \boxed{...}, honouring nested braces.
std::optional<std::string> last_boxed_content(const std::string& text) {
    auto start = text.rfind("\\boxed{");
    if (start == std::string::npos) return std::nullopt;
    std::size_t i = start + 7;
    int depth = 1;
    std::string content;
    while (i < text.size() && depth > 0) {
        char c = text[i++];
        if (c == '{') ++depth;
        if (c == '}') {
            --depth;
            if (depth == 0) break;
        }
        if (depth > 0) content += c;
    }
    return content;  // unbalanced boxes yield the remainder, still gradeable
}

std::optional<std::string> after_last_answer_marker(const std::string& text) {
    static const char* kMarker = "answer is";
    // Case-insensitive search for the last occurrence.
    std::string lower(text.size(), '\0');
    std::transform(text.begin(), text.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    auto pos = lower.rfind(kMarker);
    if (pos == std::string::npos) return std::nullopt;
    std::string rest = text.substr(pos + std::string(kMarker).size());
    auto nl = rest.find('\n');
    if (nl != std::string::npos) rest = rest.substr(0, nl);
    rest = trim(rest);
    if (rest.empty()) return std::nullopt;
    return rest;
}

std::string last_nonempty_line(const std::string& text) {
    std::size_t end = text.size();
    while (end > 0) {
        auto nl = text.rfind('\n', end - 1);
        std::size_t begin = nl == std::string::npos ? 0 : nl + 1;
        std::string line = trim(std::string_view(text).substr(begin, end - begin));
        if (!line.empty()) return line;
        if (nl == std::string::npos) break;
        end = nl;
    }
    return "";
}

}  // namespace

core::Answer extract_free_answer(const std::string& completion) {
    if (auto boxed = last_boxed_content(completion)) return core::make_answer(*boxed);
    if (auto marked = after_last_answer_marker(completion)) return core::make_answer(*marked);
    return core::make_answer(last_nonempty_line(completion));
}

// ======================================================================
// == PSC
// ======================================================================

PscResult run_psc(model::ModelClient& client, const core::ProblemRecord& problem,
                  const PrefixSlice& prefix, std::size_t n, const core::Grader& grader,
                  double temperature, std::uint64_t sample_index_base) {
    if (n < 1) throw std::invalid_argument("run_psc: n must be >= 1");
    if (prefix.k >= prefix.total)
        throw std::invalid_argument("run_psc: prefix must leave at least one token to continue");

    model::GenerationRequest request;
    request.prompt = problem.prompt + prefix.text;
    request.temperature = temperature;
    request.max_tokens = 2 * (prefix.total - prefix.k);  // twice the remaining rollout
    request.n_samples = n;
    request.sample_index_base = sample_index_base;

    model::GenerationResult generation;
    try {
        generation = client.sample(request);
    } catch (const model::TransportError& err) {
        throw ProbeError(std::string("psc probe failed: ") + err.what());
    }

    PscResult result;
    result.fraction = prefix.fraction;
    result.probe_prompt_tokens = generation.usage.prompt_tokens;
    result.probe_completion_tokens = generation.usage.completion_tokens;
    core::Answer truth = core::make_answer(problem.ground_truth);
    for (const auto& text : generation.texts) {
        core::Answer extracted = extract_free_answer(text);
        if (grader(extracted, truth)) ++result.correct_count;
        result.sample_answers.push_back(std::move(extracted));
    }
    result.psc_value = static_cast<double>(result.correct_count) / static_cast<double>(n);
    auto vote = core::majority_vote(result.sample_answers);
    result.majority = vote.winner;
    result.majority_tied = vote.tied;
    result.self_agreement = static_cast<double>(vote.count) / static_cast<double>(n);
    return result;
}

// ======================================================================
// == EFA
// ======================================================================

EfaResult run_efa(model::ModelClient& client, const core::ProblemRecord& problem,
                  const PrefixSlice& prefix, const SuffixTemplate& tpl,
                  const core::Grader& grader, std::size_t max_tokens) {
    EfaResult result;
    result.fraction = prefix.fraction;
    result.suffix_template = tpl.id;
    if (max_tokens == 0) throw std::invalid_argument("run_efa: max_tokens must be >= 1");
    try {
        result.raw_output =
            client.greedy_decode(problem.prompt + prefix.text + tpl.text, {"}"}, max_tokens);
    } catch (const model::TransportError& err) {
        throw ProbeError(std::string("efa probe failed: ") + err.what());
    }
    result.answer = core::make_answer(result.raw_output);
    result.correct = grader(result.answer, core::make_answer(problem.ground_truth));
    return result;
}

// ======================================================================
// == ATLT
// ======================================================================

AtltResult run_atlt(model::ModelClient& client, const core::ProblemRecord& problem,
                    const PrefixSlice& prefix, const std::vector<std::string>& answer_tokens) {
    if (answer_tokens.empty()) throw std::invalid_argument("run_atlt: answer_tokens empty");
    if (!client.capabilities().scoring) return AtltResult{false, 0.0};
    auto logprobs = client.score_tokens(problem.prompt + prefix.text, answer_tokens);
    double sum = 0.0;
    for (double lp : logprobs) sum += lp;
    return AtltResult{true, sum / static_cast<double>(logprobs.size())};
}

// ======================================================================
// == ED
// ======================================================================

double entropy_from_topk(const std::vector<double>& probs, double tail_mass) {
    double total = tail_mass;
    for (double p : probs) {
        if (p < 0.0) throw std::invalid_argument("entropy_from_topk: negative probability");
        total += p;
    }
    if (tail_mass < 0.0) throw std::invalid_argument("entropy_from_topk: negative tail mass");
    if (total > 1.0 + 1e-9) throw std::invalid_argument("entropy_from_topk: mass exceeds 1");
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    if (tail_mass > 0.0) h -= tail_mass * std::log(tail_mass);
    return h;
}

double entropy_from_topk(const model::TopkPosition& position) {
    std::vector<double> probs;
    probs.reserve(position.entries.size());
    for (const auto& entry : position.entries) probs.push_back(std::exp(entry.logprob));
    return entropy_from_topk(probs, position.tail_mass);
}

EntropySeries run_ed(model::ModelClient& client, const core::ProblemRecord& problem,
                     const PrefixSlice& prefix, std::size_t topk) {
    if (!client.capabilities().top_logprobs)
        throw ProbeError("ed probe: backend does not expose top logprobs");
    model::GenerationRequest request;
    request.prompt = problem.prompt + prefix.text;
    request.temperature = 1.0;
    request.max_tokens = prefix.total > prefix.k ? 2 * (prefix.total - prefix.k) : 1;
    request.n_samples = 1;
    request.want_top_logprobs = topk;

    model::GenerationResult generation;
    try {
        generation = client.sample(request);
    } catch (const model::TransportError& err) {
        throw ProbeError(std::string("ed probe failed: ") + err.what());
    }
    if (!generation.top_logprobs || generation.top_logprobs->empty())
        throw ProbeError("ed probe: backend returned no top logprobs");

    EntropySeries series;
    const auto& positions = (*generation.top_logprobs)[0];
    for (std::size_t t = 0; t < positions.size(); ++t) {
        series.per_token_entropy.push_back(entropy_from_topk(positions[t]));
        series.positions.push_back(prefix.k + t);
    }
    return series;
}

// ======================================================================
// == Batch running
// ======================================================================

void run_parallel(std::size_t parallelism, std::size_t n_tasks,
                  const std::function<void(std::size_t)>& task) {
    if (n_tasks == 0) return;
    parallelism = std::clamp<std::size_t>(parallelism, 1, n_tasks);
    if (parallelism == 1) {
        for (std::size_t i = 0; i < n_tasks; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < parallelism; ++w) {
        workers.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n_tasks) return;
                {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (first_error) return;  // stop scheduling after a failure
                }
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace cotprobe::probes

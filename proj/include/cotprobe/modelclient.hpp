#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotprobe/core.hpp"

namespace cotprobe::model {

// ======================================================================
// == Requests and results
// ======================================================================

struct GenerationRequest {
    std::string prompt;
    double temperature = 1.0;  // 0 selects greedy decoding semantics
    std::size_t max_tokens = 16;
    std::size_t n_samples = 1;
    std::vector<std::string> stop_sequences;
    std::optional<std::size_t> want_top_logprobs;
    // Offset added to the per-sample index so a batch split into single
    // requests reproduces the batched draw stream exactly.
    std::uint64_t sample_index_base = 0;

    void validate() const;
};

struct TokenLogprob {
    std::string token;
    double logprob = 0.0;  // always <= 0
};

// Top-k alternatives at one decoded position, plus unreported tail mass.
struct TopkPosition {
    std::vector<TokenLogprob> entries;
    double tail_mass = 0.0;
};

struct Usage {
    std::size_t prompt_tokens = 0;
    std::size_t completion_tokens = 0;
};

struct GenerationResult {
    std::vector<std::string> texts;
    std::vector<std::vector<std::string>> tokens_per_completion;
    // Present only when the request asked for top logprobs: one series of
    // per-position distributions per completion.
    std::optional<std::vector<std::vector<TopkPosition>>> top_logprobs;
    Usage usage;
};

struct Capabilities {
    bool sampling = false;
    bool greedy = false;
    bool top_logprobs = false;
    bool scoring = false;  // teacher-forced token scoring
    bool batch_n = false;  // single request may carry n_samples > 1
};

// ======================================================================
// == Errors
// ======================================================================

// Transport-level failure that survived the retry budget.
class TransportError : public std::runtime_error {
public:
    TransportError(const std::string& what, std::size_t attempts)
        : std::runtime_error(what), attempts_(attempts) {}
    std::size_t attempts() const { return attempts_; }

private:
    std::size_t attempts_;
};

// Upstream replied, but with a payload we cannot interpret.
class ProtocolError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

class UnsupportedCapabilityError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ======================================================================
// == Backend interface
// ======================================================================

class Backend {
public:
    virtual ~Backend() = default;
    virtual std::string name() const = 0;
    virtual Capabilities capabilities() const = 0;
    virtual GenerationResult generate(const GenerationRequest& request) = 0;
    virtual std::vector<double> score_tokens(const std::string& prompt,
                                             const std::vector<std::string>& target_tokens) = 0;
};

// ======================================================================
// == Mock backend
// ======================================================================

// Shape of the planted continuation-correctness probability as a function
// of prefix fraction.
struct RecoverabilityCurve {
    enum class Kind { step, step_cold, logistic, constant };
    Kind kind = Kind::step;
    double level = 1.0;       // constant: flat value; others: post-commit ceiling
    double cold_level = 0.0;  // step_cold: value at fraction exactly 0
    double steepness = 25.0;  // logistic only

    double value(double fraction, double commit_fraction) const;
};

struct MockModelSpec {
    core::Answer answer;
    std::vector<core::Answer> distractors;
    double commit_fraction = 0.2;     // free continuations recover the answer at/after this
    double forceable_fraction = 0.4;  // forced extraction becomes correct at/after this
    RecoverabilityCurve curve;
    std::uint64_t seed = 0;
    std::size_t total_tokens = 40;  // canonical rollout length T
};

// Deterministic oracle backend. Each registered problem gets a canonical
// T-token rollout; any request prompt is mapped back to (problem, prefix
// length k) by matching the registered prompt prefix and counting the
// space-led token units that follow it, so token-level perturbations of the
// prefix do not change k. All randomness is hashed from (spec seed, problem,
// k, sample index); there is no mutable state after registration.
class MockBackend : public Backend {
public:
    void register_problem(const core::ProblemRecord& problem, MockModelSpec spec);

    std::string name() const override { return "mock"; }
    Capabilities capabilities() const override;
    GenerationResult generate(const GenerationRequest& request) override;
    std::vector<double> score_tokens(const std::string& prompt,
                                     const std::vector<std::string>& target_tokens) override;

    // The canonical full rollout for a registered problem (filler tokens
    // followed by a four-token answer tail). Exposed so experiment code can
    // build prefixes exactly the way the oracle expects.
    std::vector<std::string> canonical_rollout(const std::string& problem_id) const;
    const MockModelSpec& spec_for(const std::string& problem_id) const;

private:
    struct Entry {
        core::ProblemRecord problem;
        MockModelSpec spec;
    };
    struct Located {
        const Entry* entry;
        std::size_t k;       // inferred prefix token count
        double fraction;     // k / T
    };
    Located locate(const std::string& prompt) const;

    std::vector<Entry> entries_;       // scanned longest-prompt-first
    std::map<std::string, std::size_t> by_id_;
};

// ======================================================================
// == HTTP backend
// ======================================================================

// Wire field names vary across providers; the adapter keeps the mapping in
// one place instead of forking the backend.
struct HttpAdapterConfig {
    std::string endpoint_url;  // e.g. "http://127.0.0.1:8080"
    std::string route = "/v1/completions";
    std::string scoring_route;  // empty = scoring unsupported
    std::string auth_token;
    std::string model;

    std::string prompt_field = "prompt";
    std::string temperature_field = "temperature";
    std::string max_tokens_field = "max_tokens";
    std::string n_field = "n";
    std::string stop_field = "stop";
    std::string top_logprobs_field = "logprobs";
    std::string completions_key = "choices";
    std::string text_field = "text";

    bool batch_n = true;
    std::size_t timeout_seconds = 120;
};

class HttpBackend : public Backend {
public:
    explicit HttpBackend(HttpAdapterConfig config);

    std::string name() const override { return "http"; }
    Capabilities capabilities() const override;
    GenerationResult generate(const GenerationRequest& request) override;
    std::vector<double> score_tokens(const std::string& prompt,
                                     const std::vector<std::string>& target_tokens) override;

private:
    std::string post_json(const std::string& route, const std::string& body);
    HttpAdapterConfig config_;
};

// ======================================================================
// == Client wrapper
// ======================================================================

struct RetryPolicy {
    std::size_t max_attempts = 5;
    double initial_backoff_s = 0.05;
    double multiplier = 2.0;
    double max_backoff_s = 2.0;
};

struct RateLimit {
    double requests_per_second = 0.0;  // 0 = unlimited
    double burst = 1.0;
};

// Pure token-bucket arithmetic, separated from wall-clock so it can be
// tested without sleeping.
class TokenBucket {
public:
    TokenBucket(double rate_per_s, double burst);
    // Seconds the caller must wait before the request may proceed, given the
    // current time; records the (possibly deferred) consumption.
    double acquire_delay(double now_s);

private:
    double rate_;
    double burst_;
    double tokens_;
    double last_s_ = 0.0;
};

struct TelemetrySnapshot {
    std::size_t requests = 0;
    std::size_t attempts = 0;
    std::size_t retries = 0;
    std::size_t failures = 0;
    std::size_t greedy_calls = 0;  // lets audits prove a code path never forces
    std::size_t prompt_tokens = 0;
    std::size_t completion_tokens = 0;
};

// Thread-safe wrapper adding retry, rate limiting, stop-sequence
// enforcement, batch fan-out for backends without n>1 support, and usage
// telemetry. All probe traffic goes through one of these.
class ModelClient {
public:
    explicit ModelClient(std::shared_ptr<Backend> backend, RetryPolicy retry = {},
                         RateLimit limit = {});

    Capabilities capabilities() const { return backend_->capabilities(); }
    Backend& backend() { return *backend_; }

    GenerationResult sample(const GenerationRequest& request);
    std::string greedy_decode(const std::string& prompt, const std::vector<std::string>& stop,
                              std::size_t max_tokens);
    std::vector<double> score_tokens(const std::string& prompt,
                                     const std::vector<std::string>& target_tokens);

    TelemetrySnapshot telemetry() const;

private:
    GenerationResult generate_with_retry(const GenerationRequest& request);
    void rate_gate();

    std::shared_ptr<Backend> backend_;
    RetryPolicy retry_;
    RateLimit limit_;
    std::optional<TokenBucket> bucket_;
    mutable std::mutex mu_;
    TelemetrySnapshot tele_;
};

// Truncates text (and its token list) at the first occurrence of any stop
// sequence; the stop itself is dropped. Returns true if truncation happened.
bool truncate_at_stop(std::string& text, std::vector<std::string>& tokens,
                      const std::vector<std::string>& stops);

}  // namespace cotprobe::model

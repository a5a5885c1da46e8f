#include "cotprobe/modelclient.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

namespace cotprobe::model {

// ======================================================================
// == Request validation and stop handling
// ======================================================================

void GenerationRequest::validate() const {
    if (prompt.empty()) throw std::invalid_argument("generation request: empty prompt");
    if (temperature < 0.0) throw std::invalid_argument("generation request: negative temperature");
    if (max_tokens < 1) throw std::invalid_argument("generation request: max_tokens must be >= 1");
    if (n_samples < 1) throw std::invalid_argument("generation request: n_samples must be >= 1");
    if (want_top_logprobs && *want_top_logprobs < 1)
        throw std::invalid_argument("generation request: top_logprobs count must be >= 1");
}

bool truncate_at_stop(std::string& text, std::vector<std::string>& tokens,
                      const std::vector<std::string>& stops) {
    std::size_t cut = std::string::npos;
    for (const auto& stop : stops) {
        if (stop.empty()) continue;
        auto pos = text.find(stop);
        if (pos != std::string::npos) cut = std::min(cut, pos);
    }
    if (cut == std::string::npos) return false;
    text.resize(cut);
    std::vector<std::string> kept;
    std::size_t consumed = 0;
    for (auto& tok : tokens) {
        if (consumed >= cut) break;
        if (consumed + tok.size() <= cut) {
            consumed += tok.size();
            kept.push_back(std::move(tok));
        } else {
            kept.push_back(tok.substr(0, cut - consumed));  // token straddles the stop
            consumed = cut;
        }
    }
    tokens = std::move(kept);
    return true;
}

// ======================================================================
// == Recoverability curves
// ======================================================================

double RecoverabilityCurve::value(double fraction, double commit_fraction) const {
    switch (kind) {
        case Kind::step:
            return fraction >= commit_fraction ? level : 0.0;
        case Kind::step_cold:
            if (fraction == 0.0) return cold_level;
            return fraction >= commit_fraction ? level : 0.0;
        case Kind::logistic:
            return level / (1.0 + std::exp(-steepness * (fraction - commit_fraction)));
        case Kind::constant:
            return level;
    }
    return 0.0;
}

// ======================================================================
// == Token bucket
// ======================================================================

TokenBucket::TokenBucket(double rate_per_s, double burst)
    : rate_(rate_per_s), burst_(std::max(burst, 1.0)), tokens_(std::max(burst, 1.0)) {}

double TokenBucket::acquire_delay(double now_s) {
    if (rate_ <= 0.0) return 0.0;
    tokens_ = std::min(burst_, tokens_ + (now_s - last_s_) * rate_);
    last_s_ = now_s;
    tokens_ -= 1.0;  // may go negative: the deficit is the wait
    if (tokens_ >= 0.0) return 0.0;
    return -tokens_ / rate_;
}

// ======================================================================
// == ModelClient
// ======================================================================

ModelClient::ModelClient(std::shared_ptr<Backend> backend, RetryPolicy retry, RateLimit limit)
    : backend_(std::move(backend)), retry_(retry), limit_(limit) {
    if (!backend_) throw std::invalid_argument("model client: null backend");
    if (retry_.max_attempts < 1) throw std::invalid_argument("model client: max_attempts must be >= 1");
    if (limit_.requests_per_second > 0.0)
        bucket_.emplace(limit_.requests_per_second, limit_.burst);
}

void ModelClient::rate_gate() {
    if (!bucket_) return;
    double delay;
    {
        std::lock_guard<std::mutex> lock(mu_);
        auto now = std::chrono::duration<double>(
                       std::chrono::steady_clock::now().time_since_epoch())
                       .count();
        delay = bucket_->acquire_delay(now);
    }
    if (delay > 0.0) std::this_thread::sleep_for(std::chrono::duration<double>(delay));
}

GenerationResult ModelClient::generate_with_retry(const GenerationRequest& request) {
    rate_gate();
    double backoff = retry_.initial_backoff_s;
    std::size_t attempt = 0;
    for (;;) {
        ++attempt;
        {
            std::lock_guard<std::mutex> lock(mu_);
            ++tele_.attempts;
        }
        try {
            return backend_->generate(request);
        } catch (const TransportError& err) {
            if (attempt >= retry_.max_attempts) {
                std::lock_guard<std::mutex> lock(mu_);
                ++tele_.failures;
                throw TransportError(std::string(err.what()) + " (gave up)", attempt);
            }
            {
                std::lock_guard<std::mutex> lock(mu_);
                ++tele_.retries;
            }
            if (backoff > 0.0)
                std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
            backoff = std::min(backoff * retry_.multiplier, retry_.max_backoff_s);
        }
    }
}

GenerationResult ModelClient::sample(const GenerationRequest& request) {
    request.validate();
    {
        std::lock_guard<std::mutex> lock(mu_);
        ++tele_.requests;
    }

    GenerationResult result;
    if (request.n_samples == 1 || backend_->capabilities().batch_n) {
        result = generate_with_retry(request);
    } else {
        // Fan a batch out as single-sample requests; sample_index_base keeps
        // the draws identical to the batched stream.
        for (std::size_t i = 0; i < request.n_samples; ++i) {
            GenerationRequest single = request;
            single.n_samples = 1;
            single.sample_index_base = request.sample_index_base + i;
            auto part = generate_with_retry(single);
            if (part.texts.size() != 1)
                throw ProtocolError("backend returned wrong completion count for n=1");
            result.texts.push_back(std::move(part.texts[0]));
            result.tokens_per_completion.push_back(std::move(part.tokens_per_completion[0]));
            if (part.top_logprobs) {
                if (!result.top_logprobs) result.top_logprobs.emplace();
                result.top_logprobs->push_back(std::move((*part.top_logprobs)[0]));
            }
            result.usage.prompt_tokens += part.usage.prompt_tokens;
            result.usage.completion_tokens += part.usage.completion_tokens;
        }
    }

    if (result.texts.size() != request.n_samples ||
        result.tokens_per_completion.size() != request.n_samples)
        throw ProtocolError("backend returned wrong completion count");

    // Enforce stops client-side regardless of upstream behaviour, then
    // re-derive completion token usage so accounting matches what callers see.
    if (!request.stop_sequences.empty()) {
        std::size_t total = 0;
        for (std::size_t i = 0; i < result.texts.size(); ++i) {
            truncate_at_stop(result.texts[i], result.tokens_per_completion[i],
                             request.stop_sequences);
            total += result.tokens_per_completion[i].size();
        }
        result.usage.completion_tokens = total;
    }

    {
        std::lock_guard<std::mutex> lock(mu_);
        tele_.prompt_tokens += result.usage.prompt_tokens;
        tele_.completion_tokens += result.usage.completion_tokens;
    }
    return result;
}

std::string ModelClient::greedy_decode(const std::string& prompt,
                                       const std::vector<std::string>& stop,
                                       std::size_t max_tokens) {
    if (!backend_->capabilities().greedy)
        throw UnsupportedCapabilityError("backend '" + backend_->name() +
                                         "' does not support greedy decoding");
    {
        std::lock_guard<std::mutex> lock(mu_);
        ++tele_.greedy_calls;
    }
    GenerationRequest request;
    request.prompt = prompt;
    request.temperature = 0.0;
    request.max_tokens = max_tokens;
    request.n_samples = 1;
    request.stop_sequences = stop;
    return sample(request).texts.at(0);
}

std::vector<double> ModelClient::score_tokens(const std::string& prompt,
                                              const std::vector<std::string>& target_tokens) {
    if (!backend_->capabilities().scoring)
        throw UnsupportedCapabilityError("backend '" + backend_->name() +
                                         "' does not support teacher-forced scoring");
    {
        std::lock_guard<std::mutex> lock(mu_);
        ++tele_.requests;
        ++tele_.attempts;
    }
    rate_gate();
    return backend_->score_tokens(prompt, target_tokens);
}

TelemetrySnapshot ModelClient::telemetry() const {
    std::lock_guard<std::mutex> lock(mu_);
    return tele_;
}

}  // namespace cotprobe::model

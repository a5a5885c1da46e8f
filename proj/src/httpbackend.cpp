#include <httplib.h>
#include <json.hpp>

#include "cotprobe/modelclient.hpp"

namespace cotprobe::model {

using nlohmann::json;

HttpBackend::HttpBackend(HttpAdapterConfig config) : config_(std::move(config)) {
    if (config_.endpoint_url.empty())
        throw std::invalid_argument("http backend: endpoint_url is required");
}

Capabilities HttpBackend::capabilities() const {
    Capabilities c;
    c.sampling = true;
    c.greedy = true;
    c.top_logprobs = true;
    c.scoring = !config_.scoring_route.empty();
    c.batch_n = config_.batch_n;
    return c;
}

std::string HttpBackend::post_json(const std::string& route, const std::string& body) {
    httplib::Client client(config_.endpoint_url);
    client.set_connection_timeout(static_cast<time_t>(config_.timeout_seconds));
    client.set_read_timeout(static_cast<time_t>(config_.timeout_seconds));
    httplib::Headers headers;
    if (!config_.auth_token.empty())
        headers.emplace("Authorization", "Bearer " + config_.auth_token);

    auto res = client.Post(route, headers, body, "application/json");
    if (!res)
        throw TransportError("http backend: no response from " + config_.endpoint_url +
                                 route + " (" + httplib::to_string(res.error()) + ")",
                             1);
    // 429 and 5xx are transient; anything else non-200 is a protocol problem.
    if (res->status == 429 || res->status >= 500)
        throw TransportError("http backend: status " + std::to_string(res->status), 1);
    if (res->status != 200)
        throw ProtocolError("http backend: unexpected status " + std::to_string(res->status) +
                            ": " + res->body);
    return res->body;
}

GenerationResult HttpBackend::generate(const GenerationRequest& request) {
    request.validate();

    json payload;
    payload[config_.prompt_field] = request.prompt;
    payload[config_.temperature_field] = request.temperature;
    payload[config_.max_tokens_field] = request.max_tokens;
    payload[config_.n_field] = request.n_samples;
    if (!config_.model.empty()) payload["model"] = config_.model;
    if (!request.stop_sequences.empty()) payload[config_.stop_field] = request.stop_sequences;
    if (request.want_top_logprobs)
        payload[config_.top_logprobs_field] = *request.want_top_logprobs;

    json reply;
    try {
        reply = json::parse(post_json(config_.route, payload.dump()));
    } catch (const json::parse_error& err) {
        throw ProtocolError(std::string("http backend: malformed JSON reply: ") + err.what());
    }

    GenerationResult result;
    try {
        const json& choices = reply.at(config_.completions_key);
        if (!choices.is_array() || choices.size() != request.n_samples)
            throw ProtocolError("http backend: expected " + std::to_string(request.n_samples) +
                                " completions, got " + std::to_string(choices.size()));
        for (const json& choice : choices) {
            std::string text = choice.at(config_.text_field).get<std::string>();
            std::vector<std::string> tokens;
            std::vector<TopkPosition> topk_series;

            if (choice.contains("logprobs") && choice["logprobs"].is_object()) {
                const json& lp = choice["logprobs"];
                if (lp.contains("tokens"))
                    tokens = lp["tokens"].get<std::vector<std::string>>();
                if (lp.contains("top_logprobs") && lp["top_logprobs"].is_array()) {
                    for (const json& pos : lp["top_logprobs"]) {
                        TopkPosition tp;
                        double mass = 0.0;
                        for (auto it = pos.begin(); it != pos.end(); ++it) {
                            double logprob = it.value().get<double>();
                            tp.entries.push_back({it.key(), std::min(logprob, 0.0)});
                            mass += std::exp(logprob);
                        }
                        // Providers rarely report the tail; reconstruct it.
                        tp.tail_mass = std::clamp(1.0 - mass, 0.0, 1.0);
                        topk_series.push_back(std::move(tp));
                    }
                }
            }
            if (tokens.empty() && !text.empty()) {
                // Tokenless dialect: fall back to space-led units so token
                // counting stays meaningful for budgets and usage.
                std::size_t start = 0;
                for (std::size_t i = 1; i <= text.size(); ++i) {
                    if (i == text.size() || text[i] == ' ') {
                        tokens.push_back(text.substr(start, i - start));
                        start = i;
                    }
                }
            }
            result.texts.push_back(std::move(text));
            result.tokens_per_completion.push_back(std::move(tokens));
            if (request.want_top_logprobs) {
                if (!result.top_logprobs) result.top_logprobs.emplace();
                result.top_logprobs->push_back(std::move(topk_series));
            }
        }
        if (reply.contains("usage")) {
            result.usage.prompt_tokens = reply["usage"].value("prompt_tokens", 0);
            result.usage.completion_tokens = reply["usage"].value("completion_tokens", 0);
        }
        if (result.usage.completion_tokens == 0)
            for (const auto& t : result.tokens_per_completion)
                result.usage.completion_tokens += t.size();
    } catch (const json::exception& err) {
        throw ProtocolError(std::string("http backend: reply missing required fields: ") +
                            err.what());
    }
    return result;
}

std::vector<double> HttpBackend::score_tokens(const std::string& prompt,
                                              const std::vector<std::string>& target_tokens) {
    if (config_.scoring_route.empty())
        throw UnsupportedCapabilityError("http backend: no scoring route configured");
    json payload;
    payload[config_.prompt_field] = prompt;
    payload["target_tokens"] = target_tokens;
    if (!config_.model.empty()) payload["model"] = config_.model;

    json reply;
    try {
        reply = json::parse(post_json(config_.scoring_route, payload.dump()));
    } catch (const json::parse_error& err) {
        throw ProtocolError(std::string("http backend: malformed JSON reply: ") + err.what());
    }
    try {
        auto logprobs = reply.at("logprobs").get<std::vector<double>>();
        if (logprobs.size() != target_tokens.size())
            throw ProtocolError("http backend: scoring reply length mismatch");
        return logprobs;
    } catch (const json::exception& err) {
        throw ProtocolError(std::string("http backend: bad scoring reply: ") + err.what());
    }
}

}  // namespace cotprobe::model

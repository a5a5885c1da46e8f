#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <httplib.h>
#include <json.hpp>
#include <set>
#include <thread>

#include "cotprobe/modelclient.hpp"
#include "fixtures.hpp"

using namespace cotprobe;
using model::GenerationRequest;
using model::MockBackend;
using model::ModelClient;

namespace {

std::shared_ptr<MockBackend> one_problem_mock(core::ProblemRecord& problem, double commit,
                                              double forceable, std::size_t total = 40) {
    auto mock = std::make_shared<MockBackend>();
    problem = fixtures::planted_problem(0);
    mock->register_problem(problem, fixtures::planted_spec(problem, commit, forceable, {}, 7, total));
    return mock;
}

// Delegates to an inner backend but fails the first `fail_first` calls.
class FlakyBackend : public model::Backend {
public:
    FlakyBackend(std::shared_ptr<model::Backend> inner, std::size_t fail_first)
        : inner_(std::move(inner)), fail_first_(fail_first) {}
    std::string name() const override { return "flaky"; }
    model::Capabilities capabilities() const override { return inner_->capabilities(); }
    model::GenerationResult generate(const GenerationRequest& request) override {
        if (calls_++ < fail_first_) throw model::TransportError("flaky transport", 1);
        return inner_->generate(request);
    }
    std::vector<double> score_tokens(const std::string& prompt,
                                     const std::vector<std::string>& targets) override {
        return inner_->score_tokens(prompt, targets);
    }

private:
    std::shared_ptr<model::Backend> inner_;
    std::size_t fail_first_;
    std::size_t calls_ = 0;
};

// Same oracle, but refuses batched requests so the client must fan out.
class BatchlessBackend : public model::Backend {
public:
    explicit BatchlessBackend(std::shared_ptr<model::Backend> inner) : inner_(std::move(inner)) {}
    std::string name() const override { return "batchless"; }
    model::Capabilities capabilities() const override {
        auto c = inner_->capabilities();
        c.batch_n = false;
        return c;
    }
    model::GenerationResult generate(const GenerationRequest& request) override {
        if (request.n_samples != 1)
            throw model::ProtocolError("batchless backend got a batched request");
        return inner_->generate(request);
    }
    std::vector<double> score_tokens(const std::string& prompt,
                                     const std::vector<std::string>& targets) override {
        return inner_->score_tokens(prompt, targets);
    }

private:
    std::shared_ptr<model::Backend> inner_;
};

}  // namespace

// ======================================================================
// == Request validation and stop enforcement
// ======================================================================

TEST_CASE("generation request validation") {
    GenerationRequest ok;
    ok.prompt = "p";
    CHECK_NOTHROW(ok.validate());

    GenerationRequest r = ok;
    r.prompt = "";
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
    r = ok;
    r.temperature = -0.1;
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
    r = ok;
    r.max_tokens = 0;
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
    r = ok;
    r.n_samples = 0;
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
    r = ok;
    r.want_top_logprobs = 0;
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
}

TEST_CASE("truncate_at_stop cuts text and whole tokens") {
    std::string text = "abc}def";
    std::vector<std::string> tokens = {"abc", "}def"};
    CHECK(model::truncate_at_stop(text, tokens, {"}"}));
    CHECK(text == "abc");
    CHECK(tokens == std::vector<std::string>{"abc"});
}

TEST_CASE("truncate_at_stop trims a straddling token") {
    std::string text = "abc}d";
    std::vector<std::string> tokens = {"ab", "c}d"};
    CHECK(model::truncate_at_stop(text, tokens, {"}"}));
    CHECK(text == "abc");
    CHECK(tokens == std::vector<std::string>{"ab", "c"});
}

TEST_CASE("truncate_at_stop picks the earliest stop and ignores empty ones") {
    std::string text = "one STOP two HALT three";
    std::vector<std::string> tokens = {"one STOP two HALT three"};
    CHECK(model::truncate_at_stop(text, tokens, {"", "HALT", "STOP"}));
    CHECK(text == "one ");

    std::string untouched = "no stops here";
    std::vector<std::string> toks = {"no stops here"};
    CHECK_FALSE(model::truncate_at_stop(untouched, toks, {"XYZ"}));
    CHECK(untouched == "no stops here");
}

// ======================================================================
// == Recoverability curves and token bucket
// ======================================================================

TEST_CASE("recoverability curve shapes") {
    model::RecoverabilityCurve step;  // defaults: step, level 1
    CHECK(step.value(0.19, 0.2) == 0.0);
    CHECK(step.value(0.20, 0.2) == 1.0);
    CHECK(step.value(0.90, 0.2) == 1.0);

    model::RecoverabilityCurve cold;
    cold.kind = model::RecoverabilityCurve::Kind::step_cold;
    cold.cold_level = 0.7;
    CHECK(cold.value(0.0, 0.2) == 0.7);
    CHECK(cold.value(0.1, 0.2) == 0.0);
    CHECK(cold.value(0.2, 0.2) == 1.0);

    model::RecoverabilityCurve logi;
    logi.kind = model::RecoverabilityCurve::Kind::logistic;
    CHECK(logi.value(0.5, 0.5) == doctest::Approx(0.5));
    CHECK(logi.value(0.9, 0.5) > 0.99);
    CHECK(logi.value(0.1, 0.5) < 0.01);

    model::RecoverabilityCurve flat;
    flat.kind = model::RecoverabilityCurve::Kind::constant;
    flat.level = 0.3;
    CHECK(flat.value(0.0, 0.9) == 0.3);
    CHECK(flat.value(1.0, 0.9) == 0.3);
}

TEST_CASE("token bucket arithmetic without wall clock") {
    model::TokenBucket bucket(2.0, 1.0);  // 2 req/s, burst 1
    CHECK(bucket.acquire_delay(0.0) == 0.0);          // burst token
    CHECK(bucket.acquire_delay(0.0) == doctest::Approx(0.5));   // one-token deficit
    CHECK(bucket.acquire_delay(0.0) == doctest::Approx(1.0));   // deficit grows
    CHECK(bucket.acquire_delay(10.0) == 0.0);         // long idle refills

    model::TokenBucket unlimited(0.0, 1.0);
    for (int i = 0; i < 5; ++i) CHECK(unlimited.acquire_delay(0.0) == 0.0);

    model::TokenBucket bursty(1.0, 3.0);
    CHECK(bursty.acquire_delay(0.0) == 0.0);
    CHECK(bursty.acquire_delay(0.0) == 0.0);
    CHECK(bursty.acquire_delay(0.0) == 0.0);
    CHECK(bursty.acquire_delay(0.0) == doctest::Approx(1.0));
}

// ======================================================================
// == Mock backend: registration and canonical rollouts
// ======================================================================

TEST_CASE("mock registration rejects malformed specs") {
    MockBackend mock;
    auto problem = fixtures::planted_problem(0);
    auto spec = fixtures::planted_spec(problem, 0.2, 0.4);
    mock.register_problem(problem, spec);
    CHECK_THROWS_AS(mock.register_problem(problem, spec), std::invalid_argument);  // duplicate

    auto p2 = fixtures::planted_problem(1);
    auto bad = fixtures::planted_spec(p2, 0.0, 0.4);
    CHECK_THROWS_AS(mock.register_problem(p2, bad), std::invalid_argument);
    bad = fixtures::planted_spec(p2, 0.5, 0.4);  // forceable below commit
    CHECK_THROWS_AS(mock.register_problem(p2, bad), std::invalid_argument);
    bad = fixtures::planted_spec(p2, 0.2, 0.4);
    bad.total_tokens = 19;
    CHECK_THROWS_AS(mock.register_problem(p2, bad), std::invalid_argument);
    bad = fixtures::planted_spec(p2, 0.2, 0.4);
    bad.answer = core::make_answer("1 2");
    CHECK_THROWS_AS(mock.register_problem(p2, bad), std::invalid_argument);
    bad = fixtures::planted_spec(p2, 0.2, 0.4);
    bad.distractors.clear();
    CHECK_THROWS_AS(mock.register_problem(p2, bad), std::invalid_argument);
    bad = fixtures::planted_spec(p2, 0.2, 0.4);
    bad.distractors.push_back(core::make_answer(p2.ground_truth + "."));  // normalizes to truth
    CHECK_THROWS_AS(mock.register_problem(p2, bad), std::invalid_argument);
}

TEST_CASE("canonical rollout ends in a boxed answer tail") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto tokens = mock->canonical_rollout(problem.id);
    REQUIRE(tokens.size() == 40);
    CHECK(tokens[36] == " The");
    CHECK(tokens[37] == " answer");
    CHECK(tokens[38] == " is");
    CHECK(tokens[39] == " \\boxed{" + problem.ground_truth + "}");
    for (const auto& tok : tokens) {
        REQUIRE_FALSE(tok.empty());
        CHECK(tok.front() == ' ');  // space-led units make k countable
    }
    CHECK_THROWS_AS(mock->canonical_rollout("nope"), std::invalid_argument);
}

TEST_CASE("mock rollouts differ across problems but not across instances") {
    MockBackend a, b;
    auto problems = fixtures::plant_population(a, 3, 0.2, 0.4);
    fixtures::plant_population(b, 3, 0.2, 0.4);
    CHECK(a.canonical_rollout("p0") == b.canonical_rollout("p0"));
    CHECK(a.canonical_rollout("p1") == b.canonical_rollout("p1"));

    GenerationRequest request;
    request.prompt = problems[0].prompt;  // zero-length prefix
    request.n_samples = 4;
    request.max_tokens = 80;
    CHECK(a.generate(request).texts == b.generate(request).texts);
}

// ======================================================================
// == Mock backend: sampled continuations
// ======================================================================

TEST_CASE("continuations recover the answer at or past the planted commit point") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto rollout = mock->canonical_rollout(problem.id);

    auto prefix_text = [&](std::size_t k) {
        std::string s;
        for (std::size_t i = 0; i < k; ++i) s += rollout[i];
        return s;
    };

    GenerationRequest request;
    request.n_samples = 8;
    request.max_tokens = 128;

    request.prompt = problem.prompt + prefix_text(8);  // fraction 0.2, committed
    auto committed = mock->generate(request);
    REQUIRE(committed.texts.size() == 8);
    for (const auto& text : committed.texts) {
        CHECK(text.find("\\boxed{" + problem.ground_truth + "}") != std::string::npos);
        CHECK(committed.texts[0] == text);  // step curve: all draws identical
    }

    request.prompt = problem.prompt + prefix_text(4);  // fraction 0.1, uncommitted
    auto early = mock->generate(request);
    for (const auto& text : early.texts)
        CHECK(text.find("\\boxed{" + problem.ground_truth + "}") == std::string::npos);
}

TEST_CASE("continuation token accounting and max_tokens cap") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto rollout = mock->canonical_rollout(problem.id);
    std::string prefix;
    for (std::size_t i = 0; i < 8; ++i) prefix += rollout[i];

    GenerationRequest request;
    request.prompt = problem.prompt + prefix;
    request.n_samples = 2;
    request.max_tokens = 64;
    auto result = mock->generate(request);
    // 32 remaining tokens per completion; prompt = its space-led units + 1.
    CHECK(result.tokens_per_completion[0].size() == 32);
    CHECK(result.usage.completion_tokens == 64);
    std::size_t spaces = static_cast<std::size_t>(
        std::count(request.prompt.begin(), request.prompt.end(), ' '));
    CHECK(result.usage.prompt_tokens == spaces + 1);

    request.max_tokens = 1;
    request.n_samples = 1;
    auto capped = mock->generate(request);
    CHECK(capped.tokens_per_completion[0].size() == 1);
    CHECK(capped.texts[0] == rollout[8]);
}

TEST_CASE("unknown prompts are a protocol error") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    GenerationRequest request;
    request.prompt = "Unregistered problem text";
    CHECK_THROWS_AS(mock->generate(request), model::ProtocolError);
}

TEST_CASE("prefix token count survives token-level perturbations") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto rollout = mock->canonical_rollout(problem.id);

    std::string prefix, perturbed;
    for (std::size_t i = 0; i < 12; ++i) prefix += rollout[i];
    // Same unit count, scrambled order and one replaced token.
    for (std::size_t i = 0; i < 12; ++i) perturbed += rollout[11 - i];
    perturbed.replace(perturbed.find(rollout[5]), rollout[5].size(), " zq9");

    ModelClient client(mock);
    auto a = client.greedy_decode(problem.prompt + prefix + "\nFinal answer: ", {"}"}, 64);
    auto b = client.greedy_decode(problem.prompt + perturbed + "\nFinal answer: ", {"}"}, 64);
    CHECK(a == b);  // same inferred k, same planted regime
}

// ======================================================================
// == Mock backend: forced extraction and the planted gap band
// ======================================================================

TEST_CASE("greedy decoding yields the answer only past the forceable point") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto rollout = mock->canonical_rollout(problem.id);
    ModelClient client(mock);

    auto forced = [&](std::size_t k) {
        std::string prompt = problem.prompt;
        for (std::size_t i = 0; i < k; ++i) prompt += rollout[i];
        prompt += "\nTherefore, the final answer is \\boxed{";
        return client.greedy_decode(prompt, {"}"}, 64);
    };

    CHECK(forced(16) == problem.ground_truth);  // fraction 0.4: forceable
    CHECK(forced(39) == problem.ground_truth);

    auto below = forced(8);  // fraction 0.2: committed but not forceable
    CHECK(below != problem.ground_truth);
    std::set<std::string> distractors;
    for (const auto& d : mock->spec_for(problem.id).distractors) distractors.insert(d.raw);
    CHECK(distractors.count(below) == 1);
    CHECK(forced(8) == below);  // deterministic distractor choice
}

TEST_CASE("planted band separates detection from extraction at every checkpoint") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto rollout = mock->canonical_rollout(problem.id);
    ModelClient client(mock);

    for (std::size_t k = 8; k < 16; ++k) {  // fractions [0.2, 0.4)
        std::string prefix = problem.prompt;
        for (std::size_t i = 0; i < k; ++i) prefix += rollout[i];

        GenerationRequest request;
        request.prompt = prefix;
        request.n_samples = 8;
        request.max_tokens = 2 * (40 - k);
        auto samples = client.sample(request);
        for (const auto& text : samples.texts)
            CHECK(text.find("\\boxed{" + problem.ground_truth + "}") != std::string::npos);

        auto forced = client.greedy_decode(prefix + "\nFinal answer: ", {"}"}, 64);
        CHECK(forced != problem.ground_truth);
    }
}

TEST_CASE("client strips the stop sequence and re-derives usage") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto rollout = mock->canonical_rollout(problem.id);
    ModelClient client(mock);

    std::string prompt = problem.prompt;
    for (std::size_t i = 0; i < 20; ++i) prompt += rollout[i];
    prompt += "\nFinal answer: ";
    auto text = client.greedy_decode(prompt, {"}"}, 64);
    CHECK(text == problem.ground_truth);  // "100}" truncated to "100"
    CHECK(text.find('}') == std::string::npos);
    // The raw backend emitted 2 tokens; after the stop cut only 1 is billed.
    CHECK(client.telemetry().completion_tokens == 1);
    CHECK(client.telemetry().greedy_calls == 1);
}

// ======================================================================
// == Mock backend: top logprobs and scoring
// ======================================================================

TEST_CASE("top-logprob shape is peaked after commitment, uniform before") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto rollout = mock->canonical_rollout(problem.id);

    GenerationRequest request;
    request.n_samples = 1;
    request.max_tokens = 8;
    request.want_top_logprobs = 20;

    request.prompt = problem.prompt;
    for (std::size_t i = 0; i < 8; ++i) request.prompt += rollout[i];
    auto committed = mock->generate(request);
    REQUIRE(committed.top_logprobs.has_value());
    const auto& peaked = (*committed.top_logprobs)[0][0];
    REQUIRE(peaked.entries.size() == 20);
    CHECK(peaked.entries[0].logprob == std::log(0.99));
    CHECK(peaked.tail_mass == 0.0);

    request.prompt = problem.prompt;
    for (std::size_t i = 0; i < 4; ++i) request.prompt += rollout[i];
    auto early = mock->generate(request);
    const auto& uniform = (*early.top_logprobs)[0][0];
    REQUIRE(uniform.entries.size() == 4);  // answer + 3 distractors
    for (const auto& e : uniform.entries) CHECK(e.logprob == std::log(0.25));
    CHECK(uniform.tail_mass == doctest::Approx(0.0));

    request.want_top_logprobs = 2;  // truncated support leaves tail mass
    auto truncated = mock->generate(request);
    const auto& partial = (*truncated.top_logprobs)[0][0];
    REQUIRE(partial.entries.size() == 2);
    CHECK(partial.tail_mass == doctest::Approx(0.5));
}

TEST_CASE("teacher-forced scoring reflects commitment state") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    auto rollout = mock->canonical_rollout(problem.id);
    ModelClient client(mock);

    std::string committed = problem.prompt;
    for (std::size_t i = 0; i < 8; ++i) committed += rollout[i];
    auto lp = client.score_tokens(committed, {" a", " b", " c"});
    REQUIRE(lp.size() == 3);
    for (double v : lp) CHECK(v == std::log(0.99));

    std::string early = problem.prompt;
    for (std::size_t i = 0; i < 4; ++i) early += rollout[i];
    lp = client.score_tokens(early, {" a"});
    CHECK(lp[0] == std::log(0.25));  // uniform over answer + 3 distractors

    CHECK(client.score_tokens(committed, {}).empty());
}

// ======================================================================
// == ModelClient: fan-out, retries, telemetry
// ======================================================================

TEST_CASE("batch fan-out reproduces the batched draw stream") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4, 60);
    model::RecoverabilityCurve curve;
    curve.kind = model::RecoverabilityCurve::Kind::logistic;  // mixed draws
    auto p2 = fixtures::planted_problem(1);
    mock->register_problem(p2, fixtures::planted_spec(p2, 0.3, 0.5, curve, 11, 60));

    ModelClient batched(mock);
    ModelClient split(std::make_shared<BatchlessBackend>(mock));

    GenerationRequest request;
    request.prompt = p2.prompt;  // 18/60 tokens: right at the commit midpoint
    auto rollout = mock->canonical_rollout(p2.id);
    for (std::size_t i = 0; i < 18; ++i) request.prompt += rollout[i];
    request.n_samples = 8;
    request.max_tokens = 200;

    auto a = batched.sample(request);
    auto b = split.sample(request);
    CHECK(a.texts == b.texts);
    CHECK(std::set<std::string>(a.texts.begin(), a.texts.end()).size() >= 2);  // non-trivial draws
    CHECK(a.usage.completion_tokens == b.usage.completion_tokens);
    CHECK(batched.telemetry().attempts == 1);
    CHECK(split.telemetry().attempts == 8);

    // Manual single-sample replay with explicit index offsets matches too.
    for (std::size_t i = 0; i < 8; ++i) {
        GenerationRequest single = request;
        single.n_samples = 1;
        single.sample_index_base = i;
        CHECK(batched.sample(single).texts[0] == a.texts[i]);
    }
}

TEST_CASE("transient failures are retried up to the attempt budget") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    model::RetryPolicy retry;
    retry.initial_backoff_s = 0.0;

    ModelClient client(std::make_shared<FlakyBackend>(mock, 2), retry);
    GenerationRequest request;
    request.prompt = problem.prompt;
    request.max_tokens = 64;
    auto result = client.sample(request);  // succeeds on attempt 3
    CHECK(result.texts.size() == 1);
    CHECK(client.telemetry().requests == 1);
    CHECK(client.telemetry().attempts == 3);
    CHECK(client.telemetry().retries == 2);
    CHECK(client.telemetry().failures == 0);

    retry.max_attempts = 2;
    ModelClient doomed(std::make_shared<FlakyBackend>(mock, 100), retry);
    try {
        doomed.sample(request);
        FAIL("expected TransportError");
    } catch (const model::TransportError& err) {
        CHECK(err.attempts() == 2);
    }
    CHECK(doomed.telemetry().attempts == 2);
    CHECK(doomed.telemetry().retries == 1);
    CHECK(doomed.telemetry().failures == 1);
}

TEST_CASE("client constructor contracts") {
    CHECK_THROWS_AS(ModelClient(nullptr), std::invalid_argument);
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    model::RetryPolicy retry;
    retry.max_attempts = 0;
    CHECK_THROWS_AS(ModelClient(mock, retry), std::invalid_argument);
}

TEST_CASE("rate-limited client still completes requests") {
    core::ProblemRecord problem;
    auto mock = one_problem_mock(problem, 0.2, 0.4);
    model::RateLimit limit;
    limit.requests_per_second = 10000.0;
    ModelClient client(mock, {}, limit);
    GenerationRequest request;
    request.prompt = problem.prompt;
    request.max_tokens = 8;
    for (int i = 0; i < 3; ++i) CHECK(client.sample(request).texts.size() == 1);
}

// ======================================================================
// == HTTP backend against an in-process server
// ======================================================================

namespace {

struct TestServer {
    httplib::Server svr;
    int port = 0;
    std::thread thread;

    void start() {
        port = svr.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        thread = std::thread([this] { svr.listen_after_bind(); });
        svr.wait_until_ready();
    }
    ~TestServer() {
        svr.stop();
        if (thread.joinable()) thread.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

}  // namespace

TEST_CASE("http backend maps wire fields and reconstructs tail mass") {
    TestServer server;
    nlohmann::json seen;
    std::string seen_auth;
    server.svr.Post("/v1/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen = nlohmann::json::parse(req.body);
        if (req.has_header("Authorization")) seen_auth = req.get_header_value("Authorization");
        nlohmann::json position;
        position[" ok"] = -0.02;
        position[" alt"] = -4.6;
        nlohmann::json choice;
        choice["text"] = " ok";
        choice["logprobs"]["tokens"] = nlohmann::json::array({" ok"});
        choice["logprobs"]["top_logprobs"] = nlohmann::json::array({position});
        nlohmann::json reply;
        reply["choices"] = nlohmann::json::array({choice});
        reply["usage"]["prompt_tokens"] = 5;
        reply["usage"]["completion_tokens"] = 1;
        res.set_content(reply.dump(), "application/json");
    });
    server.start();

    model::HttpAdapterConfig config;
    config.endpoint_url = server.url();
    config.auth_token = "sekrit";
    config.model = "test-model";
    auto backend = std::make_shared<model::HttpBackend>(config);
    ModelClient client(backend);

    GenerationRequest request;
    request.prompt = "What is 2+2?";
    request.temperature = 0.7;
    request.max_tokens = 32;
    request.stop_sequences = {"\n\n"};
    request.want_top_logprobs = 2;
    auto result = client.sample(request);

    CHECK(seen["prompt"] == "What is 2+2?");
    CHECK(seen["temperature"] == doctest::Approx(0.7));
    CHECK(seen["max_tokens"] == 32);
    CHECK(seen["n"] == 1);
    CHECK(seen["model"] == "test-model");
    CHECK(seen["stop"][0] == "\n\n");
    CHECK(seen["logprobs"] == 2);
    CHECK(seen_auth == "Bearer sekrit");

    CHECK(result.texts == std::vector<std::string>{" ok"});
    CHECK(result.tokens_per_completion[0] == std::vector<std::string>{" ok"});
    REQUIRE(result.top_logprobs.has_value());
    const auto& pos = (*result.top_logprobs)[0][0];
    REQUIRE(pos.entries.size() == 2);
    for (const auto& entry : pos.entries)
        CHECK(entry.logprob == (entry.token == " ok" ? -0.02 : -4.6));
    double mass = std::exp(-0.02) + std::exp(-4.6);
    CHECK(pos.tail_mass == doctest::Approx(1.0 - mass));
    CHECK(result.usage.prompt_tokens == 5);
    CHECK(result.usage.completion_tokens == 1);
}

TEST_CASE("http backend retries 500s and surfaces 404s as protocol errors") {
    TestServer server;
    int calls = 0;
    server.svr.Post("/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
        if (++calls == 1) {
            res.status = 500;
            return;
        }
        nlohmann::json choice;
        choice["text"] = "fine";
        nlohmann::json reply;
        reply["choices"] = nlohmann::json::array({choice});
        res.set_content(reply.dump(), "application/json");
    });
    server.svr.Post("/missing", [&](const httplib::Request&, httplib::Response& res) {
        res.status = 404;
        res.set_content("{}", "application/json");
    });
    server.start();

    model::HttpAdapterConfig config;
    config.endpoint_url = server.url();
    model::RetryPolicy retry;
    retry.initial_backoff_s = 0.001;
    ModelClient client(std::make_shared<model::HttpBackend>(config), retry);

    GenerationRequest request;
    request.prompt = "hi";
    auto result = client.sample(request);
    CHECK(result.texts[0] == "fine");
    CHECK(calls == 2);
    CHECK(client.telemetry().retries == 1);

    config.route = "/missing";
    ModelClient wrong(std::make_shared<model::HttpBackend>(config), retry);
    CHECK_THROWS_AS(wrong.sample(request), model::ProtocolError);
}

TEST_CASE("http backend rejects malformed and mis-sized replies") {
    TestServer server;
    server.svr.Post("/garbled", [&](const httplib::Request&, httplib::Response& res) {
        res.set_content("not json at all", "application/json");
    });
    server.svr.Post("/short", [&](const httplib::Request&, httplib::Response& res) {
        nlohmann::json choice;
        choice["text"] = "only one";
        nlohmann::json reply;
        reply["choices"] = nlohmann::json::array({choice});
        res.set_content(reply.dump(), "application/json");
    });
    server.start();

    model::HttpAdapterConfig config;
    config.endpoint_url = server.url();
    config.route = "/garbled";
    GenerationRequest request;
    request.prompt = "hi";
    CHECK_THROWS_AS(model::HttpBackend(config).generate(request), model::ProtocolError);

    config.route = "/short";
    request.n_samples = 2;  // reply has one choice
    CHECK_THROWS_AS(model::HttpBackend(config).generate(request), model::ProtocolError);
}

TEST_CASE("http backend tokenizes space-led dialects and sums usage") {
    TestServer server;
    server.svr.Post("/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
        nlohmann::json choice;
        choice["text"] = "alpha beta gamma";
        nlohmann::json reply;
        reply["choices"] = nlohmann::json::array({choice});
        res.set_content(reply.dump(), "application/json");
    });
    server.start();

    model::HttpAdapterConfig config;
    config.endpoint_url = server.url();
    auto result = model::HttpBackend(config).generate([] {
        GenerationRequest r;
        r.prompt = "hi";
        return r;
    }());
    CHECK(result.tokens_per_completion[0] ==
          std::vector<std::string>{"alpha", " beta", " gamma"});
    CHECK(result.usage.completion_tokens == 3);  // no usage block: sum token counts
}

TEST_CASE("http scoring route and capability gating") {
    TestServer server;
    server.svr.Post("/score", [&](const httplib::Request& req, httplib::Response& res) {
        auto body = nlohmann::json::parse(req.body);
        auto n = body["target_tokens"].size();
        nlohmann::json reply = {{"logprobs", std::vector<double>(n, -0.5)}};
        res.set_content(reply.dump(), "application/json");
    });
    server.start();

    model::HttpAdapterConfig config;
    config.endpoint_url = server.url();
    CHECK_FALSE(model::HttpBackend(config).capabilities().scoring);
    CHECK_THROWS_AS(model::HttpBackend(config).score_tokens("p", {" x"}),
                    model::UnsupportedCapabilityError);

    config.scoring_route = "/score";
    model::HttpBackend scoring(config);
    CHECK(scoring.capabilities().scoring);
    auto lp = scoring.score_tokens("p", {" x", " y"});
    CHECK(lp == std::vector<double>{-0.5, -0.5});
}

#include "cotprobe/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace cotprobe::core {

// ======================================================================
// == CheckpointGrid
// ======================================================================

CheckpointGrid::CheckpointGrid(std::vector<double> fractions) : fractions_(std::move(fractions)) {
    if (fractions_.empty()) throw std::invalid_argument("checkpoint grid must be nonempty");
    double prev = 0.0;
    for (double f : fractions_) {
        if (!(f > 0.0 && f < 1.0)) throw std::invalid_argument("checkpoint fraction must lie in (0,1)");
        if (!(f > prev)) throw std::invalid_argument("checkpoint fractions must be strictly increasing");
        prev = f;
    }
}

CheckpointGrid CheckpointGrid::default_grid() {
    return CheckpointGrid({0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90});
}

CheckpointGrid CheckpointGrid::fine_grid() {
    return CheckpointGrid({0.02, 0.04, 0.05, 0.06, 0.08, 0.10, 0.12, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50});
}

// ======================================================================
// == Prefix arithmetic
// ======================================================================

std::size_t prefix_length(std::size_t total_tokens, double fraction) {
    if (total_tokens < 1) throw std::invalid_argument("prefix_length: total_tokens must be >= 1");
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("prefix_length: fraction must lie in (0,1)");
    auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(total_tokens)));
    if (k >= total_tokens) k = total_tokens - 1;  // guards fp rounding at the upper edge
    return k;
}

// ======================================================================
// == Answer normalization
// ======================================================================

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

// One pass of the pipeline; normalize_answer iterates it to a fixpoint.
std::string normalize_once(std::string_view raw) {
    std::string s = trim(raw);

    // Trailing run of '}' and '.' in any interleaving.
    std::size_t e = s.size();
    while (e > 0 && (s[e - 1] == '}' || s[e - 1] == '.')) --e;
    s.resize(e);
    s = trim(s);

    // Leading \boxed{ wrappers (the matching close brace, when trailing, was
    // removed above).
    constexpr std::string_view kBox = "\\boxed{";
    while (s.size() >= kBox.size() && std::string_view(s).substr(0, kBox.size()) == kBox) {
        s.erase(0, kBox.size());
        s = trim(s);
    }

    // Collapse internal whitespace runs to single spaces.
    std::string out;
    out.reserve(s.size());
    bool in_ws = false;
    for (char c : s) {
        if (is_space(c)) {
            in_ws = true;
        } else {
            if (in_ws && !out.empty()) out.push_back(' ');
            in_ws = false;
            out.push_back(c);
        }
    }
    return out;
}

} // namespace

std::string normalize_answer(std::string_view raw) {
    std::string cur(raw);
    // Each effective pass strictly shrinks the string, so this terminates.
    for (;;) {
        std::string next = normalize_once(cur);
        if (next == cur) return cur;
        cur = std::move(next);
    }
}

Answer make_answer(std::string raw) {
    Answer a;
    a.normalized = normalize_answer(raw);
    a.raw = std::move(raw);
    return a;
}

// ======================================================================
// == Grading
// ======================================================================

namespace {

// Parses a decimal or a rational "a/b". Returns false on any trailing junk.
bool parse_numeric(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* begin = s.c_str();
    char* end = nullptr;
    double num = std::strtod(begin, &end);
    if (end == begin) return false;
    if (*end == '/') {
        const char* den_begin = end + 1;
        char* den_end = nullptr;
        double den = std::strtod(den_begin, &den_end);
        if (den_end == den_begin || *den_end != '\0' || den == 0.0) return false;
        out = num / den;
        return true;
    }
    if (*end != '\0') return false;
    if (!std::isfinite(num)) return false;
    out = num;
    return true;
}

constexpr double kNumericTolerance = 1e-9;

bool grade_exact(const Answer& a, const Answer& b) { return a.normalized == b.normalized; }

bool grade_numeric(const Answer& a, const Answer& b) {
    double x = 0.0, y = 0.0;
    if (parse_numeric(a.normalized, x) && parse_numeric(b.normalized, y))
        return std::fabs(x - y) <= kNumericTolerance;
    return grade_exact(a, b);
}

std::mutex g_grader_mutex;
std::unordered_map<std::string, Grader>& grader_registry() {
    static std::unordered_map<std::string, Grader> reg = {
        {"exact", grade_exact},
        {"numeric", grade_numeric},
    };
    return reg;
}

} // namespace

bool grade(const Answer& candidate, const Answer& ground_truth, GradeMode mode) {
    switch (mode) {
        case GradeMode::exact: return grade_exact(candidate, ground_truth);
        case GradeMode::numeric: return grade_numeric(candidate, ground_truth);
    }
    throw std::invalid_argument("grade: unknown mode");
}

Grader grader_for(const std::string& mode_name) {
    std::lock_guard<std::mutex> lock(g_grader_mutex);
    auto& reg = grader_registry();
    auto it = reg.find(mode_name);
    if (it == reg.end()) throw std::invalid_argument("unknown grading mode: " + mode_name);
    return it->second;
}

void register_grader(const std::string& mode_name, Grader g) {
    std::lock_guard<std::mutex> lock(g_grader_mutex);
    grader_registry()[mode_name] = std::move(g);
}

// ======================================================================
// == Majority vote
// ======================================================================

VoteResult majority_vote(const std::vector<Answer>& answers) {
    if (answers.empty()) throw std::invalid_argument("majority_vote: empty answer list");

    VoteResult result;
    for (const auto& a : answers) result.counts[a.normalized] += 1;

    int best = 0;
    for (const auto& [_, c] : result.counts) best = std::max(best, c);

    int n_at_best = 0;
    for (const auto& [_, c] : result.counts)
        if (c == best) ++n_at_best;

    // First appearance in input order among the modal groups.
    for (const auto& a : answers) {
        if (result.counts.at(a.normalized) == best) {
            result.winner = a;
            break;
        }
    }
    result.count = best;
    result.tied = n_at_best > 1;
    return result;
}

// ======================================================================
// == Dataset ingestion
// ======================================================================

std::vector<ProblemRecord> load_dataset_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset: " + path);
    std::vector<ProblemRecord> problems;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad JSONL line: " + e.what());
        }
        ProblemRecord p;
        p.id = j.at("id").get<std::string>();
        p.prompt = j.at("prompt").get<std::string>();
        p.ground_truth = j.at("ground_truth").get<std::string>();
        if (j.contains("difficulty") && !j["difficulty"].is_null()) p.difficulty = j["difficulty"].get<int>();
        if (j.contains("benchmark") && !j["benchmark"].is_null()) p.benchmark = j["benchmark"].get<std::string>();
        problems.push_back(std::move(p));
    }
    validate_dataset(problems);
    return problems;
}

void validate_dataset(const std::vector<ProblemRecord>& problems) {
    std::unordered_set<std::string> seen;
    for (const auto& p : problems) {
        if (p.id.empty()) throw std::invalid_argument("dataset: empty problem id");
        if (!seen.insert(p.id).second) throw std::invalid_argument("dataset: duplicate problem id " + p.id);
        if (p.ground_truth.empty()) throw std::invalid_argument("dataset: empty ground_truth for " + p.id);
        if (p.difficulty != 0 && (p.difficulty < 1 || p.difficulty > 5))
            throw std::invalid_argument("dataset: difficulty out of range for " + p.id);
    }
}

} // namespace cotprobe::core

#include "cotprobe/expcli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "cotprobe/commitment.hpp"
#include "cotprobe/fpfilter.hpp"
#include "cotprobe/probes.hpp"
#include "cotprobe/rng.hpp"
#include "cotprobe/stats.hpp"

namespace cotprobe::expcli {

namespace fs = std::filesystem;
using nlohmann::json;

// ======================================================================
// == Configuration
// ======================================================================

namespace {

std::string trim(std::string_view s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string_view::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return std::string(s.substr(begin, end - begin + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
    throw std::invalid_argument("config key \"" + key + "\" expects " + expected + ", got \"" +
                                value + "\"");
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    if (value.empty() || value[0] == '-') bad_value(key, value, "a non-negative integer");
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) bad_value(key, value, "a non-negative integer");
        return v;
    } catch (const std::invalid_argument&) {
        bad_value(key, value, "a non-negative integer");
    } catch (const std::out_of_range&) {
        bad_value(key, value, "a non-negative integer");
    }
}

std::size_t parse_size(const std::string& key, const std::string& value) {
    return static_cast<std::size_t>(parse_u64(key, value));
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) bad_value(key, value, "a number");
        return v;
    } catch (const std::invalid_argument&) {
        bad_value(key, value, "a number");
    } catch (const std::out_of_range&) {
        bad_value(key, value, "a number");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value, "true or false");
}

void set_config_field(ExperimentConfig& config, const std::string& key, const std::string& value) {
    if (key == "dataset_path") config.dataset_path = value;
    else if (key == "out_dir") config.out_dir = value;
    else if (key == "backend") config.backend = value;
    else if (key == "endpoint_url") config.endpoint_url = value;
    else if (key == "api_token") config.api_token = value;
    else if (key == "model") config.model = value;
    else if (key == "fine_grid") config.fine_grid = parse_bool(key, value);
    else if (key == "n_rollouts") config.n_rollouts = parse_size(key, value);
    else if (key == "n_psc") config.n_psc = parse_size(key, value);
    else if (key == "topk") config.topk = parse_size(key, value);
    else if (key == "efa_max_tokens") config.efa_max_tokens = parse_size(key, value);
    else if (key == "rollout_max_tokens") config.rollout_max_tokens = parse_size(key, value);
    else if (key == "theta") config.theta = parse_double(key, value);
    else if (key == "seed") config.seed = parse_u64(key, value);
    else if (key == "parallelism") config.parallelism = parse_size(key, value);
    else if (key == "n_resplits") config.n_resplits = parse_size(key, value);
    else if (key == "suffix_id") config.suffix_id = value;
    else if (key == "mock_commit") config.mock_commit = parse_double(key, value);
    else if (key == "mock_forceable") config.mock_forceable = parse_double(key, value);
    else if (key == "mock_curve") config.mock_curve = value;
    else if (key == "mock_cold_level") config.mock_cold_level = parse_double(key, value);
    else if (key == "mock_total_tokens") config.mock_total_tokens = parse_size(key, value);
    else throw std::invalid_argument("unknown config key \"" + key + "\"");
}

}  // namespace

core::CheckpointGrid ExperimentConfig::grid() const {
    return fine_grid ? core::CheckpointGrid::fine_grid() : core::CheckpointGrid::default_grid();
}

void ExperimentConfig::validate() const {
    if (backend != "mock" && backend != "http")
        throw std::invalid_argument("backend must be \"mock\" or \"http\", got \"" + backend + "\"");
    if (n_rollouts == 0) throw std::invalid_argument("n_rollouts must be positive");
    if (n_psc == 0) throw std::invalid_argument("n_psc must be positive");
    if (topk == 0) throw std::invalid_argument("topk must be positive");
    if (efa_max_tokens == 0) throw std::invalid_argument("efa_max_tokens must be positive");
    if (rollout_max_tokens == 0) throw std::invalid_argument("rollout_max_tokens must be positive");
    if (!(theta > 0.0) || theta > 1.0) throw std::invalid_argument("theta must lie in (0, 1]");
    if (parallelism == 0) throw std::invalid_argument("parallelism must be positive");
    if (n_resplits == 0) throw std::invalid_argument("n_resplits must be positive");
    if (suffix_id.empty()) throw std::invalid_argument("suffix_id must be nonempty");
    if (mock_curve != "step" && mock_curve != "step_cold" && mock_curve != "logistic" &&
        mock_curve != "constant")
        throw std::invalid_argument("mock_curve must be step, step_cold, logistic, or constant");
    // Planted fractions must sit strictly inside the rollout so checkpoint
    // grids can straddle them.
    if (!(mock_commit > 0.0 && mock_commit < 1.0))
        throw std::invalid_argument("mock_commit must lie in (0, 1)");
    if (!(mock_forceable > 0.0 && mock_forceable < 1.0))
        throw std::invalid_argument("mock_forceable must lie in (0, 1)");
    if (mock_cold_level < 0.0 || mock_cold_level > 1.0)
        throw std::invalid_argument("mock_cold_level must lie in [0, 1]");
    if (mock_total_tokens < 8)
        throw std::invalid_argument("mock_total_tokens must be at least 8");
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    ExperimentConfig config;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto comment = line.find('#');
        if (comment != std::string::npos) line.erase(comment);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected key = value");
        try {
            set_config_field(config, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return config;
}

void apply_env_overrides(ExperimentConfig& config) {
    if (const char* endpoint = std::getenv("COTPROBE_ENDPOINT"); endpoint && *endpoint)
        config.endpoint_url = endpoint;
    if (const char* token = std::getenv("COTPROBE_API_TOKEN"); token && *token)
        config.api_token = token;
}

namespace {

// Everything that shapes the stored records goes into the hash. Left out on
// purpose: api_token (secret, rotates), out_dir (where the run lives, not
// what it is), parallelism (scheduling only; writes are ordered), and
// n_resplits (tunes the calibrate-stage CSVs, never the records).
std::string canonical_config(const ExperimentConfig& c) {
    std::ostringstream out;
    out << "backend=" << c.backend << '\n'
        << "dataset_path=" << c.dataset_path << '\n'
        << "efa_max_tokens=" << c.efa_max_tokens << '\n'
        << "endpoint_url=" << c.endpoint_url << '\n'
        << "fine_grid=" << (c.fine_grid ? 1 : 0) << '\n'
        << "mock_cold_level=" << format_double(c.mock_cold_level) << '\n'
        << "mock_commit=" << format_double(c.mock_commit) << '\n'
        << "mock_curve=" << c.mock_curve << '\n'
        << "mock_forceable=" << format_double(c.mock_forceable) << '\n'
        << "mock_total_tokens=" << c.mock_total_tokens << '\n'
        << "model=" << c.model << '\n'
        << "n_psc=" << c.n_psc << '\n'
        << "n_rollouts=" << c.n_rollouts << '\n'
        << "rollout_max_tokens=" << c.rollout_max_tokens << '\n'
        << "seed=" << c.seed << '\n'
        << "suffix_id=" << c.suffix_id << '\n'
        << "theta=" << format_double(c.theta) << '\n'
        << "topk=" << c.topk << '\n';
    return out.str();
}

}  // namespace

std::string config_hash(const ExperimentConfig& config) {
    const std::uint64_t h = rng::derive(0x636f7470726f6265ULL, canonical_config(config));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ======================================================================
// == Manifest
// ======================================================================

bool RunManifest::problem_done(const std::string& stage, const std::string& problem_id) const {
    const auto it = completed.find(stage);
    return it != completed.end() && it->second.count(problem_id) > 0;
}

bool RunManifest::stage_done(const std::string& stage) const {
    return finished_stages.count(stage) > 0;
}

namespace {

fs::path manifest_path(const std::string& out_dir) { return fs::path(out_dir) / "manifest.json"; }

}  // namespace

RunManifest load_or_init_manifest(const std::string& out_dir, const std::string& hash) {
    if (out_dir.empty()) throw std::invalid_argument("out_dir is required");
    fs::create_directories(out_dir);
    const fs::path path = manifest_path(out_dir);
    if (!fs::exists(path)) {
        RunManifest manifest;
        manifest.config_hash = hash;
        return manifest;
    }
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    json j = json::parse(in);
    RunManifest manifest;
    manifest.config_hash = j.at("config_hash").get<std::string>();
    manifest.tool_version = j.value("tool_version", std::string(kToolVersion));
    for (const auto& stage : j.value("finished_stages", json::array()))
        manifest.finished_stages.insert(stage.get<std::string>());
    if (j.contains("completed"))
        for (const auto& [stage, ids] : j["completed"].items())
            for (const auto& id : ids) manifest.completed[stage].insert(id.get<std::string>());
    if (j.contains("stage_params"))
        for (const auto& [stage, params] : j["stage_params"].items())
            manifest.stage_params[stage] = params.get<std::string>();
    if (manifest.config_hash != hash)
        throw std::runtime_error("output directory " + out_dir + " holds a run with config hash " +
                                 manifest.config_hash + " but the current config hashes to " +
                                 hash +
                                 "; resume with the original config or use a fresh directory");
    return manifest;
}

void save_manifest(const std::string& out_dir, const RunManifest& manifest) {
    json j;
    j["config_hash"] = manifest.config_hash;
    j["tool_version"] = manifest.tool_version;
    json finished = json::array();
    for (const auto& stage : manifest.finished_stages) finished.push_back(stage);
    j["finished_stages"] = finished;
    json completed = json::object();
    for (const auto& [stage, ids] : manifest.completed) {
        json arr = json::array();
        for (const auto& id : ids) arr.push_back(id);
        completed[stage] = arr;
    }
    j["completed"] = completed;
    json params = json::object();
    for (const auto& [stage, value] : manifest.stage_params) params[stage] = value;
    j["stage_params"] = params;

    const fs::path path = manifest_path(out_dir);
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << j.dump(2) << '\n';
        out.flush();
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

// ======================================================================
// == Record storage
// ======================================================================

namespace {

fs::path records_path(const std::string& out_dir, const std::string& stage) {
    return fs::path(out_dir) / stage / "records.jsonl";
}

// A crash can cut a line short, leaving no trailing newline; appending after
// it would splice two lines together. The partial bytes carry no completion
// evidence (their problem never finished), so they are simply cut away.
void repair_torn_tail(const fs::path& path) {
    std::error_code ec;
    const std::uintmax_t size = fs::file_size(path, ec);
    if (ec || size == 0) return;
    std::uintmax_t keep = 0;
    bool found = false;
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> buf(4096);
        std::uintmax_t pos = size;
        while (pos > 0 && !found) {
            const std::size_t n =
                static_cast<std::size_t>(std::min<std::uintmax_t>(buf.size(), pos));
            pos -= n;
            in.seekg(static_cast<std::streamoff>(pos));
            in.read(buf.data(), static_cast<std::streamsize>(n));
            for (std::size_t i = n; i-- > 0;) {
                if (buf[i] == '\n') {
                    keep = pos + i + 1;
                    found = true;
                    break;
                }
            }
        }
    }
    if (keep != size) fs::resize_file(path, keep);
}

std::vector<json> read_shard_lines(const std::string& out_dir, const std::string& stage) {
    std::vector<json> lines;
    std::ifstream in(records_path(out_dir, stage), std::ios::binary);
    if (!in) return lines;
    std::vector<std::string> raw;
    std::string line;
    while (std::getline(in, line)) raw.push_back(line);
    std::set<std::string> seen;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        json j = json::parse(raw[i], nullptr, /*allow_exceptions=*/false);
        const bool intact = !j.is_discarded() && j.contains("problem_id") &&
                            j["problem_id"].is_string() && j.contains("records") &&
                            j["records"].is_array();
        if (!intact) {
            if (i + 1 == raw.size()) break;  // torn tail from a crash: treated as unwritten
            throw std::runtime_error(stage + " records line " + std::to_string(i + 1) +
                                     " is corrupt");
        }
        if (!seen.insert(j["problem_id"].get<std::string>()).second) continue;
        lines.push_back(std::move(j));
    }
    return lines;
}

}  // namespace

void append_problem_records(const std::string& out_dir, const std::string& stage,
                            const std::string& problem_id, const std::vector<json>& records) {
    fs::create_directories(fs::path(out_dir) / stage);
    repair_torn_tail(records_path(out_dir, stage));
    std::ofstream out(records_path(out_dir, stage), std::ios::binary | std::ios::app);
    if (!out) throw std::runtime_error("cannot open " + records_path(out_dir, stage).string());
    json line = json::object();
    line["problem_id"] = problem_id;
    line["records"] = records;
    out << line.dump() << '\n';
    out.flush();
    if (!out) throw std::runtime_error("failed to append records for " + problem_id);
}

std::vector<json> load_records(const std::string& out_dir, const std::string& stage) {
    std::vector<json> records;
    for (auto& line : read_shard_lines(out_dir, stage)) {
        for (auto& rec : line["records"]) {
            rec["problem_id"] = line["problem_id"];
            records.push_back(rec);
        }
    }
    return records;
}

std::set<std::string> completed_ids(const std::string& out_dir, const std::string& stage) {
    std::set<std::string> ids;
    for (const auto& line : read_shard_lines(out_dir, stage))
        ids.insert(line["problem_id"].get<std::string>());
    return ids;
}

// ======================================================================
// == CSV output
// ======================================================================

std::string format_double(double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", value);
    return buf;
}

namespace {

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (const char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

std::string bool_cell(bool value) { return value ? "1" : "0"; }

}  // namespace

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    for (const auto& row : rows)
        if (row.size() != header.size())
            throw std::logic_error("csv row width mismatch for " + path);
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    auto write_row = [&out](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i > 0) out << ',';
            out << csv_escape(row[i]);
        }
        out << '\n';
    };
    write_row(header);
    for (const auto& row : rows) write_row(row);
    out.flush();
    if (!out) throw std::runtime_error("failed to write " + path);
}

// ======================================================================
// == Stage engine
// ======================================================================

namespace {

// COTPROBE_CRASH_AFTER=<n> hard-exits the process right after the n-th
// problem append of this run, before the matching manifest update — the
// exact window the storage layer promises resume can survive.
void crash_tick() {
    static long remaining = [] {
        const char* raw = std::getenv("COTPROBE_CRASH_AFTER");
        return raw != nullptr ? std::atol(raw) : -1L;
    }();
    if (remaining < 0) return;
    if (--remaining <= 0) std::_Exit(86);
}

std::vector<core::ProblemRecord> load_problems(const ExperimentConfig& config) {
    config.validate();
    if (config.dataset_path.empty()) throw std::invalid_argument("dataset_path is required");
    if (config.out_dir.empty()) throw std::invalid_argument("out_dir is required");
    auto problems = core::load_dataset_jsonl(config.dataset_path);
    core::validate_dataset(problems);
    if (problems.empty()) throw std::runtime_error("dataset is empty: " + config.dataset_path);
    return problems;
}

void require_finished(const RunManifest& manifest, const std::string& stage,
                      const std::string& command) {
    if (!manifest.stage_done(stage))
        throw std::runtime_error("the " + stage +
                                 " stage has not finished in this output directory: run the " +
                                 command + " command first");
}

void mark_finished(const ExperimentConfig& config, RunManifest& manifest,
                   const std::string& stage) {
    if (manifest.stage_done(stage)) return;
    manifest.finished_stages.insert(stage);
    save_manifest(config.out_dir, manifest);
}

struct StageIo {
    RunManifest manifest;
    std::set<std::string> done;  // manifest entries plus durable shard lines
};

StageIo open_stage(const ExperimentConfig& config, const std::string& stage) {
    StageIo io{load_or_init_manifest(config.out_dir, config_hash(config)),
               completed_ids(config.out_dir, stage)};
    auto& marked = io.manifest.completed[stage];
    io.done.insert(marked.begin(), marked.end());
    if (marked.size() != io.done.size()) {  // heal a crash between append and manifest save
        marked = io.done;
        save_manifest(config.out_dir, io.manifest);
    }
    return io;
}

StageResult run_problem_stage(
    const ExperimentConfig& config, const std::string& stage,
    const std::vector<core::ProblemRecord>& problems,
    const std::function<std::vector<json>(const core::ProblemRecord&)>& worker) {
    StageIo io = open_stage(config, stage);
    StageResult result;
    std::vector<const core::ProblemRecord*> pending;
    for (const auto& problem : problems) {
        if (io.done.count(problem.id)) ++result.skipped;
        else pending.push_back(&problem);
    }
    const std::size_t chunk = std::max<std::size_t>(1, config.parallelism);
    for (std::size_t base = 0; base < pending.size(); base += chunk) {
        const std::size_t n = std::min(chunk, pending.size() - base);
        std::vector<std::vector<json>> results(n);
        probes::run_parallel(config.parallelism, n,
                             [&](std::size_t i) { results[i] = worker(*pending[base + i]); });
        // Writes stay in dataset order no matter how the chunk was scheduled.
        for (std::size_t i = 0; i < n; ++i) {
            const std::string& id = pending[base + i]->id;
            append_problem_records(config.out_dir, stage, id, results[i]);
            crash_tick();
            io.manifest.completed[stage].insert(id);
            save_manifest(config.out_dir, io.manifest);
            ++result.executed;
        }
    }
    if (io.manifest.completed[stage].size() == problems.size() && !io.manifest.stage_done(stage)) {
        io.manifest.finished_stages.insert(stage);
        save_manifest(config.out_dir, io.manifest);
    }
    return result;
}

// ======================================================================
// == Backend wiring
// ======================================================================

model::RecoverabilityCurve curve_from(const ExperimentConfig& config) {
    model::RecoverabilityCurve curve;
    using Kind = model::RecoverabilityCurve::Kind;
    if (config.mock_curve == "step") curve.kind = Kind::step;
    else if (config.mock_curve == "step_cold") curve.kind = Kind::step_cold;
    else if (config.mock_curve == "logistic") curve.kind = Kind::logistic;
    else if (config.mock_curve == "constant") curve.kind = Kind::constant;
    else throw std::invalid_argument("unknown mock_curve: " + config.mock_curve);
    curve.cold_level = config.mock_cold_level;
    return curve;
}

struct MockOverride {
    std::optional<double> commit;
    std::optional<double> forceable;
};

// Per-problem planted fractions ride on the dataset lines themselves.
std::map<std::string, MockOverride> read_mock_overrides(const std::string& path) {
    std::map<std::string, MockOverride> overrides;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset: " + path);
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const json j = json::parse(line);
        MockOverride o;
        if (j.contains("mock_commit")) o.commit = j["mock_commit"].get<double>();
        if (j.contains("mock_forceable")) o.forceable = j["mock_forceable"].get<double>();
        if (o.commit || o.forceable) overrides[j.at("id").get<std::string>()] = o;
    }
    return overrides;
}

std::shared_ptr<model::Backend> make_backend(const ExperimentConfig& config,
                                             const std::vector<core::ProblemRecord>& problems) {
    if (config.backend == "http") {
        if (config.endpoint_url.empty())
            throw std::invalid_argument("endpoint_url is required for the http backend");
        model::HttpAdapterConfig http;
        http.endpoint_url = config.endpoint_url;
        http.auth_token = config.api_token;
        http.model = config.model;
        return std::make_shared<model::HttpBackend>(http);
    }
    const auto overrides = read_mock_overrides(config.dataset_path);
    auto mock = std::make_shared<model::MockBackend>();
    for (const auto& problem : problems) {
        model::MockModelSpec spec;
        spec.answer = core::make_answer(problem.ground_truth);
        spec.distractors = {core::make_answer(problem.ground_truth + "9"),
                            core::make_answer("-" + problem.ground_truth),
                            core::make_answer(problem.ground_truth + "1")};
        spec.commit_fraction = config.mock_commit;
        spec.forceable_fraction = config.mock_forceable;
        if (const auto it = overrides.find(problem.id); it != overrides.end()) {
            if (it->second.commit) spec.commit_fraction = *it->second.commit;
            if (it->second.forceable) spec.forceable_fraction = *it->second.forceable;
        }
        spec.curve = curve_from(config);
        spec.seed = config.seed;
        spec.total_tokens = config.mock_total_tokens;
        mock->register_problem(problem, spec);
    }
    return mock;
}

// ======================================================================
// == Stored-record views
// ======================================================================

struct RolloutInfo {
    std::vector<std::string> tokens;  // first rollout
    std::string text;
    core::Answer answer;
    bool first_correct = false;
    std::size_t n_rollouts = 0;
    std::size_t n_correct = 0;
};

std::map<std::string, RolloutInfo> load_rollout_info(const ExperimentConfig& config) {
    std::map<std::string, RolloutInfo> info;
    for (const auto& rec : load_records(config.out_dir, "rollout")) {
        auto& entry = info[rec["problem_id"].get<std::string>()];
        ++entry.n_rollouts;
        const bool correct = rec["correct"].get<bool>();
        if (correct) ++entry.n_correct;
        if (rec["index"].get<int>() == 0) {
            entry.tokens = rec["tokens"].get<std::vector<std::string>>();
            entry.text = rec["text"].get<std::string>();
            entry.answer = core::make_answer(rec["answer_raw"].get<std::string>());
            entry.first_correct = correct;
        }
    }
    return info;
}

const RolloutInfo& rollout_for(const std::map<std::string, RolloutInfo>& info,
                               const std::string& problem_id) {
    const auto it = info.find(problem_id);
    if (it == info.end())
        throw std::runtime_error("no rollout records for problem " + problem_id +
                                 ": run the rollout command first");
    return it->second;
}

// Grid fractions round-trip exactly through JSON, so doubles key safely.
using PscIndex = std::map<std::string, std::map<double, json>>;
using EfaIndex = std::map<std::string, std::map<std::string, std::map<double, json>>>;

PscIndex load_psc_index(const ExperimentConfig& config) {
    PscIndex index;
    for (const auto& rec : load_records(config.out_dir, "probe"))
        if (rec["kind"] == "psc")
            index[rec["problem_id"].get<std::string>()][rec["fraction"].get<double>()] = rec;
    return index;
}

EfaIndex load_efa_index(const ExperimentConfig& config) {
    EfaIndex index;
    for (const auto& rec : load_records(config.out_dir, "probe"))
        if (rec["kind"] == "efa")
            index[rec["problem_id"].get<std::string>()][rec["suffix"].get<std::string>()]
                 [rec["fraction"].get<double>()] = rec;
    return index;
}

const json& psc_record(const PscIndex& index, const std::string& problem_id, double fraction) {
    const auto pit = index.find(problem_id);
    if (pit != index.end()) {
        const auto fit = pit->second.find(fraction);
        if (fit != pit->second.end()) return fit->second;
    }
    throw std::runtime_error("no stored agreement probe for problem " + problem_id +
                             " at fraction " + format_double(fraction) +
                             ": run the probe command first");
}

std::vector<commitment::PscTrajectory> build_trajectories(
    const ExperimentConfig& config, const std::vector<core::ProblemRecord>& problems,
    const std::map<std::string, RolloutInfo>& rollouts, const PscIndex& psc) {
    const core::CheckpointGrid grid = config.grid();
    std::vector<commitment::PscTrajectory> trajectories;
    trajectories.reserve(problems.size());
    for (const auto& problem : problems) {
        commitment::PscTrajectory traj;
        traj.problem_id = problem.id;
        traj.grid = grid;
        for (const double f : grid.fractions())
            traj.values.push_back(psc_record(psc, problem.id, f)["psc_value"].get<double>());
        const RolloutInfo& info = rollout_for(rollouts, problem.id);
        traj.solvable = info.n_correct > 0;
        traj.rollout_tokens = info.tokens.size();
        traj.validate();
        trajectories.push_back(std::move(traj));
    }
    return trajectories;
}

std::vector<baee::ProblemProbeData> build_probe_data(
    const ExperimentConfig& config, const std::vector<core::ProblemRecord>& problems,
    const std::map<std::string, RolloutInfo>& rollouts, const PscIndex& psc,
    const EfaIndex& efa) {
    const core::CheckpointGrid grid = config.grid();
    std::vector<baee::ProblemProbeData> data;
    data.reserve(problems.size());
    for (const auto& problem : problems) {
        baee::ProblemProbeData d;
        d.problem_id = problem.id;
        d.grid = grid;
        for (const double f : grid.fractions()) {
            const json& rec = psc_record(psc, problem.id, f);
            baee::CheckpointProbe cp;
            cp.fraction = f;
            cp.psc_value = rec["psc_value"].get<double>();
            cp.self_agreement = rec["self_agreement"].get<double>();
            cp.majority = core::make_answer(rec["majority_raw"].get<std::string>());
            cp.majority_correct = rec["majority_correct"].get<bool>();
            cp.majority_tied = rec["majority_tied"].get<bool>();
            cp.probe_tokens = rec["probe_completion_tokens"].get<std::size_t>();
            if (const auto pit = efa.find(problem.id); pit != efa.end()) {
                if (const auto sit = pit->second.find(config.suffix_id);
                    sit != pit->second.end()) {
                    if (const auto fit = sit->second.find(f); fit != sit->second.end()) {
                        const json& er = fit->second;
                        cp.efa_present = er["present"].get<bool>();
                        cp.efa_answer = core::make_answer(er["answer_raw"].get<std::string>());
                        cp.efa_correct = er["correct"].get<bool>();
                    }
                }
            }
            d.checkpoints.push_back(std::move(cp));
        }
        const RolloutInfo& info = rollout_for(rollouts, problem.id);
        d.full_answer = info.answer;
        d.full_correct = info.first_correct;
        d.rollout_tokens = info.tokens.size();
        d.n_rollouts = info.n_rollouts;
        d.n_rollouts_correct = info.n_correct;
        d.validate();
        data.push_back(std::move(d));
    }
    return data;
}

// ======================================================================
// == Strategy record codec (baee stage and cost tables)
// ======================================================================

json outcome_record(const baee::BaeeOutcome& o) {
    json rec;
    rec["kind"] = "baee";
    rec["strategy"] = o.strategy;
    rec["correct"] = o.correct;
    rec["triggered"] = o.triggered;
    if (o.trigger_fraction) rec["trigger_fraction"] = *o.trigger_fraction;
    else rec["trigger_fraction"] = nullptr;
    rec["answer_raw"] = o.answer.raw;
    rec["answer_normalized"] = o.answer.normalized;
    rec["api_calls"] = o.api_calls;
    rec["serial_tokens_used"] = o.serial_tokens_used;
    rec["serial_tokens_full"] = o.serial_tokens_full;
    rec["probe_tokens"] = o.probe_tokens;
    rec["probe_prompt_tokens"] = o.probe_prompt_tokens;
    rec["skipped_checkpoints"] = o.skipped_checkpoints;
    return rec;
}

json sc_record(const baee::ScOutcome& o) {
    json rec;
    rec["kind"] = "baee";
    rec["strategy"] = o.variant;
    rec["correct"] = o.correct;
    rec["triggered"] = false;
    rec["trigger_fraction"] = nullptr;
    rec["answer_raw"] = o.answer.raw;
    rec["answer_normalized"] = o.answer.normalized;
    rec["no_answer"] = o.no_answer;
    rec["api_calls"] = o.api_calls;
    rec["total_tokens"] = o.total_tokens;
    return rec;
}

baee::BaeeOutcome outcome_from_record(const json& rec) {
    baee::BaeeOutcome o;
    o.problem_id = rec["problem_id"].get<std::string>();
    o.strategy = rec["strategy"].get<std::string>();
    o.correct = rec["correct"].get<bool>();
    o.triggered = rec.value("triggered", false);
    if (rec.contains("trigger_fraction") && !rec["trigger_fraction"].is_null())
        o.trigger_fraction = rec["trigger_fraction"].get<double>();
    o.answer = core::make_answer(rec.value("answer_raw", std::string()));
    o.api_calls = rec["api_calls"].get<std::size_t>();
    o.serial_tokens_used = rec.value("serial_tokens_used", std::size_t{0});
    o.serial_tokens_full = rec.value("serial_tokens_full", std::size_t{0});
    o.probe_tokens = rec.value("probe_tokens", std::size_t{0});
    o.probe_prompt_tokens = rec.value("probe_prompt_tokens", std::size_t{0});
    return o;
}

const std::vector<std::string> kStrategyCsvHeader = {
    "strategy",    "n",           "accuracy",
    "mean_serial_reduction",      "token_ratio", "token_ratio_with_prompts",
    "mean_api_calls",             "median_api_calls"};

std::vector<std::vector<std::string>> strategy_rows(
    const std::map<std::string, std::vector<baee::BaeeOutcome>>& outcomes,
    std::map<std::string, baee::CostReport>* costs_out,
    std::map<std::string, double>* accuracy_out) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& [strategy, outs] : outcomes) {
        const baee::CostReport cost = baee::cost_report(outs);
        double correct = 0.0;
        for (const auto& o : outs) correct += o.correct ? 1.0 : 0.0;
        const double accuracy = outs.empty() ? 0.0 : correct / static_cast<double>(outs.size());
        if (costs_out) (*costs_out)[strategy] = cost;
        if (accuracy_out) (*accuracy_out)[strategy] = accuracy;
        rows.push_back({strategy, std::to_string(cost.n), format_double(accuracy),
                        format_double(cost.mean_serial_reduction), format_double(cost.token_ratio),
                        format_double(cost.token_ratio_with_prompts),
                        format_double(cost.mean_api_calls),
                        format_double(cost.median_api_calls)});
    }
    return rows;
}

}  // namespace

// ======================================================================
// == rollout
// ======================================================================

StageResult cmd_rollout(const ExperimentConfig& config) {
    const auto problems = load_problems(config);
    model::ModelClient client(make_backend(config, problems));
    const core::Grader grader = core::grader_for("exact");
    return run_problem_stage(
        config, "rollout", problems, [&](const core::ProblemRecord& problem) {
            model::GenerationRequest request;
            request.prompt = problem.prompt;
            request.temperature = 1.0;
            request.max_tokens = config.rollout_max_tokens;
            request.n_samples = config.n_rollouts;
            const model::GenerationResult result = client.sample(request);
            const core::Answer truth = core::make_answer(problem.ground_truth);
            std::vector<json> records;
            for (std::size_t i = 0; i < result.texts.size(); ++i) {
                const core::Answer answer = probes::extract_free_answer(result.texts[i]);
                json rec;
                rec["kind"] = "rollout";
                rec["index"] = static_cast<int>(i);
                rec["temperature"] = 1.0;
                rec["text"] = result.texts[i];
                rec["tokens"] = result.tokens_per_completion[i];
                rec["answer_raw"] = answer.raw;
                rec["answer_normalized"] = answer.normalized;
                rec["correct"] = grader(answer, truth);
                records.push_back(std::move(rec));
            }
            return records;
        });
}

// ======================================================================
// == probe
// ======================================================================

namespace {

std::string selection_string(const ProbeSelection& selection) {
    std::string out;
    auto add = [&out](const char* name) {
        if (!out.empty()) out += '+';
        out += name;
    };
    if (selection.psc) add("psc");
    if (selection.efa) add("efa");
    if (selection.atlt) add("atlt");
    if (selection.ed) add("ed");
    if (selection.suffix_ablation) add("ablation");
    if (out.empty()) throw std::invalid_argument("probe selection is empty");
    return out;
}

}  // namespace

StageResult cmd_probe(const ExperimentConfig& config, const ProbeSelection& selection) {
    const auto problems = load_problems(config);
    const std::string params = selection_string(selection);
    {
        RunManifest manifest = load_or_init_manifest(config.out_dir, config_hash(config));
        require_finished(manifest, "rollout", "rollout");
        // A resumed probe stage must keep the probe set it started with;
        // mixing selections would leave problems with different record sets.
        const auto it = manifest.stage_params.find("probe");
        if (it != manifest.stage_params.end() && it->second != params)
            throw std::runtime_error("the probe stage was started with probes \"" + it->second +
                                     "\" but this invocation selects \"" + params +
                                     "\"; finish with the original selection or use a fresh "
                                     "output directory");
        if (it == manifest.stage_params.end()) {
            manifest.stage_params["probe"] = params;
            save_manifest(config.out_dir, manifest);
        }
    }
    const auto rollouts = load_rollout_info(config);
    model::ModelClient client(make_backend(config, problems));
    const core::Grader grader = core::grader_for("exact");
    const core::CheckpointGrid grid = config.grid();
    const bool can_ed = client.capabilities().top_logprobs;

    return run_problem_stage(config, "probe", problems, [&](const core::ProblemRecord& problem) {
        const RolloutInfo& info = rollout_for(rollouts, problem.id);
        const core::Answer truth = core::make_answer(problem.ground_truth);
        std::vector<json> records;
        for (const double f : grid.fractions()) {
            const probes::PrefixSlice prefix = probes::make_prefix(info.tokens, f);
            if (selection.psc) {
                const probes::PscResult res =
                    probes::run_psc(client, problem, prefix, config.n_psc, grader);
                json rec;
                rec["kind"] = "psc";
                rec["fraction"] = f;
                rec["psc_value"] = res.psc_value;
                rec["self_agreement"] = res.self_agreement;
                rec["correct_count"] = res.correct_count;
                rec["majority_raw"] = res.majority.raw;
                rec["majority_normalized"] = res.majority.normalized;
                rec["majority_correct"] = grader(res.majority, truth);
                rec["majority_tied"] = res.majority_tied;
                rec["probe_completion_tokens"] = res.probe_completion_tokens;
                rec["probe_prompt_tokens"] = res.probe_prompt_tokens;
                records.push_back(std::move(rec));
            }
            std::vector<std::string> suffixes;
            if (selection.suffix_ablation) suffixes = probes::suffix_template_ids();
            else if (selection.efa) suffixes = {config.suffix_id};
            for (const auto& suffix : suffixes) {
                const probes::EfaResult res =
                    probes::run_efa(client, problem, prefix, probes::suffix_template(suffix),
                                    grader, config.efa_max_tokens);
                json rec;
                rec["kind"] = "efa";
                rec["fraction"] = f;
                rec["suffix"] = suffix;
                rec["raw_output"] = res.raw_output;
                rec["answer_raw"] = res.answer.raw;
                rec["answer_normalized"] = res.answer.normalized;
                rec["correct"] = res.correct;
                rec["present"] = !res.answer.normalized.empty();
                records.push_back(std::move(rec));
            }
            if (selection.atlt) {
                const probes::AtltResult res =
                    probes::run_atlt(client, problem, prefix, {" " + problem.ground_truth});
                json rec;
                rec["kind"] = "atlt";
                rec["fraction"] = f;
                rec["supported"] = res.supported;
                rec["mean_logprob"] = res.mean_logprob;
                records.push_back(std::move(rec));
            }
            if (selection.ed) {
                json rec;
                rec["kind"] = "ed";
                rec["fraction"] = f;
                if (!can_ed) {
                    rec["skipped"] = true;  // backend reports no top-logprob support
                } else {
                    const probes::EntropySeries series =
                        probes::run_ed(client, problem, prefix, config.topk);
                    rec["skipped"] = false;
                    rec["n_positions"] = series.per_token_entropy.size();
                    rec["mean_entropy"] = series.per_token_entropy.empty()
                                              ? 0.0
                                              : stats::mean(series.per_token_entropy);
                }
                records.push_back(std::move(rec));
            }
        }
        return records;
    });
}

// ======================================================================
// == perturb
// ======================================================================

std::vector<std::string> perturb_tokens(const std::string& kind,
                                        const std::vector<std::string>& tokens,
                                        std::uint64_t seed,
                                        const std::vector<std::string>& vocabulary) {
    std::vector<std::string> out = tokens;
    const std::size_t k = tokens.size();
    if (kind == "truncate_20") {
        out.resize(k - k / 5);
    } else if (kind == "shuffle_30") {
        const std::size_t window = k * 3 / 10;
        if (window >= 2) {
            std::vector<std::string> tail(out.end() - static_cast<std::ptrdiff_t>(window),
                                          out.end());
            rng::Rng rng(seed);
            rng.shuffle(tail);
            std::copy(tail.begin(), tail.end(),
                      out.end() - static_cast<std::ptrdiff_t>(window));
        }
    } else if (kind == "replace_30") {
        const std::size_t window = k * 3 / 10;
        if (window > 0) {
            if (vocabulary.empty())
                throw std::invalid_argument("replace_30 needs a nonempty vocabulary");
            rng::Rng rng(seed);
            for (std::size_t i = k - window; i < k; ++i)
                out[i] = vocabulary[static_cast<std::size_t>(rng.below(vocabulary.size()))];
        }
    } else {
        throw std::invalid_argument("unknown perturbation kind \"" + kind +
                                    "\" (expected truncate_20, shuffle_30, or replace_30)");
    }
    return out;
}

PerturbReport cmd_perturb(const ExperimentConfig& config, const std::string& kind,
                          double fraction) {
    if (kind != "truncate_20" && kind != "shuffle_30" && kind != "replace_30")
        throw std::invalid_argument("unknown perturbation kind \"" + kind +
                                    "\" (expected truncate_20, shuffle_30, or replace_30)");
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("perturbation fraction must lie in (0, 1)");
    const auto problems = load_problems(config);
    require_finished(load_or_init_manifest(config.out_dir, config_hash(config)), "rollout",
                     "rollout");
    const auto rollouts = load_rollout_info(config);

    // Run-local vocabulary for replacements: every rollout token, in stored order.
    std::vector<std::string> vocabulary;
    for (const auto& rec : load_records(config.out_dir, "rollout"))
        for (const auto& token : rec["tokens"]) vocabulary.push_back(token.get<std::string>());

    char pct[8];
    std::snprintf(pct, sizeof pct, "%02d", static_cast<int>(std::lround(fraction * 100.0)));
    const std::string stage = "perturb-" + kind + "-f" + pct;

    model::ModelClient client(make_backend(config, problems));
    const core::Grader grader = core::grader_for("exact");

    run_problem_stage(config, stage, problems, [&](const core::ProblemRecord& problem) {
        const RolloutInfo& info = rollout_for(rollouts, problem.id);
        json rec;
        rec["kind"] = kind;
        rec["fraction"] = fraction;
        const probes::PrefixSlice prefix = probes::make_prefix(info.tokens, fraction);
        if (prefix.k < 2) {
            rec["skipped"] = true;
            return std::vector<json>{rec};
        }
        const probes::PscResult intact =
            probes::run_psc(client, problem, prefix, config.n_psc, grader);
        const std::vector<std::string> kept(info.tokens.begin(),
                                            info.tokens.begin() +
                                                static_cast<std::ptrdiff_t>(prefix.k));
        const std::vector<std::string> mutated = perturb_tokens(
            kind, kept, rng::derive(config.seed, "perturb:" + kind + ":" + problem.id),
            vocabulary);
        probes::PrefixSlice twisted;
        for (const auto& token : mutated) twisted.text += token;
        twisted.k = mutated.size();  // truncation shrinks the prefix it reports
        twisted.total = prefix.total;
        twisted.fraction = fraction;
        const probes::PscResult perturbed =
            probes::run_psc(client, problem, twisted, config.n_psc, grader);
        rec["skipped"] = false;
        rec["intact_psc"] = intact.psc_value;
        rec["perturbed_psc"] = perturbed.psc_value;
        rec["drop_pp"] = (intact.psc_value - perturbed.psc_value) * 100.0;
        return std::vector<json>{rec};
    });

    PerturbReport report;
    report.kind = kind;
    report.fraction = fraction;
    std::vector<double> intact_values;
    std::vector<double> perturbed_values;
    for (const auto& rec : load_records(config.out_dir, stage)) {
        if (rec.value("skipped", false)) {
            ++report.skipped_short;
            continue;
        }
        intact_values.push_back(rec["intact_psc"].get<double>());
        perturbed_values.push_back(rec["perturbed_psc"].get<double>());
        if (rec["drop_pp"].get<double>() > 10.0) ++report.drops_over_10pp;
    }
    report.n_problems = intact_values.size();
    report.mean_intact_psc = intact_values.empty() ? 0.0 : stats::mean(intact_values);
    report.mean_perturbed_psc = perturbed_values.empty() ? 0.0 : stats::mean(perturbed_values);

    write_csv((fs::path(config.out_dir) / stage / "report.csv").string(),
              {"kind", "fraction", "mean_intact_psc", "mean_perturbed_psc", "drops_over_10pp",
               "n_problems", "skipped_short"},
              {{kind, format_double(fraction), format_double(report.mean_intact_psc),
                format_double(report.mean_perturbed_psc), std::to_string(report.drops_over_10pp),
                std::to_string(report.n_problems), std::to_string(report.skipped_short)}});
    return report;
}

// ======================================================================
// == baee
// ======================================================================

BaeeStageReport cmd_baee(const ExperimentConfig& config) {
    const auto problems = load_problems(config);
    require_finished(load_or_init_manifest(config.out_dir, config_hash(config)), "rollout",
                     "rollout");
    const auto rollouts = load_rollout_info(config);
    model::ModelClient client(make_backend(config, problems));
    const core::Grader grader = core::grader_for("exact");

    baee::BaeePolicy policy;
    policy.grid = config.grid();
    policy.theta = config.theta;
    policy.n_samples = config.n_psc;
    // Benchmark runs know ground truth, so exits are correctness-gated the
    // same way the offline tables are.
    policy.trigger = baee::TriggerMode::correctness;
    policy.validate();

    run_problem_stage(config, "baee", problems, [&](const core::ProblemRecord& problem) {
        const RolloutInfo& info = rollout_for(rollouts, problem.id);
        core::Rollout rollout;
        rollout.problem_id = problem.id;
        rollout.tokens = info.tokens;
        rollout.text = info.text;
        rollout.correct = info.first_correct;
        rollout.index = 0;
        const baee::BaeeOutcome adaptive =
            baee::run_baee_adaptive(client, problem, rollout, policy, grader);
        const baee::BaeeOutcome naive =
            baee::run_naive_efa(client, problem, rollout, config.grid(),
                                probes::suffix_template(config.suffix_id), grader);
        const baee::ScOutcome sc =
            baee::run_sc_baseline(client, problem, baee::ScVariant::sc8_full, 0, grader,
                                  config.n_psc, config.rollout_max_tokens);
        return std::vector<json>{outcome_record(adaptive), outcome_record(naive), sc_record(sc)};
    });

    std::map<std::string, std::vector<baee::BaeeOutcome>> outcomes;
    for (const auto& rec : load_records(config.out_dir, "baee"))
        outcomes[rec["strategy"].get<std::string>()].push_back(outcome_from_record(rec));

    BaeeStageReport report;
    const auto rows = strategy_rows(outcomes, &report.costs, &report.accuracy);
    write_csv((fs::path(config.out_dir) / "baee" / "strategies.csv").string(), kStrategyCsvHeader,
              rows);
    return report;
}

// ======================================================================
// == calibrate
// ======================================================================

calibration::CalibrationReport cmd_calibrate(const ExperimentConfig& config) {
    const auto problems = load_problems(config);
    RunManifest manifest = load_or_init_manifest(config.out_dir, config_hash(config));
    require_finished(manifest, "rollout", "rollout");
    require_finished(manifest, "probe", "probe");
    const auto rollouts = load_rollout_info(config);
    const auto data = build_probe_data(config, problems, rollouts, load_psc_index(config),
                                       load_efa_index(config));

    calibration::CalibrationConfig ccfg;
    ccfg.seed = config.seed;
    ccfg.n_resplits = config.n_resplits;
    ccfg.n_samples = config.n_psc;
    const calibration::CalibrationReport report = calibration::calibrate(data, ccfg);

    const fs::path dir = fs::path(config.out_dir) / "calibrate";
    std::vector<std::vector<std::string>> trace;
    for (const auto& row : report.constraint_trace)
        trace.push_back({format_double(row.theta), format_double(row.baee_accuracy),
                         format_double(row.full_accuracy), format_double(row.mean_reduction),
                         format_double(row.proxy_fp_rate), std::to_string(row.fp_count),
                         std::to_string(row.wrong_problem_count), bool_cell(row.accuracy_ok),
                         bool_cell(row.fp_ok), bool_cell(row.feasible)});
    write_csv((dir / "selection.csv").string(),
              {"theta", "baee_accuracy", "full_accuracy", "mean_reduction", "proxy_fp_rate",
               "fp_count", "wrong_problem_count", "accuracy_ok", "fp_ok", "feasible"},
              trace);
    write_csv((dir / "report.csv").string(),
              {"feasible", "theta_star", "calib_accuracy", "test_accuracy", "test_reduction",
               "proxy_fp_rate", "fp_vacuous"},
              {{bool_cell(report.feasible), format_double(report.theta_star),
                format_double(report.calib_accuracy), format_double(report.test_accuracy),
                format_double(report.test_reduction), format_double(report.proxy_fp_rate),
                bool_cell(report.fp_vacuous)}});

    if (config.n_resplits >= 2) {
        const calibration::StabilityReport stability = calibration::stability_bootstrap(data, ccfg);
        std::vector<std::vector<std::string>> counts;
        for (const auto& [theta, count] : stability.theta_counts)
            counts.push_back({format_double(theta), std::to_string(count)});
        write_csv((dir / "stability_counts.csv").string(), {"theta", "count"}, counts);
        write_csv((dir / "stability_summary.csv").string(),
                  {"n_resplits", "modal_theta", "modal_count", "infeasible_count",
                   "test_accuracy_mean", "test_accuracy_stddev", "test_reduction_mean",
                   "test_reduction_stddev"},
                  {{std::to_string(stability.n_resplits), format_double(stability.modal_theta),
                    std::to_string(stability.modal_count),
                    std::to_string(stability.infeasible_count),
                    format_double(stability.test_accuracy_mean),
                    format_double(stability.test_accuracy_stddev),
                    format_double(stability.test_reduction_mean),
                    format_double(stability.test_reduction_stddev)}});
    }
    mark_finished(config, manifest, "calibrate");
    return report;
}

// ======================================================================
// == filter-fp
// ======================================================================

namespace {

const std::vector<std::string> kFeatureCsvHeader = {
    "problem_id",    "solvable",   "psc_at_first",        "mean_psc",
    "max_psc",       "spread",     "num_drops",           "argmax_fraction",
    "late_peak",     "variance",   "cot_length",          "pass_early_agreement",
    "pass_monotonicity",           "flag_volatility"};

std::vector<std::string> feature_row(const commitment::PscTrajectory& traj) {
    const fpfilter::TrajectoryFeatures f = fpfilter::extract_features(traj, traj.rollout_tokens);
    return {traj.problem_id,
            bool_cell(traj.solvable),
            format_double(f.psc_at_first),
            format_double(f.mean_psc),
            format_double(f.max_psc),
            format_double(f.spread),
            std::to_string(f.num_drops),
            format_double(f.argmax_fraction),
            bool_cell(f.late_peak),
            format_double(f.variance),
            std::to_string(f.cot_length),
            bool_cell(fpfilter::filter_early_agreement(f)),
            bool_cell(fpfilter::filter_monotonicity(f)),
            bool_cell(fpfilter::filter_variance_nonmonotone(f))};
}

}  // namespace

void cmd_filter_fp(const ExperimentConfig& config) {
    const auto problems = load_problems(config);
    RunManifest manifest = load_or_init_manifest(config.out_dir, config_hash(config));
    require_finished(manifest, "rollout", "rollout");
    require_finished(manifest, "probe", "probe");
    const auto trajectories =
        build_trajectories(config, problems, load_rollout_info(config), load_psc_index(config));

    struct GroupTally {
        std::size_t n = 0;
        std::size_t early = 0;
        std::size_t monotone = 0;
        std::size_t flagged = 0;
    };
    std::map<std::string, GroupTally> groups;  // "fp" (unsolvable) / "tp" (solvable)
    std::vector<std::vector<std::string>> rows;
    for (const auto& traj : trajectories) {
        rows.push_back(feature_row(traj));
        const fpfilter::TrajectoryFeatures f =
            fpfilter::extract_features(traj, traj.rollout_tokens);
        GroupTally& tally = groups[traj.solvable ? "tp" : "fp"];
        ++tally.n;
        if (fpfilter::filter_early_agreement(f)) ++tally.early;
        if (fpfilter::filter_monotonicity(f)) ++tally.monotone;
        if (fpfilter::filter_variance_nonmonotone(f)) ++tally.flagged;
    }

    const fs::path dir = fs::path(config.out_dir) / "filter_fp";
    write_csv((dir / "features.csv").string(), kFeatureCsvHeader, rows);
    std::vector<std::vector<std::string>> rate_rows;
    for (const auto& [group, tally] : groups) {
        const double n = static_cast<double>(tally.n);
        rate_rows.push_back({group, std::to_string(tally.n),
                             format_double(static_cast<double>(tally.early) / n),
                             format_double(static_cast<double>(tally.monotone) / n),
                             format_double(static_cast<double>(tally.flagged) / n)});
    }
    write_csv((dir / "rates.csv").string(),
              {"group", "n", "early_agreement_pass_rate", "monotonicity_pass_rate",
               "volatility_flag_rate"},
              rate_rows);
    mark_finished(config, manifest, "filter_fp");
}

// ======================================================================
// == stats
// ======================================================================

void cmd_stats(const ExperimentConfig& config) {
    const auto problems = load_problems(config);
    RunManifest manifest = load_or_init_manifest(config.out_dir, config_hash(config));
    require_finished(manifest, "rollout", "rollout");
    require_finished(manifest, "probe", "probe");
    const auto rollouts = load_rollout_info(config);
    const auto trajectories =
        build_trajectories(config, problems, rollouts, load_psc_index(config));

    struct Row {
        std::string test;
        std::string group_a;
        std::string group_b;
        std::size_t n_a = 0;
        std::size_t n_b = 0;
        double statistic = 0.0;
        double p_value = 1.0;
    };
    std::vector<Row> rows;

    // Paired sign-flip: adaptive early exit vs the full rollout, when the
    // baee stage has run.
    std::map<std::string, bool> adaptive_correct;
    for (const auto& rec : load_records(config.out_dir, "baee"))
        if (rec["strategy"] == "psc_adaptive")
            adaptive_correct[rec["problem_id"].get<std::string>()] = rec["correct"].get<bool>();
    std::vector<double> diffs;
    for (const auto& problem : problems) {
        const auto it = adaptive_correct.find(problem.id);
        const auto rit = rollouts.find(problem.id);
        if (it == adaptive_correct.end() || rit == rollouts.end()) continue;
        diffs.push_back((it->second ? 1.0 : 0.0) - (rit->second.first_correct ? 1.0 : 0.0));
    }
    if (diffs.size() >= 2) {
        const stats::PermutationResult res =
            stats::paired_signflip_test(diffs, 2000, rng::derive(config.seed, "stats-signflip"));
        rows.push_back({"signflip_baee_vs_full", "psc_adaptive", "full_rollout", diffs.size(),
                        diffs.size(), res.statistic, res.p_value});
    }

    // Difficulty-cohort comparisons over the first two difficulty labels.
    std::map<int, std::vector<double>> first_psc;
    std::map<int, std::vector<double>> commits;
    for (std::size_t i = 0; i < problems.size(); ++i) {
        first_psc[problems[i].difficulty].push_back(trajectories[i].values.front());
        if (const auto cf = commitment::commitment_fraction(trajectories[i], config.theta))
            commits[problems[i].difficulty].push_back(*cf);
    }
    if (first_psc.size() >= 2) {
        const auto first = first_psc.begin();
        const auto second = std::next(first);
        const std::string label_a = "difficulty_" + std::to_string(first->first);
        const std::string label_b = "difficulty_" + std::to_string(second->first);
        if (first->second.size() >= 2 && second->second.size() >= 2) {
            const stats::PermutationResult res = stats::permutation_test(
                first->second, second->second, 2000, rng::derive(config.seed, "stats-perm"));
            rows.push_back({"permutation_first_psc_by_difficulty", label_a, label_b,
                            first->second.size(), second->second.size(), res.statistic,
                            res.p_value});
        }
        const auto ca = commits.find(first->first);
        const auto cb = commits.find(second->first);
        if (ca != commits.end() && cb != commits.end() && !ca->second.empty() &&
            !cb->second.empty()) {
            const stats::MannWhitneyResult mw = stats::mann_whitney_u(ca->second, cb->second);
            rows.push_back({"mann_whitney_commit_by_difficulty", label_a, label_b,
                            ca->second.size(), cb->second.size(), mw.u, mw.p_value});
        }
    }

    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.test < b.test; });
    std::vector<double> p_values;
    for (const auto& row : rows) p_values.push_back(row.p_value);
    const std::vector<double> adjusted =
        p_values.empty() ? std::vector<double>{} : stats::holm_bonferroni(p_values);

    std::vector<std::vector<std::string>> csv_rows;
    for (std::size_t i = 0; i < rows.size(); ++i)
        csv_rows.push_back({rows[i].test, rows[i].group_a, rows[i].group_b,
                            std::to_string(rows[i].n_a), std::to_string(rows[i].n_b),
                            format_double(rows[i].statistic), format_double(rows[i].p_value),
                            format_double(adjusted[i])});
    write_csv((fs::path(config.out_dir) / "stats" / "tests.csv").string(),
              {"test", "group_a", "group_b", "n_a", "n_b", "statistic", "p_value", "p_holm"},
              csv_rows);
    mark_finished(config, manifest, "stats");
}

// ======================================================================
// == analyze
// ======================================================================

AnalyzeReport cmd_analyze(const ExperimentConfig& config) {
    const auto problems = load_problems(config);
    RunManifest manifest = load_or_init_manifest(config.out_dir, config_hash(config));
    require_finished(manifest, "rollout", "rollout");
    require_finished(manifest, "probe", "probe");
    const auto rollouts = load_rollout_info(config);
    const PscIndex psc = load_psc_index(config);
    const EfaIndex efa = load_efa_index(config);
    const auto trajectories = build_trajectories(config, problems, rollouts, psc);
    const core::CheckpointGrid grid = config.grid();
    const fs::path dir = fs::path(config.out_dir) / "analyze";

    AnalyzeReport report;
    auto block = [&report](const std::string& name, const std::string& remedy) {
        report.blocked.push_back(name + ": " + remedy);
    };

    // --- commitment map, summary, histogram, difficulty strata ---
    const commitment::CommitmentMap map =
        commitment::export_commitment_map(trajectories, config.theta);
    {
        std::vector<std::vector<std::string>> rows;
        for (const auto& row : map.rows)
            rows.push_back({row.problem_id, bool_cell(row.committed),
                            format_double(row.commit_fraction),
                            format_double(row.post_commit_share),
                            std::to_string(row.rollout_tokens)});
        write_csv((dir / "commitment_map.csv").string(),
                  {"problem_id", "committed", "commit_fraction", "post_commit_share",
                   "rollout_tokens"},
                  rows);
        report.emitted.push_back("commitment_map");

        write_csv((dir / "commitment_summary.csv").string(),
                  {"n_solvable", "aggregate_post_commit_token_share", "empty_marker"},
                  {{std::to_string(map.n_solvable),
                    format_double(map.aggregate_post_commit_token_share),
                    bool_cell(map.empty_marker)}});
        report.emitted.push_back("commitment_summary");

        std::vector<std::vector<std::string>> hist;
        for (const double f : grid.fractions()) {
            std::size_t count = 0;
            for (const auto& row : map.rows)
                if (row.committed && row.commit_fraction == f) ++count;
            hist.push_back({format_double(f), std::to_string(count)});
        }
        std::size_t never = 0;
        for (const auto& row : map.rows)
            if (!row.committed) ++never;
        hist.push_back({"none", std::to_string(never)});
        write_csv((dir / "commitment_hist.csv").string(), {"fraction", "count"}, hist);
        report.emitted.push_back("commitment_hist");

        struct Stratum {
            std::size_t n = 0;
            std::vector<double> commits;
        };
        std::map<int, Stratum> strata;
        for (std::size_t i = 0; i < problems.size(); ++i) {
            Stratum& s = strata[problems[i].difficulty];
            ++s.n;
            if (const auto cf = commitment::commitment_fraction(trajectories[i], config.theta))
                s.commits.push_back(*cf);
        }
        std::vector<std::vector<std::string>> rows2;
        for (const auto& [difficulty, s] : strata)
            rows2.push_back({std::to_string(difficulty), std::to_string(s.n),
                             std::to_string(s.commits.size()),
                             format_double(s.commits.empty() ? 0.0 : stats::mean(s.commits))});
        write_csv((dir / "difficulty_strata.csv").string(),
                  {"difficulty", "n_problems", "n_committed", "mean_commit_fraction"}, rows2);
        report.emitted.push_back("difficulty_strata");
    }

    // --- trajectory features (false-positive screening view) ---
    {
        std::vector<std::vector<std::string>> rows;
        for (const auto& traj : trajectories) rows.push_back(feature_row(traj));
        write_csv((dir / "fp_features.csv").string(), kFeatureCsvHeader, rows);
        report.emitted.push_back("fp_features");
    }

    // --- detection-extraction gap profile and distribution-distance bounds ---
    auto complete_efa_subset = [&](const std::string& suffix,
                                   std::vector<commitment::PscTrajectory>& psc_sub,
                                   std::vector<commitment::EfaTrajectory>& efa_sub) {
        for (std::size_t i = 0; i < problems.size(); ++i) {
            const auto pit = efa.find(problems[i].id);
            if (pit == efa.end()) continue;
            const auto sit = pit->second.find(suffix);
            if (sit == pit->second.end()) continue;
            commitment::EfaTrajectory traj;
            traj.problem_id = problems[i].id;
            traj.grid = grid;
            bool complete = true;
            for (const double f : grid.fractions()) {
                const auto fit = sit->second.find(f);
                if (fit == sit->second.end()) {
                    complete = false;
                    break;
                }
                traj.correct.push_back(fit->second["correct"].get<bool>());
            }
            if (!complete) continue;
            psc_sub.push_back(trajectories[i]);
            efa_sub.push_back(std::move(traj));
        }
    };
    {
        std::vector<commitment::PscTrajectory> psc_sub;
        std::vector<commitment::EfaTrajectory> efa_sub;
        complete_efa_subset(config.suffix_id, psc_sub, efa_sub);
        if (efa_sub.empty()) {
            block("gap_profile", "run the probe command with forced-answer extraction enabled");
            block("tv_bounds", "run the probe command with forced-answer extraction enabled");
        } else {
            const commitment::GapProfile profile =
                commitment::gap_profile(psc_sub, efa_sub, config.theta);
            std::vector<std::vector<std::string>> rows;
            for (std::size_t i = 0; i < grid.size(); ++i)
                rows.push_back({format_double(grid[i]), format_double(profile.psc_rate[i]),
                                format_double(profile.efa_acc[i]),
                                format_double(profile.gap[i])});
            write_csv((dir / "gap_profile.csv").string(),
                      {"fraction", "psc_rate", "efa_acc", "gap"}, rows);
            report.emitted.push_back("gap_profile");

            std::vector<std::vector<std::string>> tv_rows;
            for (std::size_t i = 0; i < grid.size(); ++i) {
                std::vector<double> psc_values;
                double efa_correct = 0.0;
                for (std::size_t p = 0; p < psc_sub.size(); ++p) {
                    psc_values.push_back(psc_sub[p].values[i]);
                    efa_correct += efa_sub[p].correct[i] ? 1.0 : 0.0;
                }
                const double mean_psc = stats::mean(psc_values);
                const double mean_efa = efa_correct / static_cast<double>(efa_sub.size());
                const commitment::TvBound bound = commitment::tv_lower_bound(mean_psc, mean_efa);
                tv_rows.push_back({format_double(grid[i]), format_double(mean_psc),
                                   format_double(mean_efa), format_double(bound.signed_gap),
                                   format_double(bound.bound)});
            }
            write_csv((dir / "tv_bounds.csv").string(),
                      {"fraction", "mean_psc", "mean_efa", "signed_gap", "tv_lower_bound"},
                      tv_rows);
            report.emitted.push_back("tv_bounds");
        }
    }

    // --- suffix sensitivity ---
    {
        std::set<std::string> suffix_ids;
        for (const auto& [pid, by_suffix] : efa)
            for (const auto& [suffix, by_fraction] : by_suffix) suffix_ids.insert(suffix);
        std::vector<std::pair<double, std::string>> gaps;  // (mean gap pp, suffix)
        for (const auto& suffix : suffix_ids) {
            std::vector<commitment::PscTrajectory> psc_sub;
            std::vector<commitment::EfaTrajectory> efa_sub;
            complete_efa_subset(suffix, psc_sub, efa_sub);
            if (efa_sub.empty()) continue;
            const commitment::GapProfile profile =
                commitment::gap_profile(psc_sub, efa_sub, config.theta);
            gaps.emplace_back(stats::mean(profile.gap) * 100.0, suffix);
        }
        if (gaps.size() < 2) {
            block("suffix_gaps", "run the probe command with the suffix ablation enabled");
        } else {
            std::sort(gaps.begin(), gaps.end());
            std::vector<std::vector<std::string>> rows;
            for (std::size_t i = 0; i < gaps.size(); ++i)
                rows.push_back({gaps[i].second, format_double(gaps[i].first),
                                std::to_string(i + 1)});
            write_csv((dir / "suffix_gaps.csv").string(), {"suffix", "mean_gap_pp", "rank"},
                      rows);
            report.emitted.push_back("suffix_gaps");
        }
    }

    // --- strategy cost table ---
    {
        std::map<std::string, std::vector<baee::BaeeOutcome>> outcomes;
        for (const auto& rec : load_records(config.out_dir, "baee"))
            outcomes[rec["strategy"].get<std::string>()].push_back(outcome_from_record(rec));
        if (outcomes.empty()) {
            block("cost_table", "run the baee command");
        } else {
            write_csv((dir / "cost_table.csv").string(), kStrategyCsvHeader,
                      strategy_rows(outcomes, nullptr, nullptr));
            report.emitted.push_back("cost_table");
        }
    }

    // --- entropy before/after the commitment point ---
    {
        std::map<std::string, std::map<double, double>> entropy;
        for (const auto& rec : load_records(config.out_dir, "probe"))
            if (rec["kind"] == "ed" && !rec.value("skipped", false))
                entropy[rec["problem_id"].get<std::string>()][rec["fraction"].get<double>()] =
                    rec["mean_entropy"].get<double>();
        if (entropy.empty()) {
            block("entropy_ratio",
                  "run the probe command with the entropy probe enabled (needs a top-logprob "
                  "backend)");
        } else {
            std::vector<std::vector<std::string>> rows;
            std::vector<double> ratios;
            for (std::size_t i = 0; i < problems.size(); ++i) {
                const auto cf = commitment::commitment_fraction(trajectories[i], config.theta);
                if (!cf) continue;
                const auto eit = entropy.find(problems[i].id);
                if (eit == entropy.end()) continue;
                std::vector<double> pre;
                std::vector<double> post;
                for (const auto& [fraction, value] : eit->second)
                    (fraction < *cf ? pre : post).push_back(value);
                if (pre.empty() || post.empty()) continue;
                const double pre_mean = stats::mean(pre);
                if (pre_mean <= 0.0) continue;
                const double ratio = stats::mean(post) / pre_mean;
                rows.push_back({problems[i].id, format_double(pre_mean),
                                format_double(stats::mean(post)), format_double(ratio)});
                ratios.push_back(ratio);
            }
            if (ratios.empty()) {
                block("entropy_ratio",
                      "no problem has entropy records on both sides of its commitment point");
            } else {
                rows.push_back({"ALL", "", "", format_double(stats::mean(ratios))});
                write_csv((dir / "entropy_ratio.csv").string(),
                          {"problem_id", "pre_commit_mean", "post_commit_mean", "ratio"}, rows);
                report.emitted.push_back("entropy_ratio");
            }
        }
    }

    std::sort(report.emitted.begin(), report.emitted.end());
    std::sort(report.blocked.begin(), report.blocked.end());
    {
        fs::create_directories(dir);
        std::ofstream out(dir / "blocked.txt", std::ios::binary | std::ios::trunc);
        for (const auto& line : report.blocked) out << line << '\n';
        out.flush();
        if (!out) throw std::runtime_error("cannot write " + (dir / "blocked.txt").string());
    }
    mark_finished(config, manifest, "analyze");
    return report;
}

// ======================================================================
// == report
// ======================================================================

void cmd_report(const ExperimentConfig& config) {
    const auto problems = load_problems(config);
    const RunManifest manifest = load_or_init_manifest(config.out_dir, config_hash(config));
    std::set<std::string> stages = manifest.finished_stages;
    for (const auto& [stage, ids] : manifest.completed) stages.insert(stage);

    std::vector<std::vector<std::string>> rows;
    for (const auto& stage : stages)
        rows.push_back({stage, bool_cell(manifest.stage_done(stage)),
                        std::to_string(completed_ids(config.out_dir, stage).size()),
                        std::to_string(load_records(config.out_dir, stage).size())});
    const fs::path dir = fs::path(config.out_dir) / "report";
    write_csv((dir / "summary.csv").string(), {"stage", "finished", "problems", "records"}, rows);
    write_csv((dir / "run.csv").string(), {"config_hash", "tool_version", "n_problems"},
              {{manifest.config_hash, manifest.tool_version, std::to_string(problems.size())}});
}

}  // namespace cotprobe::expcli

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cotprobe/baee.hpp"
#include "cotprobe/calibration.hpp"
#include "cotprobe/core.hpp"
#include "cotprobe/modelclient.hpp"

namespace cotprobe::expcli {

inline constexpr const char* kToolVersion = "0.1.0";

// ======================================================================
// == Experiment configuration
// ======================================================================

struct ExperimentConfig {
    std::string dataset_path;
    std::string out_dir;
    std::string backend = "mock";  // "mock" or "http"

    // HTTP backend wiring (environment can override endpoint and token).
    std::string endpoint_url;
    std::string api_token;
    std::string model;

    // Sampling plan.
    bool fine_grid = false;  // thirteen-point grid instead of nine
    std::size_t n_rollouts = 4;
    std::size_t n_psc = 8;
    std::size_t topk = 20;
    std::size_t efa_max_tokens = 64;
    std::size_t rollout_max_tokens = 2048;
    double theta = 1.0;
    std::uint64_t seed = 0;
    std::size_t parallelism = 4;
    std::size_t n_resplits = 100;
    std::string suffix_id = "original";

    // Mock planting knobs; per-problem dataset lines may override the two
    // fractions with "mock_commit" / "mock_forceable" keys.
    double mock_commit = 0.2;
    double mock_forceable = 0.4;
    std::string mock_curve = "step";  // step | step_cold | logistic | constant
    double mock_cold_level = 0.0;
    std::size_t mock_total_tokens = 40;

    core::CheckpointGrid grid() const;
    void validate() const;
};

// Flat key = value file; '#' starts a comment; unknown keys are an error.
ExperimentConfig load_config(const std::string& path);

// Applies COTPROBE_ENDPOINT and COTPROBE_API_TOKEN. Nothing else is read
// from the environment (crash injection excepted, see run notes).
void apply_env_overrides(ExperimentConfig& config);

// Stable hash of the canonical key = value serialization.
std::string config_hash(const ExperimentConfig& config);

// ======================================================================
// == Run manifest and storage
// ======================================================================

struct RunManifest {
    std::string config_hash;
    std::string tool_version = kToolVersion;
    std::set<std::string> finished_stages;
    std::map<std::string, std::set<std::string>> completed;   // stage -> problem ids
    std::map<std::string, std::string> stage_params;  // stage -> frozen parameter string

    bool problem_done(const std::string& stage, const std::string& problem_id) const;
    bool stage_done(const std::string& stage) const;
};

// Loads the manifest (initializing a fresh one when absent) and enforces
// the config-hash resume contract: resuming under a different config is an
// error rather than a silent mixed run.
RunManifest load_or_init_manifest(const std::string& out_dir, const std::string& hash);
void save_manifest(const std::string& out_dir, const RunManifest& manifest);  // tmp + rename

// JSONL shard storage, one directory per stage, one line per problem
// bundling that problem's records. A line is appended and flushed before
// the manifest is updated, so resume can treat on-disk lines as completion
// evidence and never duplicates work even when a crash lands between the
// two writes. Loads tolerate a torn trailing line (treated as unwritten);
// appends cut such a tail away first so lines never splice together.
void append_problem_records(const std::string& out_dir, const std::string& stage,
                            const std::string& problem_id,
                            const std::vector<nlohmann::json>& records);
// Flattened records across all shard lines, each with "problem_id" set.
std::vector<nlohmann::json> load_records(const std::string& out_dir, const std::string& stage);
// Problem ids with an intact shard line in this stage.
std::set<std::string> completed_ids(const std::string& out_dir, const std::string& stage);

// Deterministic CSV: fixed column order, six-decimal floats, LF endings,
// no timestamps.
std::string format_double(double value);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// ======================================================================
// == Stages
// ======================================================================

struct StageResult {
    std::size_t executed = 0;  // problems run this invocation
    std::size_t skipped = 0;   // problems already completed
};

// n_rollouts temperature-1.0 rollouts per problem; the first rollout's
// correctness feeds downstream accuracy columns.
StageResult cmd_rollout(const ExperimentConfig& config);

struct ProbeSelection {
    bool psc = true;
    bool efa = true;
    bool atlt = false;
    bool ed = false;
    bool suffix_ablation = false;  // run EFA under every registered template
};

// Probes every grid fraction of each problem's first rollout.
StageResult cmd_probe(const ExperimentConfig& config, const ProbeSelection& selection);

struct PerturbReport {
    std::string kind;
    double fraction = 0.0;
    double mean_intact_psc = 0.0;
    double mean_perturbed_psc = 0.0;
    std::size_t drops_over_10pp = 0;
    std::size_t n_problems = 0;
    std::size_t skipped_short = 0;  // prefix under two tokens
};

// kind: truncate_20 | shuffle_30 | replace_30. Reruns PSC on the perturbed
// prefix at the given fraction and compares against the intact control.
PerturbReport cmd_perturb(const ExperimentConfig& config, const std::string& kind,
                          double fraction);

struct BaeeStageReport {
    std::map<std::string, baee::CostReport> costs;     // by strategy
    std::map<std::string, double> accuracy;            // by strategy
};

// Early-exit strategies plus baselines over the run, one CSV row per
// strategy (accuracy, reduction, calls, token ratios).
BaeeStageReport cmd_baee(const ExperimentConfig& config);

calibration::CalibrationReport cmd_calibrate(const ExperimentConfig& config);
void cmd_filter_fp(const ExperimentConfig& config);
void cmd_stats(const ExperimentConfig& config);

struct AnalyzeReport {
    std::vector<std::string> emitted;  // report names, sorted
    std::vector<std::string> blocked;  // "name: remedy" lines, sorted
};

// Emits every analysis CSV the present stages support and lists the rest
// as blocked with the command that would unblock them.
AnalyzeReport cmd_analyze(const ExperimentConfig& config);

// One-page run summary (stage record counts and completion flags).
void cmd_report(const ExperimentConfig& config);

// ======================================================================
// == Perturbations (unit-testable helpers)
// ======================================================================

// truncate_20 drops the last fifth; shuffle_30 permutes the last three
// tenths in place (seeded); replace_30 redraws them uniformly from the
// run-local vocabulary. Windows are floor(ratio * k); a zero window is an
// identity. Prefixes under two tokens are the caller's skip case.
std::vector<std::string> perturb_tokens(const std::string& kind,
                                        const std::vector<std::string>& tokens,
                                        std::uint64_t seed,
                                        const std::vector<std::string>& vocabulary);

}  // namespace cotprobe::expcli

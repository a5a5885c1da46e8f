#include <cstdio>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cotprobe/expcli.hpp"

namespace {

using cotprobe::expcli::ExperimentConfig;
using cotprobe::expcli::ProbeSelection;

// --config is loaded before the other flags bind so the command line can
// override file values (file < flags < environment).
std::string prescan_config_path(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config" && i + 1 < argc) return argv[i + 1];
        if (arg.rfind("--config=", 0) == 0) return arg.substr(9);
    }
    return "";
}

ProbeSelection parse_probe_selection(const std::string& csv, bool ablation) {
    ProbeSelection selection;
    selection.psc = selection.efa = selection.atlt = selection.ed = false;
    selection.suffix_ablation = ablation;
    std::istringstream in(csv);
    std::string name;
    while (std::getline(in, name, ',')) {
        if (name.empty()) continue;
        if (name == "psc") selection.psc = true;
        else if (name == "efa") selection.efa = true;
        else if (name == "atlt") selection.atlt = true;
        else if (name == "ed") selection.ed = true;
        else throw std::runtime_error("unknown probe \"" + name +
                                      "\" (expected psc, efa, atlt, ed)");
    }
    return selection;
}

}  // namespace

int main(int argc, char** argv) {
    ExperimentConfig config;
    try {
        const std::string config_path = prescan_config_path(argc, argv);
        if (!config_path.empty()) config = cotprobe::expcli::load_config(config_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }

    CLI::App app{"black-box probing and budget-adaptive early exit for chain-of-thought models"};
    app.fallthrough();  // global flags may follow the subcommand name
    app.set_version_flag("--version", cotprobe::expcli::kToolVersion);
    std::string config_path_opt;
    app.add_option("--config", config_path_opt, "flat key = value config file");
    app.add_option("--dataset", config.dataset_path, "problems JSONL path");
    app.add_option("--out", config.out_dir, "run directory (records, manifest, reports)");
    app.add_option("--backend", config.backend, "mock | http");
    app.add_option("--endpoint", config.endpoint_url, "http backend endpoint URL");
    app.add_option("--model", config.model, "model name forwarded to the http backend");
    app.add_option("--seed", config.seed, "master seed");
    app.add_option("--parallelism", config.parallelism, "worker threads per stage");
    app.add_option("--theta", config.theta, "agreement threshold");
    app.add_flag("--fine-grid", config.fine_grid, "use the 13-point checkpoint grid");
    app.add_option("--suffix", config.suffix_id, "forced-extraction suffix template id");
    app.add_option("--n-rollouts", config.n_rollouts, "full rollouts per problem");
    app.add_option("--n-psc", config.n_psc, "continuations per agreement probe");
    app.add_option("--topk", config.topk, "top-k depth for entropy probes");
    app.add_option("--efa-max-tokens", config.efa_max_tokens, "forced-extraction token cap");
    app.add_option("--rollout-max-tokens", config.rollout_max_tokens, "rollout token cap");
    app.add_option("--resplits", config.n_resplits, "calibration stability resplits");
    app.add_option("--mock-commit", config.mock_commit, "mock planted commitment fraction");
    app.add_option("--mock-forceable", config.mock_forceable, "mock planted forceable fraction");
    app.add_option("--mock-curve", config.mock_curve, "mock recoverability curve kind");
    app.add_option("--mock-cold-level", config.mock_cold_level, "mock step_cold floor");
    app.add_option("--mock-total-tokens", config.mock_total_tokens, "mock rollout length");

    app.require_subcommand(1);
    auto* rollout = app.add_subcommand("rollout", "sample full rollouts for every problem");
    auto* probe = app.add_subcommand("probe", "probe every checkpoint of the first rollout");
    std::string probes_arg = "psc,efa";
    bool ablation = false;
    probe->add_option("--probes", probes_arg, "comma list from psc,efa,atlt,ed");
    probe->add_flag("--suffix-ablation", ablation,
                    "run forced extraction under every registered suffix");
    auto* perturb = app.add_subcommand("perturb", "re-probe under prefix perturbations");
    std::string kind;
    double fraction = 0.5;
    perturb->add_option("--kind", kind, "truncate_20 | shuffle_30 | replace_30")->required();
    perturb->add_option("--fraction", fraction, "checkpoint fraction to perturb");
    auto* baee = app.add_subcommand("baee", "run early-exit strategies and baselines");
    auto* calibrate = app.add_subcommand("calibrate", "select theta on a calibration split");
    auto* filter = app.add_subcommand("filter-fp", "trajectory-shape false-positive screens");
    auto* stats = app.add_subcommand("stats", "significance tests over stored records");
    auto* analyze = app.add_subcommand("analyze", "emit every analysis the records support");
    auto* report = app.add_subcommand("report", "summarize run progress");

    CLI11_PARSE(app, argc, argv);
    cotprobe::expcli::apply_env_overrides(config);

    try {
        if (rollout->parsed()) {
            const auto result = cotprobe::expcli::cmd_rollout(config);
            std::printf("rollout: %zu executed, %zu skipped\n", result.executed, result.skipped);
        } else if (probe->parsed()) {
            const auto result =
                cotprobe::expcli::cmd_probe(config, parse_probe_selection(probes_arg, ablation));
            std::printf("probe: %zu executed, %zu skipped\n", result.executed, result.skipped);
        } else if (perturb->parsed()) {
            const auto rep = cotprobe::expcli::cmd_perturb(config, kind, fraction);
            std::printf("perturb %s @ %.2f: intact %.4f perturbed %.4f (%zu drops > 10pp over "
                        "%zu problems, %zu skipped)\n",
                        rep.kind.c_str(), rep.fraction, rep.mean_intact_psc,
                        rep.mean_perturbed_psc, rep.drops_over_10pp, rep.n_problems,
                        rep.skipped_short);
        } else if (baee->parsed()) {
            const auto rep = cotprobe::expcli::cmd_baee(config);
            for (const auto& [strategy, accuracy] : rep.accuracy)
                std::printf("baee %s: accuracy %.4f, mean reduction %.4f, mean calls %.2f\n",
                            strategy.c_str(), accuracy,
                            rep.costs.at(strategy).mean_serial_reduction,
                            rep.costs.at(strategy).mean_api_calls);
        } else if (calibrate->parsed()) {
            const auto rep = cotprobe::expcli::cmd_calibrate(config);
            if (rep.feasible)
                std::printf("calibrate: theta* %.3f (calib acc %.4f, test acc %.4f, reduction "
                            "%.4f)\n",
                            rep.theta_star, rep.calib_accuracy, rep.test_accuracy,
                            rep.test_reduction);
            else
                std::printf("calibrate: no feasible theta\n");
        } else if (filter->parsed()) {
            cotprobe::expcli::cmd_filter_fp(config);
            std::printf("filter-fp: wrote features.csv and rates.csv\n");
        } else if (stats->parsed()) {
            cotprobe::expcli::cmd_stats(config);
            std::printf("stats: wrote tests.csv\n");
        } else if (analyze->parsed()) {
            const auto rep = cotprobe::expcli::cmd_analyze(config);
            for (const auto& name : rep.emitted) std::printf("analyze: emitted %s\n", name.c_str());
            for (const auto& line : rep.blocked)
                std::printf("analyze: blocked %s\n", line.c_str());
        } else if (report->parsed()) {
            cotprobe::expcli::cmd_report(config);
            std::printf("report: wrote summary.csv and run.csv\n");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

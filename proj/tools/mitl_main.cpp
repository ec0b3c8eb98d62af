// Command-line entry point: synthetic dataset generation, single-fold
// training, the full leave-one-domain-out protocol, and checkpoint-ensemble
// evaluation. Every command with a fixed seed is end-to-end deterministic.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "mitl/checkpoint.hpp"
#include "mitl/data.hpp"
#include "mitl/errors.hpp"
#include "mitl/experiment.hpp"
#include "mitl/inference.hpp"
#include "mitl/training.hpp"

namespace fs = std::filesystem;

namespace {

std::string default_output_dir() {
    if (const char* env = std::getenv("MITL_OUTPUT_DIR"); env && *env) return env;
    return "runs";
}

// Shared --config/--set/placement flags for train and lodo.
struct RunFlags {
    std::string config_path;
    std::vector<std::string> sets;
    std::string name;
    std::string output_dir;
    int jobs = 0; // 0 = not given

    void attach(CLI::App& cmd) {
        cmd.add_option("--config", config_path, "experiment config file (key=value lines)");
        cmd.add_option("--set", sets, "override a config key, e.g. --set train.epochs=10")
            ->take_all();
        cmd.add_option("--name", name, "experiment name (artifact subdirectory)");
        cmd.add_option("--output-dir", output_dir,
                       "artifact root (default: $MITL_OUTPUT_DIR or ./runs)");
        cmd.add_option("--jobs", jobs, "evaluation worker threads (results are unaffected)")
            ->check(CLI::PositiveNumber);
    }

    mitl::ExperimentConfig resolve() const {
        mitl::ExperimentConfig base;
        base.output_dir = default_output_dir();
        mitl::ExperimentConfig cfg =
            config_path.empty() ? base : mitl::load_experiment_config(config_path, base);
        for (const auto& assignment : sets) mitl::apply_override(cfg, assignment);
        if (!name.empty()) cfg.name = name;
        if (!output_dir.empty()) cfg.output_dir = output_dir;
        if (jobs > 0) cfg.jobs = jobs;
        return cfg;
    }
};

int cmd_synth(const mitl::SyntheticSpec& spec, uint64_t seed, const std::string& out_dir) {
    const mitl::DatasetManifest generated = mitl::generate_synthetic(spec, seed);
    const mitl::DatasetManifest materialized = mitl::materialize(generated, out_dir);
    const fs::path manifest_path = fs::path(out_dir) / "manifest.txt";
    mitl::save_manifest(materialized, manifest_path);
    std::cout << "wrote " << materialized.samples.size() << " samples across "
              << materialized.domains.size() << " domains to " << manifest_path.string() << "\n";
    return 0;
}

int cmd_train(const RunFlags& flags, int fold_index) {
    const mitl::ExperimentConfig cfg = flags.resolve();
    cfg.validate();
    const mitl::SampleStore store = mitl::open_store(cfg.data);
    const auto folds = mitl::plan_lodo_folds(store.manifest().domains);
    if (fold_index < 0 || static_cast<size_t>(fold_index) >= folds.size()) {
        throw mitl::Error(mitl::ErrorCode::InvalidConfig,
                          "fold index " + std::to_string(fold_index) + " out of range (" +
                              std::to_string(folds.size()) + " folds)");
    }
    const std::string variant = cfg.train.multitask ? "mtl" : "single_task";
    const fs::path dir = fs::path(cfg.output_dir) / cfg.name /
                         ("fold-" + std::to_string(fold_index)) / variant;
    const mitl::FoldOutcome outcome = mitl::run_single_fold(
        store, folds[fold_index], fold_index, cfg, cfg.train.multitask, dir.string());
    std::cout << "fold " << fold_index << " (" << variant
              << ") test=" << outcome.fold.test_domain << " best_epoch=" << outcome.best_epoch
              << " balanced_accuracy=" << outcome.test_balanced_accuracy << "\n"
              << "artifacts: " << dir.string() << "\n";
    return 0;
}

int cmd_lodo(const RunFlags& flags, bool ablation) {
    mitl::ExperimentConfig cfg = flags.resolve();
    if (ablation) cfg.ablation = true;
    const mitl::LodoOutcome outcome = mitl::run_lodo(cfg);
    std::cout << mitl::format_aggregate(outcome);
    std::cout << "artifacts: " << (fs::path(cfg.output_dir) / cfg.name).string() << "\n";
    return 0;
}

int cmd_eval(const std::vector<std::string>& checkpoints, const std::string& manifest_path,
             bool tta, const std::vector<std::string>& domains, std::string out_dir, int jobs) {
    std::vector<mitl::MultiTaskNet> models;
    std::vector<std::string> ids;
    for (size_t i = 0; i < checkpoints.size(); ++i) {
        models.push_back(mitl::load_checkpoint(checkpoints[i]));
        ids.push_back(fs::path(checkpoints[i]).stem().string());
        if (!models.back().config().same_architecture(models.front().config())) {
            throw mitl::Error(mitl::ErrorCode::VersionMismatch,
                              "checkpoint '" + checkpoints[i] + "' config [" +
                                  models.back().config().to_string() +
                                  "] differs from ensemble config [" +
                                  models.front().config().to_string() + "]");
        }
    }
    // File stems may repeat (several best.ckpt); disambiguate by position.
    for (size_t i = 0; i < ids.size(); ++i) {
        for (size_t j = i + 1; j < ids.size(); ++j) {
            if (ids[i] == ids[j]) {
                for (size_t k = 0; k < ids.size(); ++k) ids[k] += "#" + std::to_string(k);
                i = j = ids.size();
            }
        }
    }

    mitl::DataConfig data;
    data.manifest = manifest_path;
    const mitl::SampleStore store = mitl::open_store(data);

    mitl::EvalOptions opts;
    opts.tta = tta;
    opts.domains = domains;
    opts.jobs = jobs;
    const mitl::EvalReport report = mitl::evaluate(models, ids, store, opts);

    if (out_dir.empty()) out_dir = (fs::path(default_output_dir()) / "eval").string();
    fs::create_directories(out_dir);
    mitl::write_report((fs::path(out_dir) / "report.txt").string(), report);
    mitl::write_predictions_csv((fs::path(out_dir) / "predictions.csv").string(),
                                report.predictions);
    std::cout << mitl::format_report(report);
    std::cout << "artifacts: " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-task mitotic-figure atypia pipeline"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset on disk");
    mitl::SyntheticSpec spec;
    uint64_t synth_seed = 1;
    std::string synth_out;
    synth->add_option("--domains", spec.domains, "number of domains (>= 3)");
    synth->add_option("--per-domain", spec.per_domain, "samples per domain");
    synth->add_option("--ratio", spec.atypical_ratio, "atypical fraction in [0,1]");
    synth->add_option("--size", spec.patch_size, "square patch size in pixels");
    synth->add_option("--seed", synth_seed, "generation seed");
    synth->add_option("--out", synth_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "train one leave-one-domain-out fold");
    RunFlags train_flags;
    train_flags.attach(*train);
    int fold_index = 0;
    train->add_option("--fold", fold_index, "fold index in the LODO plan");

    auto* lodo = app.add_subcommand("lodo", "run the full leave-one-domain-out protocol");
    RunFlags lodo_flags;
    lodo_flags.attach(*lodo);
    bool ablation = false;
    lodo->add_flag("--ablation", ablation, "also train the single-task variant per fold");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint ensemble on a manifest");
    std::vector<std::string> checkpoints;
    std::string manifest_path;
    std::string tta_mode = "on";
    std::vector<std::string> eval_domains;
    std::string eval_out;
    int eval_jobs = 1;
    eval->add_option("--ensemble", checkpoints, "checkpoint paths (majority vote)")
        ->required()
        ->take_all();
    eval->add_option("--manifest", manifest_path, "dataset manifest to evaluate")->required();
    eval->add_option("--tta", tta_mode, "test-time augmentation: on|off")
        ->check(CLI::IsMember({"on", "off"}));
    eval->add_option("--domain", eval_domains, "restrict to these domains")->take_all();
    eval->add_option("--out", eval_out, "report directory");
    eval->add_option("--jobs", eval_jobs, "evaluation worker threads (results are unaffected)")
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
        if (*synth) return cmd_synth(spec, synth_seed, synth_out);
        if (*train) return cmd_train(train_flags, fold_index);
        if (*lodo) return cmd_lodo(lodo_flags, ablation);
        if (*eval)
            return cmd_eval(checkpoints, manifest_path, tta_mode == "on", eval_domains, eval_out,
                            eval_jobs);
        return 2;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help / --version
        std::cerr << "mitl: error: " << e.what() << "\n";
        return 2;
    } catch (const mitl::Error& e) {
        std::cerr << "mitl: error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "mitl: error: " << e.what() << "\n";
        return 1;
    }
}

#ifndef MITL_EXPERIMENT_HPP
#define MITL_EXPERIMENT_HPP

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mitl/augment.hpp"
#include "mitl/data.hpp"
#include "mitl/inference.hpp"
#include "mitl/losses.hpp"
#include "mitl/net.hpp"
#include "mitl/training.hpp"

namespace mitl {

// Either a manifest on disk or an in-process synthetic dataset.
struct DataConfig {
    std::string manifest; // path; empty means "generate synthetically"
    SyntheticSpec synth;
    uint64_t seed = 1; // synthetic generation seed
};

// Everything that defines one reproducible experiment. Serialized as flat
// `section.key=value` lines; see load_experiment_config.
struct ExperimentConfig {
    std::string name = "experiment";
    std::string output_dir = "runs";
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    AugConfig aug;
    LossConfig loss;
    bool tta = true;      // test-time augmentation during evaluation
    bool ablation = false; // additionally train the single-task variant
    int jobs = 1;          // evaluation worker threads; never affects results

    void validate() const;
};

// key=value file, one assignment per line; '#' starts a comment, blank lines
// ignored. Unknown keys or unparsable values raise SchemaViolation. The
// two-argument form starts from `base` instead of the built-in defaults
// (used to seed output_dir from the environment before the file applies).
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig load_experiment_config(const std::string& path, ExperimentConfig base);

// Applies a single "key=value" assignment (the --set flag); flags win over
// the file because they are applied afterwards.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

// Canonical serialization: every key, fixed order, deterministic formatting.
std::string to_key_values(const ExperimentConfig& cfg);

// FNV-1a 64-bit over bytes; digest of the result-determining subset of the
// canonical form (name, output_dir and jobs are excluded: they relocate or
// parallelize the run without changing any result).
uint64_t fnv1a64(std::string_view bytes);
std::string config_digest(const ExperimentConfig& cfg);

// Loads the manifest when a path is configured, otherwise generates the
// synthetic dataset in memory.
SampleStore open_store(const DataConfig& data);

struct FoldOutcome {
    FoldSpec fold;
    bool multitask = true;
    int best_epoch = 0;
    double best_val_total = 0.0;
    double test_balanced_accuracy = 0.0;
};

// Trains one fold variant and fills `dir` with epochs.csv, best.ckpt,
// fold.json plus the held-out test-domain report.txt and predictions.csv.
// Initialization and augmentation seeds are derived from the configured
// seeds and the fold index, so folds differ but reruns are byte-identical;
// the multitask and single-task variants of a fold share their weight
// initialization to keep the comparison paired.
FoldOutcome run_single_fold(const SampleStore& store, const FoldSpec& fold, int fold_index,
                            const ExperimentConfig& cfg, bool multitask,
                            const std::string& dir);

struct LodoOutcome {
    std::vector<FoldOutcome> mtl;         // empty when train.multitask=false without ablation
    std::vector<FoldOutcome> single_task; // filled when ablation or train.multitask=false
    double mtl_mean = 0.0, mtl_std = 0.0;
    double single_mean = 0.0, single_std = 0.0;
    std::string digest;
};

// Full leave-one-domain-out protocol: every fold from plan_lodo_folds is
// trained (both variants under ablation), evaluated on its test domain, and
// written under <output_dir>/<name>/fold-<k>/{mtl,single_task}/; the
// aggregate table and the resolved config land next to the fold directories.
LodoOutcome run_lodo(const ExperimentConfig& cfg);

// Balanced-accuracy table: one row per fold plus a mean +/- std row per
// trained variant ("Single task" / "MTL").
std::string format_aggregate(const LodoOutcome& outcome);
void write_aggregate(const std::string& path, const LodoOutcome& outcome);

} // namespace mitl

#endif

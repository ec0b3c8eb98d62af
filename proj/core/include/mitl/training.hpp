#ifndef MITL_TRAINING_HPP
#define MITL_TRAINING_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mitl/augment.hpp"
#include "mitl/data.hpp"
#include "mitl/losses.hpp"
#include "mitl/net.hpp"

namespace mitl {

struct TrainConfig {
    int epochs = 50;
    double learning_rate = 4e-5;
    int batch_size = 24;
    uint64_t seed = 0;
    bool multitask = true; // false: decoders and dense losses disabled (ablation)
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "epochs must be >= 1");
        if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
        if (!(learning_rate > 0.0))
            throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
    }
};

// One leave-one-domain-out fold: train on everything except one held-out
// test domain and one validation domain.
struct FoldSpec {
    std::vector<std::string> train_domains;
    std::string val_domain;
    std::string test_domain;
    bool operator==(const FoldSpec&) const = default;
};

// Fold i tests on domains[i] and validates on the cyclically next domain;
// the remaining domains train. Requires at least 3 domains.
std::vector<FoldSpec> plan_lodo_folds(const std::vector<std::string>& domains);

struct EpochRecord {
    int epoch = 0; // 1-based
    LossBreakdown train;
    LossBreakdown val;
    double wall_seconds = 0.0; // in-memory only; excluded from artifacts
};

// Bias-corrected Adam. Moments are kept in double and created lazily per
// parameter, so parameters that never receive a gradient are left untouched
// bit for bit.
struct AdamState {
    std::map<std::string, TensorT<double>> m, v;
    int64_t step = 0;
};

// Single-tensor update; `step` is the 1-based global step count.
void adam_update(Tensor& param, const Tensor& grad, TensorT<double>& m, TensorT<double>& v,
                 int64_t step, double lr, double beta1, double beta2, double eps);

// Applies one optimizer step to every parameter present in `grads`.
void adam_step(MultiTaskNet& net, const ParamGrads& grads, AdamState& state,
               const TrainConfig& cfg);

struct FoldResult {
    MultiTaskNet model;     // snapshot from the best epoch
    int best_epoch = 0;     // 1-based
    double best_val_total = 0.0;
    std::vector<EpochRecord> records;
    size_t n_train = 0;
    size_t n_val = 0;
};

// Full optimization of one fold: per-epoch shuffling and online augmentation
// driven by epoch-derived generators, Adam on the composite loss (or on the
// classification term alone when multitask=false), validation without
// augmentation after every epoch, and selection of the epoch with minimal
// validation total loss (ties resolved toward the earlier epoch). Never
// touches test-domain samples. Class weights come from the training domains
// only.
FoldResult train_fold(const SampleStore& store, const FoldSpec& fold,
                      const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                      const AugConfig& aug_cfg = {}, const LossConfig& loss_cfg = {});

// fold-level artifacts; both are deterministic byte-for-byte given equal
// inputs (wall-clock durations are deliberately not written).
void write_epochs_csv(const std::string& path, const std::vector<EpochRecord>& records);
void write_fold_json(const std::string& path, const FoldSpec& fold, const FoldResult& result,
                     const TrainConfig& train_cfg);

} // namespace mitl

#endif

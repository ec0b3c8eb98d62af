#ifndef MITL_INFERENCE_HPP
#define MITL_INFERENCE_HPP

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mitl/data.hpp"
#include "mitl/net.hpp"

namespace mitl {

struct PredictionRecord {
    std::string sample_id;
    std::string model_id;
    double p_atypical = 0.0;
    Label predicted = Label::Typical; // Atypical iff p_atypical >= 0.5
    int n_views = 8;
};

struct Confusion {
    int tp = 0, fp = 0, tn = 0, fn = 0; // positive class = Atypical
    int total() const { return tp + fp + tn + fn; }
};

struct DomainReport {
    std::string domain;
    Confusion confusion;
    double balanced_accuracy = 0.0;
};

struct EvalReport {
    std::vector<DomainReport> per_domain;
    Confusion overall;
    double overall_balanced_accuracy = 0.0;
    std::vector<std::string> model_ids;
    int n_views = 8;
    std::string config_digest;
    std::vector<PredictionRecord> predictions; // per sample x model, sample-major
};

// Mean over the 8 dihedral views (or the single identity view when tta is
// off) of sigmoid(classification logit), computed in inference mode as one
// batched forward pass. Deterministic.
double predict_tta(MultiTaskNet& net, const Tensor& patch, bool tta = true);

// Majority vote over per-model predictions for one sample; a tied vote falls
// back to the mean p_atypical against the 0.5 threshold.
Label ensemble_vote(const std::vector<PredictionRecord>& records);

// (recall + specificity) / 2 with Atypical as the positive class.
double balanced_accuracy(const Confusion& c);

struct EvalOptions {
    bool tta = true;
    std::vector<std::string> domains; // empty = every manifest domain
    std::string config_digest;
    int jobs = 1; // worker threads for per-sample prediction; never affects results
};

// Per-sample model probability; the seam that lets tests inject oracle
// predictors without building networks.
using Predictor = std::function<double(const Sample&)>;

EvalReport evaluate_with(const std::vector<std::pair<std::string, Predictor>>& models,
                         const SampleStore& store, const EvalOptions& opts = {});

// TTA prediction with every model, majority vote, per-domain and pooled
// balanced accuracy.
EvalReport evaluate(std::vector<MultiTaskNet>& models, const std::vector<std::string>& model_ids,
                    const SampleStore& store, const EvalOptions& opts = {});

// Deterministic artifacts: a human-readable report with per-domain blocks
// (balanced accuracy to 4 decimals) and the predictions table.
std::string format_report(const EvalReport& report);
void write_report(const std::string& path, const EvalReport& report);
void write_predictions_csv(const std::string& path,
                           const std::vector<PredictionRecord>& records);

} // namespace mitl

#endif

#include "mitl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <utility>

#include "mitl/checkpoint.hpp"
#include "mitl/errors.hpp"
#include "mitl/rng.hpp"

namespace fs = std::filesystem;

namespace mitl {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& want) {
    throw Error(ErrorCode::SchemaViolation,
                "config key '" + key + "': cannot parse '" + value + "' as " + want);
}

long long parse_ll(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size()) bad_value(key, value, "an integer");
        return v;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        bad_value(key, value, "an integer");
    }
}

int parse_int(const std::string& key, const std::string& value) {
    return static_cast<int>(parse_ll(key, value));
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size() || value.front() == '-') bad_value(key, value, "an unsigned integer");
        return v;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        bad_value(key, value, "an unsigned integer");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) bad_value(key, value, "a number");
        return v;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        bad_value(key, value, "a number");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "on" || value == "1") return true;
    if (value == "false" || value == "off" || value == "0") return false;
    bad_value(key, value, "a boolean (true/false/on/off/1/0)");
}

std::vector<std::string> split_commas(const std::string& value) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) out.push_back(trim(item));
    return out;
}

// Shortest decimal form that parses back to the same double.
std::string format_double(double v) {
    char buf[64];
    for (int prec : {15, 16, 17}) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

std::string format_4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    auto ints = [&](size_t n) {
        const auto parts = split_commas(value);
        if (parts.size() != n)
            bad_value(key, value, "a comma list of " + std::to_string(n) + " integers");
        std::vector<int> out;
        for (const auto& p : parts) out.push_back(parse_int(key, p));
        return out;
    };
    auto doubles = [&](size_t n) {
        const auto parts = split_commas(value);
        if (parts.size() != n)
            bad_value(key, value, "a comma list of " + std::to_string(n) + " numbers");
        std::vector<double> out;
        for (const auto& p : parts) out.push_back(parse_double(key, p));
        return out;
    };

    if (key == "name") cfg.name = value;
    else if (key == "output_dir") cfg.output_dir = value;
    else if (key == "jobs") cfg.jobs = parse_int(key, value);
    else if (key == "ablation") cfg.ablation = parse_bool(key, value);
    else if (key == "data.manifest") cfg.data.manifest = value;
    else if (key == "data.domains") cfg.data.synth.domains = parse_int(key, value);
    else if (key == "data.per_domain") cfg.data.synth.per_domain = parse_int(key, value);
    else if (key == "data.atypical_ratio") cfg.data.synth.atypical_ratio = parse_double(key, value);
    else if (key == "data.patch_size") cfg.data.synth.patch_size = parse_int(key, value);
    else if (key == "data.seed") cfg.data.seed = parse_u64(key, value);
    else if (key == "model.input_size") cfg.model.input_size = parse_int(key, value);
    else if (key == "model.stem_channels") cfg.model.stem_channels = parse_int(key, value);
    else if (key == "model.stage_channels") {
        const auto v = ints(4);
        std::copy(v.begin(), v.end(), cfg.model.stage_channels.begin());
    } else if (key == "model.blocks_per_stage") cfg.model.blocks_per_stage = parse_int(key, value);
    else if (key == "model.cls_hidden") {
        const auto v = ints(2);
        std::copy(v.begin(), v.end(), cfg.model.cls_hidden.begin());
    } else if (key == "model.seed") cfg.model.seed = parse_u64(key, value);
    else if (key == "train.epochs") cfg.train.epochs = parse_int(key, value);
    else if (key == "train.learning_rate") cfg.train.learning_rate = parse_double(key, value);
    else if (key == "train.batch_size") cfg.train.batch_size = parse_int(key, value);
    else if (key == "train.seed") cfg.train.seed = parse_u64(key, value);
    else if (key == "train.multitask") cfg.train.multitask = parse_bool(key, value);
    else if (key == "train.beta1") cfg.train.beta1 = parse_double(key, value);
    else if (key == "train.beta2") cfg.train.beta2 = parse_double(key, value);
    else if (key == "train.adam_eps") cfg.train.adam_eps = parse_double(key, value);
    else if (key == "aug.sigma_alpha") cfg.aug.sigma_alpha = parse_double(key, value);
    else if (key == "aug.sigma_beta") cfg.aug.sigma_beta = parse_double(key, value);
    else if (key == "aug.enable_stain") cfg.aug.enable_stain = parse_bool(key, value);
    else if (key == "aug.enable_dihedral") cfg.aug.enable_dihedral = parse_bool(key, value);
    else if (key == "loss.eps_prob") cfg.loss.eps_prob = parse_double(key, value);
    else if (key == "loss.eps_dice") cfg.loss.eps_dice = parse_double(key, value);
    else if (key == "loss.coefficients") {
        const auto v = doubles(3);
        std::copy(v.begin(), v.end(), cfg.loss.coefficients.begin());
    } else if (key == "inference.tta") cfg.tta = parse_bool(key, value);
    else throw Error(ErrorCode::SchemaViolation, "unknown config key '" + key + "'");
}

void emit(std::ostream& out, const ExperimentConfig& c, bool for_digest) {
    if (!for_digest) {
        out << "name=" << c.name << "\n";
        out << "output_dir=" << c.output_dir << "\n";
        out << "jobs=" << c.jobs << "\n";
    }
    out << "ablation=" << (c.ablation ? "true" : "false") << "\n";
    out << "data.manifest=" << c.data.manifest << "\n";
    out << "data.domains=" << c.data.synth.domains << "\n";
    out << "data.per_domain=" << c.data.synth.per_domain << "\n";
    out << "data.atypical_ratio=" << format_double(c.data.synth.atypical_ratio) << "\n";
    out << "data.patch_size=" << c.data.synth.patch_size << "\n";
    out << "data.seed=" << c.data.seed << "\n";
    out << "model.input_size=" << c.model.input_size << "\n";
    out << "model.stem_channels=" << c.model.stem_channels << "\n";
    out << "model.stage_channels=" << c.model.stage_channels[0] << ',' << c.model.stage_channels[1]
        << ',' << c.model.stage_channels[2] << ',' << c.model.stage_channels[3] << "\n";
    out << "model.blocks_per_stage=" << c.model.blocks_per_stage << "\n";
    out << "model.cls_hidden=" << c.model.cls_hidden[0] << ',' << c.model.cls_hidden[1] << "\n";
    out << "model.seed=" << c.model.seed << "\n";
    out << "train.epochs=" << c.train.epochs << "\n";
    out << "train.learning_rate=" << format_double(c.train.learning_rate) << "\n";
    out << "train.batch_size=" << c.train.batch_size << "\n";
    out << "train.seed=" << c.train.seed << "\n";
    out << "train.multitask=" << (c.train.multitask ? "true" : "false") << "\n";
    out << "train.beta1=" << format_double(c.train.beta1) << "\n";
    out << "train.beta2=" << format_double(c.train.beta2) << "\n";
    out << "train.adam_eps=" << format_double(c.train.adam_eps) << "\n";
    out << "aug.sigma_alpha=" << format_double(c.aug.sigma_alpha) << "\n";
    out << "aug.sigma_beta=" << format_double(c.aug.sigma_beta) << "\n";
    out << "aug.enable_stain=" << (c.aug.enable_stain ? "true" : "false") << "\n";
    out << "aug.enable_dihedral=" << (c.aug.enable_dihedral ? "true" : "false") << "\n";
    out << "loss.eps_prob=" << format_double(c.loss.eps_prob) << "\n";
    out << "loss.eps_dice=" << format_double(c.loss.eps_dice) << "\n";
    out << "loss.coefficients=" << format_double(c.loss.coefficients[0]) << ','
        << format_double(c.loss.coefficients[1]) << ',' << format_double(c.loss.coefficients[2])
        << "\n";
    out << "inference.tta=" << (c.tta ? "true" : "false") << "\n";
}

std::pair<double, double> mean_std(const std::vector<FoldOutcome>& outcomes) {
    if (outcomes.empty()) return {0.0, 0.0};
    double sum = 0.0;
    for (const auto& o : outcomes) sum += o.test_balanced_accuracy;
    const double mean = sum / static_cast<double>(outcomes.size());
    double ss = 0.0;
    for (const auto& o : outcomes) {
        const double d = o.test_balanced_accuracy - mean;
        ss += d * d;
    }
    return {mean, std::sqrt(ss / static_cast<double>(outcomes.size()))};
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw Error(ErrorCode::IoError, "failed writing '" + path + "'");
}

} // namespace

void ExperimentConfig::validate() const {
    if (name.empty() || name.find('/') != std::string::npos ||
        name.find('\\') != std::string::npos) {
        throw Error(ErrorCode::InvalidConfig, "experiment name must be a non-empty path component");
    }
    if (jobs < 1) throw Error(ErrorCode::InvalidConfig, "jobs must be >= 1");
    model.validate();
    train.validate();
    if (aug.sigma_alpha < 0.0 || aug.sigma_beta < 0.0)
        throw Error(ErrorCode::InvalidConfig, "stain sigmas must be >= 0");
    if (!(loss.eps_prob > 0.0) || loss.eps_prob >= 0.5)
        throw Error(ErrorCode::InvalidConfig, "loss.eps_prob must lie in (0, 0.5)");
    if (!(loss.eps_dice > 0.0))
        throw Error(ErrorCode::InvalidConfig, "loss.eps_dice must be > 0");
    for (double c : loss.coefficients)
        if (c < 0.0) throw Error(ErrorCode::InvalidConfig, "loss coefficients must be >= 0");
    if (data.manifest.empty()) {
        if (data.synth.atypical_ratio < 0.0 || data.synth.atypical_ratio > 1.0)
            throw Error(ErrorCode::InvalidConfig, "data.atypical_ratio must lie in [0, 1]");
    }
}

ExperimentConfig load_experiment_config(const std::string& path) {
    return load_experiment_config(path, ExperimentConfig{});
}

ExperimentConfig load_experiment_config(const std::string& path, ExperimentConfig base) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingFile, "config file '" + path + "' not found");
    ExperimentConfig cfg = std::move(base);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::SchemaViolation, "config line " + std::to_string(lineno) +
                                                        ": expected key=value, got '" + stripped +
                                                        "'");
        }
        set_key(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
    return cfg;
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw Error(ErrorCode::SchemaViolation,
                    "override '" + assignment + "': expected key=value");
    }
    set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string to_key_values(const ExperimentConfig& cfg) {
    std::ostringstream out;
    emit(out, cfg, /*for_digest=*/false);
    return out.str();
}

uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string config_digest(const ExperimentConfig& cfg) {
    std::ostringstream out;
    emit(out, cfg, /*for_digest=*/true);
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(out.str())));
    return buf;
}

SampleStore open_store(const DataConfig& data) {
    if (!data.manifest.empty()) return SampleStore(load_manifest(data.manifest));
    return SampleStore(generate_synthetic(data.synth, data.seed));
}

FoldOutcome run_single_fold(const SampleStore& store, const FoldSpec& fold, int fold_index,
                            const ExperimentConfig& cfg, bool multitask,
                            const std::string& dir) {
    ModelConfig model_cfg = cfg.model;
    model_cfg.seed = mix_seed(cfg.model.seed, 101, static_cast<uint64_t>(fold_index));
    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = mix_seed(cfg.train.seed, 202, static_cast<uint64_t>(fold_index));
    train_cfg.multitask = multitask;

    fs::create_directories(dir);
    FoldResult result = train_fold(store, fold, model_cfg, train_cfg, cfg.aug, cfg.loss);

    write_epochs_csv((fs::path(dir) / "epochs.csv").string(), result.records);
    save_checkpoint(result.model, (fs::path(dir) / "best.ckpt").string());
    write_fold_json((fs::path(dir) / "fold.json").string(), fold, result, train_cfg);

    const std::string variant = multitask ? "mtl" : "single_task";
    EvalOptions opts;
    opts.tta = cfg.tta;
    opts.domains = {fold.test_domain};
    opts.config_digest = config_digest(cfg);
    opts.jobs = cfg.jobs;
    std::vector<MultiTaskNet> models;
    models.push_back(std::move(result.model));
    const EvalReport report =
        evaluate(models, {"fold-" + std::to_string(fold_index) + "-" + variant}, store, opts);
    write_report((fs::path(dir) / "report.txt").string(), report);
    write_predictions_csv((fs::path(dir) / "predictions.csv").string(), report.predictions);

    FoldOutcome outcome;
    outcome.fold = fold;
    outcome.multitask = multitask;
    outcome.best_epoch = result.best_epoch;
    outcome.best_val_total = result.best_val_total;
    outcome.test_balanced_accuracy = report.overall_balanced_accuracy;
    return outcome;
}

LodoOutcome run_lodo(const ExperimentConfig& cfg) {
    cfg.validate();
    const SampleStore store = open_store(cfg.data);
    const auto folds = plan_lodo_folds(store.manifest().domains);
    const fs::path root = fs::path(cfg.output_dir) / cfg.name;
    fs::create_directories(root);

    const bool want_mtl = cfg.train.multitask || cfg.ablation;
    const bool want_single = !cfg.train.multitask || cfg.ablation;

    LodoOutcome outcome;
    outcome.digest = config_digest(cfg);
    for (size_t k = 0; k < folds.size(); ++k) {
        const fs::path fold_dir = root / ("fold-" + std::to_string(k));
        if (want_mtl) {
            outcome.mtl.push_back(run_single_fold(store, folds[k], static_cast<int>(k), cfg, true,
                                                  (fold_dir / "mtl").string()));
        }
        if (want_single) {
            outcome.single_task.push_back(run_single_fold(
                store, folds[k], static_cast<int>(k), cfg, false, (fold_dir / "single_task").string()));
        }
    }
    std::tie(outcome.mtl_mean, outcome.mtl_std) = mean_std(outcome.mtl);
    std::tie(outcome.single_mean, outcome.single_std) = mean_std(outcome.single_task);

    write_aggregate((root / "aggregate.txt").string(), outcome);
    write_text((root / "config.txt").string(), to_key_values(cfg));
    return outcome;
}

std::string format_aggregate(const LodoOutcome& outcome) {
    const bool has_single = !outcome.single_task.empty();
    const bool has_mtl = !outcome.mtl.empty();
    const size_t folds = std::max(outcome.mtl.size(), outcome.single_task.size());

    std::ostringstream out;
    out << "# leave-one-domain-out balanced accuracy\n";
    out << "config_digest: " << outcome.digest << "\n\n";
    out << "fold  test_domain";
    if (has_single) out << "  Single task";
    if (has_mtl) out << "  MTL";
    out << "\n";
    for (size_t k = 0; k < folds; ++k) {
        const FoldSpec& fold =
            has_mtl ? outcome.mtl[k].fold : outcome.single_task[k].fold;
        out << k << "  " << fold.test_domain;
        if (has_single) out << "  " << format_4(outcome.single_task[k].test_balanced_accuracy);
        if (has_mtl) out << "  " << format_4(outcome.mtl[k].test_balanced_accuracy);
        out << "\n";
    }
    out << "\n";
    if (has_single) {
        out << "Single task  " << format_4(outcome.single_mean) << " ± "
            << format_4(outcome.single_std) << "\n";
    }
    if (has_mtl) {
        out << "MTL  " << format_4(outcome.mtl_mean) << " ± " << format_4(outcome.mtl_std)
            << "\n";
    }
    return out.str();
}

void write_aggregate(const std::string& path, const LodoOutcome& outcome) {
    write_text(path, format_aggregate(outcome));
}

} // namespace mitl

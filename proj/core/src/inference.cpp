#include "mitl/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "mitl/augment.hpp"
#include "mitl/errors.hpp"
#include "mitl/losses.hpp"

namespace mitl {

namespace {

std::string format_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string format_4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

Label threshold(double p) { return p >= 0.5 ? Label::Atypical : Label::Typical; }

void count_outcome(Confusion& c, Label truth, Label predicted) {
    if (truth == Label::Atypical) {
        (predicted == Label::Atypical ? c.tp : c.fn)++;
    } else {
        (predicted == Label::Typical ? c.tn : c.fp)++;
    }
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot open '" + path + "' for writing");
    return out;
}

} // namespace

double predict_tta(MultiTaskNet& net, const Tensor& patch, bool tta) {
    patch.require_shape(1, 3, patch.h, patch.w, "patch");
    const auto group = dihedral_group();
    const int views = tta ? static_cast<int>(group.size()) : 1;

    Tensor batch(views, 3, patch.h, patch.w);
    for (int v = 0; v < views; ++v) {
        const Tensor view = apply_dihedral(patch, group[static_cast<size_t>(v)]);
        std::memcpy(batch.data() + static_cast<size_t>(v) * view.v.size(), view.data(),
                    view.v.size() * sizeof(float));
    }

    const auto out = net.forward(batch, BnMode::Eval, /*with_decoders=*/false);
    double sum = 0.0;
    for (int v = 0; v < views; ++v) sum += sigmoid(static_cast<double>(out.cls_logit.v[static_cast<size_t>(v)]));
    return sum / views;
}

Label ensemble_vote(const std::vector<PredictionRecord>& records) {
    if (records.empty()) throw Error(ErrorCode::EmptyEnsemble, "ensemble vote over zero predictions");
    int atypical = 0, typical = 0;
    double p_sum = 0.0;
    for (const auto& r : records) {
        if (r.sample_id != records.front().sample_id) {
            throw Error(ErrorCode::MixedSampleIds, "vote mixes samples '" + records.front().sample_id +
                                                       "' and '" + r.sample_id + "'");
        }
        (r.predicted == Label::Atypical ? atypical : typical)++;
        p_sum += r.p_atypical;
    }
    if (atypical != typical) return atypical > typical ? Label::Atypical : Label::Typical;
    return threshold(p_sum / static_cast<double>(records.size()));
}

double balanced_accuracy(const Confusion& c) {
    if (c.tp + c.fn == 0) throw Error(ErrorCode::UndefinedClassRate, "no Atypical samples in evaluation set");
    if (c.tn + c.fp == 0) throw Error(ErrorCode::UndefinedClassRate, "no Typical samples in evaluation set");
    const double recall = static_cast<double>(c.tp) / (c.tp + c.fn);
    const double specificity = static_cast<double>(c.tn) / (c.tn + c.fp);
    return (recall + specificity) / 2.0;
}

EvalReport evaluate_with(const std::vector<std::pair<std::string, Predictor>>& models,
                         const SampleStore& store, const EvalOptions& opts) {
    if (models.empty()) throw Error(ErrorCode::EmptyEnsemble, "evaluation requires at least one model");

    std::vector<std::string> domains = opts.domains;
    if (domains.empty()) domains = store.manifest().domains;
    for (const auto& d : domains) {
        if (store.manifest().domain_index(d) < 0) {
            throw Error(ErrorCode::MissingDomain, "domain '" + d + "' not in manifest");
        }
    }

    EvalReport report;
    report.n_views = opts.tta ? 8 : 1;
    report.config_digest = opts.config_digest;
    for (const auto& [id, fn] : models) {
        (void)fn;
        report.model_ids.push_back(id);
    }

    // Predictions are computed over a flat sample list (optionally on worker
    // threads), then folded into records and confusions in a fixed serial
    // pass, so the report never depends on the job count.
    std::vector<size_t> flat;             // sample indices, domain-major
    std::vector<size_t> domain_boundary;  // one-past-end position per domain
    for (const auto& domain : domains) {
        const auto indices = store.indices_of({domain});
        flat.insert(flat.end(), indices.begin(), indices.end());
        domain_boundary.push_back(flat.size());
    }

    std::vector<double> probs(flat.size() * models.size(), 0.0);
    const auto predict_range = [&](size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            const Sample& sample = store.get(flat[i]);
            for (size_t m = 0; m < models.size(); ++m) {
                probs[i * models.size() + m] = models[m].second(sample);
            }
        }
    };
    const int jobs = std::min<int>(std::max(1, opts.jobs), static_cast<int>(std::max<size_t>(flat.size(), 1)));
    if (jobs <= 1) {
        predict_range(0, flat.size());
    } else {
        std::vector<std::thread> workers;
        std::exception_ptr failure;
        std::mutex failure_mu;
        const size_t chunk = (flat.size() + jobs - 1) / jobs;
        for (int w = 0; w < jobs; ++w) {
            const size_t begin = std::min(flat.size(), static_cast<size_t>(w) * chunk);
            const size_t end = std::min(flat.size(), begin + chunk);
            workers.emplace_back([&, begin, end] {
                try {
                    predict_range(begin, end);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mu);
                    if (!failure) failure = std::current_exception();
                }
            });
        }
        for (auto& t : workers) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    size_t pos = 0;
    for (size_t d = 0; d < domains.size(); ++d) {
        DomainReport dr;
        dr.domain = domains[d];
        for (; pos < domain_boundary[d]; ++pos) {
            const Sample& sample = store.get(flat[pos]);
            std::vector<PredictionRecord> votes;
            votes.reserve(models.size());
            for (size_t m = 0; m < models.size(); ++m) {
                PredictionRecord rec;
                rec.sample_id = sample.sample_id;
                rec.model_id = models[m].first;
                rec.p_atypical = probs[pos * models.size() + m];
                rec.predicted = threshold(rec.p_atypical);
                rec.n_views = report.n_views;
                votes.push_back(rec);
            }
            const Label predicted = ensemble_vote(votes);
            count_outcome(dr.confusion, sample.label, predicted);
            report.predictions.insert(report.predictions.end(), votes.begin(), votes.end());
        }
        report.overall.tp += dr.confusion.tp;
        report.overall.fp += dr.confusion.fp;
        report.overall.tn += dr.confusion.tn;
        report.overall.fn += dr.confusion.fn;
        report.per_domain.push_back(std::move(dr));
    }
    for (auto& dr : report.per_domain) dr.balanced_accuracy = balanced_accuracy(dr.confusion);
    report.overall_balanced_accuracy = balanced_accuracy(report.overall);
    return report;
}

EvalReport evaluate(std::vector<MultiTaskNet>& models, const std::vector<std::string>& model_ids,
                    const SampleStore& store, const EvalOptions& opts) {
    if (models.size() != model_ids.size()) {
        throw Error(ErrorCode::InvalidConfig, "got " + std::to_string(models.size()) + " models but " +
                                                  std::to_string(model_ids.size()) + " model ids");
    }
    std::vector<std::pair<std::string, Predictor>> predictors;
    predictors.reserve(models.size());
    for (size_t i = 0; i < models.size(); ++i) {
        MultiTaskNet* net = &models[i];
        predictors.emplace_back(model_ids[i], [net, tta = opts.tta](const Sample& s) {
            return predict_tta(*net, s.patch, tta);
        });
    }
    return evaluate_with(predictors, store, opts);
}

std::string format_report(const EvalReport& report) {
    std::ostringstream out;
    out << "# evaluation report\n";
    out << "config_digest: " << (report.config_digest.empty() ? "-" : report.config_digest) << "\n";
    out << "ensemble:";
    for (const auto& id : report.model_ids) out << ' ' << id;
    out << "\n";
    out << "tta_views: " << report.n_views << "\n";
    for (const auto& dr : report.per_domain) {
        out << "\n[domain " << dr.domain << "]\n";
        out << "samples: " << dr.confusion.total() << "\n";
        out << "tp: " << dr.confusion.tp << " fp: " << dr.confusion.fp << " tn: " << dr.confusion.tn
            << " fn: " << dr.confusion.fn << "\n";
        out << "balanced_accuracy: " << format_4(dr.balanced_accuracy) << "\n";
    }
    out << "\n[overall]\n";
    out << "samples: " << report.overall.total() << "\n";
    out << "tp: " << report.overall.tp << " fp: " << report.overall.fp << " tn: " << report.overall.tn
        << " fn: " << report.overall.fn << "\n";
    out << "balanced_accuracy: " << format_4(report.overall_balanced_accuracy) << "\n";
    return out.str();
}

void write_report(const std::string& path, const EvalReport& report) {
    auto out = open_out(path);
    out << format_report(report);
    if (!out) throw Error(ErrorCode::IoError, "failed writing '" + path + "'");
}

void write_predictions_csv(const std::string& path, const std::vector<PredictionRecord>& records) {
    auto out = open_out(path);
    out << "sample_id,model_id,p_atypical,predicted,n_views\n";
    for (const auto& r : records) {
        out << r.sample_id << ',' << r.model_id << ',' << format_g(r.p_atypical) << ','
            << to_string(r.predicted) << ',' << r.n_views << "\n";
    }
    if (!out) throw Error(ErrorCode::IoError, "failed writing '" + path + "'");
}

} // namespace mitl

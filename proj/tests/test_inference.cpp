#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mitl/augment.hpp"
#include "mitl/data.hpp"
#include "mitl/inference.hpp"
#include "mitl/losses.hpp"
#include "mitl/net.hpp"
#include "mitl/rng.hpp"
#include "test_support.hpp"

using namespace mitl;
using namespace mitl_test;

namespace {

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.input_size = 16;
    cfg.stem_channels = 4;
    cfg.stage_channels = {4, 6, 8, 10};
    cfg.cls_hidden = {8, 4};
    cfg.seed = 7;
    return cfg;
}

Tensor random_patch(int size, uint64_t seed) {
    Tensor t(1, 3, size, size);
    Rng rng(seed);
    for (auto& v : t.v) v = static_cast<float>(rng.uniform());
    return t;
}

SampleStore tiny_store(double ratio = 0.25, uint64_t seed = 42) {
    SyntheticSpec spec;
    spec.domains = 3;
    spec.per_domain = 8;
    spec.atypical_ratio = ratio;
    spec.patch_size = 16;
    return SampleStore(generate_synthetic(spec, seed));
}

PredictionRecord rec(const std::string& sample, const std::string& model, double p) {
    PredictionRecord r;
    r.sample_id = sample;
    r.model_id = model;
    r.p_atypical = p;
    r.predicted = p >= 0.5 ? Label::Atypical : Label::Typical;
    return r;
}

Predictor oracle_predictor() {
    return [](const Sample& s) { return s.label == Label::Atypical ? 0.9 : 0.1; };
}

} // namespace

TEST_CASE("tta prediction on a constant image matches the single view") {
    auto net = MultiTaskNet::build(tiny_model());
    Tensor patch(1, 3, 16, 16);
    patch.fill(0.37f);
    const double p8 = predict_tta(net, patch, true);
    const double p1 = predict_tta(net, patch, false);
    CHECK(std::abs(p8 - p1) < 1e-6);
    CHECK(p8 >= 0.0);
    CHECK(p8 <= 1.0);
}

TEST_CASE("input-independent classifier predicts sigmoid of its bias") {
    auto net = MultiTaskNet::build(tiny_model());
    const float bias = 0.3f;
    net.visit_params([&](const std::string& name, Tensor& t) {
        if (name == "cls.fc3.w") t.fill(0.0f);
        if (name == "cls.fc3.b") t.fill(bias);
    });
    const Tensor patch = random_patch(16, 3);
    const double expected = sigmoid(static_cast<double>(bias));
    CHECK(predict_tta(net, patch, true) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(predict_tta(net, patch, false) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("tta prediction equals an explicit mean over the eight dihedral views") {
    auto net = MultiTaskNet::build(tiny_model());
    const Tensor patch = random_patch(16, 11);

    double sum = 0.0;
    for (const auto& t : dihedral_group()) {
        const Tensor view = apply_dihedral(patch, t);
        const auto out = net.forward(view, BnMode::Eval, false);
        sum += sigmoid(static_cast<double>(out.cls_logit.v[0]));
    }
    const double oracle = sum / 8.0;

    CHECK(predict_tta(net, patch, true) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("tta prediction is invariant under any dihedral transform of the input") {
    auto net = MultiTaskNet::build(tiny_model());
    const Tensor patch = random_patch(16, 19);
    const double base = predict_tta(net, patch, true);
    for (const auto& t : dihedral_group()) {
        const Tensor moved = apply_dihedral(patch, t);
        CHECK(std::abs(predict_tta(net, moved, true) - base) < 1e-5);
    }
}

TEST_CASE("tta prediction works on a pruned model and rejects bad shapes") {
    auto net = MultiTaskNet::build(tiny_model());
    const Tensor patch = random_patch(16, 23);
    const double full = predict_tta(net, patch, true);
    auto pruned = net;
    pruned.prune();
    CHECK(predict_tta(pruned, patch, true) == doctest::Approx(full).epsilon(1e-12));

    CHECK_ERROR(predict_tta(net, Tensor(2, 3, 16, 16), true), ShapeMismatch);
    CHECK_ERROR(predict_tta(net, Tensor(1, 1, 16, 16), true), ShapeMismatch);
}

TEST_CASE("ensemble vote follows the strict majority for every 3- and 5-model pattern") {
    for (int k : {3, 5}) {
        for (int mask = 0; mask < (1 << k); ++mask) {
            std::vector<PredictionRecord> votes;
            int atypical = 0;
            for (int i = 0; i < k; ++i) {
                const bool a = (mask >> i) & 1;
                atypical += a ? 1 : 0;
                votes.push_back(rec("s0", "m" + std::to_string(i), a ? 0.9 : 0.1));
            }
            const Label expected = atypical * 2 > k ? Label::Atypical : Label::Typical;
            CHECK(ensemble_vote(votes) == expected);
        }
    }
}

TEST_CASE("ensemble vote is invariant to the order of predictions") {
    std::vector<PredictionRecord> votes = {rec("s0", "m0", 0.9), rec("s0", "m1", 0.2),
                                           rec("s0", "m2", 0.8), rec("s0", "m3", 0.1),
                                           rec("s0", "m4", 0.7)};
    const Label base = ensemble_vote(votes);
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        rng.shuffle(votes);
        CHECK(ensemble_vote(votes) == base);
    }
}

TEST_CASE("a tied vote falls back to the mean probability against 0.5") {
    // 0.9 vs 0.2: one vote each way, mean 0.55 -> Atypical.
    CHECK(ensemble_vote({rec("s0", "a", 0.9), rec("s0", "b", 0.2)}) == Label::Atypical);
    // Mean 0.35 -> Typical.
    CHECK(ensemble_vote({rec("s0", "a", 0.6), rec("s0", "b", 0.1)}) == Label::Typical);
    // Mean exactly 0.5 -> Atypical (threshold is >=).
    CHECK(ensemble_vote({rec("s0", "a", 0.7), rec("s0", "b", 0.3)}) == Label::Atypical);
}

TEST_CASE("ensemble vote rejects empty and mixed-sample inputs") {
    CHECK_ERROR(ensemble_vote({}), EmptyEnsemble);
    CHECK_ERROR(ensemble_vote({rec("s0", "a", 0.9), rec("s1", "b", 0.9)}), MixedSampleIds);
}

TEST_CASE("balanced accuracy matches hand-computed values") {
    CHECK(balanced_accuracy({3, 0, 5, 0}) == 1.0);
    CHECK(balanced_accuracy({0, 0, 5, 3}) == 0.5); // everything called Typical
    // recall 3/4, specificity 2/4 -> (0.75 + 0.5) / 2.
    CHECK(balanced_accuracy({3, 2, 2, 1}) == 0.625);
}

TEST_CASE("balanced accuracy is invariant to duplicating every sample k times") {
    const Confusion base{3, 2, 2, 1};
    const double expected = balanced_accuracy(base);
    for (int k : {2, 3, 7}) {
        const Confusion scaled{base.tp * k, base.fp * k, base.tn * k, base.fn * k};
        CHECK(balanced_accuracy(scaled) == expected);
    }
}

TEST_CASE("balanced accuracy is undefined when a class is absent") {
    CHECK_ERROR(balanced_accuracy({0, 2, 6, 0}), UndefinedClassRate);
    CHECK_ERROR(balanced_accuracy({3, 0, 0, 1}), UndefinedClassRate);
}

TEST_CASE("a perfect predictor evaluates to balanced accuracy 1 everywhere") {
    SampleStore store = tiny_store();
    const auto report = evaluate_with({{"oracle", oracle_predictor()}}, store);

    CHECK(report.overall_balanced_accuracy == 1.0);
    CHECK(report.overall.fp == 0);
    CHECK(report.overall.fn == 0);
    REQUIRE(report.per_domain.size() == 3);
    int total = 0;
    for (const auto& dr : report.per_domain) {
        CHECK(dr.balanced_accuracy == 1.0);
        total += dr.confusion.total();
    }
    CHECK(total == report.overall.total());
    CHECK(report.overall.total() == static_cast<int>(store.size()));
    CHECK(report.predictions.size() == store.size());
}

TEST_CASE("an always-typical predictor scores balanced accuracy 0.5") {
    SampleStore store = tiny_store();
    const auto report =
        evaluate_with({{"pessimist", [](const Sample&) { return 0.0; }}}, store);
    CHECK(report.overall_balanced_accuracy == 0.5);
    CHECK(report.overall.tp == 0);
    CHECK(report.overall.fp == 0);
}

TEST_CASE("an ensemble of three identical models reproduces the single-model report") {
    SampleStore store = tiny_store();
    const auto single = evaluate_with({{"m0", oracle_predictor()}}, store);
    const auto triple = evaluate_with(
        {{"m0", oracle_predictor()}, {"m1", oracle_predictor()}, {"m2", oracle_predictor()}},
        store);

    CHECK(triple.model_ids == std::vector<std::string>{"m0", "m1", "m2"});
    CHECK(triple.predictions.size() == 3 * single.predictions.size());
    CHECK(triple.overall_balanced_accuracy == single.overall_balanced_accuracy);
    REQUIRE(triple.per_domain.size() == single.per_domain.size());
    for (size_t i = 0; i < triple.per_domain.size(); ++i) {
        CHECK(triple.per_domain[i].confusion.tp == single.per_domain[i].confusion.tp);
        CHECK(triple.per_domain[i].confusion.fp == single.per_domain[i].confusion.fp);
        CHECK(triple.per_domain[i].confusion.tn == single.per_domain[i].confusion.tn);
        CHECK(triple.per_domain[i].confusion.fn == single.per_domain[i].confusion.fn);
    }
}

TEST_CASE("evaluation respects the domain filter and validates it") {
    SampleStore store = tiny_store();
    EvalOptions opts;
    opts.domains = {"d0"};
    const auto report = evaluate_with({{"oracle", oracle_predictor()}}, store, opts);
    REQUIRE(report.per_domain.size() == 1);
    CHECK(report.per_domain[0].domain == "d0");
    CHECK(report.overall.total() == 8);

    opts.domains = {"nope"};
    CHECK_ERROR(evaluate_with({{"oracle", oracle_predictor()}}, store, opts), MissingDomain);
}

TEST_CASE("evaluation errors on empty ensembles and single-class data") {
    SampleStore store = tiny_store();
    CHECK_ERROR(evaluate_with({}, store), EmptyEnsemble);

    SampleStore all_typical = tiny_store(0.0);
    CHECK_ERROR(evaluate_with({{"oracle", oracle_predictor()}}, all_typical),
                UndefinedClassRate);
}

TEST_CASE("evaluation with real networks records bounded probabilities and view counts") {
    SampleStore store = tiny_store();
    std::vector<MultiTaskNet> models;
    models.push_back(MultiTaskNet::build(tiny_model()));
    models.back().prune();

    EvalOptions opts;
    opts.domains = {"d0"};
    const auto report = evaluate(models, {"fold-0"}, store, opts);
    CHECK(report.n_views == 8);
    REQUIRE(report.predictions.size() == 8);
    for (const auto& r : report.predictions) {
        CHECK(r.model_id == "fold-0");
        CHECK(r.n_views == 8);
        CHECK(r.p_atypical >= 0.0);
        CHECK(r.p_atypical <= 1.0);
        CHECK((r.predicted == Label::Atypical) == (r.p_atypical >= 0.5));
    }

    // The network path is exactly the injected-predictor path with predict_tta.
    MultiTaskNet* net = &models[0];
    const auto by_hand = evaluate_with(
        {{"fold-0", [net](const Sample& s) { return predict_tta(*net, s.patch, true); }}},
        store, opts);
    for (size_t i = 0; i < report.predictions.size(); ++i) {
        CHECK(report.predictions[i].p_atypical == by_hand.predictions[i].p_atypical);
    }

    opts.tta = false;
    const auto fast = evaluate(models, {"fold-0"}, store, opts);
    CHECK(fast.n_views == 1);
    for (const auto& r : fast.predictions) CHECK(r.n_views == 1);

    CHECK_ERROR(evaluate(models, {"a", "b"}, store, opts), InvalidConfig);
}

TEST_CASE("evaluation results are independent of the worker count") {
    SampleStore store = tiny_store();
    std::vector<MultiTaskNet> models;
    models.push_back(MultiTaskNet::build(tiny_model()));

    EvalOptions serial;
    serial.jobs = 1;
    EvalOptions parallel;
    parallel.jobs = 3;
    const auto a = evaluate(models, {"m"}, store, serial);
    const auto b = evaluate(models, {"m"}, store, parallel);

    REQUIRE(a.predictions.size() == b.predictions.size());
    for (size_t i = 0; i < a.predictions.size(); ++i) {
        CHECK(a.predictions[i].sample_id == b.predictions[i].sample_id);
        CHECK(a.predictions[i].p_atypical == b.predictions[i].p_atypical);
    }
    CHECK(a.overall.tp == b.overall.tp);
    CHECK(a.overall.fp == b.overall.fp);
    CHECK(a.overall.tn == b.overall.tn);
    CHECK(a.overall.fn == b.overall.fn);
    CHECK(a.overall_balanced_accuracy == b.overall_balanced_accuracy);

    TempDir tmp;
    write_report(tmp.file("a.txt"), a);
    write_report(tmp.file("b.txt"), b);
    CHECK(read_bytes(tmp.file("a.txt")) == read_bytes(tmp.file("b.txt")));
}

TEST_CASE("prediction csv and report files are deterministic and well-formed") {
    SampleStore store = tiny_store();
    EvalOptions opts;
    opts.config_digest = "deadbeefdeadbeef";
    const auto report = evaluate_with({{"oracle", oracle_predictor()}}, store, opts);

    TempDir tmp;
    const std::string csv = tmp.file("predictions.csv");
    const std::string rpt = tmp.file("report.txt");
    write_predictions_csv(csv, report.predictions);
    write_report(rpt, report);

    const auto csv_bytes = read_bytes(csv);
    const auto rpt_bytes = read_bytes(rpt);
    write_predictions_csv(csv, report.predictions);
    write_report(rpt, report);
    CHECK(read_bytes(csv) == csv_bytes);
    CHECK(read_bytes(rpt) == rpt_bytes);

    const std::string csv_text(csv_bytes.begin(), csv_bytes.end());
    CHECK(csv_text.rfind("sample_id,model_id,p_atypical,predicted,n_views\n", 0) == 0);
    const std::string first = store.desc(0).id;
    const std::string expect_row =
        first + ",oracle," + (store.get(0).label == Label::Atypical ? "0.9,atypical" : "0.1,typical") +
        ",8\n";
    CHECK(csv_text.find(expect_row) != std::string::npos);
    CHECK(std::count(csv_text.begin(), csv_text.end(), '\n') ==
          1 + static_cast<long>(report.predictions.size()));

    const std::string rpt_text(rpt_bytes.begin(), rpt_bytes.end());
    CHECK(rpt_text.find("config_digest: deadbeefdeadbeef") != std::string::npos);
    CHECK(rpt_text.find("ensemble: oracle") != std::string::npos);
    CHECK(rpt_text.find("[domain d0]") != std::string::npos);
    CHECK(rpt_text.find("[domain d1]") != std::string::npos);
    CHECK(rpt_text.find("[domain d2]") != std::string::npos);
    CHECK(rpt_text.find("[overall]") != std::string::npos);
    CHECK(rpt_text.find("balanced_accuracy: 1.0000") != std::string::npos);
    CHECK(rpt_text.find("samples: 24") != std::string::npos);
}

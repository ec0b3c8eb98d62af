#include "mitl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace mitl {

std::vector<FoldSpec> plan_lodo_folds(const std::vector<std::string>& domains) {
    const size_t d = domains.size();
    if (d < 3)
        throw Error(ErrorCode::TooFewDomains,
                    "leave-one-domain-out needs >= 3 domains, got " + std::to_string(d));
    std::vector<FoldSpec> folds;
    for (size_t i = 0; i < d; ++i) {
        FoldSpec fold;
        fold.test_domain = domains[i];
        fold.val_domain = domains[(i + 1) % d];
        for (const auto& dom : domains)
            if (dom != fold.test_domain && dom != fold.val_domain)
                fold.train_domains.push_back(dom);
        folds.push_back(std::move(fold));
    }
    return folds;
}

void adam_update(Tensor& param, const Tensor& grad, TensorT<double>& m, TensorT<double>& v,
                 int64_t step, double lr, double beta1, double beta2, double eps) {
    grad.require_shape(param.n, param.c, param.h, param.w, "adam gradient");
    m.require_shape(param.n, param.c, param.h, param.w, "adam first moment");
    v.require_shape(param.n, param.c, param.h, param.w, "adam second moment");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] = static_cast<float>(param[i] - lr * mhat / (std::sqrt(vhat) + eps));
    }
}

void adam_step(MultiTaskNet& net, const ParamGrads& grads, AdamState& state,
               const TrainConfig& cfg) {
    ++state.step;
    net.visit_params([&](const std::string& name, Tensor& param) {
        auto it = grads.find(name);
        if (it == grads.end()) return;
        auto mi = state.m.find(name);
        if (mi == state.m.end()) {
            mi = state.m.emplace(name, TensorT<double>(param.n, param.c, param.h, param.w)).first;
            state.v.emplace(name, TensorT<double>(param.n, param.c, param.h, param.w));
        }
        adam_update(param, it->second, mi->second, state.v.at(name), state.step,
                    cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    });
}

namespace {

struct Batch {
    Tensor patches;            // {B,3,H,W}
    std::vector<Label> labels;
    TensorT<double> masks;     // {B,1,H,W}
    TensorT<double> maps;      // {B,3,H,W} one-hot
};

// Assembles samples [first, last) of `order` into batch tensors, optionally
// drawing and applying one augmentation per sample (in order, so the random
// stream is reproducible).
Batch assemble_batch(const SampleStore& store, const std::vector<size_t>& order, size_t first,
                     size_t last, int size, Rng* aug_rng, const AugConfig& aug_cfg) {
    const int b = static_cast<int>(last - first);
    Batch batch;
    batch.patches = Tensor(b, 3, size, size);
    Tensor masks_f(b, 1, size, size);
    Tensor maps_f(b, 1, size, size);
    for (size_t k = first; k < last; ++k) {
        const Sample& s = store.get(order[k]);
        s.patch.require_shape(1, 3, size, size, "training patch");
        Tensor patch = s.patch;
        Tensor mask = s.binary_mask;
        Tensor map = s.pixel_class_map;
        if (aug_rng) {
            const TrainingAugmentation aug = sample_training_augmentation(*aug_rng, aug_cfg);
            if (aug_cfg.enable_dihedral) {
                patch = apply_dihedral(patch, aug.dihedral);
                mask = apply_dihedral(mask, aug.dihedral);
                map = apply_dihedral(map, aug.dihedral);
            }
            if (aug_cfg.enable_stain) patch = stain_augment(patch, aug.stain);
        }
        const int i = static_cast<int>(k - first);
        batch.labels.push_back(s.label);
        std::copy(patch.data(), patch.data() + patch.size(), batch.patches.plane(i, 0));
        std::copy(mask.data(), mask.data() + mask.size(), masks_f.plane(i, 0));
        std::copy(map.data(), map.data() + map.size(), maps_f.plane(i, 0));
    }
    batch.masks = masks_f.cast<double>();
    batch.maps = one_hot_pixels(maps_f, 3);
    return batch;
}

LossBreakdown bce_only(const TensorT<double>& cls_logits, const std::vector<Label>& labels,
                       const ClassWeights& weights, const LossConfig& loss_cfg,
                       TensorT<double>* g_cls) {
    LossBreakdown out;
    out.l_cls = loss_cfg.coefficients[0] *
                weighted_bce(cls_logits, labels, weights, loss_cfg.eps_prob, g_cls);
    if (g_cls)
        for (size_t i = 0; i < g_cls->size(); ++i) (*g_cls)[i] *= loss_cfg.coefficients[0];
    out.total = out.l_cls;
    return out;
}

void accumulate(LossBreakdown& sum, const LossBreakdown& term, double weight) {
    sum.l_cls += weight * term.l_cls;
    sum.l_seg += weight * term.l_seg;
    sum.l_pix += weight * term.l_pix;
    sum.total += weight * term.total;
}

LossBreakdown scaled(const LossBreakdown& sum, double inv) {
    return LossBreakdown{sum.l_cls * inv, sum.l_seg * inv, sum.l_pix * inv, sum.total * inv};
}

} // namespace

FoldResult train_fold(const SampleStore& store, const FoldSpec& fold,
                      const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                      const AugConfig& aug_cfg, const LossConfig& loss_cfg) {
    train_cfg.validate();
    const DatasetManifest& manifest = store.manifest();
    for (const auto& d : fold.train_domains)
        if (manifest.domain_index(d) < 0)
            throw Error(ErrorCode::MissingDomain, "training domain not in dataset: " + d);
    if (manifest.domain_index(fold.val_domain) < 0)
        throw Error(ErrorCode::MissingDomain, "validation domain not in dataset: " + fold.val_domain);
    if (manifest.domain_index(fold.test_domain) < 0)
        throw Error(ErrorCode::MissingDomain, "test domain not in dataset: " + fold.test_domain);

    const ClassCount train_counts = manifest.counts_over(fold.train_domains);
    if (train_counts.typical == 0 || train_counts.atypical == 0)
        throw Error(ErrorCode::SingleClassTraining,
                    "training domains contain a single class: typical=" +
                        std::to_string(train_counts.typical) +
                        " atypical=" + std::to_string(train_counts.atypical));
    const ClassWeights weights = compute_class_weights(train_counts);

    const std::vector<size_t> train_indices = store.indices_of(fold.train_domains);
    const std::vector<size_t> val_indices = store.indices_of({fold.val_domain});
    const int size = model_cfg.input_size;
    const size_t bs = static_cast<size_t>(train_cfg.batch_size);

    MultiTaskNet net = MultiTaskNet::build(model_cfg);
    AdamState adam;

    FoldResult result;
    result.n_train = train_indices.size();
    result.n_val = val_indices.size();

    for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng rng(mix_seed(train_cfg.seed, static_cast<uint64_t>(epoch)));
        std::vector<size_t> order = train_indices;
        rng.shuffle(order);

        LossBreakdown train_sum;
        for (size_t first = 0; first < order.size(); first += bs) {
            const size_t last = std::min(first + bs, order.size());
            Batch batch = assemble_batch(store, order, first, last, size, &rng, aug_cfg);

            ForwardCache cache;
            ForwardOutput out =
                net.forward(batch.patches, BnMode::Train, train_cfg.multitask, &cache);

            const auto cls_d = out.cls_logit.cast<double>();
            TensorT<double> g_cls_d, g_seg_d, g_pix_d;
            LossBreakdown loss;
            if (train_cfg.multitask) {
                loss = composite_loss(cls_d, out.seg_logits.cast<double>(),
                                      out.pix_logits.cast<double>(), batch.labels, batch.masks,
                                      batch.maps, weights, loss_cfg, &g_cls_d, &g_seg_d,
                                      &g_pix_d);
            } else {
                loss = bce_only(cls_d, batch.labels, weights, loss_cfg, &g_cls_d);
            }
            accumulate(train_sum, loss, static_cast<double>(last - first));

            const Tensor g_cls = g_cls_d.cast<float>();
            ParamGrads grads;
            if (train_cfg.multitask) {
                const Tensor g_seg = g_seg_d.cast<float>();
                const Tensor g_pix = g_pix_d.cast<float>();
                grads = net.backward(cache, g_cls, &g_seg, &g_pix);
            } else {
                grads = net.backward(cache, g_cls, nullptr, nullptr);
            }
            adam_step(net, grads, adam, train_cfg);
        }

        // Validation in inference mode, no augmentation.
        LossBreakdown val_sum;
        for (size_t first = 0; first < val_indices.size(); first += bs) {
            const size_t last = std::min(first + bs, val_indices.size());
            Batch batch = assemble_batch(store, val_indices, first, last, size, nullptr, aug_cfg);
            ForwardOutput out = net.forward(batch.patches, BnMode::Eval, train_cfg.multitask);
            const auto cls_d = out.cls_logit.cast<double>();
            LossBreakdown loss;
            if (train_cfg.multitask)
                loss = composite_loss(cls_d, out.seg_logits.cast<double>(),
                                      out.pix_logits.cast<double>(), batch.labels, batch.masks,
                                      batch.maps, weights, loss_cfg);
            else
                loss = bce_only(cls_d, batch.labels, weights, loss_cfg, nullptr);
            accumulate(val_sum, loss, static_cast<double>(last - first));
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train = scaled(train_sum, 1.0 / static_cast<double>(train_indices.size()));
        rec.val = scaled(val_sum, 1.0 / static_cast<double>(val_indices.size()));
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.records.push_back(rec);

        if (result.best_epoch == 0 || rec.val.total < result.best_val_total) {
            result.best_epoch = epoch;
            result.best_val_total = rec.val.total;
            result.model = net;
        }
    }
    return result;
}

void write_epochs_csv(const std::string& path, const std::vector<EpochRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open for writing: " + path);
    out << "epoch,train_cls,train_seg,train_pix,train_total,val_cls,val_seg,val_pix,val_total\n";
    char line[256];
    for (const auto& r : records) {
        std::snprintf(line, sizeof(line), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      r.epoch, r.train.l_cls, r.train.l_seg, r.train.l_pix, r.train.total,
                      r.val.l_cls, r.val.l_seg, r.val.l_pix, r.val.total);
        out << line;
    }
    if (!out.flush()) throw Error(ErrorCode::IoError, "write failed: " + path);
}

void write_fold_json(const std::string& path, const FoldSpec& fold, const FoldResult& result,
                     const TrainConfig& train_cfg) {
    nlohmann::json j;
    j["fold"] = {{"train_domains", fold.train_domains},
                 {"val_domain", fold.val_domain},
                 {"test_domain", fold.test_domain}};
    j["best_epoch"] = result.best_epoch;
    j["best_val_total"] = result.best_val_total;
    j["epochs"] = result.records.size();
    j["n_train"] = result.n_train;
    j["n_val"] = result.n_val;
    j["multitask"] = train_cfg.multitask;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out.flush()) throw Error(ErrorCode::IoError, "write failed: " + path);
}

} // namespace mitl

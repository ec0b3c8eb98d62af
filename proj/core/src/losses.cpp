#include "mitl/losses.hpp"

#include <algorithm>
#include <string>

namespace mitl {

ClassWeights compute_class_weights(const ClassCount& counts) {
    if (counts.typical < 1 || counts.atypical < 1)
        throw Error(ErrorCode::EmptyClass,
                    "class weights need both classes present, got typical=" +
                        std::to_string(counts.typical) +
                        " atypical=" + std::to_string(counts.atypical));
    const double n = counts.typical + counts.atypical;
    return ClassWeights{n / (2.0 * counts.typical), n / (2.0 * counts.atypical)};
}

double weighted_bce(const TensorT<double>& logits, const std::vector<Label>& labels,
                    const ClassWeights& weights, double eps_prob, TensorT<double>* grad) {
    logits.require_shape(static_cast<int>(labels.size()), 1, 1, 1, "bce logits");
    const int n = logits.n;
    if (grad) *grad = TensorT<double>(n, 1, 1, 1);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double p_raw = sigmoid(logits[static_cast<size_t>(i)]);
        const double p = std::clamp(p_raw, eps_prob, 1.0 - eps_prob);
        const double y = labels[static_cast<size_t>(i)] == Label::Atypical ? 1.0 : 0.0;
        const double w = weight_for(weights, labels[static_cast<size_t>(i)]);
        total += -w * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
        if (grad) {
            // The clamp is constant outside (eps, 1-eps), so its gradient
            // vanishes there — this also guards the saturated tails.
            double g = 0.0;
            if (p_raw > eps_prob && p_raw < 1.0 - eps_prob)
                g = -w * (y / p - (1.0 - y) / (1.0 - p)) * p_raw * (1.0 - p_raw) / n;
            (*grad)[static_cast<size_t>(i)] = g;
        }
    }
    return total / n;
}

double dice_loss(const TensorT<double>& probs, const TensorT<double>& target, double eps_dice,
                 TensorT<double>* grad) {
    target.require_shape(probs.n, probs.c, probs.h, probs.w, "dice target");
    const int n = probs.n, c = probs.c, hw = probs.h * probs.w;
    const int c_begin = c == 1 ? 0 : 1; // skip the background channel when present
    const int fg_classes = c - c_begin;
    if (grad) {
        *grad = TensorT<double>(probs.n, probs.c, probs.h, probs.w);
    }
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double sample_mean = 0.0;
        for (int ch = c_begin; ch < c; ++ch) {
            const double* p = probs.plane(i, ch);
            const double* t = target.plane(i, ch);
            double inter = 0.0, psum = 0.0, tsum = 0.0;
            for (int j = 0; j < hw; ++j) {
                inter += p[j] * t[j];
                psum += p[j];
                tsum += t[j];
            }
            const double num = 2.0 * inter + eps_dice;
            const double den = psum + tsum + eps_dice;
            sample_mean += num / den;
            if (grad) {
                // d(1 - num/den)/dp_j = -(2 t_j den - num) / den^2, then the
                // two means contribute 1/(fg_classes * n).
                double* g = grad->plane(i, ch);
                const double scale = -1.0 / (static_cast<double>(fg_classes) * n);
                for (int j = 0; j < hw; ++j)
                    g[j] = scale * (2.0 * t[j] * den - num) / (den * den);
            }
        }
        total += 1.0 - sample_mean / fg_classes;
    }
    return total / n;
}

LossBreakdown composite_loss(const TensorT<double>& cls_logits, const TensorT<double>& seg_logits,
                             const TensorT<double>& pix_logits, const std::vector<Label>& labels,
                             const TensorT<double>& masks, const TensorT<double>& class_maps,
                             const ClassWeights& weights, const LossConfig& cfg,
                             TensorT<double>* g_cls, TensorT<double>* g_seg,
                             TensorT<double>* g_pix) {
    const int n = cls_logits.n, h = seg_logits.h, w = seg_logits.w;
    seg_logits.require_shape(n, 1, h, w, "seg logits");
    pix_logits.require_shape(n, 3, h, w, "pix logits");
    masks.require_shape(n, 1, h, w, "binary masks");
    class_maps.require_shape(n, 3, h, w, "one-hot class maps");

    LossBreakdown out;
    out.l_cls =
        cfg.coefficients[0] * weighted_bce(cls_logits, labels, weights, cfg.eps_prob, g_cls);
    if (g_cls)
        for (size_t i = 0; i < g_cls->size(); ++i) (*g_cls)[i] *= cfg.coefficients[0];

    // Binary head: probabilities via sigmoid, chain rule p(1-p).
    TensorT<double> seg_probs(n, 1, h, w);
    for (size_t i = 0; i < seg_probs.size(); ++i) seg_probs[i] = sigmoid(seg_logits[i]);
    TensorT<double> g_seg_probs;
    out.l_seg = cfg.coefficients[1] *
                dice_loss(seg_probs, masks, cfg.eps_dice, g_seg ? &g_seg_probs : nullptr);
    if (g_seg) {
        *g_seg = TensorT<double>(n, 1, h, w);
        for (size_t i = 0; i < g_seg->size(); ++i)
            (*g_seg)[i] =
                cfg.coefficients[1] * g_seg_probs[i] * seg_probs[i] * (1.0 - seg_probs[i]);
    }

    // Pixel-class head: per-pixel softmax over 3 channels.
    TensorT<double> pix_probs(n, 3, h, w);
    const int hw = h * w;
    for (int i = 0; i < n; ++i) {
        const double* z0 = pix_logits.plane(i, 0);
        const double* z1 = pix_logits.plane(i, 1);
        const double* z2 = pix_logits.plane(i, 2);
        double* p0 = pix_probs.plane(i, 0);
        double* p1 = pix_probs.plane(i, 1);
        double* p2 = pix_probs.plane(i, 2);
        for (int j = 0; j < hw; ++j) {
            const double m = std::max({z0[j], z1[j], z2[j]});
            const double e0 = std::exp(z0[j] - m), e1 = std::exp(z1[j] - m),
                         e2 = std::exp(z2[j] - m);
            const double s = e0 + e1 + e2;
            p0[j] = e0 / s;
            p1[j] = e1 / s;
            p2[j] = e2 / s;
        }
    }
    TensorT<double> g_pix_probs;
    out.l_pix = cfg.coefficients[2] *
                dice_loss(pix_probs, class_maps, cfg.eps_dice, g_pix ? &g_pix_probs : nullptr);
    if (g_pix) {
        // dL/dz_k = p_k (dL/dp_k - sum_c dL/dp_c p_c) per pixel.
        *g_pix = TensorT<double>(n, 3, h, w);
        for (int i = 0; i < n; ++i) {
            std::array<const double*, 3> p{pix_probs.plane(i, 0), pix_probs.plane(i, 1),
                                           pix_probs.plane(i, 2)};
            std::array<const double*, 3> gp{g_pix_probs.plane(i, 0), g_pix_probs.plane(i, 1),
                                            g_pix_probs.plane(i, 2)};
            std::array<double*, 3> gz{g_pix->plane(i, 0), g_pix->plane(i, 1),
                                      g_pix->plane(i, 2)};
            for (int j = 0; j < hw; ++j) {
                const double dot =
                    gp[0][j] * p[0][j] + gp[1][j] * p[1][j] + gp[2][j] * p[2][j];
                for (int k = 0; k < 3; ++k)
                    gz[static_cast<size_t>(k)][j] = cfg.coefficients[2] *
                                                    p[static_cast<size_t>(k)][j] *
                                                    (gp[static_cast<size_t>(k)][j] - dot);
            }
        }
    }

    out.total = out.l_cls + out.l_seg + out.l_pix;
    return out;
}

TensorT<double> one_hot_pixels(const Tensor& class_map, int classes) {
    TensorT<double> out(class_map.n, classes, class_map.h, class_map.w);
    const int hw = class_map.h * class_map.w;
    for (int i = 0; i < class_map.n; ++i) {
        const float* src = class_map.plane(i, 0);
        for (int j = 0; j < hw; ++j) {
            const int cls = static_cast<int>(src[j]);
            if (cls < 0 || cls >= classes || static_cast<float>(cls) != src[j])
                throw Error(ErrorCode::ShapeMismatch,
                            "class map value " + std::to_string(src[j]) +
                                " outside 0.." + std::to_string(classes - 1));
            out.plane(i, cls)[j] = 1.0;
        }
    }
    return out;
}

} // namespace mitl

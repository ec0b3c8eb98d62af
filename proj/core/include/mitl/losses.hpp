#ifndef MITL_LOSSES_HPP
#define MITL_LOSSES_HPP

#include <array>
#include <cmath>
#include <vector>

#include "mitl/data.hpp"
#include "mitl/tensor.hpp"

// Training objective. Everything here runs in double precision regardless of
// the network's scalar type: logits are a handful of megabytes at most, and
// exact, checkable arithmetic matters more than speed in this layer.

namespace mitl {

// Inverse-frequency class weights, w_c = N / (2 n_c). The factor 2 makes the
// frequency-weighted mean over the dataset equal one: n_t w_t + n_a w_a = N.
struct ClassWeights {
    double w_typical = 1.0;
    double w_atypical = 1.0;
};

ClassWeights compute_class_weights(const ClassCount& counts);

inline double weight_for(const ClassWeights& w, Label label) {
    return label == Label::Atypical ? w.w_atypical : w.w_typical;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct LossConfig {
    double eps_prob = 1e-7; // probability clamp inside the cross entropy
    double eps_dice = 1.0;  // smoothing added to Dice numerator and denominator
    std::array<double, 3> coefficients{1.0, 1.0, 1.0}; // cls, seg, pix
};

// Mean over the batch of -w_a y log p - w_t (1-y) log(1-p) with p = sigmoid
// of the logit clamped to [eps_prob, 1-eps_prob] and y = 1 iff Atypical.
// logits are {N,1,1,1}. If grad is non-null it receives dLoss/dlogit (zero
// where the clamp saturates).
double weighted_bce(const TensorT<double>& logits, const std::vector<Label>& labels,
                    const ClassWeights& weights, double eps_prob = 1e-7,
                    TensorT<double>* grad = nullptr);

// Soft Dice loss on probabilities. Per sample and class,
// d_c = (2 sum(p t) + eps) / (sum p + sum t + eps); the loss is 1 minus the
// mean of d_c over foreground-relevant classes (the single channel when C=1,
// classes 1..C-1 otherwise), averaged over the batch. `target` is one-hot
// across channels and shaped like `probs`. grad receives dLoss/dprobs.
double dice_loss(const TensorT<double>& probs, const TensorT<double>& target,
                 double eps_dice = 1.0, TensorT<double>* grad = nullptr);

struct LossBreakdown {
    double l_cls = 0.0;
    double l_seg = 0.0;
    double l_pix = 0.0;
    double total = 0.0; // always exactly l_cls + l_seg + l_pix
};

// Full objective on raw network outputs: weighted cross entropy on the
// classification logit, Dice on sigmoid(seg_logits) against the binary mask,
// Dice on per-pixel softmax(pix_logits) against the one-hot class map.
// Breakdown fields carry the configured coefficients (unit by default).
// Non-null g_* receive gradients of `total` w.r.t. the corresponding logits.
LossBreakdown composite_loss(const TensorT<double>& cls_logits, // {N,1,1,1}
                             const TensorT<double>& seg_logits, // {N,1,H,W}
                             const TensorT<double>& pix_logits, // {N,3,H,W}
                             const std::vector<Label>& labels,
                             const TensorT<double>& masks,      // {N,1,H,W}, 0/1
                             const TensorT<double>& class_maps, // {N,3,H,W}, one-hot
                             const ClassWeights& weights, const LossConfig& cfg = {},
                             TensorT<double>* g_cls = nullptr, TensorT<double>* g_seg = nullptr,
                             TensorT<double>* g_pix = nullptr);

// Expands a {N,1,H,W} integer-valued class map into one-hot {N,classes,H,W}.
TensorT<double> one_hot_pixels(const Tensor& class_map, int classes);

} // namespace mitl

#endif

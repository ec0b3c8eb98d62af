#ifndef MITL_NET_HPP
#define MITL_NET_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mitl/kernels.hpp"
#include "mitl/rng.hpp"
#include "mitl/tensor.hpp"

namespace mitl {

// Topology of the shared encoder and the three task heads. stage_channels[0]
// is the full-resolution stage after the stem; the remaining three stages
// each halve the spatial dimensions, so input_size must be divisible by 8.
struct ModelConfig {
    int input_size = 64;
    int stem_channels = 16;
    std::array<int, 4> stage_channels{16, 32, 64, 128};
    int blocks_per_stage = 1;
    std::array<int, 2> cls_hidden{64, 32};
    uint64_t seed = 0;

    bool operator==(const ModelConfig&) const = default;

    // Shape compatibility: every field but the init seed. Ensembles of
    // per-fold checkpoints agree on this even though their seeds differ.
    bool same_architecture(const ModelConfig& o) const {
        return input_size == o.input_size && stem_channels == o.stem_channels &&
               stage_channels == o.stage_channels && blocks_per_stage == o.blocks_per_stage &&
               cls_hidden == o.cls_hidden;
    }

    void validate() const {
        if (input_size < 8 || input_size % 8 != 0)
            throw Error(ErrorCode::InvalidConfig,
                        "input_size must be a positive multiple of 8, got " +
                            std::to_string(input_size));
        if (stem_channels < 1) throw Error(ErrorCode::InvalidConfig, "stem_channels must be >= 1");
        for (int c : stage_channels)
            if (c < 1) throw Error(ErrorCode::InvalidConfig, "stage widths must be >= 1");
        for (int c : cls_hidden)
            if (c < 1) throw Error(ErrorCode::InvalidConfig, "cls_hidden widths must be >= 1");
        if (blocks_per_stage < 1)
            throw Error(ErrorCode::InvalidConfig, "blocks_per_stage must be >= 1");
    }

    std::string to_string() const {
        std::string s = "input_size=" + std::to_string(input_size) +
                        " stem=" + std::to_string(stem_channels) + " stages=";
        for (int i = 0; i < 4; ++i)
            s += (i ? "/" : "") + std::to_string(stage_channels[i]);
        s += " blocks=" + std::to_string(blocks_per_stage) + " cls_hidden=" +
             std::to_string(cls_hidden[0]) + "/" + std::to_string(cls_hidden[1]) +
             " seed=" + std::to_string(seed);
        return s;
    }
};

enum class BnMode { Train, Eval };

template <class T>
struct ConvLayerT {
    TensorT<T> w; // [Cout,Cin,K,K]
    TensorT<T> b; // [Cout,1,1,1] or empty
    int stride = 1;
    int pad = 0;
};

template <class T>
struct BnLayerT {
    TensorT<T> gamma, beta;
    TensorT<T> running_mean, running_var;
};

// Pre-activation residual block: bn -> relu -> conv3x3 (maybe strided) ->
// bn -> relu -> conv3x3, plus a shortcut. The identity shortcut taps the raw
// input; when the block changes resolution or width, the shortcut is a
// strided 1x1 projection of the pre-activated input instead.
template <class T>
struct PreActBlockT {
    BnLayerT<T> bn1;
    ConvLayerT<T> conv1;
    BnLayerT<T> bn2;
    ConvLayerT<T> conv2;
    ConvLayerT<T> proj; // empty weight when the shortcut is the identity
    bool has_proj() const { return !proj.w.empty(); }
};

// One decoder step: x2 upsample, concat the encoder skip, then two
// (conv -> bn -> relu) layers.
template <class T>
struct DecoderBlockT {
    ConvLayerT<T> conv_a;
    BnLayerT<T> bn_a;
    ConvLayerT<T> conv_b;
    BnLayerT<T> bn_b;
};

template <class T>
struct DecoderT {
    std::array<DecoderBlockT<T>, 3> blocks;
    ConvLayerT<T> head; // 1x1, with bias
};

template <class T>
struct ForwardOutputT {
    TensorT<T> cls_logit;   // [N,1,1,1]
    TensorT<T> seg_logits;  // [N,1,H,W] (empty when decoders are skipped)
    TensorT<T> pix_logits;  // [N,3,H,W] (empty when decoders are skipped)
};

// Saved activations for one forward pass, consumed by backward().
template <class T>
struct BlockCacheT {
    TensorT<T> x;
    BatchNormCache<T> bn1c;
    TensorT<T> a1; // relu(bn1(x))
    BatchNormCache<T> bn2c;
    TensorT<T> a2;
};

template <class T>
struct DecoderBlockCacheT {
    TensorT<T> cat; // [upsampled ; skip]
    int skip_channels = 0;
    BatchNormCache<T> bn_a_c;
    TensorT<T> a1;
    BatchNormCache<T> bn_b_c;
    TensorT<T> a2; // block output
};

template <class T>
struct ForwardCacheT {
    TensorT<T> input;
    std::vector<BlockCacheT<T>> blocks;      // encoder blocks in order
    std::array<TensorT<T>, 3> skips;         // stage outputs at /1, /2, /4
    BatchNormCache<T> final_bn_c;
    TensorT<T> deepest; // relu(final_bn(stage3_out))
    TensorT<T> pooled;  // gap output
    TensorT<T> fc1_act, fc2_act;
    std::array<DecoderBlockCacheT<T>, 3> seg_blocks, pix_blocks;
    bool with_decoders = false;
};

template <class T>
using ParamGradsT = std::map<std::string, TensorT<T>>;

template <class T>
class MultiTaskNetT {
public:
    static MultiTaskNetT build(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    bool pruned() const { return pruned_; }

    // `with_decoders` selects whether the dense heads run; it must be false
    // on a pruned model. `cache` is required for a subsequent backward().
    ForwardOutputT<T> forward(const TensorT<T>& batch, BnMode mode, bool with_decoders,
                              ForwardCacheT<T>* cache = nullptr);

    // Gradients w.r.t. every learnable parameter given gradients on the raw
    // logits. Null dense gradients are treated as zero (their heads are
    // skipped entirely, matching a forward with with_decoders=false).
    ParamGradsT<T> backward(const ForwardCacheT<T>& cache, const TensorT<T>& g_cls,
                            const TensorT<T>* g_seg, const TensorT<T>* g_pix) const;

    // Drops both dense decoders; only the classification path remains.
    void prune();

    void visit_params(const std::function<void(const std::string&, TensorT<T>&)>& fn);
    void visit_params(const std::function<void(const std::string&, const TensorT<T>&)>& fn) const;
    void visit_buffers(const std::function<void(const std::string&, TensorT<T>&)>& fn);
    void visit_buffers(const std::function<void(const std::string&, const TensorT<T>&)>& fn) const;

    size_t param_count() const;

private:
    ModelConfig cfg_;
    bool pruned_ = false;

    ConvLayerT<T> stem_;
    std::vector<std::vector<PreActBlockT<T>>> stages_; // [4][blocks_per_stage]
    BnLayerT<T> final_bn_;
    ConvLayerT<T> fc1_, fc2_, fc3_;
    DecoderT<T> seg_, pix_;

    static constexpr double kBnEps = 1e-5;
    static constexpr double kBnMomentum = 0.1;

    TensorT<T> run_block(PreActBlockT<T>& blk, const TensorT<T>& x, BnMode mode,
                         BlockCacheT<T>* cache);
    TensorT<T> run_decoder_block(DecoderBlockT<T>& blk, const TensorT<T>& x,
                                 const TensorT<T>& skip, BnMode mode,
                                 DecoderBlockCacheT<T>* cache);
    // returns gradient w.r.t. block input; adds the skip gradient in place.
    TensorT<T> decoder_block_backward(const DecoderBlockT<T>& blk,
                                      const DecoderBlockCacheT<T>& cache, const TensorT<T>& g_out,
                                      TensorT<T>& g_skip_accum, const std::string& prefix,
                                      ParamGradsT<T>& grads) const;
    TensorT<T> block_backward(const PreActBlockT<T>& blk, const BlockCacheT<T>& cache,
                              const TensorT<T>& g_out, const std::string& prefix,
                              ParamGradsT<T>& grads) const;

    template <class Fn>
    void visit_params_impl(Fn&& fn) const;
    template <class Fn>
    void visit_buffers_impl(Fn&& fn) const;
};

using MultiTaskNet = MultiTaskNetT<float>;
using ForwardOutput = ForwardOutputT<float>;
using ForwardCache = ForwardCacheT<float>;
using ParamGrads = ParamGradsT<float>;

// ---- implementation -------------------------------------------------------

namespace detail {

template <class T>
TensorT<T> he_conv_weight(int cout, int cin, int k, Rng& rng) {
    TensorT<T> w(cout, cin, k, k);
    const double scale = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.normal() * scale);
    return w;
}

template <class T>
ConvLayerT<T> make_conv(int cin, int cout, int k, int stride, int pad, bool bias, Rng& rng) {
    ConvLayerT<T> c;
    c.w = he_conv_weight<T>(cout, cin, k, rng);
    if (bias) c.b = TensorT<T>(cout, 1, 1, 1); // zero-initialized
    c.stride = stride;
    c.pad = pad;
    return c;
}

template <class T>
BnLayerT<T> make_bn(int c) {
    BnLayerT<T> bn;
    bn.gamma = TensorT<T>(c, 1, 1, 1);
    bn.gamma.fill(T(1));
    bn.beta = TensorT<T>(c, 1, 1, 1);
    bn.running_mean = TensorT<T>(c, 1, 1, 1);
    bn.running_var = TensorT<T>(c, 1, 1, 1);
    bn.running_var.fill(T(1));
    return bn;
}

} // namespace detail

template <class T>
MultiTaskNetT<T> MultiTaskNetT<T>::build(const ModelConfig& cfg) {
    cfg.validate();
    MultiTaskNetT net;
    net.cfg_ = cfg;
    Rng rng(cfg.seed);

    net.stem_ = detail::make_conv<T>(3, cfg.stem_channels, 3, 1, 1, false, rng);

    int in_ch = cfg.stem_channels;
    net.stages_.resize(4);
    for (int s = 0; s < 4; ++s) {
        const int out_ch = cfg.stage_channels[static_cast<size_t>(s)];
        for (int b = 0; b < cfg.blocks_per_stage; ++b) {
            const int stride = (s > 0 && b == 0) ? 2 : 1;
            PreActBlockT<T> blk;
            blk.bn1 = detail::make_bn<T>(in_ch);
            blk.conv1 = detail::make_conv<T>(in_ch, out_ch, 3, stride, 1, false, rng);
            blk.bn2 = detail::make_bn<T>(out_ch);
            blk.conv2 = detail::make_conv<T>(out_ch, out_ch, 3, 1, 1, false, rng);
            if (stride != 1 || in_ch != out_ch)
                blk.proj = detail::make_conv<T>(in_ch, out_ch, 1, stride, 0, false, rng);
            net.stages_[static_cast<size_t>(s)].push_back(std::move(blk));
            in_ch = out_ch;
        }
    }
    net.final_bn_ = detail::make_bn<T>(cfg.stage_channels[3]);

    net.fc1_ = detail::make_conv<T>(cfg.stage_channels[3], cfg.cls_hidden[0], 1, 1, 0, true, rng);
    net.fc2_ = detail::make_conv<T>(cfg.cls_hidden[0], cfg.cls_hidden[1], 1, 1, 0, true, rng);
    net.fc3_ = detail::make_conv<T>(cfg.cls_hidden[1], 1, 1, 1, 0, true, rng);

    auto build_decoder = [&](int out_channels) {
        DecoderT<T> dec;
        int x_ch = cfg.stage_channels[3];
        for (int i = 0; i < 3; ++i) {
            const int skip_ch = cfg.stage_channels[static_cast<size_t>(2 - i)];
            const int width = cfg.stage_channels[static_cast<size_t>(2 - i)];
            DecoderBlockT<T>& blk = dec.blocks[static_cast<size_t>(i)];
            blk.conv_a = detail::make_conv<T>(x_ch + skip_ch, width, 3, 1, 1, false, rng);
            blk.bn_a = detail::make_bn<T>(width);
            blk.conv_b = detail::make_conv<T>(width, width, 3, 1, 1, false, rng);
            blk.bn_b = detail::make_bn<T>(width);
            x_ch = width;
        }
        dec.head = detail::make_conv<T>(x_ch, out_channels, 1, 1, 0, true, rng);
        return dec;
    };
    net.seg_ = build_decoder(1);
    net.pix_ = build_decoder(3);
    return net;
}

template <class T>
TensorT<T> MultiTaskNetT<T>::run_block(PreActBlockT<T>& blk, const TensorT<T>& x, BnMode mode,
                                       BlockCacheT<T>* cache) {
    TensorT<T> bn1_out, a1, conv1_out, bn2_out, a2, conv2_out;
    BatchNormCache<T> bn1c, bn2c;
    // Running stats are mutated only in training mode.
    if (mode == BnMode::Train)
        bn_forward_train(x, blk.bn1.gamma, blk.bn1.beta, blk.bn1.running_mean,
                         blk.bn1.running_var, kBnMomentum, kBnEps, bn1_out, bn1c);
    else
        bn_forward_eval(x, blk.bn1.gamma, blk.bn1.beta, blk.bn1.running_mean,
                        blk.bn1.running_var, kBnEps, bn1_out);
    relu_forward(bn1_out, a1);

    conv2d_forward(a1, blk.conv1.w, blk.conv1.b, blk.conv1.stride, blk.conv1.pad, conv1_out);
    if (mode == BnMode::Train)
        bn_forward_train(conv1_out, blk.bn2.gamma, blk.bn2.beta, blk.bn2.running_mean,
                         blk.bn2.running_var, kBnMomentum, kBnEps, bn2_out, bn2c);
    else
        bn_forward_eval(conv1_out, blk.bn2.gamma, blk.bn2.beta, blk.bn2.running_mean,
                        blk.bn2.running_var, kBnEps, bn2_out);
    relu_forward(bn2_out, a2);
    conv2d_forward(a2, blk.conv2.w, blk.conv2.b, blk.conv2.stride, blk.conv2.pad, conv2_out);

    TensorT<T> out = std::move(conv2_out);
    if (blk.has_proj()) {
        TensorT<T> sc;
        conv2d_forward(a1, blk.proj.w, blk.proj.b, blk.proj.stride, blk.proj.pad, sc);
        add_inplace(out, sc);
    } else {
        add_inplace(out, x);
    }

    if (cache) {
        cache->x = x;
        cache->bn1c = std::move(bn1c);
        cache->a1 = std::move(a1);
        cache->bn2c = std::move(bn2c);
        cache->a2 = std::move(a2);
    }
    return out;
}

template <class T>
TensorT<T> MultiTaskNetT<T>::run_decoder_block(DecoderBlockT<T>& blk, const TensorT<T>& x,
                                               const TensorT<T>& skip, BnMode mode,
                                               DecoderBlockCacheT<T>* cache) {
    TensorT<T> up, cat, conv_a_out, bn_a_out, a1, conv_b_out, bn_b_out, a2;
    BatchNormCache<T> bn_a_c, bn_b_c;
    upsample2_forward(x, up);
    concat_forward(up, skip, cat);
    conv2d_forward(cat, blk.conv_a.w, blk.conv_a.b, 1, 1, conv_a_out);
    if (mode == BnMode::Train)
        bn_forward_train(conv_a_out, blk.bn_a.gamma, blk.bn_a.beta, blk.bn_a.running_mean,
                         blk.bn_a.running_var, kBnMomentum, kBnEps, bn_a_out, bn_a_c);
    else
        bn_forward_eval(conv_a_out, blk.bn_a.gamma, blk.bn_a.beta, blk.bn_a.running_mean,
                        blk.bn_a.running_var, kBnEps, bn_a_out);
    relu_forward(bn_a_out, a1);
    conv2d_forward(a1, blk.conv_b.w, blk.conv_b.b, 1, 1, conv_b_out);
    if (mode == BnMode::Train)
        bn_forward_train(conv_b_out, blk.bn_b.gamma, blk.bn_b.beta, blk.bn_b.running_mean,
                         blk.bn_b.running_var, kBnMomentum, kBnEps, bn_b_out, bn_b_c);
    else
        bn_forward_eval(conv_b_out, blk.bn_b.gamma, blk.bn_b.beta, blk.bn_b.running_mean,
                        blk.bn_b.running_var, kBnEps, bn_b_out);
    relu_forward(bn_b_out, a2);

    if (cache) {
        cache->cat = std::move(cat);
        cache->skip_channels = skip.c;
        cache->bn_a_c = std::move(bn_a_c);
        cache->a1 = std::move(a1);
        cache->bn_b_c = std::move(bn_b_c);
        cache->a2 = a2;
    }
    return a2;
}

template <class T>
ForwardOutputT<T> MultiTaskNetT<T>::forward(const TensorT<T>& batch, BnMode mode,
                                            bool with_decoders, ForwardCacheT<T>* cache) {
    if (batch.c != 3 || batch.h != cfg_.input_size || batch.w != cfg_.input_size)
        throw Error(ErrorCode::ShapeMismatch,
                    "expected [N,3," + std::to_string(cfg_.input_size) + "," +
                        std::to_string(cfg_.input_size) + "], got " + batch.shape_str());
    if (with_decoders && pruned_)
        throw Error(ErrorCode::InvalidConfig, "dense heads requested on a pruned model");

    if (cache) {
        *cache = ForwardCacheT<T>{};
        cache->input = batch;
        cache->with_decoders = with_decoders;
        cache->blocks.resize(stages_.size() * static_cast<size_t>(cfg_.blocks_per_stage));
    }

    TensorT<T> x;
    conv2d_forward(batch, stem_.w, stem_.b, stem_.stride, stem_.pad, x);

    std::array<TensorT<T>, 3> skips;
    size_t block_idx = 0;
    for (size_t s = 0; s < stages_.size(); ++s) {
        for (auto& blk : stages_[s]) {
            x = run_block(blk, x, mode, cache ? &cache->blocks[block_idx] : nullptr);
            ++block_idx;
        }
        if (s < 3) skips[s] = x;
    }

    TensorT<T> bn_out, deepest;
    BatchNormCache<T> final_c;
    if (mode == BnMode::Train)
        bn_forward_train(x, final_bn_.gamma, final_bn_.beta, final_bn_.running_mean,
                         final_bn_.running_var, kBnMomentum, kBnEps, bn_out, final_c);
    else
        bn_forward_eval(x, final_bn_.gamma, final_bn_.beta, final_bn_.running_mean,
                        final_bn_.running_var, kBnEps, bn_out);
    relu_forward(bn_out, deepest);

    ForwardOutputT<T> out;
    TensorT<T> pooled, fc1_out, fc1_act, fc2_out, fc2_act;
    gap_forward(deepest, pooled);
    conv2d_forward(pooled, fc1_.w, fc1_.b, 1, 0, fc1_out);
    relu_forward(fc1_out, fc1_act);
    conv2d_forward(fc1_act, fc2_.w, fc2_.b, 1, 0, fc2_out);
    relu_forward(fc2_out, fc2_act);
    conv2d_forward(fc2_act, fc3_.w, fc3_.b, 1, 0, out.cls_logit);

    if (with_decoders) {
        auto run_decoder = [&](DecoderT<T>& dec,
                               std::array<DecoderBlockCacheT<T>, 3>* dcache, TensorT<T>& logits) {
            TensorT<T> d = deepest;
            for (int i = 0; i < 3; ++i)
                d = run_decoder_block(dec.blocks[static_cast<size_t>(i)], d,
                                      skips[static_cast<size_t>(2 - i)], mode,
                                      dcache ? &(*dcache)[static_cast<size_t>(i)] : nullptr);
            conv2d_forward(d, dec.head.w, dec.head.b, 1, 0, logits);
        };
        run_decoder(seg_, cache ? &cache->seg_blocks : nullptr, out.seg_logits);
        run_decoder(pix_, cache ? &cache->pix_blocks : nullptr, out.pix_logits);
    }

    if (cache) {
        cache->skips = std::move(skips);
        cache->final_bn_c = std::move(final_c);
        cache->deepest = std::move(deepest);
        cache->pooled = std::move(pooled);
        cache->fc1_act = std::move(fc1_act);
        cache->fc2_act = std::move(fc2_act);
    }
    return out;
}

template <class T>
TensorT<T> MultiTaskNetT<T>::block_backward(const PreActBlockT<T>& blk,
                                            const BlockCacheT<T>& cache, const TensorT<T>& g_out,
                                            const std::string& prefix,
                                            ParamGradsT<T>& grads) const {
    // out = conv2(a2) + shortcut
    TensorT<T> g_a2, gw2;
    conv2d_backward(cache.a2, blk.conv2.w, g_out, blk.conv2.stride, blk.conv2.pad, &g_a2, &gw2,
                    nullptr);
    grads[prefix + ".conv2.w"] = std::move(gw2);

    TensorT<T> g_bn2_out;
    relu_backward(cache.a2, g_a2, g_bn2_out);
    TensorT<T> g_conv1_out, ggamma2, gbeta2;
    bn_backward(g_bn2_out, cache.bn2c, blk.bn2.gamma, g_conv1_out, ggamma2, gbeta2);
    grads[prefix + ".bn2.gamma"] = std::move(ggamma2);
    grads[prefix + ".bn2.beta"] = std::move(gbeta2);

    TensorT<T> g_a1, gw1;
    conv2d_backward(cache.a1, blk.conv1.w, g_conv1_out, blk.conv1.stride, blk.conv1.pad, &g_a1,
                    &gw1, nullptr);
    grads[prefix + ".conv1.w"] = std::move(gw1);

    if (blk.has_proj()) {
        TensorT<T> g_a1_proj, gwp;
        conv2d_backward(cache.a1, blk.proj.w, g_out, blk.proj.stride, blk.proj.pad, &g_a1_proj,
                        &gwp, nullptr);
        grads[prefix + ".proj.w"] = std::move(gwp);
        add_inplace(g_a1, g_a1_proj);
    }

    TensorT<T> g_bn1_out;
    relu_backward(cache.a1, g_a1, g_bn1_out);
    TensorT<T> g_x, ggamma1, gbeta1;
    bn_backward(g_bn1_out, cache.bn1c, blk.bn1.gamma, g_x, ggamma1, gbeta1);
    grads[prefix + ".bn1.gamma"] = std::move(ggamma1);
    grads[prefix + ".bn1.beta"] = std::move(gbeta1);

    if (!blk.has_proj()) add_inplace(g_x, g_out); // identity shortcut
    return g_x;
}

template <class T>
TensorT<T> MultiTaskNetT<T>::decoder_block_backward(const DecoderBlockT<T>& blk,
                                                    const DecoderBlockCacheT<T>& cache,
                                                    const TensorT<T>& g_out,
                                                    TensorT<T>& g_skip_accum,
                                                    const std::string& prefix,
                                                    ParamGradsT<T>& grads) const {
    TensorT<T> g_bn_b_out;
    relu_backward(cache.a2, g_out, g_bn_b_out);
    TensorT<T> g_conv_b_out, ggb, gbb;
    bn_backward(g_bn_b_out, cache.bn_b_c, blk.bn_b.gamma, g_conv_b_out, ggb, gbb);
    grads[prefix + ".bn_b.gamma"] = std::move(ggb);
    grads[prefix + ".bn_b.beta"] = std::move(gbb);

    TensorT<T> g_a1, gwb;
    conv2d_backward(cache.a1, blk.conv_b.w, g_conv_b_out, 1, 1, &g_a1, &gwb, nullptr);
    grads[prefix + ".conv_b.w"] = std::move(gwb);

    TensorT<T> g_bn_a_out;
    relu_backward(cache.a1, g_a1, g_bn_a_out);
    TensorT<T> g_conv_a_out, gga, gba;
    bn_backward(g_bn_a_out, cache.bn_a_c, blk.bn_a.gamma, g_conv_a_out, gga, gba);
    grads[prefix + ".bn_a.gamma"] = std::move(gga);
    grads[prefix + ".bn_a.beta"] = std::move(gba);

    TensorT<T> g_cat, gwa;
    conv2d_backward(cache.cat, blk.conv_a.w, g_conv_a_out, 1, 1, &g_cat, &gwa, nullptr);
    grads[prefix + ".conv_a.w"] = std::move(gwa);

    TensorT<T> g_up, g_skip;
    concat_backward(g_cat, cache.cat.c - cache.skip_channels, g_up, g_skip);
    if (g_skip_accum.empty())
        g_skip_accum = std::move(g_skip);
    else
        add_inplace(g_skip_accum, g_skip);

    TensorT<T> g_x;
    upsample2_backward(g_up, g_x);
    return g_x;
}

template <class T>
ParamGradsT<T> MultiTaskNetT<T>::backward(const ForwardCacheT<T>& cache, const TensorT<T>& g_cls,
                                          const TensorT<T>* g_seg, const TensorT<T>* g_pix) const {
    ParamGradsT<T> grads;
    if ((g_seg || g_pix) && !cache.with_decoders)
        throw Error(ErrorCode::ShapeMismatch,
                    "dense gradients supplied but the forward pass skipped the decoders");

    // classification head
    TensorT<T> g_fc2_act, gw3, gb3;
    conv2d_backward(cache.fc2_act, fc3_.w, g_cls, 1, 0, &g_fc2_act, &gw3, &gb3);
    grads["cls.fc3.w"] = std::move(gw3);
    grads["cls.fc3.b"] = std::move(gb3);
    TensorT<T> g_fc2_out;
    relu_backward(cache.fc2_act, g_fc2_act, g_fc2_out);
    TensorT<T> g_fc1_act, gw2, gb2;
    conv2d_backward(cache.fc1_act, fc2_.w, g_fc2_out, 1, 0, &g_fc1_act, &gw2, &gb2);
    grads["cls.fc2.w"] = std::move(gw2);
    grads["cls.fc2.b"] = std::move(gb2);
    TensorT<T> g_fc1_out;
    relu_backward(cache.fc1_act, g_fc1_act, g_fc1_out);
    TensorT<T> g_pooled, gw1, gb1;
    conv2d_backward(cache.pooled, fc1_.w, g_fc1_out, 1, 0, &g_pooled, &gw1, &gb1);
    grads["cls.fc1.w"] = std::move(gw1);
    grads["cls.fc1.b"] = std::move(gb1);

    TensorT<T> g_deepest;
    gap_backward(g_pooled, cache.deepest.h, cache.deepest.w, g_deepest);

    // decoders feed gradients into the deepest features and the skips
    std::array<TensorT<T>, 3> g_skips; // indexed like cache.skips
    auto decoder_backward = [&](const DecoderT<T>& dec,
                                const std::array<DecoderBlockCacheT<T>, 3>& dcache,
                                const TensorT<T>& g_logits, const std::string& name) {
        TensorT<T> g_d, gwh, gbh;
        conv2d_backward(dcache[2].a2, dec.head.w, g_logits, 1, 0, &g_d, &gwh, &gbh);
        grads[name + ".head.w"] = std::move(gwh);
        grads[name + ".head.b"] = std::move(gbh);
        for (int i = 2; i >= 0; --i)
            g_d = decoder_block_backward(dec.blocks[static_cast<size_t>(i)],
                                         dcache[static_cast<size_t>(i)], g_d,
                                         g_skips[static_cast<size_t>(2 - i)],
                                         name + ".block" + std::to_string(i), grads);
        add_inplace(g_deepest, g_d);
    };
    if (g_seg) decoder_backward(seg_, cache.seg_blocks, *g_seg, "seg");
    if (g_pix) decoder_backward(pix_, cache.pix_blocks, *g_pix, "pix");

    // deepest = relu(final_bn(stage3_out))
    TensorT<T> g_final_bn_out;
    relu_backward(cache.deepest, g_deepest, g_final_bn_out);
    TensorT<T> g_x, ggf, gbf;
    bn_backward(g_final_bn_out, cache.final_bn_c, final_bn_.gamma, g_x, ggf, gbf);
    grads["final_bn.gamma"] = std::move(ggf);
    grads["final_bn.beta"] = std::move(gbf);

    // encoder stages in reverse; skip gradients join at stage outputs
    size_t block_idx = cache.blocks.size();
    for (int s = 3; s >= 0; --s) {
        if (s < 3 && !g_skips[static_cast<size_t>(s)].empty())
            add_inplace(g_x, g_skips[static_cast<size_t>(s)]);
        for (int b = cfg_.blocks_per_stage - 1; b >= 0; --b) {
            --block_idx;
            const auto& blk = stages_[static_cast<size_t>(s)][static_cast<size_t>(b)];
            g_x = block_backward(blk, cache.blocks[block_idx],
                                 g_x, "stage" + std::to_string(s) + ".block" + std::to_string(b),
                                 grads);
        }
    }

    TensorT<T> gws;
    conv2d_backward(cache.input, stem_.w, g_x, stem_.stride, stem_.pad, nullptr, &gws, nullptr);
    grads["stem.w"] = std::move(gws);
    return grads;
}

template <class T>
void MultiTaskNetT<T>::prune() {
    seg_ = DecoderT<T>{};
    pix_ = DecoderT<T>{};
    pruned_ = true;
}

template <class T>
template <class Fn>
void MultiTaskNetT<T>::visit_params_impl(Fn&& fn) const {
    auto self = const_cast<MultiTaskNetT<T>*>(this);
    fn("stem.w", self->stem_.w);
    for (size_t s = 0; s < self->stages_.size(); ++s)
        for (size_t b = 0; b < self->stages_[s].size(); ++b) {
            auto& blk = self->stages_[s][b];
            const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            fn(p + ".bn1.gamma", blk.bn1.gamma);
            fn(p + ".bn1.beta", blk.bn1.beta);
            fn(p + ".conv1.w", blk.conv1.w);
            fn(p + ".bn2.gamma", blk.bn2.gamma);
            fn(p + ".bn2.beta", blk.bn2.beta);
            fn(p + ".conv2.w", blk.conv2.w);
            if (blk.has_proj()) fn(p + ".proj.w", blk.proj.w);
        }
    fn("final_bn.gamma", self->final_bn_.gamma);
    fn("final_bn.beta", self->final_bn_.beta);
    fn("cls.fc1.w", self->fc1_.w);
    fn("cls.fc1.b", self->fc1_.b);
    fn("cls.fc2.w", self->fc2_.w);
    fn("cls.fc2.b", self->fc2_.b);
    fn("cls.fc3.w", self->fc3_.w);
    fn("cls.fc3.b", self->fc3_.b);
    if (!pruned_) {
        auto visit_decoder = [&](DecoderT<T>& dec, const std::string& name) {
            for (size_t i = 0; i < 3; ++i) {
                auto& blk = dec.blocks[i];
                const std::string p = name + ".block" + std::to_string(i);
                fn(p + ".conv_a.w", blk.conv_a.w);
                fn(p + ".bn_a.gamma", blk.bn_a.gamma);
                fn(p + ".bn_a.beta", blk.bn_a.beta);
                fn(p + ".conv_b.w", blk.conv_b.w);
                fn(p + ".bn_b.gamma", blk.bn_b.gamma);
                fn(p + ".bn_b.beta", blk.bn_b.beta);
            }
            fn(name + ".head.w", dec.head.w);
            fn(name + ".head.b", dec.head.b);
        };
        visit_decoder(self->seg_, "seg");
        visit_decoder(self->pix_, "pix");
    }
}

template <class T>
template <class Fn>
void MultiTaskNetT<T>::visit_buffers_impl(Fn&& fn) const {
    auto self = const_cast<MultiTaskNetT<T>*>(this);
    auto bn = [&](BnLayerT<T>& layer, const std::string& p) {
        fn(p + ".running_mean", layer.running_mean);
        fn(p + ".running_var", layer.running_var);
    };
    for (size_t s = 0; s < self->stages_.size(); ++s)
        for (size_t b = 0; b < self->stages_[s].size(); ++b) {
            auto& blk = self->stages_[s][b];
            const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            bn(blk.bn1, p + ".bn1");
            bn(blk.bn2, p + ".bn2");
        }
    bn(self->final_bn_, "final_bn");
    if (!pruned_) {
        auto visit_decoder = [&](DecoderT<T>& dec, const std::string& name) {
            for (size_t i = 0; i < 3; ++i) {
                bn(dec.blocks[i].bn_a, name + ".block" + std::to_string(i) + ".bn_a");
                bn(dec.blocks[i].bn_b, name + ".block" + std::to_string(i) + ".bn_b");
            }
        };
        visit_decoder(self->seg_, "seg");
        visit_decoder(self->pix_, "pix");
    }
}

template <class T>
void MultiTaskNetT<T>::visit_params(
    const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    visit_params_impl(fn);
}

template <class T>
void MultiTaskNetT<T>::visit_params(
    const std::function<void(const std::string&, const TensorT<T>&)>& fn) const {
    visit_params_impl([&](const std::string& name, TensorT<T>& t) { fn(name, t); });
}

template <class T>
void MultiTaskNetT<T>::visit_buffers(
    const std::function<void(const std::string&, TensorT<T>&)>& fn) {
    visit_buffers_impl(fn);
}

template <class T>
void MultiTaskNetT<T>::visit_buffers(
    const std::function<void(const std::string&, const TensorT<T>&)>& fn) const {
    visit_buffers_impl([&](const std::string& name, TensorT<T>& t) { fn(name, t); });
}

template <class T>
size_t MultiTaskNetT<T>::param_count() const {
    size_t total = 0;
    visit_params([&](const std::string&, const TensorT<T>& t) { total += t.size(); });
    return total;
}

} // namespace mitl

#endif

#ifndef MITL_KERNELS_HPP
#define MITL_KERNELS_HPP

#include <cmath>
#include <cstring>
#include <type_traits>
#include <vector>

#include "mitl/tensor.hpp"

// Dense CPU kernels with hand-written backward passes. Everything is
// templated on the scalar type: training and inference run in float, while
// gradient-check tests instantiate the exact same code in double.
//
// Determinism contract: accumulation order is fixed by the loops below and
// never depends on thread count or input values, so equal inputs give
// bit-equal outputs on a given build.

namespace mitl {

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// Fixed-lane partial sums: keeps reductions vectorizable without
// -ffast-math (the lane loop is data-parallel, no reassociation needed)
// while the accumulation order stays independent of the data.
constexpr int kLanes = 16;

template <class T>
T lane_total(const T* acc) {
    T total = T(0);
    for (int l = 0; l < kLanes; ++l) total += acc[l];
    return total;
}

template <class T>
T dot(const T* __restrict a, const T* __restrict b, int len) {
    T acc[kLanes] = {};
    int i = 0;
    for (; i + kLanes <= len; i += kLanes)
        for (int l = 0; l < kLanes; ++l) acc[l] += a[i + l] * b[i + l];
    for (; i < len; ++i) acc[i % kLanes] += a[i] * b[i];
    return lane_total(acc);
}

template <class T>
T sum(const T* __restrict p, int len) {
    T acc[kLanes] = {};
    int i = 0;
    for (; i + kLanes <= len; i += kLanes)
        for (int l = 0; l < kLanes; ++l) acc[l] += p[i + l];
    for (; i < len; ++i) acc[i % kLanes] += p[i];
    return lane_total(acc);
}

// Copies one channel plane into a zero-filled buffer with a 1-pixel border.
template <class T>
void pad1(const T* __restrict src, int h, int w, T* __restrict dst) {
    const int wp = w + 2;
    std::memset(dst, 0, sizeof(T) * static_cast<size_t>(h + 2) * wp);
    for (int y = 0; y < h; ++y)
        std::memcpy(dst + static_cast<size_t>(y + 1) * wp + 1,
                    src + static_cast<size_t>(y) * w, sizeof(T) * w);
}

} // namespace detail

// x: [N,Cin,H,W], w: [Cout,Cin,K,K], b: [Cout,1,1,1] or empty (no bias).
template <class T>
void conv2d_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                    int pad, TensorT<T>& y) {
    const int n = x.n, cin = x.c, h = x.h, wd = x.w;
    const int cout = w.n, k = w.h;
    if (w.c != cin || w.w != k)
        throw Error(ErrorCode::ShapeMismatch,
                    "conv weight " + w.shape_str() + " vs input " + x.shape_str());
    if (!b.empty()) b.require_shape(cout, 1, 1, 1, "conv bias");
    const int ho = conv_out_dim(h, k, stride, pad);
    const int wo = conv_out_dim(wd, k, stride, pad);
    if (ho <= 0 || wo <= 0)
        throw Error(ErrorCode::ShapeMismatch, "conv output would be empty for " + x.shape_str());
    y = TensorT<T>(n, cout, ho, wo);

    if (k == 3 && stride == 1 && pad == 1) {
        const int hp = h + 2, wp = wd + 2;
        std::vector<T> xpad(static_cast<size_t>(cin) * hp * wp);
        for (int i = 0; i < n; ++i) {
            for (int ci = 0; ci < cin; ++ci)
                detail::pad1(x.plane(i, ci), h, wd, xpad.data() + static_cast<size_t>(ci) * hp * wp);
            for (int co = 0; co < cout; ++co) {
                T* __restrict yp = y.plane(i, co);
                const T bias = b.empty() ? T(0) : b[co];
                for (int j = 0; j < ho * wo; ++j) yp[j] = bias;
                for (int ci = 0; ci < cin; ++ci) {
                    const T* xp = xpad.data() + static_cast<size_t>(ci) * hp * wp;
                    const T* wk = &w.at(co, ci, 0, 0);
                    for (int ky = 0; ky < 3; ++ky) {
                        const T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                        for (int oy = 0; oy < h; ++oy) {
                            const T* __restrict xr = xp + static_cast<size_t>(oy + ky) * wp;
                            T* __restrict yr = yp + static_cast<size_t>(oy) * wd;
                            for (int ox = 0; ox < wd; ++ox)
                                yr[ox] += w0 * xr[ox] + w1 * xr[ox + 1] + w2 * xr[ox + 2];
                        }
                    }
                }
            }
        }
        return;
    }

    if (k == 3 && stride == 2 && pad == 1) {
        const int hp = h + 2, wp = wd + 2;
        std::vector<T> xpad(static_cast<size_t>(cin) * hp * wp);
        for (int i = 0; i < n; ++i) {
            for (int ci = 0; ci < cin; ++ci)
                detail::pad1(x.plane(i, ci), h, wd, xpad.data() + static_cast<size_t>(ci) * hp * wp);
            for (int co = 0; co < cout; ++co) {
                T* yp = y.plane(i, co);
                const T bias = b.empty() ? T(0) : b[co];
                for (int j = 0; j < ho * wo; ++j) yp[j] = bias;
                for (int ci = 0; ci < cin; ++ci) {
                    const T* xp = xpad.data() + static_cast<size_t>(ci) * hp * wp;
                    const T* wk = &w.at(co, ci, 0, 0);
                    for (int ky = 0; ky < 3; ++ky) {
                        const T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                        for (int oy = 0; oy < ho; ++oy) {
                            const T* __restrict xr = xp + static_cast<size_t>(2 * oy + ky) * wp;
                            T* __restrict yr = yp + static_cast<size_t>(oy) * wo;
                            for (int ox = 0; ox < wo; ++ox)
                                yr[ox] += w0 * xr[2 * ox] + w1 * xr[2 * ox + 1] + w2 * xr[2 * ox + 2];
                        }
                    }
                }
            }
        }
        return;
    }

    for (int i = 0; i < n; ++i)
        for (int co = 0; co < cout; ++co) {
            T* yp = y.plane(i, co);
            const T bias = b.empty() ? T(0) : b[co];
            for (int j = 0; j < ho * wo; ++j) yp[j] = bias;
            for (int ci = 0; ci < cin; ++ci) {
                const T* xp = x.plane(i, ci);
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = w.at(co, ci, ky, kx);
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            const T* __restrict xr = xp + static_cast<size_t>(iy) * wd;
                            T* __restrict yr = yp + static_cast<size_t>(oy) * wo;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= wd) continue;
                                yr[ox] += wv * xr[ix];
                            }
                        }
                    }
            }
        }
}

// Gradients are written (not accumulated); pass nullptr for any output that
// is not needed. gb may be requested even for a bias-free forward pass.
template <class T>
void conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& gy, int stride,
                     int pad, std::type_identity_t<TensorT<T>>* gx,
                     std::type_identity_t<TensorT<T>>* gw, std::type_identity_t<TensorT<T>>* gb) {
    const int n = x.n, cin = x.c, h = x.h, wd = x.w;
    const int cout = w.n, k = w.h;
    const int ho = conv_out_dim(h, k, stride, pad);
    const int wo = conv_out_dim(wd, k, stride, pad);
    gy.require_shape(n, cout, ho, wo, "conv grad-output");

    if (gx) *gx = TensorT<T>(n, cin, h, wd);
    if (gw) *gw = TensorT<T>(cout, cin, k, k);
    if (gb) *gb = TensorT<T>(cout, 1, 1, 1);

    if (gb)
        for (int co = 0; co < cout; ++co) {
            T acc = T(0);
            for (int i = 0; i < n; ++i) acc += detail::sum(gy.plane(i, co), ho * wo);
            (*gb)[co] = acc;
        }

    if (k == 3 && stride == 1 && pad == 1) {
        const int hp = h + 2, wp = wd + 2;
        std::vector<T> xpad, gypad;
        if (gw) xpad.resize(static_cast<size_t>(cin) * hp * wp);
        if (gx) gypad.resize(static_cast<size_t>(cout) * hp * wp);
        for (int i = 0; i < n; ++i) {
            if (gw)
                for (int ci = 0; ci < cin; ++ci)
                    detail::pad1(x.plane(i, ci), h, wd,
                                 xpad.data() + static_cast<size_t>(ci) * hp * wp);
            if (gx)
                for (int co = 0; co < cout; ++co)
                    detail::pad1(gy.plane(i, co), h, wd,
                                 gypad.data() + static_cast<size_t>(co) * hp * wp);

            for (int co = 0; co < cout; ++co) {
                const T* gyp = gy.plane(i, co);
                for (int ci = 0; ci < cin; ++ci) {
                    if (gw) {
                        const T* xp = xpad.data() + static_cast<size_t>(ci) * hp * wp;
                        T* gwk = &gw->at(co, ci, 0, 0);
                        for (int ky = 0; ky < 3; ++ky) {
                            T a0[detail::kLanes] = {}, a1[detail::kLanes] = {},
                              a2[detail::kLanes] = {};
                            for (int oy = 0; oy < h; ++oy) {
                                const T* __restrict gr = gyp + static_cast<size_t>(oy) * wd;
                                const T* __restrict xr = xp + static_cast<size_t>(oy + ky) * wp;
                                int ox = 0;
                                for (; ox + detail::kLanes <= wd; ox += detail::kLanes)
                                    for (int l = 0; l < detail::kLanes; ++l) {
                                        a0[l] += gr[ox + l] * xr[ox + l];
                                        a1[l] += gr[ox + l] * xr[ox + l + 1];
                                        a2[l] += gr[ox + l] * xr[ox + l + 2];
                                    }
                                for (; ox < wd; ++ox) {
                                    const int l = ox % detail::kLanes;
                                    a0[l] += gr[ox] * xr[ox];
                                    a1[l] += gr[ox] * xr[ox + 1];
                                    a2[l] += gr[ox] * xr[ox + 2];
                                }
                            }
                            gwk[ky * 3] += detail::lane_total(a0);
                            gwk[ky * 3 + 1] += detail::lane_total(a1);
                            gwk[ky * 3 + 2] += detail::lane_total(a2);
                        }
                    }
                    if (gx) {
                        // Gradient w.r.t. the input is a 3x3 correlation of the
                        // padded grad-output with the 180-degree-rotated kernel.
                        const T* gp = gypad.data() + static_cast<size_t>(co) * hp * wp;
                        const T* wk = &w.at(co, ci, 0, 0);
                        T* gxp = gx->plane(i, ci);
                        for (int ky = 0; ky < 3; ++ky) {
                            const T w0 = wk[(2 - ky) * 3 + 2], w1 = wk[(2 - ky) * 3 + 1],
                                    w2 = wk[(2 - ky) * 3];
                            for (int iy = 0; iy < h; ++iy) {
                                const T* __restrict gr = gp + static_cast<size_t>(iy + ky) * wp;
                                T* __restrict xr = gxp + static_cast<size_t>(iy) * wd;
                                for (int ix = 0; ix < wd; ++ix)
                                    xr[ix] += w0 * gr[ix] + w1 * gr[ix + 1] + w2 * gr[ix + 2];
                            }
                        }
                    }
                }
            }
        }
        return;
    }

    if (k == 3 && stride == 2 && pad == 1) {
        const int hp = h + 2, wp = wd + 2;
        std::vector<T> xpad, gxpad;
        if (gw) xpad.resize(static_cast<size_t>(cin) * hp * wp);
        if (gx) gxpad.resize(static_cast<size_t>(hp) * wp);
        for (int i = 0; i < n; ++i) {
            if (gw) {
                for (int ci = 0; ci < cin; ++ci)
                    detail::pad1(x.plane(i, ci), h, wd,
                                 xpad.data() + static_cast<size_t>(ci) * hp * wp);
                for (int co = 0; co < cout; ++co) {
                    const T* gyp = gy.plane(i, co);
                    for (int ci = 0; ci < cin; ++ci) {
                        const T* xp = xpad.data() + static_cast<size_t>(ci) * hp * wp;
                        T* gwk = &gw->at(co, ci, 0, 0);
                        for (int ky = 0; ky < 3; ++ky) {
                            T a0[detail::kLanes] = {}, a1[detail::kLanes] = {},
                              a2[detail::kLanes] = {};
                            for (int oy = 0; oy < ho; ++oy) {
                                const T* __restrict gr = gyp + static_cast<size_t>(oy) * wo;
                                const T* __restrict xr =
                                    xp + static_cast<size_t>(2 * oy + ky) * wp;
                                int ox = 0;
                                for (; ox + detail::kLanes <= wo; ox += detail::kLanes)
                                    for (int l = 0; l < detail::kLanes; ++l) {
                                        a0[l] += gr[ox + l] * xr[2 * (ox + l)];
                                        a1[l] += gr[ox + l] * xr[2 * (ox + l) + 1];
                                        a2[l] += gr[ox + l] * xr[2 * (ox + l) + 2];
                                    }
                                for (; ox < wo; ++ox) {
                                    const int l = ox % detail::kLanes;
                                    a0[l] += gr[ox] * xr[2 * ox];
                                    a1[l] += gr[ox] * xr[2 * ox + 1];
                                    a2[l] += gr[ox] * xr[2 * ox + 2];
                                }
                            }
                            gwk[ky * 3] += detail::lane_total(a0);
                            gwk[ky * 3 + 1] += detail::lane_total(a1);
                            gwk[ky * 3 + 2] += detail::lane_total(a2);
                        }
                    }
                }
            }
            if (gx)
                for (int ci = 0; ci < cin; ++ci) {
                    std::memset(gxpad.data(), 0, sizeof(T) * gxpad.size());
                    for (int co = 0; co < cout; ++co) {
                        const T* gyp = gy.plane(i, co);
                        const T* wk = &w.at(co, ci, 0, 0);
                        for (int ky = 0; ky < 3; ++ky) {
                            const T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                            for (int oy = 0; oy < ho; ++oy) {
                                const T* __restrict gr = gyp + static_cast<size_t>(oy) * wo;
                                T* __restrict gp =
                                    gxpad.data() + static_cast<size_t>(2 * oy + ky) * wp;
                                for (int ox = 0; ox < wo; ++ox) {
                                    const T g = gr[ox];
                                    gp[2 * ox] += w0 * g;
                                    gp[2 * ox + 1] += w1 * g;
                                    gp[2 * ox + 2] += w2 * g;
                                }
                            }
                        }
                    }
                    T* gxp = gx->plane(i, ci);
                    for (int yy = 0; yy < h; ++yy)
                        std::memcpy(gxp + static_cast<size_t>(yy) * wd,
                                    gxpad.data() + static_cast<size_t>(yy + 1) * wp + 1,
                                    sizeof(T) * wd);
                }
        }
        return;
    }

    for (int i = 0; i < n; ++i)
        for (int co = 0; co < cout; ++co) {
            const T* gyp = gy.plane(i, co);
            for (int ci = 0; ci < cin; ++ci) {
                const T* xp = x.plane(i, ci);
                T* gxp = gx ? gx->plane(i, ci) : nullptr;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = w.at(co, ci, ky, kx);
                        T acc = T(0);
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            const T* __restrict gr = gyp + static_cast<size_t>(oy) * wo;
                            const T* __restrict xr = xp + static_cast<size_t>(iy) * wd;
                            T* __restrict gxr = gxp ? gxp + static_cast<size_t>(iy) * wd : nullptr;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= wd) continue;
                                acc += gr[ox] * xr[ix];
                                if (gxr) gxr[ix] += wv * gr[ox];
                            }
                        }
                        if (gw) gw->at(co, ci, ky, kx) += acc;
                    }
            }
        }
}

template <class T>
struct BatchNormCache {
    TensorT<T> xhat;
    std::vector<double> invstd; // per channel
};

// gamma/beta/running stats are {C,1,1,1}. Batch statistics are biased for
// normalization; the running variance uses the unbiased estimate, and both
// running buffers blend with factor `momentum`.
template <class T>
void bn_forward_train(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      TensorT<T>& running_mean, TensorT<T>& running_var, double momentum,
                      double eps, TensorT<T>& y, BatchNormCache<T>& cache) {
    const int n = x.n, c = x.c, hw = x.h * x.w;
    gamma.require_shape(c, 1, 1, 1, "bn gamma");
    beta.require_shape(c, 1, 1, 1, "bn beta");
    running_mean.require_shape(c, 1, 1, 1, "bn running mean");
    running_var.require_shape(c, 1, 1, 1, "bn running var");
    const double m = static_cast<double>(n) * hw;
    if (m < 1.0) throw Error(ErrorCode::ShapeMismatch, "bn on empty input " + x.shape_str());

    y = TensorT<T>(x.n, x.c, x.h, x.w);
    cache.xhat = TensorT<T>(x.n, x.c, x.h, x.w);
    cache.invstd.assign(c, 0.0);

    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int i = 0; i < n; ++i)
            s += static_cast<double>(detail::sum(x.plane(i, ch), hw));
        const double mean = s / m;
        double sq = 0.0;
        for (int i = 0; i < n; ++i) {
            const T* xp = x.plane(i, ch);
            double acc[detail::kLanes] = {};
            int j = 0;
            for (; j + detail::kLanes <= hw; j += detail::kLanes)
                for (int l = 0; l < detail::kLanes; ++l) {
                    const double d = static_cast<double>(xp[j + l]) - mean;
                    acc[l] += d * d;
                }
            for (; j < hw; ++j) {
                const double d = static_cast<double>(xp[j]) - mean;
                acc[j % detail::kLanes] += d * d;
            }
            s = 0.0; // reuse as lane total
            for (int l = 0; l < detail::kLanes; ++l) s += acc[l];
            sq += s;
        }
        const double var = sq / m;
        const double invstd = 1.0 / std::sqrt(var + eps);
        cache.invstd[ch] = invstd;

        const T g = gamma[ch], bt = beta[ch];
        for (int i = 0; i < n; ++i) {
            const T* __restrict xp = x.plane(i, ch);
            T* __restrict xh = cache.xhat.plane(i, ch);
            T* __restrict yp = y.plane(i, ch);
            for (int j = 0; j < hw; ++j) {
                const T v = static_cast<T>((static_cast<double>(xp[j]) - mean) * invstd);
                xh[j] = v;
                yp[j] = g * v + bt;
            }
        }

        const double var_running = m > 1.0 ? var * m / (m - 1.0) : var;
        running_mean[ch] =
            static_cast<T>((1.0 - momentum) * static_cast<double>(running_mean[ch]) + momentum * mean);
        running_var[ch] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_var[ch]) +
                                         momentum * var_running);
    }
}

template <class T>
void bn_forward_eval(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                     const TensorT<T>& running_mean, const TensorT<T>& running_var, double eps,
                     TensorT<T>& y) {
    const int n = x.n, c = x.c, hw = x.h * x.w;
    gamma.require_shape(c, 1, 1, 1, "bn gamma");
    y = TensorT<T>(x.n, x.c, x.h, x.w);
    for (int ch = 0; ch < c; ++ch) {
        const double invstd = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
        const double mean = static_cast<double>(running_mean[ch]);
        const T g = gamma[ch], bt = beta[ch];
        for (int i = 0; i < n; ++i) {
            const T* __restrict xp = x.plane(i, ch);
            T* __restrict yp = y.plane(i, ch);
            for (int j = 0; j < hw; ++j)
                yp[j] = g * static_cast<T>((static_cast<double>(xp[j]) - mean) * invstd) + bt;
        }
    }
}

template <class T>
void bn_backward(const TensorT<T>& gy, const BatchNormCache<T>& cache, const TensorT<T>& gamma,
                 TensorT<T>& gx, TensorT<T>& ggamma, TensorT<T>& gbeta) {
    const int n = gy.n, c = gy.c, hw = gy.h * gy.w;
    gy.require_shape(cache.xhat.n, cache.xhat.c, cache.xhat.h, cache.xhat.w, "bn grad-output");
    const double m = static_cast<double>(n) * hw;

    gx = TensorT<T>(gy.n, gy.c, gy.h, gy.w);
    ggamma = TensorT<T>(c, 1, 1, 1);
    gbeta = TensorT<T>(c, 1, 1, 1);

    for (int ch = 0; ch < c; ++ch) {
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const T* gp = gy.plane(i, ch);
            const T* xh = cache.xhat.plane(i, ch);
            s1 += static_cast<double>(detail::sum(gp, hw));
            s2 += static_cast<double>(detail::dot(gp, xh, hw));
        }
        ggamma[ch] = static_cast<T>(s2);
        gbeta[ch] = static_cast<T>(s1);

        const double scale = static_cast<double>(gamma[ch]) * cache.invstd[ch];
        const double mean_g = s1 / m, mean_gx = s2 / m;
        for (int i = 0; i < n; ++i) {
            const T* __restrict gp = gy.plane(i, ch);
            const T* __restrict xh = cache.xhat.plane(i, ch);
            T* __restrict out = gx.plane(i, ch);
            for (int j = 0; j < hw; ++j)
                out[j] = static_cast<T>(
                    scale * (static_cast<double>(gp[j]) - mean_g -
                             static_cast<double>(xh[j]) * mean_gx));
        }
    }
}

template <class T>
void relu_forward(const TensorT<T>& x, TensorT<T>& y) {
    y = TensorT<T>(x.n, x.c, x.h, x.w);
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

// Mask taken from the forward output: gradient flows where the output was
// positive (the subgradient at exactly zero is taken as zero).
template <class T>
void relu_backward(const TensorT<T>& y, const TensorT<T>& gy, TensorT<T>& gx) {
    gy.require_shape(y.n, y.c, y.h, y.w, "relu grad-output");
    gx = TensorT<T>(y.n, y.c, y.h, y.w);
    for (size_t i = 0; i < y.size(); ++i) gx[i] = y[i] > T(0) ? gy[i] : T(0);
}

template <class T>
void upsample2_forward(const TensorT<T>& x, TensorT<T>& y) {
    y = TensorT<T>(x.n, x.c, x.h * 2, x.w * 2);
    for (int i = 0; i < x.n; ++i)
        for (int c = 0; c < x.c; ++c) {
            const T* xp = x.plane(i, c);
            T* yp = y.plane(i, c);
            for (int iy = 0; iy < x.h; ++iy) {
                const T* __restrict xr = xp + static_cast<size_t>(iy) * x.w;
                T* __restrict y0 = yp + static_cast<size_t>(2 * iy) * y.w;
                T* __restrict y1 = y0 + y.w;
                for (int ix = 0; ix < x.w; ++ix) {
                    const T v = xr[ix];
                    y0[2 * ix] = v;
                    y0[2 * ix + 1] = v;
                    y1[2 * ix] = v;
                    y1[2 * ix + 1] = v;
                }
            }
        }
}

template <class T>
void upsample2_backward(const TensorT<T>& gy, TensorT<T>& gx) {
    if (gy.h % 2 != 0 || gy.w % 2 != 0)
        throw Error(ErrorCode::ShapeMismatch, "upsample grad must have even dims, got " +
                                                  gy.shape_str());
    gx = TensorT<T>(gy.n, gy.c, gy.h / 2, gy.w / 2);
    for (int i = 0; i < gx.n; ++i)
        for (int c = 0; c < gx.c; ++c) {
            const T* gp = gy.plane(i, c);
            T* xp = gx.plane(i, c);
            for (int iy = 0; iy < gx.h; ++iy) {
                const T* __restrict g0 = gp + static_cast<size_t>(2 * iy) * gy.w;
                const T* __restrict g1 = g0 + gy.w;
                T* __restrict xr = xp + static_cast<size_t>(iy) * gx.w;
                for (int ix = 0; ix < gx.w; ++ix)
                    xr[ix] = g0[2 * ix] + g0[2 * ix + 1] + g1[2 * ix] + g1[2 * ix + 1];
            }
        }
}

// Channel concatenation: y = [a ; b] along the channel axis.
template <class T>
void concat_forward(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& y) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw Error(ErrorCode::ShapeMismatch,
                    "concat operands " + a.shape_str() + " vs " + b.shape_str());
    y = TensorT<T>(a.n, a.c + b.c, a.h, a.w);
    const size_t plane = static_cast<size_t>(a.h) * a.w;
    for (int i = 0; i < a.n; ++i) {
        for (int c = 0; c < a.c; ++c)
            std::memcpy(y.plane(i, c), a.plane(i, c), sizeof(T) * plane);
        for (int c = 0; c < b.c; ++c)
            std::memcpy(y.plane(i, a.c + c), b.plane(i, c), sizeof(T) * plane);
    }
}

template <class T>
void concat_backward(const TensorT<T>& gy, int ca, TensorT<T>& ga, TensorT<T>& gb) {
    if (ca <= 0 || ca >= gy.c)
        throw Error(ErrorCode::ShapeMismatch, "concat split point out of range");
    ga = TensorT<T>(gy.n, ca, gy.h, gy.w);
    gb = TensorT<T>(gy.n, gy.c - ca, gy.h, gy.w);
    const size_t plane = static_cast<size_t>(gy.h) * gy.w;
    for (int i = 0; i < gy.n; ++i) {
        for (int c = 0; c < ca; ++c)
            std::memcpy(ga.plane(i, c), gy.plane(i, c), sizeof(T) * plane);
        for (int c = ca; c < gy.c; ++c)
            std::memcpy(gb.plane(i, c - ca), gy.plane(i, c), sizeof(T) * plane);
    }
}

template <class T>
void gap_forward(const TensorT<T>& x, TensorT<T>& y) {
    y = TensorT<T>(x.n, x.c, 1, 1);
    const int hw = x.h * x.w;
    for (int i = 0; i < x.n; ++i)
        for (int c = 0; c < x.c; ++c)
            y.at(i, c, 0, 0) = detail::sum(x.plane(i, c), hw) / static_cast<T>(hw);
}

template <class T>
void gap_backward(const TensorT<T>& gy, int h, int w, TensorT<T>& gx) {
    gy.require_shape(gy.n, gy.c, 1, 1, "gap grad-output");
    gx = TensorT<T>(gy.n, gy.c, h, w);
    const T inv = T(1) / static_cast<T>(h * w);
    for (int i = 0; i < gy.n; ++i)
        for (int c = 0; c < gy.c; ++c) {
            const T v = gy.at(i, c, 0, 0) * inv;
            T* p = gx.plane(i, c);
            for (int j = 0; j < h * w; ++j) p[j] = v;
        }
}

template <class T>
void add_inplace(TensorT<T>& dst, const TensorT<T>& src) {
    src.require_shape(dst.n, dst.c, dst.h, dst.w, "elementwise add");
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace mitl

#endif

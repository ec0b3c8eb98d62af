#ifndef MITL_AUGMENT_HPP
#define MITL_AUGMENT_HPP

#include <array>

#include "mitl/rng.hpp"
#include "mitl/tensor.hpp"

namespace mitl {

// One of the 8 symmetries of the square: `rotation` clockwise quarter-turns
// applied first, then an optional horizontal flip. Rotations carry pixels
// whole (no interpolation), so {0,1} masks stay exact.
struct DihedralTransform {
    int rotation = 0; // 0..3 quarter-turns clockwise
    bool flip = false;
    bool operator==(const DihedralTransform&) const = default;
};

inline std::array<DihedralTransform, 8> dihedral_group() {
    std::array<DihedralTransform, 8> g;
    for (int i = 0; i < 8; ++i) g[i] = DihedralTransform{i & 3, i >= 4};
    return g;
}

// Applying `a` then `b` as one transform. With g = F^f R^k and the relation
// R F = F R^-1: fa=0 adds rotations, fa=1 makes b's rotation act reversed.
inline DihedralTransform compose(DihedralTransform a, DihedralTransform b) {
    DihedralTransform c;
    c.flip = a.flip != b.flip;
    c.rotation = a.flip ? (a.rotation - b.rotation + 4) & 3 : (a.rotation + b.rotation) & 3;
    return c;
}

inline DihedralTransform inverse(DihedralTransform t) {
    if (t.flip) return t; // reflections are involutions
    return DihedralTransform{(4 - t.rotation) & 3, false};
}

template <class T>
TensorT<T> apply_dihedral(const TensorT<T>& x, DihedralTransform t) {
    if (x.h != x.w)
        throw Error(ErrorCode::NonSquareInput, "dihedral transform on " + x.shape_str());
    const int s = x.h;
    const int k = t.rotation & 3;
    TensorT<T> y(x.n, x.c, s, s);
    for (int i = 0; i < x.n; ++i)
        for (int c = 0; c < x.c; ++c) {
            const T* src = x.plane(i, c);
            T* dst = y.plane(i, c);
            for (int r = 0; r < s; ++r)
                for (int col = 0; col < s; ++col) {
                    int rr, cc;
                    switch (k) {
                        case 0: rr = r, cc = col; break;
                        case 1: rr = col, cc = s - 1 - r; break;
                        case 2: rr = s - 1 - r, cc = s - 1 - col; break;
                        default: rr = s - 1 - col, cc = r; break;
                    }
                    if (t.flip) cc = s - 1 - cc;
                    dst[static_cast<size_t>(rr) * s + cc] = src[static_cast<size_t>(r) * s + col];
                }
        }
    return y;
}

// Stain-deconvolution jitter parameters. Rows of od_matrix map RGB optical
// density to stain channels and are unit-norm; alpha/beta are per-stain
// multiplicative/additive perturbations; the sigmas record the half-ranges
// the jitter was drawn from.
struct StainParams {
    std::array<std::array<double, 3>, 3> od_matrix{};
    std::array<double, 3> alpha{1.0, 1.0, 1.0};
    std::array<double, 3> beta{0.0, 0.0, 0.0};
    double sigma_alpha = 0.05;
    double sigma_beta = 0.01;
};

// Ruifrok-Johnston H&E-DAB stain vectors, row-normalized; identity jitter.
StainParams default_stain_params();

// clamp -> optical density -> stain space -> jitter -> back -> pixels.
Tensor stain_augment(const Tensor& patch, const StainParams& params);

struct AugConfig {
    double sigma_alpha = 0.05;
    double sigma_beta = 0.01;
    bool enable_stain = true;
    bool enable_dihedral = true;
};

struct TrainingAugmentation {
    DihedralTransform dihedral;
    StainParams stain;
};

// Draw order (fixed for reproducibility): 1 dihedral index if enabled, then
// 3 alpha and 3 beta uniforms if stain is enabled. Disabled parts consume no
// draws and return identity transforms.
TrainingAugmentation sample_training_augmentation(Rng& rng, const AugConfig& cfg);

} // namespace mitl

#endif

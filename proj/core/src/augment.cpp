#include "mitl/augment.hpp"

#include <cmath>

namespace mitl {

namespace {

std::array<std::array<double, 3>, 3> normalized_rows(std::array<std::array<double, 3>, 3> m) {
    for (auto& row : m) {
        const double norm = std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2]);
        for (double& v : row) v /= norm;
    }
    return m;
}

// Closed-form 3x3 inverse via the adjugate.
std::array<std::array<double, 3>, 3> invert3(const std::array<std::array<double, 3>, 3>& m) {
    const double a = m[0][0], b = m[0][1], c = m[0][2];
    const double d = m[1][0], e = m[1][1], f = m[1][2];
    const double g = m[2][0], h = m[2][1], i = m[2][2];
    const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    if (std::abs(det) < 1e-12)
        throw Error(ErrorCode::SingularMatrix, "stain matrix determinant " + std::to_string(det));
    const double inv = 1.0 / det;
    return {{{(e * i - f * h) * inv, (c * h - b * i) * inv, (b * f - c * e) * inv},
             {(f * g - d * i) * inv, (a * i - c * g) * inv, (c * d - a * f) * inv},
             {(d * h - e * g) * inv, (b * g - a * h) * inv, (a * e - b * d) * inv}}};
}

} // namespace

StainParams default_stain_params() {
    StainParams p;
    p.od_matrix = normalized_rows({{{0.65, 0.70, 0.29},   // hematoxylin
                                    {0.07, 0.99, 0.11},   // eosin
                                    {0.27, 0.57, 0.78}}}); // DAB
    return p;
}

Tensor stain_augment(const Tensor& patch, const StainParams& params) {
    if (patch.c != 3)
        throw Error(ErrorCode::ShapeMismatch, "stain augmentation needs 3 channels, got " +
                                                  patch.shape_str());
    const auto& m = params.od_matrix;
    const auto minv = invert3(m);

    Tensor out(patch.n, patch.c, patch.h, patch.w);
    const int hw = patch.h * patch.w;
    constexpr double eps_img = 1e-6;
    for (int i = 0; i < patch.n; ++i) {
        const float* r = patch.plane(i, 0);
        const float* g = patch.plane(i, 1);
        const float* b = patch.plane(i, 2);
        float* ro = out.plane(i, 0);
        float* go = out.plane(i, 1);
        float* bo = out.plane(i, 2);
        for (int j = 0; j < hw; ++j) {
            double od[3];
            const double px[3] = {r[j], g[j], b[j]};
            for (int ch = 0; ch < 3; ++ch) {
                double p = px[ch];
                p = p < eps_img ? eps_img : (p > 1.0 ? 1.0 : p);
                od[ch] = -std::log(p);
            }
            double stains[3];
            for (int s = 0; s < 3; ++s)
                stains[s] = params.alpha[s] *
                                (m[s][0] * od[0] + m[s][1] * od[1] + m[s][2] * od[2]) +
                            params.beta[s];
            double res[3];
            for (int ch = 0; ch < 3; ++ch) {
                const double odp =
                    minv[ch][0] * stains[0] + minv[ch][1] * stains[1] + minv[ch][2] * stains[2];
                double p = std::exp(-odp);
                res[ch] = p < 0.0 ? 0.0 : (p > 1.0 ? 1.0 : p);
            }
            ro[j] = static_cast<float>(res[0]);
            go[j] = static_cast<float>(res[1]);
            bo[j] = static_cast<float>(res[2]);
        }
    }
    return out;
}

TrainingAugmentation sample_training_augmentation(Rng& rng, const AugConfig& cfg) {
    TrainingAugmentation aug;
    aug.stain = default_stain_params();
    aug.stain.sigma_alpha = cfg.sigma_alpha;
    aug.stain.sigma_beta = cfg.sigma_beta;
    if (cfg.enable_dihedral) {
        const int idx = static_cast<int>(rng.uniform_int(8));
        aug.dihedral = DihedralTransform{idx & 3, idx >= 4};
    }
    if (cfg.enable_stain) {
        for (int s = 0; s < 3; ++s)
            aug.stain.alpha[s] = 1.0 + cfg.sigma_alpha * (2.0 * rng.uniform() - 1.0);
        for (int s = 0; s < 3; ++s)
            aug.stain.beta[s] = cfg.sigma_beta * (2.0 * rng.uniform() - 1.0);
    }
    return aug;
}

} // namespace mitl

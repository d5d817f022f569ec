#pragma once

// Physics-based recovery: inverts the degradation model in feature space,
// with an exact pixel-space counterpart used as a test oracle, and a simple
// feature-to-RGB projection for visualization.

#include "semivdn/core/image_ops.hpp"
#include "semivdn/corpus.hpp"

namespace semivdn {
namespace recovery {

// F_B = (F_I - F_S - (1 - F_T) * F_A) / (F_T + beta), with the single-channel
// airlight field broadcast across channels. No clamping: losses must see raw
// values so gradients flow; clamping is an export concern.
template <typename T>
ad::Var<T> prior_guided_recovery(const ad::Var<T>& f_i, const ad::Var<T>& f_s,
                                 const ad::Var<T>& f_t, const ad::Var<T>& f_a,
                                 T beta = static_cast<T>(1e-8)) {
    if (!f_i.val().same_shape(f_s.val()) || !f_i.val().same_shape(f_t.val()))
        throw std::invalid_argument("prior_guided_recovery: shape mismatch");
    if (f_a.val().dim(0) != f_i.val().dim(0) || f_a.val().dim(1) != 1 ||
        f_a.val().dim(2) != f_i.val().dim(2) || f_a.val().dim(3) != f_i.val().dim(3))
        throw std::invalid_argument("prior_guided_recovery: airlight shape mismatch");

    const int c = f_i.val().dim(1);
    auto a_full = ad::bcast_channels(f_a, c);
    auto one_minus_t = ad::add_scalar(ad::neg(f_t), T(1));
    auto numer = ad::sub(ad::sub(f_i, f_s), ad::mul(one_minus_t, a_full));
    auto out = ad::div(numer, ad::add_scalar(f_t, beta));
    if (!out.val().all_finite())
        throw NumericError("prior_guided_recovery: non-finite output");
    return out;
}

struct OracleResult {
    Clip clean;
    bool clipped = false; // composition saturated at 1.0 somewhere
};

// Applies the same inversion per pixel to undo compose_snowy. Exact (to
// float rounding) when the composition did not clip; when any snowy pixel
// sits at 1.0 the inversion is unreliable and `clipped` is set.
inline OracleResult pixel_recovery_oracle(const Clip& snowy,
                                          const DegradationTriple& deg,
                                          double beta = 1e-8) {
    const int n_f = snowy.n_f(), h = snowy.height(), w = snowy.width();
    if (deg.snow.dim(0) != n_f || deg.snow.dim(2) != h || deg.snow.dim(3) != w ||
        deg.trans.dim(0) != n_f || deg.trans.dim(2) != h || deg.trans.dim(3) != w)
        throw std::invalid_argument("pixel_recovery_oracle: shape mismatch");

    OracleResult res;
    res.clean.id = snowy.id;
    res.clean.frames = Tensor<float>({n_f, 3, h, w});
    for (int k = 0; k < n_f; ++k)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const double iv = snowy.frames(k, c, i, j);
                    if (iv >= 1.0) res.clipped = true;
                    const double t = deg.trans(k, 0, i, j);
                    const double num = iv - deg.snow(k, c, i, j) -
                                       (1.0 - t) * deg.airlight;
                    res.clean.frames(k, c, i, j) = static_cast<float>(num / (t + beta));
                }
    return res;
}

// One 1x1 convolution to 3 channels followed by nearest upsampling. With
// identity weights and factor 1 this is the identity on 3-channel input;
// the full model uses its own learned decoder, this one serves component
// visualization.
template <typename T>
ad::Var<T> project_to_rgb(const ad::Var<T>& features, const ad::Var<T>& weight,
                          const ad::Var<T>& bias, int upsample_factor = 4) {
    if (weight.val().rows() != 3 || weight.val().cols() != features.val().dim(1))
        throw std::invalid_argument("project_to_rgb: weight must be 3 x channels");
    auto out = ad::conv2d(features, weight, bias, 1, 1, 1, 0);
    for (int f = upsample_factor; f > 1; f /= 2) {
        if (f % 2 != 0)
            throw std::invalid_argument("project_to_rgb: factor must be a power of 2");
        out = ad::upsample2(out);
    }
    return out;
}

// Channel-mean projection weights for visualizing a c-channel feature map as
// a grayscale RGB panel.
template <typename T>
Tensor<T> mean_projection_weight(int channels) {
    Tensor<T> w({3, channels}, static_cast<T>(1.0 / channels));
    return w;
}

} // namespace recovery
} // namespace semivdn

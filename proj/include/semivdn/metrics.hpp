#pragma once

// Image quality metrics for [0,1]-range RGB clips: PSNR and single-scale
// SSIM (11-tap Gaussian window on the luma plane, valid region only).

#include "semivdn/core/tensor.hpp"

namespace semivdn {
namespace metrics {

// Peak signal-to-noise ratio against a peak of 1.0, capped at 99 dB so
// identical inputs produce a finite sentinel.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "psnr");
    double mse = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

namespace detail {

inline const std::vector<double>& gaussian11() {
    static const std::vector<double> k = [] {
        std::vector<double> v(11);
        const double sigma = 1.5;
        double s = 0;
        for (int i = 0; i < 11; ++i) {
            const double d = i - 5;
            v[i] = std::exp(-d * d / (2.0 * sigma * sigma));
            s += v[i];
        }
        for (double& x : v) x /= s;
        return v;
    }();
    return k;
}

// Separable valid-mode filtering of an h x w plane with the 11-tap kernel.
inline std::vector<double> smooth_valid(const std::vector<double>& plane, int h, int w) {
    const auto& k = gaussian11();
    const int oh = h - 10, ow = w - 10;
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < ow; ++j) {
            double s = 0;
            for (int t = 0; t < 11; ++t) s += k[t] * plane[static_cast<std::size_t>(i) * w + j + t];
            rows[static_cast<std::size_t>(i) * ow + j] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
            double s = 0;
            for (int t = 0; t < 11; ++t) s += k[t] * rows[static_cast<std::size_t>(i + t) * ow + j];
            out[static_cast<std::size_t>(i) * ow + j] = s;
        }
    return out;
}

} // namespace detail

// Mean SSIM over frames, computed on luma (0.299 R + 0.587 G + 0.114 B) with
// an 11x11 Gaussian window (sigma 1.5) and stabilizers k1=0.01, k2=0.03 for a
// dynamic range of 1. Windows that would cross the border are skipped.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "ssim");
    if (a.rank() != 4 || a.dim(1) != 3)
        throw std::invalid_argument("ssim: expected N x 3 x H x W");
    const int n = a.dim(0), h = a.dim(2), w = a.dim(3);
    if (h < 11 || w < 11)
        throw std::invalid_argument("ssim: frames smaller than the 11x11 window");
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const std::size_t hw = static_cast<std::size_t>(h) * w;

    double acc = 0;
    std::size_t count = 0;
    std::vector<double> la(hw), lb(hw), laa(hw), lbb(hw), lab(hw);
    for (int f = 0; f < n; ++f) {
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * w + j;
                const double ya = 0.299 * a(f, 0, i, j) + 0.587 * a(f, 1, i, j) +
                                  0.114 * a(f, 2, i, j);
                const double yb = 0.299 * b(f, 0, i, j) + 0.587 * b(f, 1, i, j) +
                                  0.114 * b(f, 2, i, j);
                la[idx] = ya;
                lb[idx] = yb;
                laa[idx] = ya * ya;
                lbb[idx] = yb * yb;
                lab[idx] = ya * yb;
            }
        const auto mu_a = detail::smooth_valid(la, h, w);
        const auto mu_b = detail::smooth_valid(lb, h, w);
        const auto e_aa = detail::smooth_valid(laa, h, w);
        const auto e_bb = detail::smooth_valid(lbb, h, w);
        const auto e_ab = detail::smooth_valid(lab, h, w);
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double va = std::max(0.0, e_aa[i] - mu_a[i] * mu_a[i]);
            const double vb = std::max(0.0, e_bb[i] - mu_b[i] * mu_b[i]);
            const double cov = e_ab[i] - mu_a[i] * mu_b[i];
            const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
            acc += num / den;
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

} // namespace metrics
} // namespace semivdn

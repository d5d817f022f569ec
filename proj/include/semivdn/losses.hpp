#pragma once

// Training losses. Everything is built from autodiff primitives so analytic
// gradients are available end to end; pixel inputs are rank-4 clips
// (frames x channels x H x W).

#include <array>

#include "semivdn/core/image_ops.hpp"
#include "semivdn/core/rng.hpp"
#include "semivdn/io.hpp"

namespace semivdn {
namespace losses {

struct LossWeights {
    double lambda1 = 0.03; // perceptual (paired)
    double lambda2 = 10.0; // frequency (paired)
    double lambda3 = 2.0;  // pixel consistency (student/teacher)
    double lambda4 = 0.1;  // perceptual contrastive
    double lambda5 = 0.1;  // dark channel
    double lambda6 = 0.5;  // total variation
    double dcr = 0.1;      // distribution contrastive (added by the trainer)
    double eps_charb = 1e-3;
    int dcp_window = 7;

    static LossWeights from_json(const nlohmann::json& loss_cfg) {
        LossWeights w;
        w.lambda1 = loss_cfg.value("lambda1", w.lambda1);
        w.lambda2 = loss_cfg.value("lambda2", w.lambda2);
        w.lambda3 = loss_cfg.value("lambda3", w.lambda3);
        w.lambda4 = loss_cfg.value("lambda4", w.lambda4);
        w.lambda5 = loss_cfg.value("lambda5", w.lambda5);
        w.lambda6 = loss_cfg.value("lambda6", w.lambda6);
        w.eps_charb = loss_cfg.value("eps_charb", w.eps_charb);
        w.dcp_window = loss_cfg.value("dcp_window", w.dcp_window);
        return w;
    }
};

struct LossReport {
    struct Term {
        std::string name;
        double weight;
        double value;
    };
    std::vector<Term> terms;

    void add(std::string name, double weight, double value) {
        terms.push_back({std::move(name), weight, value});
    }

    double total() const {
        double t = 0;
        for (const auto& e : terms) t += e.weight * e.value;
        return t;
    }

    bool finite() const {
        for (const auto& e : terms)
            if (!std::isfinite(e.value)) return false;
        return true;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        for (const auto& e : terms)
            j[e.name] = {{"weight", e.weight}, {"value", e.value}};
        j["total"] = total();
        return j;
    }
};

// mean of sqrt((x - y)^2 + eps^2); floors at eps when x == y.
template <typename T>
ad::Var<T> charbonnier(const ad::Var<T>& x, const ad::Var<T>& y,
                       T eps = static_cast<T>(1e-3)) {
    require_same_shape(x.val(), y.val(), "charbonnier");
    auto d2 = ad::square(ad::sub(x, y));
    return ad::mean_all(ad::sqrt_(ad::add_scalar(d2, eps * eps)));
}

template <typename T>
ad::Var<T> mean_abs(const ad::Var<T>& a, const ad::Var<T>& b) {
    return ad::mean_all(ad::abs_(ad::sub(a, b)));
}

// Frozen random conv pyramid standing in for a pretrained feature extractor:
// three stages at cumulative strides 1, 2, 4 with widths 8/16/32. Weights
// are a pure function of the seed, so features are reproducible everywhere.
template <typename T>
class PerceptualProxy {
public:
    explicit PerceptualProxy(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0xFEA7));
        w1_ = make_weight(8, 3, rng);
        b1_ = Tensor<T>({8}, T(0));
        w2_ = make_weight(16, 8, rng);
        b2_ = Tensor<T>({16}, T(0));
        w3_ = make_weight(32, 16, rng);
        b3_ = Tensor<T>({32}, T(0));
    }

    // x: N x 3 x H x W; H and W must be divisible by 4.
    std::array<ad::Var<T>, 3> forward(const ad::Var<T>& x) const {
        auto c = [](const Tensor<T>& t) { return ad::Var<T>::constant(t); };
        auto s1 = ad::gelu(ad::conv2d(x, c(w1_), c(b1_), 3, 3, 1, 1));
        auto s2 = ad::gelu(ad::conv2d(s1, c(w2_), c(b2_), 3, 3, 2, 1));
        auto s3 = ad::gelu(ad::conv2d(s2, c(w3_), c(b3_), 3, 3, 2, 1));
        return {s1, s2, s3};
    }

private:
    static Tensor<T> make_weight(int cout, int cin, Rng& rng) {
        const int fan_in = cin * 9;
        Tensor<T> w({cout, fan_in});
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::size_t i = 0; i < w.numel(); ++i)
            w[i] = static_cast<T>(rng.normal(0.0, scale));
        return w;
    }

    Tensor<T> w1_, b1_, w2_, b2_, w3_, b3_;
};

// L1 over proxy features, averaged over the three stages.
template <typename T>
ad::Var<T> perceptual_loss(const ad::Var<T>& pred, const ad::Var<T>& gt,
                           const PerceptualProxy<T>& proxy) {
    require_same_shape(pred.val(), gt.val(), "perceptual_loss");
    auto fp = proxy.forward(pred);
    auto fg = proxy.forward(gt);
    auto total = mean_abs(fp[0], fg[0]);
    total = ad::add(total, mean_abs(fp[1], fg[1]));
    total = ad::add(total, mean_abs(fp[2], fg[2]));
    return ad::mul_scalar(total, T(1) / T(3));
}

// Per-frequency squared spectral distance, weighted by |spectral diff|^alpha
// with the weight map max-normalized per (frame, channel) plane. The weight
// stays on the tape (it is not treated as a constant), so analytic gradients
// match finite differences.
template <typename T>
ad::Var<T> focal_frequency_loss(const ad::Var<T>& pred, const ad::Var<T>& gt,
                                double alpha = 1.0) {
    require_same_shape(pred.val(), gt.val(), "focal_frequency_loss");
    if (alpha != 1.0)
        throw std::invalid_argument("focal_frequency_loss: only alpha=1 supported");
    const int n = pred.val().dim(0), c = pred.val().dim(1);
    const int h = pred.val().dim(2), w = pred.val().dim(3);
    const int hw = h * w;

    auto diff = ad::sub(ad::dft2_ortho(pred), ad::dft2_ortho(gt));
    auto planes = ad::reshape(diff, {n * 2 * c, hw});

    ad::Var<T> total = ad::Var<T>::constant(Tensor<T>::scalar(T(0)));
    for (int b = 0; b < n; ++b)
        for (int cc = 0; cc < c; ++cc) {
            auto re = ad::rows_slice(planes, b * 2 * c + cc, 1);
            auto im = ad::rows_slice(planes, b * 2 * c + c + cc, 1);
            auto s = ad::add(ad::square(re), ad::square(im)); // |diff|^2 per bin
            auto wmap = ad::sqrt_(s);                         // |diff|^alpha, alpha=1
            auto wmax = ad::add_scalar(ad::max_all(wmap), static_cast<T>(1e-12));
            auto wnorm = ad::div(wmap, ad::bcast_scalar(wmax, {1, hw}));
            auto plane_loss =
                ad::mul_scalar(ad::sum_all(ad::mul(wnorm, s)), T(1) / static_cast<T>(hw));
            total = ad::add(total, plane_loss);
        }
    return ad::mul_scalar(total, T(1) / static_cast<T>(n * c));
}

// Mean absolute dark channel: min over channels and a square window, then
// the L1 average over pixels.
template <typename T>
ad::Var<T> dcp_loss(const ad::Var<T>& pred, int window = 7) {
    if (window <= 0 || window % 2 == 0)
        throw std::invalid_argument("dcp_loss: window must be odd and positive");
    return ad::mean_all(ad::abs_(ad::dark_channel(pred, window)));
}

// Anisotropic forward-difference total variation, normalized by the full
// pixel count (a ramp of step s across W columns scores s*(W-1)/W).
template <typename T>
ad::Var<T> tv_loss(const ad::Var<T>& pred) {
    const T inv = T(1) / static_cast<T>(pred.val().numel());
    auto s = ad::add(ad::sum_all(ad::abs_(ad::diff_w(pred))),
                     ad::sum_all(ad::abs_(ad::diff_h(pred))));
    return ad::mul_scalar(s, inv);
}

// Per-stage ratio of proxy-feature distances, summed over stages:
//   sum_s L1(phi_s(a), phi_s(p)) / (L1(phi_s(a), phi_s(n)) + 1e-7).
template <typename T>
ad::Var<T> perceptual_contrastive(const ad::Var<T>& anchor, const ad::Var<T>& positive,
                                  const ad::Var<T>& negative,
                                  const PerceptualProxy<T>& proxy) {
    require_same_shape(anchor.val(), positive.val(), "perceptual_contrastive");
    require_same_shape(anchor.val(), negative.val(), "perceptual_contrastive");
    auto fa = proxy.forward(anchor);
    auto fp = proxy.forward(positive);
    auto fn = proxy.forward(negative);
    ad::Var<T> total = ad::Var<T>::constant(Tensor<T>::scalar(T(0)));
    for (int s = 0; s < 3; ++s) {
        auto num = mean_abs(fa[s], fp[s]);
        auto den = ad::add_scalar(mean_abs(fa[s], fn[s]), static_cast<T>(1e-7));
        total = ad::add(total, ad::div(num, den));
    }
    return total;
}

template <typename T>
struct LossBundle {
    ad::Var<T> total;
    LossReport report;
};

// pixel + lambda1 * perceptual + lambda2 * frequency.
template <typename T>
LossBundle<T> supervised_total(const ad::Var<T>& pred, const ad::Var<T>& gt,
                               const LossWeights& w, const PerceptualProxy<T>& proxy) {
    auto pix = charbonnier(pred, gt, static_cast<T>(w.eps_charb));
    auto per = perceptual_loss(pred, gt, proxy);
    auto freq = focal_frequency_loss(pred, gt);

    LossBundle<T> out;
    out.total = ad::add(pix, ad::add(ad::mul_scalar(per, static_cast<T>(w.lambda1)),
                                     ad::mul_scalar(freq, static_cast<T>(w.lambda2))));
    out.report.add("pixel", 1.0, pix.scalar());
    out.report.add("perceptual", w.lambda1, per.scalar());
    out.report.add("frequency", w.lambda2, freq.scalar());
    return out;
}

// lambda3 * pixel(stu, tea) + lambda4 * contrastive + lambda5 * dark channel
// + lambda6 * TV. The distribution-contrastive term is appended by the
// trainer, which owns candidate selection.
template <typename T>
LossBundle<T> unsupervised_total(const ad::Var<T>& stu, const ad::Var<T>& tea,
                                 const ad::Var<T>& aug_real, const LossWeights& w,
                                 const PerceptualProxy<T>& proxy) {
    auto pix = charbonnier(stu, tea, static_cast<T>(w.eps_charb));
    auto cl = perceptual_contrastive(stu, tea, aug_real, proxy);
    auto dcp = dcp_loss(stu, w.dcp_window);
    auto tv = tv_loss(stu);

    LossBundle<T> out;
    out.total = ad::add(
        ad::add(ad::mul_scalar(pix, static_cast<T>(w.lambda3)),
                ad::mul_scalar(cl, static_cast<T>(w.lambda4))),
        ad::add(ad::mul_scalar(dcp, static_cast<T>(w.lambda5)),
                ad::mul_scalar(tv, static_cast<T>(w.lambda6))));
    out.report.add("consistency", w.lambda3, pix.scalar());
    out.report.add("contrastive", w.lambda4, cl.scalar());
    out.report.add("dark_channel", w.lambda5, dcp.scalar());
    out.report.add("tv", w.lambda6, tv.scalar());
    return out;
}

} // namespace losses
} // namespace semivdn

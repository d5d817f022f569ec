#pragma once

// Scalar Gaussian mixtures over snow-layer intensities: EM fitting with a
// k-means++-style seeded init, Monte Carlo KL between mixtures, selection of
// the closest synthetic snow layer, and the distribution-driven contrastive
// ratio loss.

#include <deque>

#include "semivdn/core/image_ops.hpp"
#include "semivdn/core/rng.hpp"

namespace semivdn {
namespace gmm {

struct GMMModel {
    std::vector<double> weight; // simplex
    std::vector<double> mean;
    std::vector<double> var; // >= var_floor
    std::vector<double> loglik_history;

    static constexpr double var_floor = 1e-6;

    int k() const { return static_cast<int>(weight.size()); }

    double log_pdf(double x) const {
        constexpr double log_2pi = 1.8378770664093454836;
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> lg(weight.size());
        for (std::size_t i = 0; i < weight.size(); ++i) {
            const double d = x - mean[i];
            lg[i] = std::log(weight[i]) -
                    0.5 * (log_2pi + std::log(var[i]) + d * d / var[i]);
            mx = std::max(mx, lg[i]);
        }
        double s = 0;
        for (const double v : lg) s += std::exp(v - mx);
        return mx + std::log(s);
    }

    double sample(Rng& rng) const {
        const double u = rng.uniform();
        double acc = 0;
        std::size_t comp = weight.size() - 1;
        for (std::size_t i = 0; i < weight.size(); ++i) {
            acc += weight[i];
            if (u < acc) {
                comp = i;
                break;
            }
        }
        return rng.normal(mean[comp], std::sqrt(var[comp]));
    }
};

// Expectation-maximization with responsibilities computed through
// log-sum-exp. The log-likelihood trace is kept on the model so callers can
// assert monotonicity.
inline GMMModel fit_gmm_em(const std::vector<double>& samples, int k,
                           int max_iter = 100, double tol = 1e-6,
                           std::uint64_t seed = 0) {
    const int n = static_cast<int>(samples.size());
    if (n < k) throw std::invalid_argument("fit_gmm_em: fewer samples than components");
    if (k <= 0) throw std::invalid_argument("fit_gmm_em: k must be positive");

    // k-means++-style init: first center uniform, later centers proportional
    // to squared distance from the nearest chosen center.
    Rng rng(derive_seed(seed, 0x6E17));
    std::vector<double> centers;
    centers.push_back(samples[rng.uniform_int(0, n - 1)]);
    std::vector<double> d2(n);
    while (static_cast<int>(centers.size()) < k) {
        double total = 0;
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            for (const double c : centers)
                best = std::min(best, (samples[i] - c) * (samples[i] - c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0) {
            // All points coincide with a center; any choice works.
            centers.push_back(samples[rng.uniform_int(0, n - 1)]);
            continue;
        }
        double u = rng.uniform() * total;
        int pick = n - 1;
        for (int i = 0; i < n; ++i) {
            u -= d2[i];
            if (u <= 0) {
                pick = i;
                break;
            }
        }
        centers.push_back(samples[pick]);
    }

    double smean = 0;
    for (const double x : samples) smean += x;
    smean /= n;
    double svar = 0;
    for (const double x : samples) svar += (x - smean) * (x - smean);
    svar = std::max(svar / n, GMMModel::var_floor);

    GMMModel m;
    m.weight.assign(k, 1.0 / k);
    m.mean = centers;
    m.var.assign(k, svar);

    std::vector<double> resp(static_cast<std::size_t>(n) * k);
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iter; ++it) {
        // E step.
        double ll = 0;
        for (int i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < k; ++j) {
                const double d = samples[i] - m.mean[j];
                const double lg = std::log(m.weight[j]) -
                                  0.5 * (std::log(2.0 * 3.14159265358979323846 * m.var[j]) +
                                         d * d / m.var[j]);
                resp[static_cast<std::size_t>(i) * k + j] = lg;
                mx = std::max(mx, lg);
            }
            double s = 0;
            for (int j = 0; j < k; ++j)
                s += std::exp(resp[static_cast<std::size_t>(i) * k + j] - mx);
            const double lse = mx + std::log(s);
            ll += lse;
            for (int j = 0; j < k; ++j) {
                auto& r = resp[static_cast<std::size_t>(i) * k + j];
                r = std::exp(r - lse);
            }
        }
        m.loglik_history.push_back(ll);
        if (ll + 1e-9 < prev_ll)
            throw NumericError("fit_gmm_em: log-likelihood decreased");
        const bool converged = std::abs(ll - prev_ll) < tol;
        prev_ll = ll;
        if (converged) break;

        // M step.
        for (int j = 0; j < k; ++j) {
            double nk = 0, mu = 0;
            for (int i = 0; i < n; ++i) {
                const double r = resp[static_cast<std::size_t>(i) * k + j];
                nk += r;
                mu += r * samples[i];
            }
            if (nk <= 1e-12) {
                // Dead component: re-seat it at a random sample.
                m.weight[j] = 1e-6;
                m.mean[j] = samples[rng.uniform_int(0, n - 1)];
                m.var[j] = svar;
                continue;
            }
            mu /= nk;
            double va = 0;
            for (int i = 0; i < n; ++i) {
                const double r = resp[static_cast<std::size_t>(i) * k + j];
                va += r * (samples[i] - mu) * (samples[i] - mu);
            }
            m.weight[j] = nk / n;
            m.mean[j] = mu;
            m.var[j] = std::max(va / nk, GMMModel::var_floor);
        }
        // Renormalize weights (dead-component handling can unbalance them).
        double wsum = 0;
        for (const double w : m.weight) wsum += w;
        for (double& w : m.weight) w /= wsum;
    }
    return m;
}

struct KlEstimate {
    double raw = 0; // may dip below zero from Monte Carlo noise
    double se = 0;  // standard error of the estimate
};

// E_p[log p - log q] over n seeded draws from p.
inline KlEstimate gmm_kl_mc_stats(const GMMModel& p, const GMMModel& q,
                                  int n_samples = 4096, std::uint64_t seed = 0) {
    Rng rng(derive_seed(seed, 0x4C3));
    double s = 0, s2 = 0;
    for (int i = 0; i < n_samples; ++i) {
        const double x = p.sample(rng);
        const double v = p.log_pdf(x) - q.log_pdf(x);
        s += v;
        s2 += v * v;
    }
    KlEstimate e;
    e.raw = s / n_samples;
    const double var = std::max(0.0, s2 / n_samples - e.raw * e.raw);
    e.se = std::sqrt(var / n_samples);
    return e;
}

// Public estimator: clamped at zero (KL is non-negative).
inline double gmm_kl_mc(const GMMModel& p, const GMMModel& q, int n_samples = 4096,
                        std::uint64_t seed = 0) {
    return std::max(0.0, gmm_kl_mc_stats(p, q, n_samples, seed).raw);
}

// Per-pixel grayscale intensity (channel mean) of a feature/snow map,
// deterministically strided down to at most max_n points.
template <typename T>
std::vector<double> intensity_samples(const Tensor<T>& map, std::size_t max_n = 8192) {
    const int n = map.dim(0), c = map.dim(1), h = map.dim(2), w = map.dim(3);
    std::vector<double> all;
    all.reserve(static_cast<std::size_t>(n) * h * w);
    for (int b = 0; b < n; ++b)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double s = 0;
                for (int cc = 0; cc < c; ++cc) s += map(b, cc, i, j);
                all.push_back(s / c);
            }
    if (all.size() <= max_n) return all;
    std::vector<double> out;
    out.reserve(max_n);
    const double stride = static_cast<double>(all.size()) / static_cast<double>(max_n);
    for (std::size_t i = 0; i < max_n; ++i)
        out.push_back(all[static_cast<std::size_t>(i * stride)]);
    return out;
}

// Fits a mixture to the real snow and every candidate, then returns the
// candidate minimizing KL(real || candidate). All fits share one seed so an
// exact copy of the real map yields an identical mixture and therefore an
// estimate of exactly zero. Selection compares unclamped estimates; ties go
// to the lowest index.
template <typename T>
std::size_t select_ultra_positive(const Tensor<T>& real_snow,
                                  const std::vector<Tensor<T>>& candidates,
                                  int k = 3, int mc_samples = 4096,
                                  std::uint64_t seed = 0,
                                  std::size_t max_fit_samples = 8192) {
    if (candidates.empty())
        throw std::invalid_argument("select_ultra_positive: no candidates");
    const GMMModel real =
        fit_gmm_em(intensity_samples(real_snow, max_fit_samples), k, 100, 1e-6,
                   derive_seed(seed, 0xF17));
    std::size_t best = 0;
    double best_kl = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const GMMModel cand =
            fit_gmm_em(intensity_samples(candidates[i], max_fit_samples), k, 100, 1e-6,
                       derive_seed(seed, 0xF17));
        const double kl =
            gmm_kl_mc_stats(real, cand, mc_samples, derive_seed(seed, 0x3C)).raw;
        if (kl < best_kl) {
            best_kl = kl;
            best = i;
        }
    }
    return best;
}

// Ring buffer of detached snow maps feeding the candidate pool.
template <typename T>
class SnowPool {
public:
    explicit SnowPool(std::size_t cap = 64) : cap_(cap) {}

    void push(Tensor<T> snow_map) {
        buf_.push_back(std::move(snow_map));
        while (buf_.size() > cap_) buf_.pop_front();
    }

    std::vector<Tensor<T>> snapshot() const {
        return std::vector<Tensor<T>>(buf_.begin(), buf_.end());
    }

    std::size_t size() const { return buf_.size(); }
    std::size_t capacity() const { return cap_; }

private:
    std::size_t cap_;
    std::deque<Tensor<T>> buf_;
};

// Horizontal flip plus a seeded intensity scale in [0.8, 1.2].
template <typename T>
ad::Var<T> dcr_augment(const ad::Var<T>& snow, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xA46));
    return ad::mul_scalar(ad::flip_w(snow), static_cast<T>(rng.uniform(0.8, 1.2)));
}

template <typename T>
struct DcrInputs {
    ad::Var<T> g_b_s;        // labeled background, student
    ad::Var<T> u_b_s;        // unlabeled background, student
    ad::Var<T> u_snow_s;     // unlabeled snow, student
    ad::Var<T> u_b_t;        // unlabeled background, teacher
    ad::Var<T> u_snow_t_aug; // augmented unlabeled snow, teacher
    ad::Var<T> ultra;        // selected synthetic snow (detached)
};

// L1(anchor, positive) / (L1(anchor, negative) + 1e-7) with
//   anchor   = teacher background + student snow (both unlabeled),
//   positive = student background + selected synthetic snow,
//   negative = labeled student background + augmented teacher snow.
template <typename T>
ad::Var<T> dcr_loss(const DcrInputs<T>& in) {
    const auto& ref = in.u_b_t.val();
    for (const auto* v : {&in.g_b_s, &in.u_b_s, &in.u_snow_s, &in.u_snow_t_aug, &in.ultra})
        if (!v->val().same_shape(ref))
            throw std::invalid_argument("dcr_loss: shape mismatch");

    auto anchor = ad::add(in.u_b_t, in.u_snow_s);
    auto positive = ad::add(in.u_b_s, in.ultra);
    auto negative = ad::add(in.g_b_s, in.u_snow_t_aug);
    auto num = ad::mean_all(ad::abs_(ad::sub(anchor, positive)));
    auto den = ad::add_scalar(ad::mean_all(ad::abs_(ad::sub(anchor, negative))),
                              static_cast<T>(1e-7));
    return ad::div(num, den);
}

} // namespace gmm
} // namespace semivdn

#pragma once

// AdamW with decoupled weight decay, plus the polynomial learning-rate decay
// used by the training loop. Moment buffers live beside the parameter store
// so checkpoints can capture them.

#include "semivdn/core/nn.hpp"

namespace semivdn {

template <typename T>
class AdamW {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;

    explicit AdamW(ParamStore<T>& params) : params_(&params) {
        for (const auto& name : params.names()) {
            m_.emplace(name, Tensor<T>(params.get(name).shape(), T(0)));
            v_.emplace(name, Tensor<T>(params.get(name).shape(), T(0)));
        }
    }

    // Applies one update with the given per-parameter gradients. Missing
    // entries are treated as zero gradient (the parameter still decays).
    void step(const std::map<std::string, Tensor<T>>& grads, double lr) {
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
        for (const auto& name : params_->names()) {
            Tensor<T>& p = params_->get(name);
            Tensor<T>& m = m_.at(name);
            Tensor<T>& v = v_.at(name);
            auto git = grads.find(name);
            const Tensor<T>* g = git != grads.end() ? &git->second : nullptr;
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const double gi = g ? static_cast<double>((*g)[i]) : 0.0;
                const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
                const double vi =
                    beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
                p[i] = static_cast<T>(static_cast<double>(p[i]) -
                                      lr * update -
                                      lr * weight_decay * static_cast<double>(p[i]));
            }
        }
    }

    long step_count() const { return step_; }
    void set_step_count(long s) { step_ = s; }
    Tensor<T>& moment1(const std::string& name) { return m_.at(name); }
    Tensor<T>& moment2(const std::string& name) { return v_.at(name); }

private:
    ParamStore<T>* params_;
    std::map<std::string, Tensor<T>> m_, v_;
    long step_ = 0;
};

// lr(i) = lr0 * (1 - i / total)^power, clamped at the final iteration.
inline double polynomial_lr(double lr0, long iter, long total, double power = 0.9) {
    if (total <= 0) return lr0;
    const double frac = std::min(1.0, static_cast<double>(iter) / static_cast<double>(total));
    return lr0 * std::pow(1.0 - frac, power);
}

} // namespace semivdn

#pragma once

// Parameter storage and the standard building blocks (linear, conv, layer
// norm, MLP, multi-head attention). Modules are lightweight structs that
// register tensors in a ParamStore under a name prefix and, at forward time,
// pull them through a Binder which decides whether they are trainable leaves
// (student) or constants (teacher / eval).

#include <map>
#include <string>

#include "semivdn/core/autodiff.hpp"
#include "semivdn/core/image_ops.hpp"
#include "semivdn/core/rng.hpp"

namespace semivdn {

template <typename T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (params_.count(name))
            throw std::invalid_argument("ParamStore: duplicate parameter " + name);
        order_.push_back(name);
        return params_.emplace(name, std::move(t)).first->second;
    }

    bool has(const std::string& name) const { return params_.count(name) > 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end())
            throw std::invalid_argument("ParamStore: unknown parameter " + name);
        return it->second;
    }
    const Tensor<T>& get(const std::string& name) const {
        return const_cast<ParamStore*>(this)->get(name);
    }

    const std::vector<std::string>& names() const { return order_; }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params_) n += v.numel();
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& name : order_) out.add(name, params_.at(name).template cast<U>());
        return out;
    }

    // Copies values from another store with the same layout.
    void assign_from(const ParamStore& other) {
        for (const auto& name : order_) get(name) = other.get(name);
    }

private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor<T>> params_;
};

// Wraps store tensors as Vars. Each parameter gets one node per tape, so a
// module reused across frames accumulates gradient into a single leaf.
template <typename T>
class Binder {
public:
    Binder(ParamStore<T>& store, bool trainable)
        : store_(&store), trainable_(trainable) {}

    ad::Var<T> operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        ad::Var<T> v = trainable_ ? ad::Var<T>::leaf(store_->get(name))
                                  : ad::Var<T>::constant(store_->get(name));
        cache_.emplace(name, v);
        return v;
    }

    bool trainable() const { return trainable_; }

    // After backward(): gradient per touched parameter (zeros if untouched).
    Tensor<T> grad_of(const std::string& name) const {
        auto it = cache_.find(name);
        if (it != cache_.end() && it->second.has_grad()) return it->second.grad();
        return Tensor<T>(store_->get(name).shape(), T(0));
    }

    ParamStore<T>& store() { return *store_; }

private:
    ParamStore<T>* store_;
    bool trainable_;
    std::map<std::string, ad::Var<T>> cache_;
};

namespace nn {

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual dense-layer default.
template <typename T>
Tensor<T> uniform_init(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <typename T>
struct Linear {
    std::string prefix;
    int in = 0, out = 0;

    void init(ParamStore<T>& store, Rng& rng) {
        store.add(prefix + ".w", uniform_init<T>({out, in}, in, rng));
        store.add(prefix + ".b", uniform_init<T>({1, out}, in, rng));
    }

    // x: R x in -> R x out.
    ad::Var<T> forward(Binder<T>& p, const ad::Var<T>& x) const {
        auto y = ad::matmul(x, ad::transpose(p(prefix + ".w")));
        return ad::add(y, ad::bcast_rows(p(prefix + ".b"), x.val().rows()));
    }
};

template <typename T>
struct Conv2dLayer {
    std::string prefix;
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

    void init(ParamStore<T>& store, Rng& rng) {
        const int fan_in = cin * k * k;
        store.add(prefix + ".w", uniform_init<T>({cout, fan_in}, fan_in, rng));
        store.add(prefix + ".b", uniform_init<T>({cout}, fan_in, rng));
    }

    ad::Var<T> forward(Binder<T>& p, const ad::Var<T>& x) const {
        return ad::conv2d(x, p(prefix + ".w"), p(prefix + ".b"), k, k, stride, pad);
    }
};

// Normalizes each row (token) over the feature axis.
template <typename T>
struct LayerNorm {
    std::string prefix;
    int d = 0;
    static constexpr double eps = 1e-5;

    void init(ParamStore<T>& store, Rng&) {
        store.add(prefix + ".g", Tensor<T>({1, d}, T(1)));
        store.add(prefix + ".b", Tensor<T>({1, d}, T(0)));
    }

    ad::Var<T> forward(Binder<T>& p, const ad::Var<T>& x) const {
        const int r = x.val().rows(), c = x.val().cols();
        auto mu = ad::bcast_cols(ad::rows_mean(x), c);
        auto centered = ad::sub(x, mu);
        auto var = ad::bcast_cols(ad::rows_mean(ad::square(centered)), c);
        auto norm = ad::div(centered, ad::sqrt_(ad::add_scalar(var, static_cast<T>(eps))));
        auto scaled = ad::mul(norm, ad::bcast_rows(p(prefix + ".g"), r));
        return ad::add(scaled, ad::bcast_rows(p(prefix + ".b"), r));
    }
};

template <typename T>
struct Mlp {
    std::string prefix;
    Linear<T> fc1, fc2;

    Mlp() = default;
    Mlp(std::string pfx, int d, int hidden) : prefix(std::move(pfx)) {
        fc1 = {prefix + ".fc1", d, hidden};
        fc2 = {prefix + ".fc2", hidden, d};
    }

    void init(ParamStore<T>& store, Rng& rng) {
        fc1.init(store, rng);
        fc2.init(store, rng);
    }

    ad::Var<T> forward(Binder<T>& p, const ad::Var<T>& x) const {
        return fc2.forward(p, ad::gelu(fc1.forward(p, x)));
    }
};

// Standard scaled dot-product attention over a token sequence (rows of x).
// No positional encoding is added here; callers that need order sensitivity
// must inject it themselves.
template <typename T>
struct MultiHeadAttention {
    std::string prefix;
    int d = 0, heads = 0;
    Linear<T> wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::string pfx, int d_, int heads_)
        : prefix(std::move(pfx)), d(d_), heads(heads_) {
        if (d % heads != 0)
            throw std::invalid_argument("attention: d must be divisible by heads");
        wq = {prefix + ".q", d, d};
        wk = {prefix + ".k", d, d};
        wv = {prefix + ".v", d, d};
        wo = {prefix + ".o", d, d};
    }

    void init(ParamStore<T>& store, Rng& rng) {
        wq.init(store, rng);
        wk.init(store, rng);
        wv.init(store, rng);
        wo.init(store, rng);
    }

    ad::Var<T> forward(Binder<T>& p, const ad::Var<T>& x) const {
        const int hd = d / heads;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
        auto q = wq.forward(p, x);
        auto k = wk.forward(p, x);
        auto v = wv.forward(p, x);
        ad::Var<T> out;
        for (int h = 0; h < heads; ++h) {
            auto qh = ad::cols_slice(q, h * hd, hd);
            auto kh = ad::cols_slice(k, h * hd, hd);
            auto vh = ad::cols_slice(v, h * hd, hd);
            auto att = ad::softmax_rows(
                ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), scale));
            auto oh = ad::matmul(att, vh);
            out = h == 0 ? oh : ad::concat_cols(out, oh);
        }
        return wo.forward(p, out);
    }
};

} // namespace nn
} // namespace semivdn

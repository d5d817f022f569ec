#pragma once

// Token pipeline: patch embedding, the dense (soft) expert router, and the
// physics transformer block whose second sub-block routes tokens through
// per-component experts. Component token grids are decoded into snow /
// transmission / airlight feature maps for the recovery step.
//
// Nothing here adds positional information: every stage is per-token or
// permutation-equivariant, which the tests rely on.

#include "semivdn/core/nn.hpp"

namespace semivdn {
namespace tde {

// --- Patch <-> token layout ------------------------------------------------

// Flat index map realizing NCHW -> ((N * H/p * W/p) x (C * p * p)) tokens.
inline std::shared_ptr<const std::vector<std::size_t>> patchify_index(
    int n, int c, int h, int w, int p) {
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw std::invalid_argument("patchify: spatial dims not divisible by patch");
    const int gh = h / p, gw = w / p;
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(static_cast<std::size_t>(n) * c * h * w);
    for (int b = 0; b < n; ++b)
        for (int bi = 0; bi < gh; ++bi)
            for (int bj = 0; bj < gw; ++bj)
                for (int cc = 0; cc < c; ++cc)
                    for (int di = 0; di < p; ++di)
                        for (int dj = 0; dj < p; ++dj)
                            idx->push_back(
                                ((static_cast<std::size_t>(b) * c + cc) * h +
                                 (bi * p + di)) * w + (bj * p + dj));
    return idx;
}

// Inverse permutation of patchify_index (tokens -> NCHW).
inline std::shared_ptr<const std::vector<std::size_t>> unpatchify_index(
    int n, int c, int h, int w, int p) {
    auto fwd = patchify_index(n, c, h, w, p);
    auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
    for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
    return inv;
}

template <typename T>
ad::Var<T> patchify(const ad::Var<T>& x, int p) {
    const int n = x.val().dim(0), c = x.val().dim(1);
    const int h = x.val().dim(2), w = x.val().dim(3);
    return ad::gather(x, patchify_index(n, c, h, w, p),
                      {n * (h / p) * (w / p), c * p * p});
}

template <typename T>
ad::Var<T> unpatchify(const ad::Var<T>& tokens, int n, int c, int h, int w, int p) {
    if (tokens.val().rows() != n * (h / p) * (w / p) ||
        tokens.val().cols() != c * p * p)
        throw std::invalid_argument("unpatchify: token shape mismatch");
    return ad::gather(tokens, unpatchify_index(n, c, h, w, p), {n, c, h, w});
}

// --- Router ----------------------------------------------------------------

template <typename T>
struct RouterOut {
    ad::Var<T> q;  // (R x n) dispatch; each column sums to 1 over tokens
    ad::Var<T> dd; // (R x n) combine; each row sums to 1 over experts
};

template <typename T>
RouterOut<T> router_weights(const ad::Var<T>& z, const ad::Var<T>& gamma) {
    if (z.val().cols() != gamma.val().rows())
        throw std::invalid_argument("router_weights: token width mismatch");
    auto logits = ad::matmul(z, gamma);
    return {ad::softmax_cols(logits), ad::softmax_rows(logits)};
}

// --- Soft mixture of experts ----------------------------------------------

template <typename T>
struct MoeOut {
    ad::Var<T> combined;      // R x d, same shape as the input tokens
    ad::Var<T> expert_tokens; // n x d, one pooled token per expert
    std::vector<ad::Var<T>> components; // n grids of R x d; they sum to combined
};

// Dense routing: every token contributes to every expert and every output is
// a convex combination over experts — fully continuous, nothing is dropped.
template <typename T>
MoeOut<T> soft_moe_forward(const ad::Var<T>& z, const ad::Var<T>& gamma,
                           Binder<T>& p, const std::vector<nn::Mlp<T>>& experts) {
    const int n = gamma.val().cols();
    if (static_cast<int>(experts.size()) != n)
        throw std::invalid_argument("soft_moe_forward: expert count mismatch");

    auto router = router_weights(z, gamma);
    auto z_tilde = ad::matmul(ad::transpose(router.q), z); // n x d pooled tokens

    ad::Var<T> e_tilde;
    for (int j = 0; j < n; ++j) {
        auto ej = experts[j].forward(p, ad::rows_slice(z_tilde, j, 1));
        e_tilde = j == 0 ? ej : ad::concat_rows(e_tilde, ej);
    }

    MoeOut<T> out;
    out.expert_tokens = e_tilde;
    out.combined = ad::matmul(router.dd, e_tilde);
    out.components.reserve(n);
    for (int j = 0; j < n; ++j)
        out.components.push_back(ad::matmul(ad::cols_slice(router.dd, j, 1),
                                            ad::rows_slice(e_tilde, j, 1)));
    return out;
}

// --- Transformer stacks ----------------------------------------------------

// Pre-norm block with two sub-blocks: attention + fusion MLP, then attention
// + the expert mixture (or a plain MLP when experts are disabled).
template <typename T>
struct PtbStack {
    std::string prefix;
    bool use_moe = true;
    nn::LayerNorm<T> ln1, ln2, ln3, ln4;
    nn::MultiHeadAttention<T> attn1, attn2;
    nn::Mlp<T> fusion;
    nn::Mlp<T> plain; // stand-in for the mixture in the ablation baseline
    std::vector<nn::Mlp<T>> experts;
    int d = 0, n_experts = 0;

    PtbStack() = default;
    PtbStack(std::string pfx, int d_, int heads, int n_experts_, bool use_moe_)
        : prefix(std::move(pfx)), use_moe(use_moe_), d(d_), n_experts(n_experts_) {
        ln1 = {prefix + ".ln1", d};
        ln2 = {prefix + ".ln2", d};
        ln3 = {prefix + ".ln3", d};
        ln4 = {prefix + ".ln4", d};
        attn1 = {prefix + ".attn1", d, heads};
        attn2 = {prefix + ".attn2", d, heads};
        fusion = {prefix + ".fusion", d, 2 * d};
        if (use_moe)
            for (int j = 0; j < n_experts; ++j)
                experts.emplace_back(prefix + ".expert" + std::to_string(j), d, 2 * d);
        else
            plain = {prefix + ".plain", d, 2 * d};
    }

    void init(ParamStore<T>& store, Rng& rng) {
        ln1.init(store, rng);
        ln2.init(store, rng);
        ln3.init(store, rng);
        ln4.init(store, rng);
        attn1.init(store, rng);
        attn2.init(store, rng);
        fusion.init(store, rng);
        if (use_moe) {
            store.add(prefix + ".gamma", nn::uniform_init<T>({d, n_experts}, d, rng));
            for (auto& e : experts) e.init(store, rng);
        } else {
            plain.init(store, rng);
        }
    }

    struct Out {
        ad::Var<T> z;
        MoeOut<T> moe;
        bool has_moe = false;
    };

    Out forward(Binder<T>& p, ad::Var<T> z) const {
        z = ad::add(z, attn1.forward(p, ln1.forward(p, z)));
        z = ad::add(z, fusion.forward(p, ln2.forward(p, z)));
        z = ad::add(z, attn2.forward(p, ln3.forward(p, z)));
        Out out;
        if (use_moe) {
            out.moe = soft_moe_forward(ln4.forward(p, z), p(prefix + ".gamma"), p,
                                       experts);
            out.has_moe = true;
            z = ad::add(z, out.moe.combined);
        } else {
            z = ad::add(z, plain.forward(p, ln4.forward(p, z)));
        }
        out.z = z;
        return out;
    }
};

// Three convolutions over the concatenated (component, combined) features.
template <typename T>
struct ComponentDecoder {
    std::string prefix;
    bool sigmoid_out = false;
    nn::Conv2dLayer<T> c1, c2, c3;

    ComponentDecoder() = default;
    ComponentDecoder(std::string pfx, int c, int c_out, bool sigmoid)
        : prefix(std::move(pfx)), sigmoid_out(sigmoid) {
        c1 = {prefix + ".c1", 2 * c, c, 3, 1, 1};
        c2 = {prefix + ".c2", c, c, 3, 1, 1};
        c3 = {prefix + ".c3", c, c_out, 3, 1, 1};
    }

    void init(ParamStore<T>& store, Rng& rng) {
        c1.init(store, rng);
        c2.init(store, rng);
        c3.init(store, rng);
    }

    ad::Var<T> forward(Binder<T>& p, const ad::Var<T>& x) const {
        auto y = c3.forward(p, ad::gelu(c2.forward(p, ad::gelu(c1.forward(p, x)))));
        return sigmoid_out ? ad::sigmoid(y) : y;
    }
};

template <typename T>
struct PtbOutput {
    ad::Var<T> combined;                // n_f x c x h' x w'
    std::vector<ad::Var<T>> components; // [snow (c), transmission (c), airlight (1)]
};

// Embeds stride-4 features into tokens, runs the transformer stacks, and
// decodes the last stack's component grids. The transmission head ends in a
// sigmoid so the downstream inversion divides by a value in (0, 1).
template <typename T>
struct PhysicsTransformer {
    std::string prefix;
    int c = 0, d = 0, patch = 1, n_experts = 3;
    bool tde_enabled = true;
    nn::Linear<T> embed, unembed;
    std::vector<PtbStack<T>> stacks;
    ComponentDecoder<T> dec_snow, dec_trans, dec_air;

    PhysicsTransformer() = default;
    PhysicsTransformer(std::string pfx, int c_, int d_, int heads, int blocks,
                       int n_experts_, int patch_, bool enabled)
        : prefix(std::move(pfx)), c(c_), d(d_), patch(patch_),
          n_experts(n_experts_), tde_enabled(enabled) {
        if (enabled && n_experts != 3)
            throw std::invalid_argument(
                "PhysicsTransformer: component roles need exactly 3 experts");
        embed = {prefix + ".embed", c * patch * patch, d};
        unembed = {prefix + ".unembed", d, c * patch * patch};
        for (int b = 0; b < blocks; ++b)
            stacks.emplace_back(prefix + ".stack" + std::to_string(b), d, heads,
                                n_experts, enabled);
        if (enabled) {
            dec_snow = {prefix + ".dec_snow", c, c, false};
            dec_trans = {prefix + ".dec_trans", c, c, true};
            dec_air = {prefix + ".dec_air", c, 1, false};
        }
    }

    void init(ParamStore<T>& store, Rng& rng) {
        embed.init(store, rng);
        unembed.init(store, rng);
        for (auto& s : stacks) s.init(store, rng);
        if (tde_enabled) {
            dec_snow.init(store, rng);
            dec_trans.init(store, rng);
            dec_air.init(store, rng);
        }
    }

    PtbOutput<T> forward(Binder<T>& p, const ad::Var<T>& features) const {
        const int n_f = features.val().dim(0), hp = features.val().dim(2),
                  wp = features.val().dim(3);
        if (features.val().dim(1) != c)
            throw std::invalid_argument("PhysicsTransformer: channel mismatch");

        auto z = embed.forward(p, patchify(features, patch));
        MoeOut<T> last_moe;
        bool have_moe = false;
        for (const auto& s : stacks) {
            auto out = s.forward(p, z);
            z = out.z;
            if (out.has_moe) {
                last_moe = std::move(out.moe);
                have_moe = true;
            }
        }

        PtbOutput<T> out;
        out.combined = unpatchify(unembed.forward(p, z), n_f, c, hp, wp, patch);
        if (tde_enabled && have_moe) {
            out.components.reserve(3);
            for (int j = 0; j < 3; ++j) {
                auto comp_map = unpatchify(unembed.forward(p, last_moe.components[j]),
                                           n_f, c, hp, wp, patch);
                auto dec_in = ad::concat_channels(comp_map, out.combined);
                if (j == 0) out.components.push_back(dec_snow.forward(p, dec_in));
                else if (j == 1) out.components.push_back(dec_trans.forward(p, dec_in));
                else out.components.push_back(dec_air.forward(p, dec_in));
            }
        }
        return out;
    }
};

} // namespace tde
} // namespace semivdn

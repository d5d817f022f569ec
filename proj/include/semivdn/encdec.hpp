#pragma once

// Stride-4 convolutional encoder (plain residual blocks standing in for a
// heavier pretrained backbone) and the image decoder that maps recovered
// features back to full-resolution RGB.

#include "semivdn/core/nn.hpp"

namespace semivdn {
namespace encdec {

template <typename T>
struct Encoder {
    std::string prefix;
    int c = 64, blocks = 2;
    nn::Conv2dLayer<T> stem1, stem2;
    std::vector<std::pair<nn::Conv2dLayer<T>, nn::Conv2dLayer<T>>> res;

    Encoder() = default;
    Encoder(std::string pfx, int c_, int blocks_)
        : prefix(std::move(pfx)), c(c_), blocks(blocks_) {
        stem1 = {prefix + ".stem1", 3, c / 2, 3, 2, 1};
        stem2 = {prefix + ".stem2", c / 2, c, 3, 2, 1};
        for (int b = 0; b < blocks; ++b) {
            const std::string rp = prefix + ".res" + std::to_string(b);
            res.emplace_back(nn::Conv2dLayer<T>{rp + ".a", c, c, 3, 1, 1},
                             nn::Conv2dLayer<T>{rp + ".b", c, c, 3, 1, 1});
        }
    }

    void init(ParamStore<T>& store, Rng& rng) {
        stem1.init(store, rng);
        stem2.init(store, rng);
        for (auto& [a, b] : res) {
            a.init(store, rng);
            b.init(store, rng);
        }
    }

    // clip: n_f x 3 x H x W with H, W divisible by 4 -> n_f x c x H/4 x W/4.
    ad::Var<T> forward(Binder<T>& p, const ad::Var<T>& clip) const {
        if (clip.val().dim(2) % 4 != 0 || clip.val().dim(3) % 4 != 0)
            throw std::invalid_argument("encode: H and W must be divisible by 4");
        auto x = ad::gelu(stem1.forward(p, clip));
        x = ad::gelu(stem2.forward(p, x));
        for (const auto& [a, b] : res)
            x = ad::add(x, b.forward(p, ad::gelu(a.forward(p, x))));
        return x;
    }
};

template <typename T>
struct ImageDecoder {
    std::string prefix;
    int c = 64;
    nn::Conv2dLayer<T> d1, d2, d3;

    ImageDecoder() = default;
    ImageDecoder(std::string pfx, int c_) : prefix(std::move(pfx)), c(c_) {
        d1 = {prefix + ".d1", c, c, 3, 1, 1};
        d2 = {prefix + ".d2", c, c / 2, 3, 1, 1};
        d3 = {prefix + ".d3", c / 2, 3, 3, 1, 1};
    }

    void init(ParamStore<T>& store, Rng& rng) {
        d1.init(store, rng);
        d2.init(store, rng);
        d3.init(store, rng);
        // Zero the last conv so the freshly initialized model is the identity
        // restoration (the residual correction starts at zero).
        for (const char* suffix : {".w", ".b"}) {
            Tensor<T>& t = store.get(prefix + ".d3" + suffix);
            std::fill(t.data(), t.data() + t.numel(), T(0));
        }
    }

    // n_f x c x H/4 x W/4 -> n_f x 3 x H x W (three convs, two 2x upsamples).
    ad::Var<T> forward(Binder<T>& p, const ad::Var<T>& feat) const {
        auto x = ad::gelu(d1.forward(p, feat));
        x = ad::upsample2(x);
        x = ad::gelu(d2.forward(p, x));
        x = ad::upsample2(x);
        return d3.forward(p, x);
    }
};

} // namespace encdec
} // namespace semivdn

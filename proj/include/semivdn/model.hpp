#pragma once

// Full network: encoder -> physics transformer -> feature-space recovery ->
// image decoder with a global residual skip. The ablation baseline skips the
// expert routing and recovery, turning the block into a plain transformer.

#include "semivdn/config.hpp"
#include "semivdn/encdec.hpp"
#include "semivdn/recovery.hpp"
#include "semivdn/tde.hpp"

namespace semivdn {

struct ModelConfig {
    int n_f = 3;
    int channels = 64;
    int backbone_blocks = 2;
    int d = 64;
    int heads = 4;
    int tde_blocks = 2;
    int n_experts = 3;
    int patch = 1;
    bool tde_enabled = true;
    double beta = 1e-8;

    static ModelConfig from_json(const nlohmann::json& cfg) {
        ModelConfig m;
        m.n_f = cfg.at("data").at("frames").get<int>();
        m.channels = cfg.at("backbone").at("channels").get<int>();
        m.backbone_blocks = cfg.at("backbone").at("blocks").get<int>();
        m.d = cfg.at("tde").at("d").get<int>();
        m.heads = cfg.at("tde").at("heads").get<int>();
        m.tde_blocks = cfg.at("tde").at("blocks").get<int>();
        m.n_experts = cfg.at("tde").at("n_experts").get<int>();
        m.patch = cfg.at("tde").at("patch").get<int>();
        m.tde_enabled = cfg.at("ablation").at("tde").get<bool>();
        return m;
    }
};

template <typename T>
struct ModelOutputs {
    ad::Var<T> restored;        // n_f x 3 x H x W
    ad::Var<T> feat_input;      // encoder features
    ad::Var<T> feat_combined;   // transformer output features
    ad::Var<T> feat_background; // recovered background features
    // Decoded component features; valid only when the expert path is on.
    ad::Var<T> feat_snow, feat_trans, feat_air;
    bool has_components = false;
};

template <typename T>
struct Model {
    ModelConfig cfg;
    encdec::Encoder<T> encoder;
    tde::PhysicsTransformer<T> transformer;
    encdec::ImageDecoder<T> decoder;

    explicit Model(const ModelConfig& c) : cfg(c) {
        encoder = {"enc", cfg.channels, cfg.backbone_blocks};
        transformer = {"ptb", cfg.channels, cfg.d, cfg.heads, cfg.tde_blocks,
                       cfg.n_experts, cfg.patch, cfg.tde_enabled};
        decoder = {"dec", cfg.channels};
    }

    void init(ParamStore<T>& store, Rng& rng) {
        encoder.init(store, rng);
        transformer.init(store, rng);
        decoder.init(store, rng);
    }

    ParamStore<T> make_params(std::uint64_t seed) {
        ParamStore<T> store;
        Rng rng(derive_seed(seed, 0x30DE1));
        init(store, rng);
        return store;
    }

    ModelOutputs<T> forward(Binder<T>& p, const ad::Var<T>& input) const {
        ModelOutputs<T> out;
        out.feat_input = encoder.forward(p, input);
        auto ptb = transformer.forward(p, out.feat_input);
        out.feat_combined = ptb.combined;
        if (cfg.tde_enabled && !ptb.components.empty()) {
            out.feat_snow = ptb.components[0];
            out.feat_trans = ptb.components[1];
            out.feat_air = ptb.components[2];
            out.has_components = true;
            out.feat_background = recovery::prior_guided_recovery(
                out.feat_input, out.feat_snow, out.feat_trans, out.feat_air,
                static_cast<T>(cfg.beta));
        } else {
            out.feat_background = ptb.combined;
        }
        // Global residual: the decoder predicts a correction to the input.
        out.restored = ad::add(input, decoder.forward(p, out.feat_background));
        return out;
    }
};

} // namespace semivdn

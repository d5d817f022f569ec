#pragma once

// Synthetic data: clean procedural clips, snow layers (disks + motion-blurred
// streaks with per-clip global motion), smooth transmission maps, the
// degradation compositor, and corpus generation / loading.
//
// Snow geometry lives on a torus (pixel indices wrap), which makes frame k+1
// an exact cyclic translation of frame k by the clip's motion vector.

#include "semivdn/config.hpp"
#include "semivdn/core/rng.hpp"
#include "semivdn/io.hpp"

namespace semivdn {

struct Clip {
    std::string id;
    Tensor<float> frames; // n_f x 3 x h x w, values in [0,1]

    int n_f() const { return frames.dim(0); }
    int height() const { return frames.dim(2); }
    int width() const { return frames.dim(3); }
};

struct DegradationTriple {
    Tensor<float> snow;  // n_f x 3 x h x w in [0,1]
    Tensor<float> trans; // n_f x 1 x h x w in [t_min, 1]
    float airlight = 0;  // per-clip scalar in [0,1]

    static constexpr float t_min = 0.1f;
};

struct SnowParams {
    double density = 0.1;     // particle density in [0,1]
    double streak_len = 8.0;  // streak length in [0,32] px
    int motion_x = 1;         // global displacement per frame, px
    int motion_y = 2;
    double radius_lo = 1.0;   // disk radius range, px
    double radius_hi = 2.0;
    double bright_lo = 0.65;  // flake brightness range
    double bright_hi = 1.0;
    double streak_frac = 0.3; // fraction of particles drawn as streaks
};

namespace corpus {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- Procedural ingredients -----------------------------------------------

// Smooth [0,1] field: bilinear interpolation of a coarse uniform grid with a
// smoothstep fade.
inline Tensor<float> value_noise(int h, int w, int cell, Rng& rng) {
    const int gh = h / cell + 2, gw = w / cell + 2;
    std::vector<float> grid(static_cast<std::size_t>(gh) * gw);
    for (auto& g : grid) g = static_cast<float>(rng.uniform());
    auto fade = [](float t) { return t * t * (3.0f - 2.0f * t); };
    Tensor<float> out({h, w});
    for (int i = 0; i < h; ++i) {
        const float fi = static_cast<float>(i) / cell;
        const int i0 = static_cast<int>(fi);
        const float ti = fade(fi - i0);
        for (int j = 0; j < w; ++j) {
            const float fj = static_cast<float>(j) / cell;
            const int j0 = static_cast<int>(fj);
            const float tj = fade(fj - j0);
            const float a = grid[static_cast<std::size_t>(i0) * gw + j0];
            const float b = grid[static_cast<std::size_t>(i0) * gw + j0 + 1];
            const float c = grid[static_cast<std::size_t>(i0 + 1) * gw + j0];
            const float d = grid[static_cast<std::size_t>(i0 + 1) * gw + j0 + 1];
            out(i, j) = (a * (1 - tj) + b * tj) * (1 - ti) + (c * (1 - tj) + d * tj) * ti;
        }
    }
    return out;
}

// Static scene: a corner gradient, a handful of soft elliptical blobs, and a
// little luminance texture. Frames are identical (static camera).
inline Clip synthesize_clean_clip(int h, int w, int n_f, std::uint64_t seed,
                                  const std::string& id = "clip") {
    if (h <= 0 || w <= 0 || n_f <= 0)
        throw std::invalid_argument("synthesize_clean_clip: non-positive dims");
    Rng rng(derive_seed(seed, 0xC1EA11));
    float c1[3], c2[3];
    for (int c = 0; c < 3; ++c) {
        c1[c] = static_cast<float>(rng.uniform(0.1, 0.9));
        c2[c] = static_cast<float>(rng.uniform(0.1, 0.9));
    }
    Tensor<float> frame({3, h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const float t = 0.5f * (static_cast<float>(i) / (h - 1) +
                                    static_cast<float>(j) / (w - 1));
            for (int c = 0; c < 3; ++c)
                frame[(static_cast<std::size_t>(c) * h + i) * w + j] =
                    c1[c] * (1 - t) + c2[c] * t;
        }

    const int n_blobs = rng.uniform_int(3, 6);
    for (int b = 0; b < n_blobs; ++b) {
        const float cy = static_cast<float>(rng.uniform(0.0, h));
        const float cx = static_cast<float>(rng.uniform(0.0, w));
        const float ry = static_cast<float>(rng.uniform(6.0, 18.0));
        const float rx = static_cast<float>(rng.uniform(6.0, 18.0));
        float col[3];
        for (int c = 0; c < 3; ++c) col[c] = static_cast<float>(rng.uniform(0.05, 0.95));
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const float dy = (i - cy) / ry, dx = (j - cx) / rx;
                const float d = std::sqrt(dy * dy + dx * dx);
                const float alpha = std::clamp((1.0f - d) / 0.3f, 0.0f, 1.0f);
                if (alpha <= 0) continue;
                for (int c = 0; c < 3; ++c) {
                    float& px = frame[(static_cast<std::size_t>(c) * h + i) * w + j];
                    px = px * (1 - alpha) + col[c] * alpha;
                }
            }
    }

    Tensor<float> tex = value_noise(h, w, 8, rng);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const float dv = 0.12f * (tex(i, j) - 0.5f);
            for (int c = 0; c < 3; ++c) {
                float& px = frame[(static_cast<std::size_t>(c) * h + i) * w + j];
                px = std::clamp(px + dv, 0.02f, 0.98f);
            }
        }

    Clip clip;
    clip.id = id;
    clip.frames = Tensor<float>({n_f, 3, h, w});
    for (int k = 0; k < n_f; ++k)
        std::copy_n(frame.data(), frame.numel(),
                    clip.frames.data() + static_cast<std::size_t>(k) * frame.numel());
    return clip;
}

namespace detail {

inline int wrap(int v, int n) {
    v %= n;
    return v < 0 ? v + n : v;
}

// Max-blend a soft disk centred at (cy, cx) in unwrapped coordinates.
inline void stamp_disk(Tensor<float>& plane, int h, int w, double cy, double cx,
                       double radius, float bright) {
    constexpr double edge = 0.7;
    const int r = static_cast<int>(std::ceil(radius + edge)) + 1;
    const int iy = static_cast<int>(std::lround(cy));
    const int ix = static_cast<int>(std::lround(cx));
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const double py = iy + dy, px = ix + dx;
            const double d = std::hypot(py - cy, px - cx);
            const float v = bright * static_cast<float>(
                                         std::clamp((radius + edge - d) / edge, 0.0, 1.0));
            if (v <= 0) continue;
            float& dst = plane(wrap(iy + dy, h), wrap(ix + dx, w));
            dst = std::max(dst, v);
        }
}

// Max-blend a soft capsule (motion-blurred streak) from (ay, ax) along
// (diry, dirx) * len, in unwrapped coordinates.
inline void stamp_streak(Tensor<float>& plane, int h, int w, double ay, double ax,
                         double diry, double dirx, double len, double thick,
                         float bright) {
    constexpr double edge = 0.7;
    const double by = ay + diry * len, bx = ax + dirx * len;
    const int y0 = static_cast<int>(std::floor(std::min(ay, by) - thick - edge)) - 1;
    const int y1 = static_cast<int>(std::ceil(std::max(ay, by) + thick + edge)) + 1;
    const int x0 = static_cast<int>(std::floor(std::min(ax, bx) - thick - edge)) - 1;
    const int x1 = static_cast<int>(std::ceil(std::max(ax, bx) + thick + edge)) + 1;
    for (int iy = y0; iy <= y1; ++iy)
        for (int ix = x0; ix <= x1; ++ix) {
            const double vy = iy - ay, vx = ix - ax;
            const double t = std::clamp(vy * diry + vx * dirx, 0.0, len);
            const double d = std::hypot(vy - diry * t, vx - dirx * t);
            const float v = bright * static_cast<float>(
                                         std::clamp((thick + edge - d) / edge, 0.0, 1.0));
            if (v <= 0) continue;
            float& dst = plane(wrap(iy, h), wrap(ix, w));
            dst = std::max(dst, v);
        }
}

} // namespace detail

// Snow is white: one intensity plane per frame, replicated across RGB.
inline Tensor<float> synthesize_snow_layer(int h, int w, int n_f,
                                           const SnowParams& params,
                                           std::uint64_t seed) {
    if (h <= 0 || w <= 0 || n_f <= 0)
        throw std::invalid_argument("synthesize_snow_layer: non-positive dims");
    if (params.density < 0 || params.density > 1)
        throw std::invalid_argument("synthesize_snow_layer: density outside [0,1]");
    if (params.streak_len < 0 || params.streak_len > 32)
        throw std::invalid_argument("synthesize_snow_layer: streak length outside [0,32]");

    struct Particle {
        double y, x, radius;
        float bright;
        bool streak;
    };
    Rng rng(derive_seed(seed, 0x5401));
    const int count = static_cast<int>(std::lround(params.density * h * w / 12.0));
    std::vector<Particle> parts(count);
    for (auto& p : parts) {
        p.y = rng.uniform(0.0, h);
        p.x = rng.uniform(0.0, w);
        p.radius = rng.uniform(params.radius_lo, params.radius_hi);
        p.bright = static_cast<float>(rng.uniform(params.bright_lo, params.bright_hi));
        p.streak = rng.uniform() < params.streak_frac && params.streak_len > 0;
    }

    // Streaks align with the fall direction.
    double diry = params.motion_y, dirx = params.motion_x;
    const double norm = std::hypot(diry, dirx);
    if (norm > 0) { diry /= norm; dirx /= norm; }
    else { diry = 1; dirx = 0; }

    Tensor<float> out({n_f, 3, h, w}, 0.0f);
    Tensor<float> plane({h, w});
    for (int k = 0; k < n_f; ++k) {
        plane.fill(0.0f);
        for (const auto& p : parts) {
            const double cy = p.y + static_cast<double>(k) * params.motion_y;
            const double cx = p.x + static_cast<double>(k) * params.motion_x;
            if (p.streak)
                detail::stamp_streak(plane, h, w, cy, cx, diry, dirx,
                                     params.streak_len, 0.5 + 0.3 * p.radius, p.bright);
            else
                detail::stamp_disk(plane, h, w, cy, cx, p.radius, p.bright);
        }
        for (int c = 0; c < 3; ++c)
            std::copy_n(plane.data(), plane.numel(),
                        out.data() + (static_cast<std::size_t>(k) * 3 + c) * plane.numel());
    }
    return out;
}

// Fraction of pixels above the sparsity threshold (first channel only, the
// layer is replicated across RGB).
inline double snow_coverage(const Tensor<float>& snow, float thresh = 0.05f) {
    const int n_f = snow.dim(0), h = snow.dim(2), w = snow.dim(3);
    std::size_t above = 0;
    for (int k = 0; k < n_f; ++k)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                if (snow(k, 0, i, j) > thresh) ++above;
    return static_cast<double>(above) / (static_cast<double>(n_f) * h * w);
}

// T = clamp(1 - haze * smooth_noise, t_min, 1), identical across frames.
inline Tensor<float> synthesize_transmission(int h, int w, int n_f,
                                             double haze_strength,
                                             std::uint64_t seed) {
    if (h <= 0 || w <= 0 || n_f <= 0)
        throw std::invalid_argument("synthesize_transmission: non-positive dims");
    Rng rng(derive_seed(seed, 0x7A2E));
    Tensor<float> noise = value_noise(h, w, 16, rng);
    Tensor<float> out({n_f, 1, h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const float t = std::clamp(1.0f - static_cast<float>(haze_strength) * noise(i, j),
                                       DegradationTriple::t_min, 1.0f);
            for (int k = 0; k < n_f; ++k) out(k, 0, i, j) = t;
        }
    return out;
}

// I = clip(J*T + A*(1-T) + S, 0, 1), elementwise; T broadcast over RGB.
inline Clip compose_snowy(const Clip& clean, const DegradationTriple& deg) {
    const int n_f = clean.n_f(), h = clean.height(), w = clean.width();
    if (deg.snow.dim(0) != n_f || deg.snow.dim(2) != h || deg.snow.dim(3) != w ||
        deg.trans.dim(0) != n_f || deg.trans.dim(2) != h || deg.trans.dim(3) != w)
        throw std::invalid_argument("compose_snowy: component shape mismatch");
    Clip out;
    out.id = clean.id;
    out.frames = Tensor<float>({n_f, 3, h, w});
    for (int k = 0; k < n_f; ++k)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const float t = deg.trans(k, 0, i, j);
                    const float v = clean.frames(k, c, i, j) * t +
                                    deg.airlight * (1.0f - t) + deg.snow(k, c, i, j);
                    out.frames(k, c, i, j) = std::clamp(v, 0.0f, 1.0f);
                }
    return out;
}

// --- Corpus generation ----------------------------------------------------

struct Manifest {
    std::uint64_t seed = 0;
    json generator_params;
    std::vector<std::string> labeled; // training clips, relative paths
    std::vector<std::string> unlabeled;
    std::vector<std::string> eval; // held-out labeled clips

    json to_json() const {
        json j;
        j["seed"] = seed;
        j["generator_params"] = generator_params;
        j["labeled_clips"] = json::array();
        for (const auto& p : labeled)
            j["labeled_clips"].push_back({{"clip", p}, {"components", p}});
        j["unlabeled_clips"] = unlabeled;
        j["eval_clips"] = eval;
        return j;
    }

    static Manifest from_json(const json& j) {
        Manifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.generator_params = j.value("generator_params", json::object());
        for (const auto& e : j.at("labeled_clips"))
            m.labeled.push_back(e.at("clip").get<std::string>());
        for (const auto& e : j.at("unlabeled_clips"))
            m.unlabeled.push_back(e.get<std::string>());
        for (const auto& e : j.value("eval_clips", json::array()))
            m.eval.push_back(e.get<std::string>());
        return m;
    }
};

namespace detail {

inline std::string frame_name(int k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03d.png", k);
    return buf;
}

inline Tensor<float> frame_of(const Tensor<float>& clip, int k) {
    const int c = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
    Tensor<float> f({c, h, w});
    std::copy_n(clip.data() + static_cast<std::size_t>(k) * f.numel(), f.numel(),
                f.data());
    return f;
}

// Draws one degradation from either the labeled or the shifted "pseudo-real"
// distribution (bigger flakes, longer streaks, heavier haze).
struct DrawnDegradation {
    SnowParams snow_params;
    double haze = 0;
    float airlight = 0;
};

inline DrawnDegradation draw_params(Rng& rng, bool shifted) {
    DrawnDegradation d;
    if (!shifted) {
        d.snow_params.density = rng.uniform(0.06, 0.14);
        d.snow_params.streak_len = rng.uniform(4.0, 10.0);
        d.snow_params.radius_lo = 1.0;
        d.snow_params.radius_hi = 2.0;
        d.haze = rng.uniform(0.2, 0.5);
    } else {
        d.snow_params.density = rng.uniform(0.12, 0.25);
        d.snow_params.streak_len = rng.uniform(10.0, 24.0);
        d.snow_params.radius_lo = 1.8;
        d.snow_params.radius_hi = 3.5;
        d.haze = rng.uniform(0.4, 0.8);
    }
    d.snow_params.motion_x = rng.uniform_int(-3, 3);
    d.snow_params.motion_y = rng.uniform_int(1, 4); // snow falls downward
    d.airlight = static_cast<float>(rng.uniform(0.7, 1.0));
    return d;
}

} // namespace detail

// Builds (clean clip, degradation) for one clip id and seed.
inline std::pair<Clip, DegradationTriple> make_labeled_example(
    int h, int w, int n_f, std::uint64_t clip_seed, const std::string& id,
    bool shifted = false) {
    Rng rng(derive_seed(clip_seed, 0xD7A3));
    const auto drawn = detail::draw_params(rng, shifted);
    Clip clean = synthesize_clean_clip(h, w, n_f, derive_seed(clip_seed, 1), id);
    DegradationTriple deg;
    deg.snow = synthesize_snow_layer(h, w, n_f, drawn.snow_params,
                                     derive_seed(clip_seed, 2));
    deg.trans = synthesize_transmission(h, w, n_f, drawn.haze, derive_seed(clip_seed, 3));
    deg.airlight = drawn.airlight;
    return {std::move(clean), std::move(deg)};
}

// Writes the corpus to disk and returns the manifest.
// Labeled clip directories hold the *clean* frames plus the degradation
// components; the snowy view is recomposed exactly at load time, so the
// stored pair stays consistent to float precision. Unlabeled directories
// hold only the composited snowy frames.
inline Manifest generate_corpus(const json& cfg, const fs::path& out_dir) {
    const auto& data = cfg.at("data");
    const int n_labeled = data.at("labeled_clips").get<int>();
    const int n_unlabeled = data.at("unlabeled_clips").get<int>();
    const int n_eval = data.value("eval_clips", 0);
    const int n_f = data.at("frames").get<int>();
    const int h = data.at("height").get<int>();
    const int w = data.at("width").get<int>();
    const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
    if (h % 4 != 0 || w % 4 != 0)
        throw std::invalid_argument("generate_corpus: H and W must be divisible by 4");

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("generate_corpus: cannot create " + out_dir.string());

    Manifest m;
    m.seed = seed;
    m.generator_params = {{"frames", n_f}, {"height", h}, {"width", w},
                          {"labeled_clips", n_labeled},
                          {"unlabeled_clips", n_unlabeled},
                          {"eval_clips", n_eval}};

    for (int idx = 0; idx < n_labeled + n_eval; ++idx) {
        char name[32];
        std::snprintf(name, sizeof(name), "clip_%03d", idx);
        const std::string rel = std::string("labeled/") + name;
        const fs::path dir = out_dir / rel;
        fs::create_directories(dir);

        auto [clean, deg] =
            make_labeled_example(h, w, n_f, derive_seed(seed, 0x1AB, idx), name);
        if (snow_coverage(deg.snow) >= 0.5)
            throw NumericError("generate_corpus: snow layer not sparse for " + rel);
        for (int k = 0; k < n_f; ++k)
            io::write_png(dir / detail::frame_name(k), detail::frame_of(clean.frames, k));
        io::write_f32(dir / "snow.f32", deg.snow);
        io::write_f32(dir / "trans.f32", deg.trans);
        io::write_json(dir / "airlight.json", json{{"airlight", deg.airlight}});

        (idx < n_labeled ? m.labeled : m.eval).push_back(rel);
    }

    for (int idx = 0; idx < n_unlabeled; ++idx) {
        char name[32];
        std::snprintf(name, sizeof(name), "clip_%03d", idx);
        const std::string rel = std::string("unlabeled/") + name;
        const fs::path dir = out_dir / rel;
        fs::create_directories(dir);

        auto [clean, deg] = make_labeled_example(
            h, w, n_f, derive_seed(seed, 0x07AB, idx), name, /*shifted=*/true);
        Clip snowy = compose_snowy(clean, deg);
        for (int k = 0; k < n_f; ++k)
            io::write_png(dir / detail::frame_name(k), detail::frame_of(snowy.frames, k));
        m.unlabeled.push_back(rel);
    }

    io::write_json(out_dir / "manifest.json", m.to_json());
    return m;
}

// --- Loading --------------------------------------------------------------

struct LabeledClip {
    Clip clean;
    Clip snowy; // recomposed via compose_snowy on load
    DegradationTriple deg;
};

inline Clip load_frames(const fs::path& dir, const std::string& id) {
    std::vector<Tensor<float>> frames;
    for (int k = 0;; ++k) {
        const fs::path p = dir / detail::frame_name(k);
        if (!fs::exists(p)) break;
        frames.push_back(io::read_png(p));
    }
    if (frames.empty()) throw IoError("load_frames: no frames in " + dir.string());
    const int c = frames[0].dim(0), h = frames[0].dim(1), w = frames[0].dim(2);
    Clip clip;
    clip.id = id;
    clip.frames = Tensor<float>({static_cast<int>(frames.size()), c, h, w});
    for (std::size_t k = 0; k < frames.size(); ++k)
        std::copy_n(frames[k].data(), frames[k].numel(),
                    clip.frames.data() + k * frames[k].numel());
    return clip;
}

inline LabeledClip load_labeled(const fs::path& root, const std::string& rel) {
    const fs::path dir = root / rel;
    LabeledClip lc;
    lc.clean = load_frames(dir, rel);
    lc.deg.snow = io::read_f32(dir / "snow.f32");
    lc.deg.trans = io::read_f32(dir / "trans.f32");
    lc.deg.airlight = io::read_json(dir / "airlight.json").at("airlight").get<float>();
    lc.snowy = compose_snowy(lc.clean, lc.deg);
    return lc;
}

inline Clip load_unlabeled(const fs::path& root, const std::string& rel) {
    return load_frames(root / rel, rel);
}

} // namespace corpus
} // namespace semivdn

#pragma once

// Teacher/student training: EMA weight tracking, consistency warm-up, strong
// augmentation, the combined supervised + semi-supervised step with the
// distribution-contrastive term, bit-exact checkpointing, and the training
// driver with JSONL logging.

#include <filesystem>
#include <fstream>

#include "semivdn/config.hpp"
#include "semivdn/core/optim.hpp"
#include "semivdn/corpus.hpp"
#include "semivdn/gmm.hpp"
#include "semivdn/io.hpp"
#include "semivdn/losses.hpp"
#include "semivdn/metrics.hpp"
#include "semivdn/model.hpp"

namespace semivdn {
namespace mt {

namespace fs = std::filesystem;

// theta_tea <- eta * theta_tea + (1 - eta) * theta_stu, elementwise.
template <typename T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student, double eta) {
    if (teacher.names() != student.names())
        throw std::invalid_argument("ema_update: parameter sets differ");
    for (const auto& name : teacher.names()) {
        Tensor<T>& t = teacher.get(name);
        const Tensor<T>& s = student.get(name);
        require_same_shape(t, s, "ema_update");
        for (std::size_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>(eta * static_cast<double>(t[i]) +
                                  (1.0 - eta) * static_cast<double>(s[i]));
    }
}

// Consistency ramp mu_max * exp(-5 (1 - r/r_max)^2): strictly increasing in
// r, mu_max * e^-5 at r=0 and exactly mu_max at r=r_max.
inline double warmup_weight(double r, double r_max, double mu_max = 1.0) {
    if (r_max <= 0)
        throw std::invalid_argument("warmup_weight: r_max must be positive");
    const double d = 1.0 - std::clamp(r / r_max, 0.0, 1.0);
    return mu_max * std::exp(-5.0 * d * d);
}

struct AugmentParams {
    double jitter = 0.1;      // per-channel brightness offset bound
    double noise_sigma = 0.02;
    double flip_prob = 0.5;

    static AugmentParams from_json(const nlohmann::json& j) {
        AugmentParams p;
        p.jitter = j.value("jitter", p.jitter);
        p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
        p.flip_prob = j.value("flip_prob", p.flip_prob);
        return p;
    }
};

template <typename T>
struct Augmented {
    Tensor<T> frames;
    bool flipped = false;
};

// Per-channel brightness jitter, additive Gaussian pixel noise, and an
// optional horizontal flip, with the result clipped to [0,1]. Deterministic
// in the seed; zero-strength parameters give back the input exactly.
template <typename T>
Augmented<T> strong_augment(const Tensor<T>& frames, std::uint64_t seed,
                            const AugmentParams& p = {}) {
    const int n = frames.dim(0), c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
    Rng flip_rng(derive_seed(seed, 1));
    Rng jitter_rng(derive_seed(seed, 2));
    Rng noise_rng(derive_seed(seed, 3));

    Augmented<T> out;
    out.flipped = p.flip_prob > 0 && flip_rng.uniform() < p.flip_prob;
    std::vector<double> offset(static_cast<std::size_t>(c), 0.0);
    for (int cc = 0; cc < c; ++cc)
        if (p.jitter > 0) offset[cc] = jitter_rng.uniform(-p.jitter, p.jitter);

    out.frames = Tensor<T>(frames.shape());
    for (int b = 0; b < n; ++b)
        for (int cc = 0; cc < c; ++cc)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    const int js = out.flipped ? w - 1 - j : j;
                    double v = static_cast<double>(frames(b, cc, i, js)) + offset[cc];
                    if (p.noise_sigma > 0) v += noise_rng.normal(0.0, p.noise_sigma);
                    out.frames(b, cc, i, j) = static_cast<T>(std::clamp(v, 0.0, 1.0));
                }
    return out;
}

// ---- checkpointing ------------------------------------------------------

struct CheckpointMeta {
    long iter = 0;
    long step = 0;
};

namespace detail {
constexpr char ckpt_magic[8] = {'S', 'V', 'D', 'N', 'C', 'K', '0', '1'};

template <typename T>
void write_block(std::ofstream& f, const Tensor<T>& t) {
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <typename T>
void read_block(std::ifstream& f, Tensor<T>& t) {
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!f) throw IoError("checkpoint: truncated tensor block");
}
} // namespace detail

// Binary checkpoint: magic, JSON header, then per-parameter raw blocks in
// store order (student, teacher, first moment, second moment), followed by
// the snow candidate pool when one is given. Byte-exact: reloading
// reproduces training state bit for bit, including the pool the
// distribution-contrastive term draws from.
template <typename T>
void save_checkpoint(const fs::path& path, const ParamStore<T>& student,
                     const ParamStore<T>& teacher, const AdamW<T>& opt, long iter,
                     const std::vector<Tensor<T>>* pool = nullptr) {
    io::assert_little_endian();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    nlohmann::json header;
    header["iter"] = iter;
    header["step"] = opt.step_count();
    header["scalar_bytes"] = sizeof(T);
    auto params = nlohmann::json::array();
    for (const auto& name : student.names())
        params.push_back({{"name", name}, {"shape", student.get(name).shape()}});
    header["params"] = std::move(params);
    auto pool_shapes = nlohmann::json::array();
    if (pool)
        for (const auto& t : *pool) pool_shapes.push_back(t.shape());
    header["pool"] = std::move(pool_shapes);
    const std::string head = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
    f.write(detail::ckpt_magic, sizeof(detail::ckpt_magic));
    const std::uint64_t head_len = head.size();
    f.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    auto& mut_opt = const_cast<AdamW<T>&>(opt); // moment accessors are non-const
    for (const auto& name : student.names()) {
        detail::write_block(f, student.get(name));
        detail::write_block(f, teacher.get(name));
        detail::write_block(f, mut_opt.moment1(name));
        detail::write_block(f, mut_opt.moment2(name));
    }
    if (pool)
        for (const auto& t : *pool) detail::write_block(f, t);
    if (!f) throw IoError("checkpoint: write failed for " + path.string());
}

// Restores student/teacher weights and, when `opt` is non-null, optimizer
// moments and step count; `pool` (if non-null) receives the stored snow
// candidates. Parameter names and shapes must match the stores.
template <typename T>
CheckpointMeta load_checkpoint(const fs::path& path, ParamStore<T>& student,
                               ParamStore<T>& teacher, AdamW<T>* opt,
                               std::vector<Tensor<T>>* pool = nullptr) {
    io::assert_little_endian();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open " + path.string());
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || !std::equal(magic, magic + 8, detail::ckpt_magic))
        throw IoError("checkpoint: bad magic in " + path.string());
    std::uint64_t head_len = 0;
    f.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
    std::string head(head_len, '\0');
    f.read(head.data(), static_cast<std::streamsize>(head_len));
    if (!f) throw IoError("checkpoint: truncated header");
    const auto header = nlohmann::json::parse(head);
    if (header.at("scalar_bytes").get<std::size_t>() != sizeof(T))
        throw IoError("checkpoint: scalar width mismatch");

    const auto& params = header.at("params");
    if (params.size() != student.names().size())
        throw IoError("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto name = params[i].at("name").get<std::string>();
        if (name != student.names()[i])
            throw IoError("checkpoint: parameter order mismatch at " + name);
        const auto shape = params[i].at("shape").get<std::vector<int>>();
        if (shape != student.get(name).shape())
            throw IoError("checkpoint: shape mismatch for " + name);
    }
    Tensor<T> scratch;
    for (const auto& name : student.names()) {
        detail::read_block(f, student.get(name));
        detail::read_block(f, teacher.get(name));
        if (opt) {
            detail::read_block(f, opt->moment1(name));
            detail::read_block(f, opt->moment2(name));
        } else {
            scratch = Tensor<T>(student.get(name).shape());
            detail::read_block(f, scratch);
            detail::read_block(f, scratch);
        }
    }
    if (pool) {
        pool->clear();
        for (const auto& sh : header.value("pool", nlohmann::json::array())) {
            Tensor<T> t(sh.get<std::vector<int>>());
            detail::read_block(f, t);
            pool->push_back(std::move(t));
        }
    }
    CheckpointMeta meta;
    meta.iter = header.at("iter").get<long>();
    meta.step = header.at("step").get<long>();
    if (opt) opt->set_step_count(meta.step);
    return meta;
}

// ---- trainer ------------------------------------------------------------

// Owns the model, both parameter sets, the optimizer, and the loaded corpus.
// All per-iteration randomness is derived from (seed, iter), so a resumed
// run continues exactly where the original left off.
template <typename T = float>
class Trainer {
public:
    explicit Trainer(nlohmann::json cfg)
        : cfg_(std::move(cfg)),
          seed_(cfg_.value("seed", std::uint64_t{0})),
          mcfg_(ModelConfig::from_json(cfg_)),
          model_(mcfg_),
          student_(model_.make_params(seed_)),
          teacher_(student_),
          opt_(student_),
          proxy_(section("loss").value("proxy_seed", std::uint64_t{1234})),
          weights_(losses::LossWeights::from_json(section("loss"))),
          pool_(section("dcr").value("pool", std::size_t{64})) {
        const auto tr = section("train");
        iters_ = tr.value("iters", 300L);
        batch_ = tr.value("batch", 4);
        lr0_ = tr.value("lr", 1e-4);
        eta_ = tr.value("eta", 0.99);
        mu_max_ = tr.value("mu_max", 1.0);
        ckpt_every_ = tr.value("ckpt_every", 100L);
        ckpt_path_ = tr.value("ckpt", std::string("checkpoint.bin"));
        log_path_ = tr.value("log_file", std::string("train_log.jsonl"));
        opt_.weight_decay = tr.value("weight_decay", 1e-4);

        const auto ab = section("ablation");
        sst_ = ab.value("sst", true);
        // The distribution-contrastive term needs both the teacher stream and
        // the decomposition heads, so it is active only alongside them.
        dcr_ = ab.value("dcr", true) && sst_ && mcfg_.tde_enabled;

        const auto dj = section("dcr");
        dcr_k_ = dj.value("k", 3);
        dcr_mc_ = dj.value("mc_samples", 4096);
        dcr_max_fit_ = dj.value("max_fit_samples", std::size_t{8192});
        weights_.dcr = dj.value("weight", weights_.dcr);
        aug_ = AugmentParams::from_json(section("augment"));

        if (batch_ <= 0 || iters_ <= 0)
            throw std::invalid_argument("Trainer: batch and iters must be positive");
        load_data();
    }

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    // One optimization step at iteration `iter`; batches are drawn here so a
    // step is a pure function of (weights, optimizer state, seed, iter).
    losses::LossReport step(long iter) {
        Rng rng(derive_seed(seed_, 0xBA7C, static_cast<std::uint64_t>(iter)));
        std::vector<int> lab(static_cast<std::size_t>(batch_));
        std::vector<int> unlab(static_cast<std::size_t>(batch_));
        for (auto& v : lab) v = rng.uniform_int(0, static_cast<int>(labeled_.size()) - 1);
        if (!unlabeled_.empty())
            for (auto& v : unlab)
                v = rng.uniform_int(0, static_cast<int>(unlabeled_.size()) - 1);
        auto rep = sst_ ? train_step_semi(lab, unlab, iter) : train_step_supervised(lab, iter);
        iter_ = iter + 1;
        return rep;
    }

    // Supervised-only update: pixel + perceptual + frequency on labeled clips.
    losses::LossReport train_step_supervised(const std::vector<int>& lab, long iter) {
        Binder<T> bs(student_, /*trainable=*/true);
        const T invb = T(1) / static_cast<T>(lab.size());
        auto total = ad::Var<T>::constant(Tensor<T>::scalar(T(0)));
        std::vector<losses::LossReport> reps;
        for (const int idx : lab) {
            const auto& ex = labeled_[static_cast<std::size_t>(idx)];
            auto out = model_.forward(bs, ad::Var<T>::constant(ex.snowy));
            auto sup = losses::supervised_total(out.restored, ad::Var<T>::constant(ex.clean),
                                                weights_, proxy_);
            total = ad::add(total, ad::mul_scalar(sup.total, invb));
            reps.push_back(std::move(sup.report));
        }
        ad::backward(total);
        apply_gradients(bs, iter);
        return average_reports(reps);
    }

    // Semi-supervised update: the supervised term plus warm-up-scaled
    // consistency, contrastive, prior, and distribution-contrastive terms on
    // unlabeled clips, followed by the EMA teacher update. With the
    // student/teacher stream disabled this reduces to the supervised step.
    losses::LossReport train_step_semi(const std::vector<int>& lab,
                                       const std::vector<int>& unlab, long iter) {
        if (!sst_) return train_step_supervised(lab, iter);
        if (unlabeled_.empty())
            throw std::invalid_argument("train_step_semi: no unlabeled clips loaded");

        Binder<T> bs(student_, /*trainable=*/true);
        Binder<T> bt(teacher_, /*trainable=*/false);
        const std::size_t b = lab.size();
        const T invb = T(1) / static_cast<T>(b);
        auto total = ad::Var<T>::constant(Tensor<T>::scalar(T(0)));

        std::vector<losses::LossReport> sup_reps, unsup_reps;
        std::vector<ad::Var<T>> lab_bg(b);
        std::vector<Tensor<T>> cands;

        for (std::size_t s = 0; s < b; ++s) {
            const auto& ex = labeled_[static_cast<std::size_t>(lab[s])];
            auto out = model_.forward(bs, ad::Var<T>::constant(ex.snowy));
            auto sup = losses::supervised_total(out.restored, ad::Var<T>::constant(ex.clean),
                                                weights_, proxy_);
            total = ad::add(total, ad::mul_scalar(sup.total, invb));
            sup_reps.push_back(std::move(sup.report));
            if (dcr_ && out.has_components) {
                lab_bg[s] = out.feat_background;
                cands.push_back(out.feat_snow.val()); // detached snapshot
            }
        }

        const double mu = warmup_weight(static_cast<double>(iter),
                                        static_cast<double>(iters_), mu_max_);
        const std::size_t batch_cand_count = cands.size();
        for (auto& t : pool_.snapshot()) cands.push_back(std::move(t));

        for (std::size_t s = 0; s < b; ++s) {
            const auto& frames = unlabeled_[static_cast<std::size_t>(unlab[s])];
            auto aug = strong_augment(
                frames, derive_seed(seed_, 0xA06, static_cast<std::uint64_t>(iter), s), aug_);
            auto stu = model_.forward(bs, ad::Var<T>::constant(aug.frames));
            auto tea = model_.forward(bt, ad::Var<T>::constant(frames));

            // Map the student's outputs back to the teacher's geometry before
            // any comparison.
            auto unflip = [&](const ad::Var<T>& v) {
                return aug.flipped ? ad::flip_w(v) : v;
            };
            auto stu_restored = unflip(stu.restored);
            auto neg = unflip(ad::Var<T>::constant(aug.frames));
            auto unsup = losses::unsupervised_total(stu_restored, tea.restored, neg,
                                                    weights_, proxy_);
            auto slot_total = unsup.total;
            auto rep = std::move(unsup.report);

            if (dcr_ && stu.has_components && tea.has_components) {
                const auto sel_seed =
                    derive_seed(seed_, 0x0C12, static_cast<std::uint64_t>(iter), s);
                const std::size_t pick = gmm::select_ultra_positive(
                    tea.feat_snow.val(), cands, dcr_k_, dcr_mc_, sel_seed, dcr_max_fit_);
                gmm::DcrInputs<T> di;
                di.g_b_s = lab_bg[s];
                di.u_b_s = unflip(stu.feat_background);
                di.u_snow_s = unflip(stu.feat_snow);
                di.u_b_t = tea.feat_background;
                di.u_snow_t_aug = gmm::dcr_augment(
                    tea.feat_snow,
                    derive_seed(seed_, 0xDC4, static_cast<std::uint64_t>(iter), s));
                di.ultra = ad::Var<T>::constant(cands[pick]);
                auto dl = gmm::dcr_loss(di);
                slot_total = ad::add(slot_total,
                                     ad::mul_scalar(dl, static_cast<T>(weights_.dcr)));
                rep.add("dcr", weights_.dcr, dl.scalar());
            }
            total = ad::add(total,
                            ad::mul_scalar(slot_total, static_cast<T>(mu) * invb));
            unsup_reps.push_back(std::move(rep));
        }

        ad::backward(total);
        apply_gradients(bs, iter);
        ema_update(teacher_, student_, eta_);
        for (std::size_t i = 0; i < batch_cand_count; ++i) pool_.push(std::move(cands[i]));

        auto rep = average_reports(sup_reps);
        if (!unsup_reps.empty()) {
            const auto ur = average_reports(unsup_reps);
            for (const auto& t : ur.terms) rep.add(t.name, mu * t.weight, t.value);
        }
        return rep;
    }

    // Runs iterations [iter_, iters), logging one JSON line per step and
    // checkpointing periodically; finishes with a held-out evaluation.
    nlohmann::json run() {
        if (log_path_.has_parent_path()) fs::create_directories(log_path_.parent_path());
        std::ofstream log(log_path_, iter_ == 0 ? std::ios::trunc : std::ios::app);
        if (!log) throw IoError("Trainer: cannot open log " + log_path_.string());
        for (long it = iter_; it < iters_; ++it) {
            auto rep = step(it);
            if (!rep.finite())
                throw NumericError("training produced a non-finite loss at iteration " +
                                   std::to_string(it));
            auto line = rep.to_json();
            line["iter"] = it;
            line["lr"] = polynomial_lr(lr0_, it, iters_);
            line["mu"] = sst_ ? warmup_weight(static_cast<double>(it),
                                              static_cast<double>(iters_), mu_max_)
                              : 0.0;
            log << line.dump() << '\n';
            if (ckpt_every_ > 0 && (it + 1) % ckpt_every_ == 0) save(ckpt_path_);
        }
        save(ckpt_path_);
        auto ev = evaluate();
        log << nlohmann::json{{"eval", ev}}.dump() << '\n';
        return ev;
    }

    // Student restoration of a snowy clip, clipped to the displayable range.
    Tensor<T> infer(const Tensor<T>& snowy) {
        Binder<T> bs(student_, /*trainable=*/false);
        auto out = model_.forward(bs, ad::Var<T>::constant(snowy));
        Tensor<T> r = out.restored.val();
        for (std::size_t i = 0; i < r.numel(); ++i)
            r[i] = std::clamp(r[i], T(0), T(1));
        return r;
    }

    // Mean held-out PSNR/SSIM of the student against the clean frames, next
    // to the do-nothing baseline (the snowy input itself).
    nlohmann::json evaluate() {
        if (eval_.empty()) throw std::invalid_argument("evaluate: no held-out clips");
        double sp = 0, ss = 0, bp = 0, bsm = 0;
        for (const auto& ex : eval_) {
            const Tensor<T> restored = infer(ex.snowy);
            sp += metrics::psnr(restored, ex.clean);
            ss += metrics::ssim(restored, ex.clean);
            bp += metrics::psnr(ex.snowy, ex.clean);
            bsm += metrics::ssim(ex.snowy, ex.clean);
        }
        const double n = static_cast<double>(eval_.size());
        return {{"psnr", sp / n},
                {"ssim", ss / n},
                {"baseline_psnr", bp / n},
                {"baseline_ssim", bsm / n},
                {"clips", eval_.size()}};
    }

    void save(const fs::path& path) const {
        const auto snap = pool_.snapshot();
        save_checkpoint(path, student_, teacher_, opt_, iter_, &snap);
    }

    void load(const fs::path& path) {
        std::vector<Tensor<T>> snap;
        iter_ = load_checkpoint(path, student_, teacher_, &opt_, &snap).iter;
        pool_ = gmm::SnowPool<T>(pool_.capacity());
        for (auto& t : snap) pool_.push(std::move(t));
    }

    ParamStore<T>& student() { return student_; }
    ParamStore<T>& teacher() { return teacher_; }
    AdamW<T>& optimizer() { return opt_; }
    Model<T>& model() { return model_; }
    const losses::LossWeights& loss_weights() const { return weights_; }
    long iter() const { return iter_; }
    long iters() const { return iters_; }
    bool semi_enabled() const { return sst_; }
    bool dcr_enabled() const { return dcr_; }
    std::size_t labeled_count() const { return labeled_.size(); }
    std::size_t unlabeled_count() const { return unlabeled_.size(); }
    const fs::path& checkpoint_path() const { return ckpt_path_; }
    const fs::path& log_path() const { return log_path_; }

private:
    struct LabeledData {
        Tensor<T> clean, snowy;
    };

    nlohmann::json section(const char* key) const {
        return cfg_.contains(key) ? cfg_.at(key) : nlohmann::json::object();
    }

    void load_data() {
        const fs::path root = section("data").value("root", std::string("data"));
        const auto manifest =
            corpus::Manifest::from_json(io::read_json(root / "manifest.json"));
        for (const auto& rel : manifest.labeled) {
            auto lc = corpus::load_labeled(root, rel);
            labeled_.push_back({lc.clean.frames.template cast<T>(),
                                lc.snowy.frames.template cast<T>()});
        }
        for (const auto& rel : manifest.eval) {
            auto lc = corpus::load_labeled(root, rel);
            eval_.push_back({lc.clean.frames.template cast<T>(),
                             lc.snowy.frames.template cast<T>()});
        }
        for (const auto& rel : manifest.unlabeled)
            unlabeled_.push_back(
                corpus::load_unlabeled(root, rel).frames.template cast<T>());
        if (labeled_.empty()) throw std::invalid_argument("Trainer: no labeled clips");
        if (sst_ && unlabeled_.empty())
            throw std::invalid_argument("Trainer: semi-supervised mode needs unlabeled clips");
    }

    void apply_gradients(Binder<T>& bs, long iter) {
        std::map<std::string, Tensor<T>> grads;
        for (const auto& name : student_.names()) grads.emplace(name, bs.grad_of(name));
        opt_.step(grads, polynomial_lr(lr0_, iter, iters_));
    }

    static losses::LossReport average_reports(const std::vector<losses::LossReport>& rs) {
        losses::LossReport out = rs.front();
        for (std::size_t t = 0; t < out.terms.size(); ++t) {
            double s = 0;
            for (const auto& r : rs) s += r.terms[t].value;
            out.terms[t].value = s / static_cast<double>(rs.size());
        }
        return out;
    }

    nlohmann::json cfg_;
    std::uint64_t seed_;
    ModelConfig mcfg_;
    Model<T> model_;
    ParamStore<T> student_;
    ParamStore<T> teacher_;
    AdamW<T> opt_;
    losses::PerceptualProxy<T> proxy_;
    losses::LossWeights weights_;
    gmm::SnowPool<T> pool_;

    long iters_ = 300;
    int batch_ = 4;
    double lr0_ = 1e-4;
    double eta_ = 0.99;
    double mu_max_ = 1.0;
    long ckpt_every_ = 100;
    fs::path ckpt_path_, log_path_;
    bool sst_ = true, dcr_ = true;
    int dcr_k_ = 3, dcr_mc_ = 4096;
    std::size_t dcr_max_fit_ = 8192;
    AugmentParams aug_;
    long iter_ = 0;

    std::vector<LabeledData> labeled_, eval_;
    std::vector<Tensor<T>> unlabeled_;
};

} // namespace mt
} // namespace semivdn

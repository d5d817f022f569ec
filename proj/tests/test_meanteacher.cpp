#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "semivdn/config.hpp"
#include "semivdn/meanteacher.hpp"

using namespace semivdn;
using mt::Trainer;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "semivdn_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// One tiny corpus shared by the trainer tests (generation is deterministic,
// so building it once keeps the suite fast).
const fs::path& tiny_corpus() {
    static const fs::path root = [] {
        auto cfg = config::defaults();
        cfg["seed"] = 21;
        cfg["data"]["labeled_clips"] = 2;
        cfg["data"]["unlabeled_clips"] = 2;
        cfg["data"]["eval_clips"] = 1;
        cfg["data"]["frames"] = 2;
        cfg["data"]["height"] = 32;
        cfg["data"]["width"] = 32;
        const fs::path p = fresh_dir("trainer_corpus");
        corpus::generate_corpus(cfg, p);
        return p;
    }();
    return root;
}

// Small model + short schedule so a step costs milliseconds.
nlohmann::json trainer_config(const fs::path& scratch) {
    auto cfg = config::defaults();
    cfg["seed"] = 77;
    cfg["data"]["root"] = tiny_corpus().string();
    cfg["data"]["frames"] = 2;
    cfg["backbone"]["channels"] = 8;
    cfg["backbone"]["blocks"] = 1;
    cfg["tde"]["d"] = 8;
    cfg["tde"]["heads"] = 2;
    cfg["tde"]["blocks"] = 1;
    cfg["train"]["iters"] = 4;
    cfg["train"]["batch"] = 2;
    cfg["train"]["lr"] = 1e-3;
    cfg["train"]["ckpt"] = (scratch / "ckpt.bin").string();
    cfg["train"]["log_file"] = (scratch / "log.jsonl").string();
    cfg["dcr"]["mc_samples"] = 256;
    return cfg;
}

bool stores_equal(ParamStore<float>& a, ParamStore<float>& b) {
    if (a.names() != b.names()) return false;
    for (const auto& name : a.names()) {
        const auto& ta = a.get(name);
        const auto& tb = b.get(name);
        if (!ta.same_shape(tb)) return false;
        for (std::size_t i = 0; i < ta.numel(); ++i)
            if (ta[i] != tb[i]) return false;
    }
    return true;
}

bool reports_equal(const losses::LossReport& a, const losses::LossReport& b) {
    if (a.terms.size() != b.terms.size()) return false;
    for (std::size_t i = 0; i < a.terms.size(); ++i)
        if (a.terms[i].name != b.terms[i].name ||
            a.terms[i].weight != b.terms[i].weight ||
            a.terms[i].value != b.terms[i].value)
            return false;
    return true;
}

} // namespace

TEST_CASE("consistency ramp hits its endpoints exactly", "[meanteacher]") {
    REQUIRE(mt::warmup_weight(0.0, 300.0) == std::exp(-5.0));
    REQUIRE(mt::warmup_weight(300.0, 300.0) == 1.0);
    REQUIRE(mt::warmup_weight(0.0, 300.0, 0.25) == 0.25 * std::exp(-5.0));
    REQUIRE(mt::warmup_weight(300.0, 300.0, 0.25) == 0.25);

    // Strictly increasing across the ramp, flat once clamped.
    double prev = mt::warmup_weight(0.0, 100.0);
    for (int r = 1; r <= 100; ++r) {
        const double v = mt::warmup_weight(static_cast<double>(r), 100.0);
        REQUIRE(v > prev);
        prev = v;
    }
    REQUIRE(mt::warmup_weight(150.0, 100.0) == 1.0);
    REQUIRE(mt::warmup_weight(-3.0, 100.0) == std::exp(-5.0));

    REQUIRE_THROWS_AS(mt::warmup_weight(1.0, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(mt::warmup_weight(1.0, -2.0), std::invalid_argument);
}

TEST_CASE("teacher update is the exact exponential blend", "[meanteacher]") {
    ParamStore<float> teacher, student;
    Rng rng(901);
    for (const char* name : {"a", "b"}) {
        Tensor<float> t({2, 3}), s({2, 3});
        for (std::size_t i = 0; i < t.numel(); ++i) {
            t[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
            s[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
        }
        teacher.add(name, t);
        student.add(name, s);
    }
    ParamStore<float> before = teacher;
    const double eta = 0.99;
    mt::ema_update(teacher, student, eta);
    for (const auto& name : teacher.names())
        for (std::size_t i = 0; i < teacher.get(name).numel(); ++i) {
            const float expect = static_cast<float>(
                eta * static_cast<double>(before.get(name)[i]) +
                (1.0 - eta) * static_cast<double>(student.get(name)[i]));
            REQUIRE(teacher.get(name)[i] == expect);
        }

    // Repeated updates contract toward the student geometrically.
    const float t0 = before.get("a")[0], s0 = student.get("a")[0];
    ParamStore<float> t2 = before;
    for (int k = 0; k < 50; ++k) mt::ema_update(t2, student, 0.9);
    const double expect_gap = std::pow(0.9, 50) * (t0 - s0);
    REQUIRE(t2.get("a")[0] - s0 == Catch::Approx(expect_gap).margin(1e-5));

    ParamStore<float> other;
    other.add("a", Tensor<float>({2, 3}, 0.0f));
    REQUIRE_THROWS_AS(mt::ema_update(teacher, other, eta), std::invalid_argument);
}

TEST_CASE("strong augmentation is seeded, bounded, and invertible in intent",
          "[meanteacher]") {
    Rng rng(902);
    Tensor<float> frames({2, 3, 6, 6});
    for (std::size_t i = 0; i < frames.numel(); ++i)
        frames[i] = static_cast<float>(rng.uniform(0.0, 1.0));

    const auto a = mt::strong_augment(frames, 31);
    const auto b = mt::strong_augment(frames, 31);
    REQUIRE(a.flipped == b.flipped);
    for (std::size_t i = 0; i < frames.numel(); ++i) {
        REQUIRE(a.frames[i] == b.frames[i]);
        REQUIRE(a.frames[i] >= 0.0f);
        REQUIRE(a.frames[i] <= 1.0f);
    }

    // Zero-strength parameters return the input bit for bit.
    mt::AugmentParams off;
    off.jitter = 0;
    off.noise_sigma = 0;
    off.flip_prob = 0;
    const auto id = mt::strong_augment(frames, 31, off);
    REQUIRE_FALSE(id.flipped);
    for (std::size_t i = 0; i < frames.numel(); ++i)
        REQUIRE(id.frames[i] == frames[i]);

    // Flip-only: the output is the exact mirror.
    mt::AugmentParams fl = off;
    fl.flip_prob = 1.0;
    const auto mirrored = mt::strong_augment(frames, 31, fl);
    REQUIRE(mirrored.flipped);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 6; ++i)
                for (int j = 0; j < 6; ++j)
                    REQUIRE(mirrored.frames(n, c, i, j) == frames(n, c, i, 5 - j));

    // Noise-only on a mid-gray image: sample std tracks sigma.
    mt::AugmentParams nz = off;
    nz.noise_sigma = 0.02;
    Tensor<float> gray({1, 3, 64, 64}, 0.5f);
    const auto noisy = mt::strong_augment(gray, 77, nz);
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < noisy.frames.numel(); ++i) {
        const double d = noisy.frames[i] - 0.5;
        s += d;
        s2 += d * d;
    }
    const double n = static_cast<double>(noisy.frames.numel());
    REQUIRE(s / n == Catch::Approx(0.0).margin(1e-3));
    REQUIRE(std::sqrt(s2 / n) == Catch::Approx(0.02).epsilon(0.05));

    const auto p = mt::AugmentParams::from_json({{"jitter", 0.2}, {"flip_prob", 0.0}});
    REQUIRE(p.jitter == 0.2);
    REQUIRE(p.flip_prob == 0.0);
    REQUIRE(p.noise_sigma == 0.02); // default retained
}

TEST_CASE("checkpoints restore full training state bit for bit",
          "[meanteacher][io]") {
    ModelConfig mc;
    mc.n_f = 2;
    mc.channels = 8;
    mc.backbone_blocks = 1;
    mc.d = 8;
    mc.heads = 2;
    mc.tde_blocks = 1;
    Model<float> model(mc);
    auto student = model.make_params(1);
    auto teacher = model.make_params(2);
    AdamW<float> opt(student);
    // Touch the moments so there is real optimizer state to round-trip.
    std::map<std::string, Tensor<float>> grads;
    for (const auto& name : student.names()) {
        Tensor<float> g(student.get(name).shape(), 0.01f);
        grads.emplace(name, std::move(g));
    }
    opt.step(grads, 1e-3);
    std::vector<Tensor<float>> pool = {Tensor<float>({1, 2, 2, 2}, 0.5f),
                                       Tensor<float>({1, 2, 2, 2}, 0.25f)};

    const auto dir = fresh_dir("ckpt_roundtrip");
    const auto path = dir / "state.bin";
    mt::save_checkpoint(path, student, teacher, opt, 17, &pool);

    auto s2 = model.make_params(3);
    auto t2 = model.make_params(4);
    AdamW<float> opt2(s2);
    std::vector<Tensor<float>> pool2;
    const auto meta = mt::load_checkpoint(path, s2, t2, &opt2, &pool2);
    REQUIRE(meta.iter == 17);
    REQUIRE(meta.step == 1);
    REQUIRE(opt2.step_count() == 1);
    REQUIRE(stores_equal(student, s2));
    REQUIRE(stores_equal(teacher, t2));
    for (const auto& name : student.names()) {
        const auto& m1a = opt.moment1(name);
        const auto& m1b = opt2.moment1(name);
        const auto& m2a = opt.moment2(name);
        const auto& m2b = opt2.moment2(name);
        for (std::size_t i = 0; i < m1a.numel(); ++i) {
            REQUIRE(m1a[i] == m1b[i]);
            REQUIRE(m2a[i] == m2b[i]);
        }
    }
    REQUIRE(pool2.size() == 2);
    REQUIRE(pool2[0].shape() == std::vector<int>{1, 2, 2, 2});
    REQUIRE(pool2[0][0] == 0.5f);
    REQUIRE(pool2[1][0] == 0.25f);

    // Loading without an optimizer still restores the weights.
    auto s3 = model.make_params(5);
    auto t3 = model.make_params(6);
    REQUIRE(mt::load_checkpoint<float>(path, s3, t3, nullptr).iter == 17);
    REQUIRE(stores_equal(student, s3));

    // Corrupt magic and mismatched architectures are rejected.
    {
        std::ofstream f(dir / "bad.bin", std::ios::binary);
        f << "NOTACKPT garbage";
    }
    REQUIRE_THROWS_AS(mt::load_checkpoint<float>(dir / "bad.bin", s3, t3, nullptr),
                      IoError);
    ModelConfig wide = mc;
    wide.channels = 16;
    Model<float> other(wide);
    auto sw = other.make_params(1);
    auto tw = other.make_params(2);
    REQUIRE_THROWS_AS(mt::load_checkpoint<float>(path, sw, tw, nullptr), IoError);
}

TEST_CASE("supervised-only training never touches the teacher",
          "[meanteacher][trainer]") {
    const auto dir = fresh_dir("trainer_sup");
    auto cfg = trainer_config(dir);
    cfg["ablation"]["sst"] = false;
    Trainer<float> tr(cfg);
    REQUIRE_FALSE(tr.semi_enabled());
    REQUIRE_FALSE(tr.dcr_enabled());
    REQUIRE(tr.labeled_count() == 2);

    ParamStore<float> teacher_before = tr.teacher();
    ParamStore<float> student_before = tr.student();
    const auto rep = tr.step(0);
    REQUIRE(tr.iter() == 1);
    REQUIRE(stores_equal(tr.teacher(), teacher_before));
    REQUIRE_FALSE(stores_equal(tr.student(), student_before));

    // Only the paired terms appear without the teacher stream.
    REQUIRE(rep.terms.size() == 3);
    REQUIRE(rep.terms[0].name == "pixel");
    REQUIRE(rep.terms[1].name == "perceptual");
    REQUIRE(rep.terms[2].name == "frequency");
    REQUIRE(rep.finite());
}

TEST_CASE("semi-supervised step blends the teacher and reports ramped weights",
          "[meanteacher][trainer]") {
    const auto dir = fresh_dir("trainer_semi");
    Trainer<float> tr(trainer_config(dir));
    REQUIRE(tr.semi_enabled());
    REQUIRE(tr.dcr_enabled());
    REQUIRE(tr.unlabeled_count() == 2);

    ParamStore<float> teacher_before = tr.teacher();
    const auto rep = tr.step(0);

    // Teacher is the exact blend of its previous self and the fresh student.
    // Spelled as eta / (1.0 - eta) to match the update's arithmetic bit for
    // bit; the literal 0.01 is a different double than 1.0 - 0.99.
    const double eta = 0.99;
    for (const auto& name : tr.teacher().names())
        for (std::size_t i = 0; i < tr.teacher().get(name).numel(); ++i) {
            const float expect = static_cast<float>(
                eta * static_cast<double>(teacher_before.get(name)[i]) +
                (1.0 - eta) * static_cast<double>(tr.student().get(name)[i]));
            REQUIRE(tr.teacher().get(name)[i] == expect);
        }

    // Report carries both streams; teacher-stream weights are scaled by the
    // warm-up factor so the weighted sum equals the optimized objective.
    const double mu = mt::warmup_weight(0.0, static_cast<double>(tr.iters()));
    std::vector<std::string> names;
    for (const auto& t : rep.terms) names.push_back(t.name);
    REQUIRE(names == std::vector<std::string>{"pixel", "perceptual", "frequency",
                                              "consistency", "contrastive",
                                              "dark_channel", "tv", "dcr"});
    const auto& w = tr.loss_weights();
    REQUIRE(rep.terms[3].weight == Catch::Approx(mu * w.lambda3));
    REQUIRE(rep.terms[4].weight == Catch::Approx(mu * w.lambda4));
    REQUIRE(rep.terms[7].weight == Catch::Approx(mu * w.dcr));
    REQUIRE(rep.finite());
}

TEST_CASE("training is a pure function of config and seed",
          "[meanteacher][trainer]") {
    const auto d1 = fresh_dir("trainer_det_a");
    const auto d2 = fresh_dir("trainer_det_b");
    Trainer<float> a(trainer_config(d1));
    Trainer<float> b(trainer_config(d2));
    for (long it = 0; it < 2; ++it) {
        const auto ra = a.step(it);
        const auto rb = b.step(it);
        INFO("iter " << it);
        REQUIRE(reports_equal(ra, rb));
    }
    REQUIRE(stores_equal(a.student(), b.student()));
    REQUIRE(stores_equal(a.teacher(), b.teacher()));
}

TEST_CASE("resuming from a checkpoint replays the schedule bit for bit",
          "[meanteacher][trainer]") {
    const auto da = fresh_dir("trainer_resume_a");
    const auto db = fresh_dir("trainer_resume_b");

    // Reference: four uninterrupted steps.
    Trainer<float> a(trainer_config(da));
    losses::LossReport a2, a3;
    a.step(0);
    a.step(1);
    a2 = a.step(2);
    a3 = a.step(3);

    // Interrupted: two steps, checkpoint, reload into a fresh process-alike,
    // two more steps. Everything the remaining steps depend on (weights,
    // teacher, moments, snow pool, iteration) rides in the checkpoint.
    Trainer<float> b(trainer_config(db));
    b.step(0);
    b.step(1);
    const auto ckpt = db / "mid.bin";
    b.save(ckpt);

    Trainer<float> c(trainer_config(db));
    c.load(ckpt);
    REQUIRE(c.iter() == 2);
    const auto c2 = c.step(2);
    const auto c3 = c.step(3);

    REQUIRE(reports_equal(a2, c2));
    REQUIRE(reports_equal(a3, c3));
    REQUIRE(stores_equal(a.student(), c.student()));
    REQUIRE(stores_equal(a.teacher(), c.teacher()));
}

TEST_CASE("run writes a parseable log and a final checkpoint",
          "[meanteacher][trainer]") {
    const auto dir = fresh_dir("trainer_run");
    auto cfg = trainer_config(dir);
    cfg["train"]["iters"] = 2;
    Trainer<float> tr(cfg);
    const auto ev = tr.run();

    REQUIRE(fs::exists(tr.checkpoint_path()));
    REQUIRE(ev.contains("psnr"));
    REQUIRE(ev.contains("ssim"));
    REQUIRE(ev.contains("baseline_psnr"));
    REQUIRE(ev.at("clips").get<int>() == 1);

    std::ifstream log(tr.log_path());
    REQUIRE(log.good());
    std::string line;
    int steps = 0;
    bool saw_eval = false;
    while (std::getline(log, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j.contains("eval")) {
            saw_eval = true;
            REQUIRE(j["eval"]["psnr"] == ev["psnr"]);
        } else {
            REQUIRE(j.contains("iter"));
            REQUIRE(j.contains("lr"));
            REQUIRE(j.contains("mu"));
            REQUIRE(j.contains("total"));
            ++steps;
        }
    }
    REQUIRE(steps == 2);
    REQUIRE(saw_eval);
}

TEST_CASE("fresh trainer restores its input and matches the baseline",
          "[meanteacher][trainer]") {
    const auto dir = fresh_dir("trainer_infer");
    Trainer<float> tr(trainer_config(dir));

    Rng rng(903);
    Tensor<float> snowy({2, 3, 32, 32});
    for (std::size_t i = 0; i < snowy.numel(); ++i)
        snowy[i] = static_cast<float>(rng.uniform(0.0, 1.0));
    const auto restored = tr.infer(snowy);
    REQUIRE(restored.same_shape(snowy));
    // Residual decoder starts at zero, so inference is the identity and the
    // held-out metrics coincide with the do-nothing baseline.
    for (std::size_t i = 0; i < snowy.numel(); ++i)
        REQUIRE(restored[i] == snowy[i]);

    const auto ev = tr.evaluate();
    REQUIRE(ev["psnr"].get<double>() == ev["baseline_psnr"].get<double>());
    REQUIRE(ev["ssim"].get<double>() == ev["baseline_ssim"].get<double>());
    REQUIRE(std::isfinite(ev["psnr"].get<double>()));
}

TEST_CASE("trainer rejects corpora that cannot support its mode",
          "[meanteacher][trainer]") {
    // No unlabeled clips: fine for supervised, fatal for semi-supervised.
    auto gen = config::defaults();
    gen["seed"] = 22;
    gen["data"]["labeled_clips"] = 1;
    gen["data"]["unlabeled_clips"] = 0;
    gen["data"]["eval_clips"] = 1;
    gen["data"]["frames"] = 2;
    gen["data"]["height"] = 32;
    gen["data"]["width"] = 32;
    const auto root = fresh_dir("trainer_nounlab");
    corpus::generate_corpus(gen, root);

    const auto dir = fresh_dir("trainer_reject");
    auto cfg = trainer_config(dir);
    cfg["data"]["root"] = root.string();
    REQUIRE_THROWS_AS(Trainer<float>(cfg), std::invalid_argument);
    cfg["ablation"]["sst"] = false;
    REQUIRE_NOTHROW(Trainer<float>(cfg));
}

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "semivdn/ablation.hpp"
#include "semivdn/config.hpp"
#include "semivdn/corpus.hpp"
#include "semivdn/metrics.hpp"

using namespace semivdn;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "semivdn_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Tensor<float> gray_clip(int n, int h, int w, float v) {
    return Tensor<float>({n, 3, h, w}, v);
}

// Clean clip plus bounded uniform noise, clamped back into [0,1].
Tensor<float> noisy_copy(const Tensor<float>& x, float amp, std::uint64_t seed) {
    Tensor<float> out = x;
    Rng rng(seed);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = std::clamp(
            out[i] + static_cast<float>(rng.uniform(-amp, amp)), 0.0f, 1.0f);
    return out;
}

// Runs the installed CLI binary, capturing exit status and combined output.
struct CmdResult {
    int status = -1;
    std::string out;
};

CmdResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path cap = fs::temp_directory_path() / "semivdn_tests" /
                         ("cli_out_" + std::to_string(counter++) + ".txt");
    fs::create_directories(cap.parent_path());
    const std::string cmd =
        std::string(SEMIVDN_BIN) + " " + args + " > " + cap.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    std::ifstream f(cap);
    std::stringstream ss;
    ss << f.rdbuf();
    return {rc, ss.str()};
}

int count_lines_with(const fs::path& file, const std::string& needle) {
    std::ifstream f(file);
    std::string line;
    int n = 0;
    while (std::getline(f, line))
        if (line.find(needle) != std::string::npos) ++n;
    return n;
}

} // namespace

// ---------------------------------------------------------------------------
// metrics

TEST_CASE("psnr matches the closed form and caps at the sentinel", "[metrics]") {
    Tensor<float> a({2, 3, 16, 16}, 0.0f);

    // Identical inputs have zero error and report the 99 dB sentinel.
    REQUIRE(metrics::psnr(a, a) == 99.0);

    // Constant offset of 0.5: the per-pixel squared error is exactly 0.25,
    // so the reduction stays exact and the value is the pure logarithm.
    Tensor<float> b({2, 3, 16, 16}, 0.5f);
    REQUIRE(metrics::psnr(a, b) == -10.0 * std::log10(0.25));

    // Offset 0.1 is the textbook 20 dB case (up to float rounding of 0.1).
    Tensor<float> c({2, 3, 16, 16}, 0.1f);
    REQUIRE(metrics::psnr(a, c) == Catch::Approx(20.0).epsilon(1e-6));

    // Symmetric in its arguments, bit for bit.
    Tensor<float> d = noisy_copy(a, 0.3f, 42);
    REQUIRE(metrics::psnr(a, d) == metrics::psnr(d, a));

    // More noise, lower score.
    REQUIRE(metrics::psnr(a, noisy_copy(a, 0.05f, 7)) >
            metrics::psnr(a, noisy_copy(a, 0.2f, 7)));

    // A single-pixel error small enough to push past 99 dB is capped.
    Tensor<float> e = a;
    e[0] += 1e-4f;
    REQUIRE(metrics::psnr(a, e) == 99.0);

    Tensor<float> wrong({2, 3, 16, 8}, 0.0f);
    REQUIRE_THROWS_AS(metrics::psnr(a, wrong), std::invalid_argument);
}

TEST_CASE("ssim is exactly one on identical clips", "[metrics]") {
    const auto clip = corpus::synthesize_clean_clip(24, 24, 2, 77);
    // Every window contributes num/den with num == den, so the mean is 1.0
    // with no rounding slack at all.
    REQUIRE(metrics::ssim(clip.frames, clip.frames) == 1.0);
}

TEST_CASE("ssim on two flat clips follows the luminance term", "[metrics]") {
    // Constant images have (numerically) zero variance and covariance, so the
    // structure and contrast factors collapse to c2/c2 and only the luminance
    // comparison survives: (2 p q + c1) / (p^2 + q^2 + c1).
    const double p = 0.2, q = 0.5, c1 = 1e-4;
    const auto a = gray_clip(2, 16, 16, static_cast<float>(p));
    const auto b = gray_clip(2, 16, 16, static_cast<float>(q));
    const double expect = (2.0 * p * q + c1) / (p * p + q * q + c1);
    REQUIRE(metrics::ssim(a, b) == Catch::Approx(expect).epsilon(1e-6));
}

TEST_CASE("ssim decreases as noise grows", "[metrics]") {
    const auto clip = corpus::synthesize_clean_clip(32, 32, 2, 5);
    const double s_light = metrics::ssim(clip.frames, noisy_copy(clip.frames, 0.05f, 9));
    const double s_heavy = metrics::ssim(clip.frames, noisy_copy(clip.frames, 0.2f, 9));
    REQUIRE(s_light < 1.0);
    REQUIRE(s_heavy < s_light);
    REQUIRE(s_heavy > 0.0);
}

TEST_CASE("ssim rejects shapes it cannot window", "[metrics]") {
    Tensor<float> small({1, 3, 10, 32}, 0.5f);
    REQUIRE_THROWS_AS(metrics::ssim(small, small), std::invalid_argument);
    Tensor<float> mono({1, 1, 16, 16}, 0.5f);
    REQUIRE_THROWS_AS(metrics::ssim(mono, mono), std::invalid_argument);
    Tensor<float> a({1, 3, 16, 16}, 0.5f), b({2, 3, 16, 16}, 0.5f);
    REQUIRE_THROWS_AS(metrics::ssim(a, b), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// config

TEST_CASE("defaults carry the documented training setup", "[config]") {
    const auto cfg = config::defaults();
    REQUIRE(cfg["seed"] == 0);
    REQUIRE(cfg["train"]["iters"] == 300);
    REQUIRE(cfg["train"]["eta"] == 0.99);
    REQUIRE(cfg["backbone"]["stride"] == 4);
    REQUIRE(cfg["tde"]["n_experts"] == 3);
    REQUIRE(cfg["ablation"]["name"] == "Full");
    REQUIRE(cfg["ablation"]["tde"] == true);
    REQUIRE(cfg["ablation"]["sst"] == true);
    REQUIRE(cfg["ablation"]["dcr"] == true);
}

TEST_CASE("merge overlays nested objects without clobbering siblings", "[config]") {
    auto base = config::defaults();
    config::merge(base, nlohmann::json{{"train", {{"iters", 50}}}});
    REQUIRE(base["train"]["iters"] == 50);
    REQUIRE(base["train"]["batch"] == 4); // untouched sibling survives
    config::merge(base, nlohmann::json{{"train", 3}});
    REQUIRE(base["train"] == 3); // scalar replaces the whole object
}

TEST_CASE("the TOML subset covers sections, scalars, and comments", "[config]") {
    std::istringstream in(
        "# top comment\n"
        "seed = 5\n"
        "[train]\n"
        "iters = 7   # trailing comment\n"
        "lr = 0.5\n"
        "ckpt = \"out/ck.bin\"\n"
        "resume = false\n"
        "[a.b]\n"
        "c = -3\n");
    const auto cfg = config::parse_toml(in);
    REQUIRE(cfg["seed"] == 5);
    REQUIRE(cfg["seed"].is_number_integer());
    REQUIRE(cfg["train"]["iters"] == 7);
    REQUIRE(cfg["train"]["lr"] == 0.5);
    REQUIRE(cfg["train"]["lr"].is_number_float());
    REQUIRE(cfg["train"]["ckpt"] == "out/ck.bin");
    REQUIRE(cfg["train"]["resume"] == false);
    REQUIRE(cfg["a"]["b"]["c"] == -3);

    std::istringstream bad1("just some text\n");
    REQUIRE_THROWS_AS(config::parse_toml(bad1), IoError);
    std::istringstream bad2("x = 1.2.3\n");
    REQUIRE_THROWS_AS(config::parse_toml(bad2), IoError);
}

TEST_CASE("load_file routes on extension and reports missing files", "[config]") {
    const auto dir = fresh_dir("config_files");
    {
        std::ofstream f(dir / "c.toml");
        f << "[train]\niters = 11\n";
    }
    {
        std::ofstream f(dir / "c.json");
        f << R"({"train": {"iters": 12}})";
    }
    REQUIRE(config::load_file(dir / "c.toml")["train"]["iters"] == 11);
    REQUIRE(config::load_file(dir / "c.json")["train"]["iters"] == 12);
    REQUIRE_THROWS_AS(config::load_file(dir / "nope.toml"), IoError);
}

TEST_CASE("--set assignments parse types and create paths", "[config]") {
    auto cfg = config::defaults();
    config::apply_set(cfg, "train.iters=50");
    REQUIRE(cfg["train"]["iters"] == 50);
    REQUIRE(cfg["train"]["iters"].is_number_integer());
    config::apply_set(cfg, "train.lr=0.25");
    REQUIRE(cfg["train"]["lr"] == 0.25);
    config::apply_set(cfg, "debug.verbose=true");
    REQUIRE(cfg["debug"]["verbose"] == true); // fresh nested path
    config::apply_set(cfg, "data.root=runs/exp1");
    REQUIRE(cfg["data"]["root"] == "runs/exp1"); // non-JSON falls back to string

    REQUIRE_THROWS_AS(config::apply_set(cfg, "no_equals"), std::invalid_argument);
    REQUIRE_THROWS_AS(config::apply_set(cfg, "=5"), std::invalid_argument);
}

TEST_CASE("load applies file, overrides, and seed in that order", "[config]") {
    const auto dir = fresh_dir("config_load");
    {
        std::ofstream f(dir / "c.toml");
        f << "seed = 3\n[train]\niters = 50\nbatch = 2\n";
    }
    const auto cfg = config::load((dir / "c.toml").string(),
                                  {"train.iters=60"}, /*seed_override=*/9);
    REQUIRE(cfg["train"]["iters"] == 60); // --set beats the file
    REQUIRE(cfg["train"]["batch"] == 2);  // file beats defaults
    REQUIRE(cfg["seed"] == 9);            // explicit seed beats both
    REQUIRE(cfg["train"]["lr"] == 1e-4);  // defaults fill the rest
}

TEST_CASE("the config hash is stable and sensitive", "[config]") {
    const auto a = config::hash(config::defaults());
    REQUIRE(a == config::hash(config::defaults()));
    REQUIRE(a.size() == 16);
    REQUIRE(a.find_first_not_of("0123456789abcdef") == std::string::npos);
    auto cfg = config::defaults();
    cfg["seed"] = 1;
    REQUIRE(config::hash(cfg) != a);
}

TEST_CASE("ablation names map to their switch triples", "[config]") {
    auto cfg = config::defaults();
    config::apply_ablation_name(cfg, "M2");
    REQUIRE(cfg["ablation"]["name"] == "M2");
    REQUIRE(cfg["ablation"]["tde"] == true);
    REQUIRE(cfg["ablation"]["sst"] == false);
    REQUIRE(cfg["ablation"]["dcr"] == false);
    config::apply_ablation_name(cfg, "M1");
    REQUIRE(cfg["ablation"]["tde"] == false);
    REQUIRE_THROWS_AS(config::apply_ablation_name(cfg, "M9"),
                      std::invalid_argument);
}

// ---------------------------------------------------------------------------
// ablation harness

namespace {

// Shared micro-corpus for the harness and CLI tests below.
const fs::path& micro_corpus() {
    static const fs::path root = [] {
        auto cfg = config::defaults();
        cfg["seed"] = 21;
        cfg["data"]["labeled_clips"] = 2;
        cfg["data"]["unlabeled_clips"] = 2;
        cfg["data"]["eval_clips"] = 1;
        cfg["data"]["frames"] = 2;
        cfg["data"]["height"] = 32;
        cfg["data"]["width"] = 32;
        const fs::path p = fresh_dir("ablation_corpus");
        corpus::generate_corpus(cfg, p);
        return p;
    }();
    return root;
}

nlohmann::json ladder_config(const fs::path& scratch) {
    auto cfg = config::defaults();
    cfg["seed"] = 77;
    cfg["data"]["root"] = micro_corpus().string();
    cfg["data"]["frames"] = 2;
    cfg["backbone"]["channels"] = 8;
    cfg["backbone"]["blocks"] = 1;
    cfg["tde"]["d"] = 8;
    cfg["tde"]["heads"] = 2;
    cfg["tde"]["blocks"] = 1;
    cfg["train"]["iters"] = 2;
    cfg["train"]["batch"] = 2;
    cfg["train"]["lr"] = 1e-3;
    cfg["train"]["ckpt"] = (scratch / "ck.bin").string();
    cfg["train"]["log_file"] = (scratch / "log.jsonl").string();
    cfg["dcr"]["mc_samples"] = 256;
    return cfg;
}

} // namespace

TEST_CASE("the ablation ladder trains all four switch settings", "[ablation]") {
    const auto dir = fresh_dir("ablation_run");
    const auto res = ablate::run_ablation(ladder_config(dir));

    REQUIRE(res.rows.size() == 4);
    REQUIRE(res.rows[0].name == "M1");
    REQUIRE(res.rows[3].name == "Full");
    REQUIRE_FALSE(res.rows[0].tde);
    REQUIRE_FALSE(res.rows[0].sst);
    REQUIRE_FALSE(res.rows[0].dcr);
    REQUIRE(res.rows[1].tde);
    REQUIRE_FALSE(res.rows[1].sst);
    REQUIRE(res.rows[2].sst);
    REQUIRE_FALSE(res.rows[2].dcr);
    REQUIRE(res.rows[3].dcr);

    for (const auto& r : res.rows) {
        REQUIRE(std::isfinite(r.psnr));
        REQUIRE(r.psnr > 0.0);
        REQUIRE(r.ssim > 0.0);
        REQUIRE(r.ssim <= 1.0);
    }
    // All configurations score against the same held-out clips, so the
    // do-nothing baseline is identical across rows.
    REQUIRE(res.rows[0].baseline_psnr == res.rows[3].baseline_psnr);
    REQUIRE(res.rows[0].baseline_ssim == res.rows[3].baseline_ssim);

    // Per-configuration checkpoints, none clobbered.
    for (const char* name : {"M1", "M2", "M3", "Full"})
        REQUIRE(fs::exists(dir / ("ck.bin." + std::string(name))));

    REQUIRE(res.find("M3") != nullptr);
    REQUIRE(res.find("M3")->sst);
    REQUIRE(res.find("nope") == nullptr);

    // Rendered tables carry every row plus the baseline note.
    const std::string md = res.markdown();
    REQUIRE(md.find("| config |") != std::string::npos);
    REQUIRE(md.find("| M1 | - | - | - |") != std::string::npos);
    REQUIRE(md.find("| Full | yes | yes | yes |") != std::string::npos);
    REQUIRE(md.find("snowy-input baseline:") != std::string::npos);

    const std::string csv = res.csv();
    REQUIRE(csv.rfind("config,tde,sst,dcr,psnr,ssim", 0) == 0);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 5);
    REQUIRE(csv.find("M1,0,0,0,") != std::string::npos);
    REQUIRE(csv.find("Full,1,1,1,") != std::string::npos);
}

TEST_CASE("the ablation ladder is deterministic", "[ablation]") {
    const auto d1 = fresh_dir("ablation_det1");
    const auto d2 = fresh_dir("ablation_det2");
    const auto a = ablate::run_ablation(ladder_config(d1), {"M1", "Full"});
    const auto b = ablate::run_ablation(ladder_config(d2), {"M1", "Full"});
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        REQUIRE(a.rows[i].psnr == b.rows[i].psnr);
        REQUIRE(a.rows[i].ssim == b.rows[i].ssim);
    }
}

// ---------------------------------------------------------------------------
// CLI binary

TEST_CASE("the CLI rejects missing or unknown subcommands", "[cli]") {
    REQUIRE(run_cli("").status != 0);
    REQUIRE(run_cli("frobnicate").status != 0);
}

TEST_CASE("gen-data honors --set and --seed overrides", "[cli]") {
    const auto dir = fresh_dir("cli_gen");
    const auto res = run_cli(
        "gen-data --seed 21"
        " --set data.root=" + dir.string() +
        " --set data.labeled_clips=1 --set data.unlabeled_clips=1"
        " --set data.eval_clips=1 --set data.frames=2"
        " --set data.height=32 --set data.width=32");
    INFO(res.out);
    REQUIRE(res.status == 0);
    REQUIRE(res.out.find("wrote 1 labeled, 1 unlabeled, 1 eval") != std::string::npos);
    REQUIRE(fs::exists(dir / "manifest.json"));
    REQUIRE(fs::exists(dir / "labeled" / "clip_000" / "frame_000.png"));
}

namespace {

// TOML config for the training round trip; written once, reused by the
// train / eval / resume / decompose cases.
const fs::path& cli_config() {
    static const fs::path path = [] {
        const auto dir = fresh_dir("cli_train");
        std::ofstream f(dir / "cfg.toml");
        f << "seed = 77\n"
          << "[data]\nroot = \"" << micro_corpus().string() << "\"\nframes = 2\n"
          << "[backbone]\nchannels = 8\nblocks = 1\n"
          << "[tde]\nd = 8\nheads = 2\nblocks = 1\n"
          << "[dcr]\nmc_samples = 256\n"
          << "[train]\niters = 2\nbatch = 2\nlr = 0.001\n"
          << "ckpt = \"" << (dir / "ck.bin").string() << "\"\n"
          << "log_file = \"" << (dir / "log.jsonl").string() << "\"\n";
        return dir / "cfg.toml";
    }();
    return path;
}

// Later cases reuse the checkpoint from the train case; train on demand so
// each case also works when run alone through a name filter.
void ensure_cli_checkpoint() {
    const fs::path ck = cli_config().parent_path() / "ck.bin";
    if (!fs::exists(ck))
        REQUIRE(run_cli("train --config " + cli_config().string()).status == 0);
}

} // namespace

TEST_CASE("train runs from a TOML config and logs every step", "[cli]") {
    const fs::path dir = cli_config().parent_path();
    const auto res = run_cli("train --config " + cli_config().string());
    INFO(res.out);
    REQUIRE(res.status == 0);
    REQUIRE(res.out.find("done:") != std::string::npos);
    REQUIRE(res.out.find("\"psnr\"") != std::string::npos);
    REQUIRE(fs::exists(dir / "ck.bin"));
    REQUIRE(count_lines_with(dir / "log.jsonl", "\"iter\"") == 2);
    REQUIRE(count_lines_with(dir / "log.jsonl", "\"eval\"") == 1);
}

TEST_CASE("a --set override beats the config file", "[cli]") {
    const fs::path dir = cli_config().parent_path();
    const auto res = run_cli(
        "train --config " + cli_config().string() +
        " --set train.iters=1"
        " --set train.ckpt=" + (dir / "ck1.bin").string() +
        " --set train.log_file=" + (dir / "log1.jsonl").string());
    INFO(res.out);
    REQUIRE(res.status == 0);
    REQUIRE(count_lines_with(dir / "log1.jsonl", "\"iter\"") == 1);
}

TEST_CASE("eval loads a checkpoint and prints the metric report", "[cli]") {
    const fs::path dir = cli_config().parent_path();
    ensure_cli_checkpoint();
    const auto res = run_cli("eval --config " + cli_config().string() +
                             " --ckpt " + (dir / "ck.bin").string());
    INFO(res.out);
    REQUIRE(res.status == 0);
    const auto report = nlohmann::json::parse(res.out);
    REQUIRE(report.contains("psnr"));
    REQUIRE(report.contains("ssim"));
    REQUIRE(report.contains("baseline_psnr"));
    REQUIRE(report["clips"] == 1);
}

TEST_CASE("train --resume picks up from the saved iteration", "[cli]") {
    const fs::path dir = cli_config().parent_path();
    ensure_cli_checkpoint();
    const auto res = run_cli("train --config " + cli_config().string() +
                             " --resume " + (dir / "ck.bin").string());
    INFO(res.out);
    REQUIRE(res.status == 0);
    REQUIRE(res.out.find("resumed from") != std::string::npos);
}

TEST_CASE("decompose writes the component panels", "[cli]") {
    const fs::path dir = cli_config().parent_path();
    ensure_cli_checkpoint();
    const fs::path out = dir / "panels";
    const auto res = run_cli("decompose --config " + cli_config().string() +
                             " --ckpt " + (dir / "ck.bin").string() +
                             " --clip " + (micro_corpus() / "unlabeled" / "clip_000").string() +
                             " --out " + out.string());
    INFO(res.out);
    REQUIRE(res.status == 0);
    for (const char* stem : {"input", "restored", "background", "snow",
                             "transmission", "airlight"}) {
        REQUIRE(fs::exists(out / (std::string(stem) + "_0.png")));
        REQUIRE(fs::exists(out / (std::string(stem) + "_1.png")));
    }

    // Required options are enforced.
    REQUIRE(run_cli("decompose --out " + out.string()).status != 0);
}

TEST_CASE("a missing config file fails with a readable error", "[cli]") {
    const auto res = run_cli("train --config /nonexistent/cfg.toml");
    REQUIRE(res.status != 0);
    REQUIRE(res.out.find("error:") != std::string::npos);
}

TEST_CASE("ablate trains the ladder and writes the report files", "[cli]") {
    const auto out = fresh_dir("cli_ablate");
    const auto res = run_cli("ablate --config " + cli_config().string() +
                             " --set train.iters=1"
                             " --set train.ckpt=" + (out / "ck.bin").string() +
                             " --set train.log_file=" + (out / "log.jsonl").string() +
                             " --out " + out.string());
    INFO(res.out);
    REQUIRE(res.status == 0);
    REQUIRE(res.out.find("| Full |") != std::string::npos);
    REQUIRE(fs::exists(out / "ablation.md"));
    REQUIRE(fs::exists(out / "ablation.csv"));
    std::ifstream csv(out / "ablation.csv");
    std::string line;
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    REQUIRE(rows == 5); // header + one line per configuration
}

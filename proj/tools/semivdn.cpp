// Command-line entrypoints: corpus generation, training, evaluation,
// component visualization, and the ablation ladder.

#include <CLI11.hpp>

#include "semivdn/ablation.hpp"

namespace {

using nlohmann::json;
using namespace semivdn;

struct CommonOpts {
    std::string config;
    std::vector<std::string> sets;
    long seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config, "Config file (.json or .toml)");
    cmd->add_option("--set", o.sets, "Override, e.g. --set train.iters=50");
    cmd->add_option("--seed", o.seed, "Override the global seed");
}

json load_cfg(const CommonOpts& o) { return config::load(o.config, o.sets, o.seed); }

int cmd_gen_data(const CommonOpts& o) {
    const json cfg = load_cfg(o);
    const std::filesystem::path root = cfg.at("data").value("root", std::string("data"));
    const auto manifest = corpus::generate_corpus(cfg, root);
    std::cout << "wrote " << manifest.labeled.size() << " labeled, "
              << manifest.unlabeled.size() << " unlabeled, " << manifest.eval.size()
              << " eval clips under " << root << "\n";
    return 0;
}

int cmd_train(const CommonOpts& o, const std::string& resume) {
    const json cfg = load_cfg(o);
    mt::Trainer<float> trainer(cfg);
    if (!resume.empty()) {
        trainer.load(resume);
        std::cout << "resumed from " << resume << " at iteration " << trainer.iter()
                  << "\n";
    }
    const auto ev = trainer.run();
    std::cout << "config " << config::hash(cfg) << " done: " << ev.dump(2) << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& ckpt) {
    const json cfg = load_cfg(o);
    mt::Trainer<float> trainer(cfg);
    if (!ckpt.empty()) trainer.load(ckpt);
    std::cout << trainer.evaluate().dump(2) << "\n";
    return 0;
}

// Writes PNG panels for one clip: input, restoration, and the grayscale
// projections of the decomposed feature maps.
int cmd_decompose(const CommonOpts& o, const std::string& ckpt,
                  const std::string& clip_dir, const std::string& out_dir) {
    const json cfg = load_cfg(o);
    const auto mcfg = ModelConfig::from_json(cfg);
    Model<float> model(mcfg);
    auto student = model.make_params(cfg.value("seed", std::uint64_t{0}));
    auto teacher = student;
    if (!ckpt.empty()) mt::load_checkpoint<float>(ckpt, student, teacher, nullptr);

    const std::filesystem::path in(clip_dir);
    const auto clip = corpus::load_frames(in, in.filename().string());
    Binder<float> p(student, /*trainable=*/false);
    const auto out = model.forward(p, ad::Var<float>::constant(clip.frames));

    const std::filesystem::path dst(out_dir);
    std::filesystem::create_directories(dst);
    auto save_frames = [&](const Tensor<float>& frames, const std::string& stem) {
        for (int f = 0; f < frames.dim(0); ++f) {
            Tensor<float> img({3, frames.dim(2), frames.dim(3)});
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < frames.dim(2); ++i)
                    for (int j = 0; j < frames.dim(3); ++j)
                        img(c, i, j) =
                            std::clamp(frames(f, std::min(c, frames.dim(1) - 1), i, j),
                                       0.0f, 1.0f);
            io::write_png(dst / (stem + "_" + std::to_string(f) + ".png"), img);
        }
    };
    auto project = [&](const ad::Var<float>& feat) {
        const auto w = recovery::mean_projection_weight<float>(feat.val().dim(1));
        const auto b = Tensor<float>({3}, 0.0f);
        return recovery::project_to_rgb(feat, ad::Var<float>::constant(w),
                                        ad::Var<float>::constant(b), 4)
            .val();
    };

    save_frames(clip.frames, "input");
    save_frames(out.restored.val(), "restored");
    save_frames(project(out.feat_background), "background");
    if (out.has_components) {
        save_frames(project(out.feat_snow), "snow");
        save_frames(project(out.feat_trans), "transmission");
        save_frames(project(out.feat_air), "airlight");
    }
    std::cout << "panels written to " << dst << "\n";
    return 0;
}

int cmd_ablate(const CommonOpts& o, const std::string& out_dir) {
    const json cfg = load_cfg(o);
    const auto res = ablate::run_ablation(cfg, {"M1", "M2", "M3", "Full"}, &std::cout);
    std::cout << "\n" << res.markdown();
    if (!out_dir.empty()) {
        const std::filesystem::path dst(out_dir);
        std::filesystem::create_directories(dst);
        std::ofstream(dst / "ablation.md") << res.markdown();
        std::ofstream(dst / "ablation.csv") << res.csv();
        std::cout << "table written to " << dst << "\n";
    }
    const auto* full = res.find("Full");
    const auto* m1 = res.find("M1");
    if (full && m1 && full->psnr < m1->psnr)
        std::cout << "note: Full scored below M1 on this run\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"semi-supervised video desnowing"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, eval_o, dec_o, abl_o;
    std::string resume, eval_ckpt, dec_ckpt, dec_clip, dec_out, abl_out;

    auto* gen = app.add_subcommand("gen-data", "Synthesize the training corpus");
    add_common(gen, gen_o);

    auto* train = app.add_subcommand("train", "Train the restoration model");
    add_common(train, train_o);
    train->add_option("--resume", resume, "Checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "Evaluate on the held-out clips");
    add_common(eval, eval_o);
    eval->add_option("--ckpt", eval_ckpt, "Checkpoint to evaluate");

    auto* dec = app.add_subcommand("decompose", "Dump component panels for a clip");
    add_common(dec, dec_o);
    dec->add_option("--ckpt", dec_ckpt, "Checkpoint to load");
    dec->add_option("--clip", dec_clip, "Clip directory (frame_*.png)")->required();
    dec->add_option("--out", dec_out, "Output directory")->required();

    auto* abl = app.add_subcommand("ablate", "Train and report the switch ladder");
    add_common(abl, abl_o);
    abl->add_option("--out", abl_out, "Directory for ablation.md / ablation.csv");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_o);
        if (train->parsed()) return cmd_train(train_o, resume);
        if (eval->parsed()) return cmd_eval(eval_o, eval_ckpt);
        if (dec->parsed()) return cmd_decompose(dec_o, dec_ckpt, dec_clip, dec_out);
        if (abl->parsed()) return cmd_ablate(abl_o, abl_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

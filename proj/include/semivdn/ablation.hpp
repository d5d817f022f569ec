#pragma once

// Ablation harness: trains the switch ladder M1 (plain encoder-decoder),
// M2 (+decomposition transformer), M3 (+teacher consistency), Full
// (+distribution-contrastive term) under one shared seed and data root, and
// renders the held-out metrics as Markdown and CSV.

#include <iomanip>
#include <sstream>

#include "semivdn/meanteacher.hpp"

namespace semivdn {
namespace ablate {

struct AblationRow {
    std::string name;
    bool tde = false, sst = false, dcr = false;
    double psnr = 0, ssim = 0;
    double baseline_psnr = 0, baseline_ssim = 0;
};

struct AblationResult {
    std::vector<AblationRow> rows;

    const AblationRow* find(const std::string& name) const {
        for (const auto& r : rows)
            if (r.name == name) return &r;
        return nullptr;
    }

    std::string markdown() const {
        std::ostringstream os;
        os << "| config | decomposition | consistency | distribution | PSNR (dB) | SSIM |\n";
        os << "|--------|---------------|-------------|--------------|-----------|------|\n";
        auto mark = [](bool b) { return b ? "yes" : "-"; };
        for (const auto& r : rows) {
            os << "| " << r.name << " | " << mark(r.tde) << " | " << mark(r.sst)
               << " | " << mark(r.dcr) << " | " << std::fixed << std::setprecision(2)
               << r.psnr << " | " << std::setprecision(4) << r.ssim << " |\n";
        }
        if (!rows.empty())
            os << "\nsnowy-input baseline: " << std::setprecision(2) << std::fixed
               << rows.front().baseline_psnr << " dB / " << std::setprecision(4)
               << rows.front().baseline_ssim << " SSIM\n";
        return os.str();
    }

    std::string csv() const {
        std::ostringstream os;
        os << "config,tde,sst,dcr,psnr,ssim,baseline_psnr,baseline_ssim\n";
        for (const auto& r : rows)
            os << r.name << ',' << r.tde << ',' << r.sst << ',' << r.dcr << ','
               << r.psnr << ',' << r.ssim << ',' << r.baseline_psnr << ','
               << r.baseline_ssim << '\n';
        return os.str();
    }
};

// Trains every named configuration from the same base config and seed; only
// the three ablation switches differ. Checkpoints and logs are suffixed per
// configuration so runs do not clobber each other.
inline AblationResult run_ablation(const nlohmann::json& base_cfg,
                                   const std::vector<std::string>& names = {
                                       "M1", "M2", "M3", "Full"},
                                   std::ostream* progress = nullptr) {
    AblationResult res;
    for (const auto& name : names) {
        nlohmann::json cfg = base_cfg;
        config::apply_ablation_name(cfg, name);
        const auto tag = [&](const char* key, const char* fallback) {
            const std::string base = cfg["train"].value(key, std::string(fallback));
            cfg["train"][key] = base + "." + name;
        };
        tag("ckpt", "checkpoint.bin");
        tag("log_file", "train_log.jsonl");

        if (progress) *progress << "[ablate] training " << name << "\n" << std::flush;
        mt::Trainer<float> trainer(cfg);
        const auto ev = trainer.run();

        AblationRow row;
        row.name = name;
        row.tde = cfg["ablation"]["tde"].get<bool>();
        row.sst = cfg["ablation"]["sst"].get<bool>();
        row.dcr = cfg["ablation"]["dcr"].get<bool>();
        row.psnr = ev.at("psnr").get<double>();
        row.ssim = ev.at("ssim").get<double>();
        row.baseline_psnr = ev.at("baseline_psnr").get<double>();
        row.baseline_ssim = ev.at("baseline_ssim").get<double>();
        res.rows.push_back(row);
        if (progress)
            *progress << "[ablate] " << name << ": " << row.psnr << " dB, SSIM "
                      << row.ssim << "\n"
                      << std::flush;
    }
    return res;
}

} // namespace ablate
} // namespace semivdn

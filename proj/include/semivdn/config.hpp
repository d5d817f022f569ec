#pragma once

// Configuration: defaults, file loading (JSON, or a flat TOML subset with
// [section] headers and scalar values), dotted-path overrides from the
// command line, and a stable hash for report provenance.

#include <sstream>

#include "semivdn/io.hpp"

namespace semivdn {
namespace config {

using json = nlohmann::json;

inline json defaults() {
    return json{
        {"seed", 0},
        {"data",
         {{"root", "data"},
          {"labeled_clips", 8},
          {"unlabeled_clips", 8},
          {"eval_clips", 2},
          {"frames", 3},
          {"height", 64},
          {"width", 64}}},
        {"backbone", {{"channels", 64}, {"stride", 4}, {"blocks", 2}}},
        {"tde",
         {{"n_experts", 3}, {"patch", 1}, {"d", 64}, {"heads", 4}, {"blocks", 2}}},
        {"dcr",
         {{"k", 3},
          {"mc_samples", 4096},
          {"pool", 64},
          {"weight", 0.1},
          {"max_fit_samples", 8192}}},
        {"loss",
         {{"lambda1", 0.03},
          {"lambda2", 10.0},
          {"lambda3", 2.0},
          {"lambda4", 0.1},
          {"lambda5", 0.1},
          {"lambda6", 0.5},
          {"eps_charb", 1e-3},
          {"dcp_window", 7},
          {"proxy_seed", 1234}}},
        {"train",
         {{"iters", 300},
          {"batch", 4},
          {"lr", 1e-4},
          {"weight_decay", 1e-4},
          {"eta", 0.99},
          {"mu_max", 1.0},
          {"ckpt_every", 100},
          {"ckpt", "checkpoint.bin"},
          {"log_file", "train_log.jsonl"}}},
        {"ablation", {{"name", "Full"}, {"tde", true}, {"sst", true}, {"dcr", true}}},
        {"augment", {{"jitter", 0.1}, {"noise_sigma", 0.02}, {"flip_prob", 0.5}}},
    };
}

// Recursive overlay: values in `over` replace values in `base`; objects merge.
inline void merge(json& base, const json& over) {
    if (!over.is_object() || !base.is_object()) {
        base = over;
        return;
    }
    for (auto it = over.begin(); it != over.end(); ++it) {
        if (base.contains(it.key()) && base[it.key()].is_object() &&
            it.value().is_object())
            merge(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Scalar TOML values: strings, booleans, integers, floats.
inline json toml_scalar(const std::string& raw) {
    std::string v = trim(raw);
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
        return v.substr(1, v.size() - 2);
    if (v == "true") return true;
    if (v == "false") return false;
    try {
        std::size_t pos = 0;
        if (v.find_first_of(".eE") == std::string::npos) {
            const long long i = std::stoll(v, &pos);
            if (pos == v.size()) return i;
        }
        const double d = std::stod(v, &pos);
        if (pos == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw IoError("config: cannot parse TOML value '" + raw + "'");
}

} // namespace detail

// Enough TOML for flat configs: [a.b] section headers, key = value lines,
// '#' comments. Arrays and inline tables are not supported.
inline json parse_toml(std::istream& in) {
    json out = json::object();
    json* section = &out;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = &out;
            std::stringstream path(line.substr(1, line.size() - 2));
            std::string part;
            while (std::getline(path, part, '.')) {
                part = detail::trim(part);
                section = &(*section)[part];
                if (section->is_null()) *section = json::object();
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IoError("config: malformed TOML line '" + line + "'");
        (*section)[detail::trim(line.substr(0, eq))] =
            detail::toml_scalar(line.substr(eq + 1));
    }
    return out;
}

inline json load_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path.string());
    if (path.extension() == ".toml") return parse_toml(f);
    return json::parse(f);
}

// Applies "a.b.c=value"; the value is parsed as JSON when possible,
// otherwise kept as a string.
inline void apply_set(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    json* node = &cfg;
    std::stringstream path(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(path, part, '.')) parts.push_back(part);
    if (parts.empty()) throw std::invalid_argument("--set: empty key");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        node = &(*node)[parts[i]];
        if (node->is_null()) *node = json::object();
    }
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    (*node)[parts.back()] = value;
}

// Full pipeline used by every CLI entrypoint.
inline json load(const std::string& file, const std::vector<std::string>& sets,
                 long seed_override = -1) {
    json cfg = defaults();
    if (!file.empty()) merge(cfg, load_file(file));
    for (const auto& s : sets) apply_set(cfg, s);
    if (seed_override >= 0) cfg["seed"] = seed_override;
    return cfg;
}

// FNV-1a over the canonical dump; stable across runs for identical configs.
inline std::string hash(const json& cfg) {
    const std::string s = cfg.dump();
    std::uint64_t h = 14695981039346656037ULL;
    for (const unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// Maps an ablation name to its switch triple; unknown names are rejected.
inline void apply_ablation_name(json& cfg, const std::string& name) {
    bool tde, sst, dcr;
    if (name == "M1") { tde = false; sst = false; dcr = false; }
    else if (name == "M2") { tde = true; sst = false; dcr = false; }
    else if (name == "M3") { tde = true; sst = true; dcr = false; }
    else if (name == "Full") { tde = true; sst = true; dcr = true; }
    else throw std::invalid_argument("unknown ablation name: " + name);
    cfg["ablation"]["name"] = name;
    cfg["ablation"]["tde"] = tde;
    cfg["ablation"]["sst"] = sst;
    cfg["ablation"]["dcr"] = dcr;
}

} // namespace config
} // namespace semivdn

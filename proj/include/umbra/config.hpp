// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_CONFIG_HPP
#define UMBRA_CONFIG_HPP

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "umbra/common.hpp"

namespace umbra {

/// Flat key=value settings for the whole pipeline. Every key in a config
/// file must match one of these field names exactly.
struct TrainConfig {
    double learning_rate = 2e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    int batch_size = 4;
    int iters_decomp = 2000;
    int iters_diffusion = 2000;
    int iters_restore = 2000;
    int image_size = 64;
    int base_channels = 16;
    int count = 32;  // sample count for data generation
    unsigned long long seed = 1234;
    std::string condition_mode = "ls-plus-ct";
    std::string denoise_range = "local";
    std::string variant = "full";
    bool augment = false;
    double warmup_frac = 0.05;

    void validate() const {
        check(learning_rate > 0.0, "config: learning_rate must be positive");
        check(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "config: adam_beta1 must be in [0,1)");
        check(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "config: adam_beta2 must be in [0,1)");
        check(batch_size > 0, "config: batch_size must be positive");
        check(iters_decomp > 0 && iters_diffusion > 0 && iters_restore > 0,
              "config: iteration counts must be positive");
        check(image_size > 0 && image_size % 32 == 0,
              "config: image_size must be a positive multiple of 32");
        check(base_channels >= 8, "config: base_channels must be at least 8");
        check(count > 0, "config: count must be positive");
        check(warmup_frac > 0.0 && warmup_frac < 1.0, "config: warmup_frac must be in (0,1)");
    }

    std::map<std::string, std::string> to_map() const {
        std::map<std::string, std::string> m;
        auto put = [&](const std::string& k, auto v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            m[k] = os.str();
        };
        put("learning_rate", learning_rate);
        put("adam_beta1", adam_beta1);
        put("adam_beta2", adam_beta2);
        put("batch_size", batch_size);
        put("iters_decomp", iters_decomp);
        put("iters_diffusion", iters_diffusion);
        put("iters_restore", iters_restore);
        put("image_size", image_size);
        put("base_channels", base_channels);
        put("count", count);
        put("seed", seed);
        m["condition_mode"] = condition_mode;
        m["denoise_range"] = denoise_range;
        m["variant"] = variant;
        m["augment"] = augment ? "true" : "false";
        put("warmup_frac", warmup_frac);
        return m;
    }

    /// "desk" fits a laptop CPU; "paper" restores the published run scale.
    static TrainConfig preset(const std::string& name) {
        TrainConfig cfg;
        if (name == "desk") return cfg;
        if (name == "paper") {
            cfg.batch_size = 12;
            cfg.iters_decomp = 100000;
            cfg.iters_diffusion = 200000;
            cfg.iters_restore = 200000;
            cfg.image_size = 256;
            cfg.base_channels = 64;
            cfg.augment = true;
            return cfg;
        }
        throw Error("TrainConfig: unknown preset '" + name + "' (desk, paper)");
    }
};

namespace configdetail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw Error("config: bad number for key '" + key + "': " + v);
    }
    if (pos != v.size()) throw Error("config: bad number for key '" + key + "': " + v);
    return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw Error("config: bad integer for key '" + key + "': " + v);
    }
    if (pos != v.size()) throw Error("config: bad integer for key '" + key + "': " + v);
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw Error("config: bad boolean for key '" + key + "': " + v);
}

}  // namespace configdetail

/// Parses "key = value" lines; '#' starts a comment, blank lines are
/// skipped, later lines win on repeated keys.
inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = configdetail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        check(eq != std::string::npos,
              "config: line " + std::to_string(lineno) + " has no '=': " + line);
        const std::string key = configdetail::trim(line.substr(0, eq));
        const std::string value = configdetail::trim(line.substr(eq + 1));
        check(!key.empty(), "config: empty key on line " + std::to_string(lineno));
        out[key] = value;
    }
    return out;
}

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "config: cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_config_text(os.str());
}

/// Overlays parsed keys onto a base configuration; unknown keys are errors.
inline TrainConfig apply_config(TrainConfig cfg, const std::map<std::string, std::string>& kv) {
    using namespace configdetail;
    for (const auto& [key, value] : kv) {
        if (key == "learning_rate")
            cfg.learning_rate = parse_double(key, value);
        else if (key == "adam_beta1")
            cfg.adam_beta1 = parse_double(key, value);
        else if (key == "adam_beta2")
            cfg.adam_beta2 = parse_double(key, value);
        else if (key == "batch_size")
            cfg.batch_size = static_cast<int>(parse_int(key, value));
        else if (key == "iters_decomp")
            cfg.iters_decomp = static_cast<int>(parse_int(key, value));
        else if (key == "iters_diffusion")
            cfg.iters_diffusion = static_cast<int>(parse_int(key, value));
        else if (key == "iters_restore")
            cfg.iters_restore = static_cast<int>(parse_int(key, value));
        else if (key == "image_size")
            cfg.image_size = static_cast<int>(parse_int(key, value));
        else if (key == "base_channels")
            cfg.base_channels = static_cast<int>(parse_int(key, value));
        else if (key == "count")
            cfg.count = static_cast<int>(parse_int(key, value));
        else if (key == "seed")
            cfg.seed = static_cast<unsigned long long>(parse_int(key, value));
        else if (key == "condition_mode")
            cfg.condition_mode = value;
        else if (key == "denoise_range")
            cfg.denoise_range = value;
        else if (key == "variant")
            cfg.variant = value;
        else if (key == "augment")
            cfg.augment = parse_bool(key, value);
        else if (key == "warmup_frac")
            cfg.warmup_frac = parse_double(key, value);
        else
            throw Error("config: unknown key '" + key + "'");
    }
    return cfg;
}

inline TrainConfig config_from_map(const std::map<std::string, std::string>& kv) {
    return apply_config(TrainConfig{}, kv);
}

}  // namespace umbra

#endif  // UMBRA_CONFIG_HPP

// Experiment configuration: one JSON file with data / model / optimizer /
// loss / paradigm / output sections (plus an optional sweep grid). Unknown
// keys are hard errors so hyperparameter typos cannot pass silently.

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntol/data.hpp"
#include "ntol/trainer.hpp"

namespace ntol {

struct SweepSpec {
    std::vector<std::string> modes = {"normal", "clean-oracle", "paradigm-m1", "paradigm-m2"};
    std::vector<double> noise_rates = {0.0, 0.2, 0.4, 0.6};
    std::vector<std::uint64_t> seeds = {1};
};

struct ExperimentConfig {
    std::optional<SynthConfig> synth;
    std::optional<std::string> csv_path;
    TrainOptions train;
    std::optional<SweepSpec> sweep;

    void validate() const {
        if (synth) synth->validate();
        train.validate();
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                       const std::string& section) {
    for (const auto& [key, value] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("unknown key '" + key + "' in " + section);
    }
}

template <typename T>
void read_field(const nlohmann::json& obj, const char* key, T& out, const std::string& section) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("bad value for '") + key + "' in " + section);
    }
}

} // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    detail::check_keys(j, {"data", "model", "optimizer", "loss", "paradigm", "output", "sweep"},
                       "config root");
    ExperimentConfig cfg;

    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::check_keys(d,
                           {"csv", "classes", "samples_per_class", "input_dim", "spread",
                            "noise_rate", "flip_outlier_ratio", "seed"},
                           "data");
        if (d.contains("csv")) {
            if (d.size() > 1)
                throw ConfigError("data: 'csv' cannot be combined with synthesis keys");
            cfg.csv_path = d.at("csv").get<std::string>();
        } else {
            SynthConfig sc;
            detail::read_field(d, "classes", sc.classes, "data");
            detail::read_field(d, "samples_per_class", sc.samples_per_class, "data");
            detail::read_field(d, "input_dim", sc.input_dim, "data");
            detail::read_field(d, "spread", sc.spread, "data");
            detail::read_field(d, "noise_rate", sc.noise_rate, "data");
            detail::read_field(d, "flip_outlier_ratio", sc.flip_outlier_ratio, "data");
            detail::read_field(d, "seed", sc.seed, "data");
            cfg.synth = sc;
        }
    } else {
        cfg.synth = SynthConfig{};
    }

    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(m, {"hidden", "embed_dim"}, "model");
        detail::read_field(m, "hidden", cfg.train.hidden, "model");
        detail::read_field(m, "embed_dim", cfg.train.embed_dim, "model");
    }

    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        detail::check_keys(o,
                           {"lr", "momentum", "weight_decay", "milestones", "iterations",
                            "batch_size", "seed"},
                           "optimizer");
        detail::read_field(o, "lr", cfg.train.sgd.lr, "optimizer");
        detail::read_field(o, "momentum", cfg.train.sgd.momentum, "optimizer");
        detail::read_field(o, "weight_decay", cfg.train.sgd.weight_decay, "optimizer");
        detail::read_field(o, "milestones", cfg.train.sgd.lr_milestones, "optimizer");
        detail::read_field(o, "iterations", cfg.train.sgd.total_iters, "optimizer");
        detail::read_field(o, "batch_size", cfg.train.sgd.batch_size, "optimizer");
        detail::read_field(o, "seed", cfg.train.sgd.seed, "optimizer");
    }

    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        detail::check_keys(l, {"kind", "scale", "margin"}, "loss");
        if (l.contains("kind")) {
            const auto kind = l.at("kind").get<std::string>();
            if (kind == "l2softmax")
                cfg.train.loss.variant = LossVariant::L2Softmax;
            else if (kind == "arcface")
                cfg.train.loss.variant = LossVariant::ArcFace;
            else
                throw ConfigError("loss: unknown kind '" + kind + "'");
        }
        detail::read_field(l, "scale", cfg.train.scale, "loss");
        detail::read_field(l, "margin", cfg.train.loss.margin, "loss");
    }

    if (j.contains("paradigm")) {
        const auto& p = j.at("paradigm");
        detail::check_keys(p, {"mode", "lambda", "zeta", "sigma_divisor", "eps"}, "paradigm");
        if (p.contains("mode")) cfg.train.mode = mode_from_name(p.at("mode").get<std::string>());
        detail::read_field(p, "lambda", cfg.train.policy.lambda, "paradigm");
        detail::read_field(p, "zeta", cfg.train.policy.zeta, "paradigm");
        detail::read_field(p, "sigma_divisor", cfg.train.policy.sigma_divisor, "paradigm");
        detail::read_field(p, "eps", cfg.train.policy.eps, "paradigm");
    }
    cfg.train.policy.method = cfg.train.mode == TrainMode::ParadigmLogitScale
                                  ? WeightMethod::LogitScale
                                  : WeightMethod::LossScale;

    if (j.contains("output")) {
        const auto& o = j.at("output");
        detail::check_keys(o, {"dir", "snapshot_stride", "log_stride", "holdout_frac"}, "output");
        std::string dir;
        detail::read_field(o, "dir", dir, "output");
        if (!dir.empty()) cfg.train.out_dir = dir;
        detail::read_field(o, "snapshot_stride", cfg.train.snapshot_stride, "output");
        detail::read_field(o, "log_stride", cfg.train.log_stride, "output");
        detail::read_field(o, "holdout_frac", cfg.train.holdout_frac, "output");
    }

    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        detail::check_keys(s, {"modes", "noise_rates", "seeds"}, "sweep");
        SweepSpec sw;
        detail::read_field(s, "modes", sw.modes, "sweep");
        detail::read_field(s, "noise_rates", sw.noise_rates, "sweep");
        detail::read_field(s, "seeds", sw.seeds, "sweep");
        for (const auto& m : sw.modes) mode_from_name(m); // validate now
        cfg.sweep = sw;
    }

    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_config(j);
}

} // namespace ntol

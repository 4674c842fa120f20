// Command-line front end: dataset generation, training runs, noise-rate
// estimation, histogram export and comparison sweeps.
//
// Exit codes: 0 success, 2 config/data error, 3 training divergence,
// 4 estimation unavailable.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ntol/config.hpp"
#include "ntol/data.hpp"
#include "ntol/histogram.hpp"
#include "ntol/model.hpp"
#include "ntol/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitUnavailable = 4;

struct Overrides {
    std::string mode;
    std::optional<std::uint64_t> seed;
    std::string out;
};

ntol::ExperimentConfig load_with_overrides(const std::string& config_path, const Overrides& ov) {
    ntol::ExperimentConfig cfg = ntol::load_config_file(config_path);
    if (!ov.mode.empty()) {
        cfg.train.mode = ntol::mode_from_name(ov.mode);
        cfg.train.policy.method = cfg.train.mode == ntol::TrainMode::ParadigmLogitScale
                                      ? ntol::WeightMethod::LogitScale
                                      : ntol::WeightMethod::LossScale;
    }
    if (ov.seed) {
        if (cfg.synth) cfg.synth->seed = *ov.seed;
        cfg.train.sgd.seed = *ov.seed;
    }
    if (!ov.out.empty()) cfg.train.out_dir = ov.out;
    return cfg;
}

ntol::Dataset load_dataset(const ntol::ExperimentConfig& cfg) {
    if (cfg.csv_path) return ntol::load_csv(*cfg.csv_path);
    return ntol::generate(*cfg.synth);
}

int cmd_generate(const ntol::ExperimentConfig& cfg, const std::string& out_arg) {
    if (!cfg.synth) throw ntol::ConfigError("generate requires a synthesis data section");
    fs::path out = out_arg.empty()
                       ? (cfg.train.out_dir.empty() ? fs::path(".") : cfg.train.out_dir)
                       : fs::path(out_arg);
    fs::create_directories(out);
    const ntol::Dataset data = ntol::generate(*cfg.synth);
    ntol::save_csv(data, out / "dataset.csv");
    std::ofstream mf(out / "manifest.json");
    mf << ntol::dataset_manifest(*cfg.synth).dump(2) << "\n";
    std::cout << "wrote " << (out / "dataset.csv").string() << " (" << data.size() << " rows)\n";
    return 0;
}

int cmd_train(ntol::ExperimentConfig cfg) {
    if (cfg.train.out_dir.empty()) cfg.train.out_dir = "run";
    const ntol::Dataset data = load_dataset(cfg);
    const ntol::RunSummary s = ntol::train(data, cfg.train);
    std::cout << "run dir: " << cfg.train.out_dir.string() << "\n"
              << "mode: " << s.mode << "\n"
              << "verification accuracy: " << s.final_accuracy << "\n";
    if (s.separation_auc) std::cout << "clean/noisy auc: " << *s.separation_auc << "\n";
    if (s.final_noise_rate_estimate)
        std::cout << "noise rate estimate: " << *s.final_noise_rate_estimate << "\n";
    return 0;
}

// Rebuild a histogram from an exported CSV dump by replaying each bin's
// count at its center.
ntol::CosHistogram hist_from_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ntol::ParseError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("bin_center", 0) != 0)
        throw ntol::ParseError("not a histogram csv: " + path.string(), 1);
    std::vector<std::pair<double, long>> rows;
    long total = 0;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        double center = 0, smoothed = 0;
        long freq = 0;
        if (std::sscanf(line.c_str(), "%lf,%ld,%lf", &center, &freq, &smoothed) != 3)
            throw ntol::ParseError("bad histogram row", line_no);
        rows.push_back({center, freq});
        total += freq;
    }
    ntol::CosHistogram h(std::max<long>(total, 1), 0);
    for (const auto& [center, freq] : rows)
        for (long k = 0; k < freq; ++k) h.push(center);
    return h;
}

int cmd_estimate(const std::string& target) {
    const fs::path p(target);
    std::optional<double> estimate;

    auto from_sidecar = [&](const fs::path& file) -> std::optional<double> {
        std::ifstream in(file);
        if (!in) return std::nullopt;
        json j;
        in >> j;
        if (j.contains("noise_rate_estimate") && !j.at("noise_rate_estimate").is_null())
            return j.at("noise_rate_estimate").get<double>();
        return std::nullopt;
    };

    if (fs::is_directory(p)) {
        // prefer the run summary, then the newest snapshot sidecar
        if (fs::exists(p / "summary.json")) {
            std::ifstream in(p / "summary.json");
            json j;
            in >> j;
            if (j.contains("final_noise_rate_estimate") &&
                !j.at("final_noise_rate_estimate").is_null())
                estimate = j.at("final_noise_rate_estimate").get<double>();
        }
        if (!estimate) {
            std::vector<fs::path> sidecars;
            for (const auto& e : fs::directory_iterator(p)) {
                const auto name = e.path().filename().string();
                if (name.rfind("hist_", 0) == 0 && e.path().extension() == ".json")
                    sidecars.push_back(e.path());
            }
            std::sort(sidecars.begin(), sidecars.end());
            if (!sidecars.empty()) estimate = from_sidecar(sidecars.back());
        }
    } else if (p.extension() == ".json") {
        estimate = from_sidecar(p);
    } else if (p.extension() == ".csv") {
        const ntol::CosHistogram h = hist_from_csv(p);
        const ntol::HistStats st = h.stats();
        estimate = h.estimate_noise_rate(st); // throws if no peak
    } else {
        throw ntol::ConfigError("estimate: expected a run directory, .csv or .json file");
    }

    if (!estimate) throw ntol::EstimationUnavailableError("no noise-rate estimate available");
    json out{{"noise_rate_estimate", *estimate}};
    std::cout << out.dump() << "\n";
    return 0;
}

int cmd_export_hist(const std::string& ckpt_path, const std::string& data_path,
                    const std::string& out_prefix) {
    const ntol::Checkpoint ck = ntol::load_checkpoint(ckpt_path);
    const ntol::Dataset data = ntol::load_csv(data_path);
    if (data.empty()) throw ntol::ParseError("dataset is empty: " + data_path);

    ntol::CosHistogram hist(data.size(), data.size() / 10);
    const Eigen::Index bs = 256;
    for (std::size_t start = 0; start < data.size(); start += bs) {
        const Eigen::Index n = std::min<Eigen::Index>(bs, data.size() - start);
        ntol::Matrix feats(n, data.front().features.size());
        std::vector<int> labels(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            feats.row(i) = data[start + i].features.transpose();
            labels[i] = data[start + i].label;
        }
        const auto rec = ntol::cosines(ntol::forward(ck.net, feats), ck.head, labels);
        for (Eigen::Index i = 0; i < n; ++i) hist.push(rec.target_cos[i]);
    }
    const fs::path csv = out_prefix + ".csv";
    if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
    ntol::write_hist_snapshot(hist, csv);
    std::cout << "wrote " << csv.string() << " and sidecar\n";
    return 0;
}

int cmd_sweep(const ntol::ExperimentConfig& base, const std::string& out_arg) {
    if (!base.synth) throw ntol::ConfigError("sweep requires a synthesis data section");
    const ntol::SweepSpec spec = base.sweep.value_or(ntol::SweepSpec{});
    const fs::path out = out_arg.empty()
                             ? (base.train.out_dir.empty() ? fs::path("sweep") : base.train.out_dir)
                             : fs::path(out_arg);
    fs::create_directories(out);

    json results = json::array();
    std::ofstream csv(out / "sweep_results.csv");
    csv << "noise_rate,seed,mode,accuracy,separation_auc,noise_rate_estimate\n";
    for (double rate : spec.noise_rates) {
        for (std::uint64_t seed : spec.seeds) {
            ntol::SynthConfig sc = *base.synth;
            sc.noise_rate = rate;
            sc.seed = seed;
            const ntol::Dataset data = ntol::generate(sc);
            for (const std::string& mode : spec.modes) {
                ntol::TrainOptions opts = base.train;
                opts.mode = ntol::mode_from_name(mode);
                opts.sgd.seed = seed;
                char dirname[96];
                std::snprintf(dirname, sizeof(dirname), "r%03d_s%llu_%s",
                              static_cast<int>(std::lround(rate * 100)),
                              static_cast<unsigned long long>(seed), mode.c_str());
                opts.out_dir = out / dirname;
                const ntol::RunSummary s = ntol::train(data, opts);
                json row{{"noise_rate", rate},
                         {"seed", seed},
                         {"mode", mode},
                         {"accuracy", s.final_accuracy},
                         {"separation_auc",
                          s.separation_auc ? json(*s.separation_auc) : json()},
                         {"noise_rate_estimate", s.final_noise_rate_estimate
                                                     ? json(*s.final_noise_rate_estimate)
                                                     : json()}};
                results.push_back(row);
                csv << rate << ',' << seed << ',' << mode << ',' << s.final_accuracy << ','
                    << (s.separation_auc ? std::to_string(*s.separation_auc) : "") << ','
                    << (s.final_noise_rate_estimate
                            ? std::to_string(*s.final_noise_rate_estimate)
                            : "")
                    << "\n";
                std::cout << dirname << ": accuracy " << s.final_accuracy << "\n";
            }
        }
    }
    std::ofstream js(out / "sweep_results.json");
    js << results.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"noise-tolerant training of angular-margin embedding models"};
    app.require_subcommand(1);

    std::string config_path, out_arg, target, ckpt_path, data_path, out_prefix;
    Overrides ov;

    auto* gen = app.add_subcommand("generate", "synthesize a labeled dataset with injected noise");
    gen->add_option("--config", config_path, "experiment config file")->required();
    gen->add_option("--seed", ov.seed, "override the data seed");
    gen->add_option("--out", out_arg, "output directory");

    auto* train = app.add_subcommand("train", "train one model and write run artifacts");
    train->add_option("--config", config_path, "experiment config file")->required();
    train->add_option("--mode", ov.mode, "normal | clean-oracle | paradigm-m1 | paradigm-m2");
    train->add_option("--seed", ov.seed, "override data and optimizer seeds");
    train->add_option("--out", out_arg, "override the run directory");

    auto* est = app.add_subcommand("estimate", "print the noise-rate estimate for a run or dump");
    est->add_option("target", target, "run directory, hist csv, or hist json sidecar")->required();

    auto* exp = app.add_subcommand("export-hist", "recompute the cosine histogram of a dataset");
    exp->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    exp->add_option("--data", data_path, "dataset csv")->required();
    exp->add_option("--out", out_prefix, "output file prefix")->required();

    auto* sweep = app.add_subcommand("sweep", "run the mode x noise-rate comparison grid");
    sweep->add_option("--config", config_path, "experiment config file")->required();
    sweep->add_option("--out", out_arg, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(load_with_overrides(config_path, ov), out_arg);
        if (train->parsed()) {
            ntol::ExperimentConfig cfg = load_with_overrides(config_path, ov);
            if (!out_arg.empty()) cfg.train.out_dir = out_arg;
            return cmd_train(std::move(cfg));
        }
        if (est->parsed()) return cmd_estimate(target);
        if (exp->parsed()) return cmd_export_hist(ckpt_path, data_path, out_prefix);
        if (sweep->parsed()) return cmd_sweep(load_with_overrides(config_path, ov), out_arg);
    } catch (const ntol::EstimationUnavailableError& e) {
        std::cerr << "estimation unavailable: " << e.what() << "\n";
        return kExitUnavailable;
    } catch (const ntol::NotReadyError& e) {
        std::cerr << "estimation unavailable: " << e.what() << "\n";
        return kExitUnavailable;
    } catch (const ntol::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ntol::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ntol::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ntol::InvalidInputError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

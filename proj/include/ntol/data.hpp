// Synthetic labeled identity datasets on the unit hypersphere with controlled
// noise injection (label flips and outliers, 50:50 by default), plus CSV
// ingest/export and the train/holdout split used for verification pairs.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include <Eigen/Dense>

#include "ntol/errors.hpp"

namespace ntol {

enum class Provenance : std::uint8_t { Clean = 0, LabelFlip = 1, Outlier = 2 };

inline const char* provenance_name(Provenance p) {
    switch (p) {
        case Provenance::Clean: return "clean";
        case Provenance::LabelFlip: return "label_flip";
        case Provenance::Outlier: return "outlier";
    }
    return "clean";
}

inline Provenance provenance_from_name(const std::string& s, long line = -1) {
    if (s == "clean") return Provenance::Clean;
    if (s == "label_flip") return Provenance::LabelFlip;
    if (s == "outlier") return Provenance::Outlier;
    throw ParseError("unknown provenance token '" + s + "'", line);
}

// Provenance is diagnostic-only: the training loss path never sees it.
struct LabeledSample {
    Eigen::VectorXd features;
    int label = 0;
    Provenance provenance = Provenance::Clean;
};

using Dataset = std::vector<LabeledSample>;

struct SynthConfig {
    int classes = 200;
    int samples_per_class = 100;
    int input_dim = 64;
    double spread = 0.35; // std of isotropic perturbation before renormalization
    double noise_rate = 0.0;
    double flip_outlier_ratio = 0.5; // fraction of noisy samples that are label flips
    std::uint64_t seed = 1;

    long total() const { return static_cast<long>(classes) * samples_per_class; }

    void validate() const {
        if (classes < 2) throw ConfigError("data: classes must be >= 2");
        if (samples_per_class < 1) throw ConfigError("data: samples_per_class must be >= 1");
        if (input_dim < 2) throw ConfigError("data: input_dim must be >= 2");
        if (!(spread > 0.0)) throw ConfigError("data: spread must be > 0");
        if (!(noise_rate >= 0.0 && noise_rate < 1.0))
            throw ConfigError("data: noise_rate must be in [0,1)");
        if (!(flip_outlier_ratio >= 0.0 && flip_outlier_ratio <= 1.0))
            throw ConfigError("data: flip_outlier_ratio must be in [0,1]");
    }
};

namespace detail {
inline Eigen::VectorXd random_unit_vector(int dim, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd v(dim);
    do {
        for (int i = 0; i < dim; ++i) v[i] = gauss(rng);
    } while (v.norm() == 0.0);
    return v / v.norm();
}

inline Eigen::VectorXd perturbed_on_sphere(const Eigen::VectorXd& center, double spread,
                                           std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::VectorXd v(center.size());
    for (Eigen::Index i = 0; i < center.size(); ++i) v[i] = center[i] + spread * gauss(rng);
    const double n = v.norm();
    return n > 0.0 ? Eigen::VectorXd(v / n) : center;
}
} // namespace detail

// Clean samples cluster around C random unit prototypes. Exactly
// round(noise_rate * total) samples are then noised: label flips get a
// uniformly random different label, outliers get content from fresh
// prototypes outside the C classes while keeping their (valid) label.
// The returned order is shuffled.
inline Dataset generate(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);

    std::vector<Eigen::VectorXd> prototypes;
    prototypes.reserve(cfg.classes);
    for (int c = 0; c < cfg.classes; ++c)
        prototypes.push_back(detail::random_unit_vector(cfg.input_dim, rng));

    Dataset data;
    data.reserve(cfg.total());
    for (int c = 0; c < cfg.classes; ++c)
        for (int k = 0; k < cfg.samples_per_class; ++k)
            data.push_back({detail::perturbed_on_sphere(prototypes[c], cfg.spread, rng), c,
                            Provenance::Clean});

    const long total = cfg.total();
    const long n_noisy = std::lround(cfg.noise_rate * static_cast<double>(total));
    const bool both_kinds = cfg.flip_outlier_ratio > 0.0 && cfg.flip_outlier_ratio < 1.0;
    if (n_noisy > 0 && both_kinds && n_noisy < 2)
        throw ConfigError("data: noise budget too small to hold both flips and outliers");

    if (n_noisy > 0) {
        std::vector<long> idx(total);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        const long n_flip = std::lround(cfg.flip_outlier_ratio * static_cast<double>(n_noisy));

        std::uniform_int_distribution<int> other(0, cfg.classes - 2);
        for (long k = 0; k < n_flip; ++k) {
            LabeledSample& s = data[idx[k]];
            int l = other(rng);
            if (l >= s.label) ++l;
            s.label = l;
            s.provenance = Provenance::LabelFlip;
        }
        for (long k = n_flip; k < n_noisy; ++k) {
            LabeledSample& s = data[idx[k]];
            const Eigen::VectorXd alien = detail::random_unit_vector(cfg.input_dim, rng);
            s.features = detail::perturbed_on_sphere(alien, cfg.spread, rng);
            s.provenance = Provenance::Outlier;
        }
    }

    std::shuffle(data.begin(), data.end(), rng);
    return data;
}

// ---- csv io -------------------------------------------------------------
//
// Header: label,provenance,f0,f1,...  (provenance column optional on load,
// defaults to clean). Features use 17 significant digits so a save/load
// round trip is exact.

inline void save_csv(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    const int dim = data.empty() ? 0 : static_cast<int>(data.front().features.size());
    out << "label,provenance";
    for (int i = 0; i < dim; ++i) out << ",f" << i;
    out << "\n";
    char buf[40];
    for (const auto& s : data) {
        out << s.label << ',' << provenance_name(s.provenance);
        for (Eigen::Index i = 0; i < s.features.size(); ++i) {
            std::snprintf(buf, sizeof(buf), ",%.17g", s.features[i]);
            out << buf;
        }
        out << "\n";
    }
}

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(line);
    while (std::getline(ss, cur, ',')) out.push_back(cur);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

inline double parse_double(const std::string& tok, long line) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(tok, &pos);
    } catch (const std::exception&) {
        throw ParseError("non-numeric field '" + tok + "'", line);
    }
    if (pos != tok.size()) throw ParseError("non-numeric field '" + tok + "'", line);
    return v;
}

inline long parse_label(const std::string& tok, long line) {
    std::size_t pos = 0;
    long v = 0;
    try {
        v = std::stol(tok, &pos);
    } catch (const std::exception&) {
        throw ParseError("non-numeric label '" + tok + "'", line);
    }
    if (pos != tok.size() || v < 0) throw ParseError("bad label '" + tok + "'", line);
    return v;
}
} // namespace detail

inline Dataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty file: " + path.string(), 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();

    const auto header = detail::split_csv_line(line);
    if (header.empty() || header[0] != "label")
        throw ParseError("header must start with 'label'", 1);
    int provenance_col = -1;
    std::vector<int> feature_cols;
    for (std::size_t i = 1; i < header.size(); ++i) {
        if (header[i] == "provenance") {
            if (provenance_col >= 0) throw ParseError("duplicate provenance column", 1);
            provenance_col = static_cast<int>(i);
        } else if (header[i] == "f" + std::to_string(feature_cols.size())) {
            feature_cols.push_back(static_cast<int>(i));
        } else {
            throw ParseError("unexpected column '" + header[i] + "'", 1);
        }
    }
    if (feature_cols.empty()) throw ParseError("no feature columns found", 1);

    Dataset data;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tok = detail::split_csv_line(line);
        if (tok.size() != header.size())
            throw ParseError("expected " + std::to_string(header.size()) + " columns, got " +
                                 std::to_string(tok.size()),
                             line_no);
        LabeledSample s;
        s.label = static_cast<int>(detail::parse_label(tok[0], line_no));
        s.provenance = provenance_col >= 0 ? provenance_from_name(tok[provenance_col], line_no)
                                           : Provenance::Clean;
        s.features.resize(static_cast<Eigen::Index>(feature_cols.size()));
        for (std::size_t i = 0; i < feature_cols.size(); ++i)
            s.features[static_cast<Eigen::Index>(i)] = detail::parse_double(tok[feature_cols[i]], line_no);
        data.push_back(std::move(s));
    }
    return data;
}

inline nlohmann::json dataset_manifest(const SynthConfig& cfg) {
    return nlohmann::json{{"C", cfg.classes},       {"D", cfg.input_dim},
                          {"total", cfg.total()},   {"noise_rate", cfg.noise_rate},
                          {"seed", cfg.seed},       {"spread", cfg.spread}};
}

// ---- split and verification pairs --------------------------------------

struct SplitDataset {
    Dataset train;
    Dataset holdout;
};

// Stratified by assigned label: per class, round(holdout_frac * n) samples
// are held out.
inline SplitDataset split_train_holdout(const Dataset& data, double holdout_frac,
                                        std::mt19937_64& rng) {
    int max_label = -1;
    for (const auto& s : data) max_label = std::max(max_label, s.label);
    std::vector<std::vector<std::size_t>> by_class(max_label + 1);
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data[i].label].push_back(i);

    SplitDataset out;
    for (auto& group : by_class) {
        std::shuffle(group.begin(), group.end(), rng);
        const std::size_t nh =
            static_cast<std::size_t>(std::lround(holdout_frac * static_cast<double>(group.size())));
        for (std::size_t k = 0; k < group.size(); ++k) {
            if (k < nh)
                out.holdout.push_back(data[group[k]]);
            else
                out.train.push_back(data[group[k]]);
        }
    }
    return out;
}

struct VerificationPair {
    Eigen::VectorXd a;
    Eigen::VectorXd b;
    bool same = false;
};

// Balanced same/different pairs from the provenance-clean holdout samples
// (the label of a clean sample is its true identity). Same-class pairs are
// disjoint within a class; different-class pairs are drawn at random.
inline std::vector<VerificationPair> make_verification_pairs(const Dataset& holdout,
                                                             std::mt19937_64& rng) {
    int max_label = -1;
    for (const auto& s : holdout) max_label = std::max(max_label, s.label);
    std::vector<std::vector<const LabeledSample*>> by_class(max_label + 1);
    for (const auto& s : holdout)
        if (s.provenance == Provenance::Clean) by_class[s.label].push_back(&s);

    std::vector<VerificationPair> pairs;
    std::vector<const LabeledSample*> pool;
    for (auto& group : by_class) {
        std::shuffle(group.begin(), group.end(), rng);
        for (std::size_t k = 0; k + 1 < group.size(); k += 2)
            pairs.push_back({group[k]->features, group[k + 1]->features, true});
        pool.insert(pool.end(), group.begin(), group.end());
    }
    const std::size_t n_same = pairs.size();
    if (pool.size() < 2) return pairs;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::size_t guard = 0;
    while (pairs.size() < 2 * n_same && guard < 100 * n_same + 1000) {
        ++guard;
        const auto* a = pool[pick(rng)];
        const auto* b = pool[pick(rng)];
        if (a->label == b->label) continue;
        pairs.push_back({a->features, b->features, false});
    }
    return pairs;
}

} // namespace ntol

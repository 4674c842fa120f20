// End-to-end training orchestration: per-batch forward, cosine histogram
// update, weight computation, weighted loss/backward and the SGD step, plus
// the baseline modes, verification evaluation and run diagnostics.

#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntol/data.hpp"
#include "ntol/histogram.hpp"
#include "ntol/losses.hpp"
#include "ntol/model.hpp"
#include "ntol/weighting.hpp"

namespace ntol {

enum class TrainMode {
    Normal,            // all weights 1
    CleanOracle,       // drop provenance-noisy samples (weight 0)
    ParadigmLossScale, // fused weights applied to the loss term
    ParadigmLogitScale // fused weights applied to the logit scale
};

inline const char* mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::Normal: return "normal";
        case TrainMode::CleanOracle: return "clean-oracle";
        case TrainMode::ParadigmLossScale: return "paradigm-m1";
        case TrainMode::ParadigmLogitScale: return "paradigm-m2";
    }
    return "normal";
}

inline TrainMode mode_from_name(const std::string& s) {
    if (s == "normal") return TrainMode::Normal;
    if (s == "clean-oracle") return TrainMode::CleanOracle;
    if (s == "paradigm-m1") return TrainMode::ParadigmLossScale;
    if (s == "paradigm-m2") return TrainMode::ParadigmLogitScale;
    throw ConfigError("unknown mode '" + s + "' (expected normal, clean-oracle, paradigm-m1 or paradigm-m2)");
}

inline bool is_paradigm(TrainMode m) {
    return m == TrainMode::ParadigmLossScale || m == TrainMode::ParadigmLogitScale;
}

struct TrainOptions {
    TrainMode mode = TrainMode::ParadigmLogitScale;
    LossKind loss;
    double scale = 32.0;
    std::vector<int> hidden = {128};
    int embed_dim = 32;
    SgdConfig sgd;
    WeightPolicy policy;
    double holdout_frac = 0.2;
    std::filesystem::path out_dir; // empty -> no files written
    long snapshot_stride = 2000;
    long log_stride = 100;

    void validate() const {
        loss.validate();
        sgd.validate();
        policy.validate();
        if (!(scale > 0.0)) throw ConfigError("loss: scale must be > 0");
        if (embed_dim < 2) throw ConfigError("model: embed_dim must be >= 2");
        for (int h : hidden)
            if (h < 1) throw ConfigError("model: hidden dims must be >= 1");
        if (!(holdout_frac > 0.0 && holdout_frac < 1.0))
            throw ConfigError("trainer: holdout_frac must be in (0,1)");
        if (snapshot_stride < 1 || log_stride < 1)
            throw ConfigError("trainer: strides must be >= 1");
    }
};

struct RunSummary {
    std::string mode;
    std::uint64_t seed = 0;
    long iterations = 0;
    double final_accuracy = 0.0;
    std::optional<double> separation_auc;
    std::optional<double> final_noise_rate_estimate;
    std::vector<std::pair<long, double>> noise_rate_estimates;
    std::vector<std::pair<long, double>> loss_curve;
    std::vector<std::string> hist_snapshots;
};

inline nlohmann::json summary_json(const RunSummary& s) {
    nlohmann::json j;
    j["mode"] = s.mode;
    j["seed"] = s.seed;
    j["iterations"] = s.iterations;
    j["final_accuracy"] = s.final_accuracy;
    j["separation_auc"] = s.separation_auc ? nlohmann::json(*s.separation_auc) : nlohmann::json();
    j["final_noise_rate_estimate"] =
        s.final_noise_rate_estimate ? nlohmann::json(*s.final_noise_rate_estimate) : nlohmann::json();
    j["noise_rate_estimates"] = s.noise_rate_estimates;
    j["loss_curve"] = s.loss_curve;
    j["hist_snapshots"] = s.hist_snapshots;
    return j;
}

// Probability that a random clean cosine exceeds a random noisy one
// (rank-sum with ties counting one half).
inline double separation_auc(std::span<const double> clean, std::span<const double> noisy) {
    if (clean.empty() || noisy.empty())
        throw EstimationUnavailableError("separation_auc: empty side");
    std::vector<std::pair<double, int>> all;
    all.reserve(clean.size() + noisy.size());
    for (double v : clean) all.push_back({v, 0});
    for (double v : noisy) all.push_back({v, 1});
    std::sort(all.begin(), all.end());
    double rank_sum_clean = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j); // 1-based average
        for (std::size_t k = i; k < j; ++k)
            if (all[k].second == 0) rank_sum_clean += midrank;
        i = j;
    }
    const double nc = static_cast<double>(clean.size());
    const double nn = static_cast<double>(noisy.size());
    const double u = rank_sum_clean - nc * (nc + 1.0) / 2.0;
    return u / (nc * nn);
}

// Cosine-verification accuracy: threshold picked by best accuracy on the
// even-indexed pairs, scored on the odd-indexed pairs.
inline double evaluate_verification(const EmbedNet& net,
                                    const std::vector<VerificationPair>& pairs) {
    if (pairs.empty()) throw InvalidInputError("evaluate_verification: no pairs");
    const Eigen::Index p = static_cast<Eigen::Index>(pairs.size());
    const Eigen::Index dim = pairs.front().a.size();
    Matrix feats(2 * p, dim);
    for (Eigen::Index i = 0; i < p; ++i) {
        feats.row(2 * i) = pairs[i].a.transpose();
        feats.row(2 * i + 1) = pairs[i].b.transpose();
    }
    const Matrix emb = forward(net, feats);
    std::vector<double> sim(p);
    for (Eigen::Index i = 0; i < p; ++i) {
        const auto a = emb.row(2 * i);
        const auto b = emb.row(2 * i + 1);
        const double na = a.norm(), nb = b.norm();
        sim[i] = (na > 0 && nb > 0) ? a.dot(b) / (na * nb) : 0.0;
    }

    std::vector<Eigen::Index> val_idx, test_idx;
    for (Eigen::Index i = 0; i < p; ++i) (i % 2 == 0 ? val_idx : test_idx).push_back(i);
    if (test_idx.empty()) test_idx = val_idx;

    std::vector<double> candidates{-2.0};
    for (Eigen::Index i : val_idx) candidates.push_back(sim[i]);
    candidates.push_back(2.0);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    auto accuracy_at = [&](double thr, const std::vector<Eigen::Index>& idx) {
        std::size_t correct = 0;
        for (Eigen::Index i : idx)
            if ((sim[i] >= thr) == pairs[i].same) ++correct;
        return static_cast<double>(correct) / static_cast<double>(idx.size());
    };

    double best_thr = candidates.front();
    double best_acc = -1.0;
    for (double t : candidates) {
        const double acc = accuracy_at(t, val_idx);
        if (acc > best_acc) {
            best_acc = acc;
            best_thr = t;
        }
    }
    return accuracy_at(best_thr, test_idx);
}

namespace detail {

struct WeightDiagRow {
    long iter;
    double delta_r, alpha, beta, gamma, mean_w, min_w, max_w;
};

inline void append_weight_rows(const std::filesystem::path& path,
                               const std::vector<WeightDiagRow>& rows) {
    std::ofstream out(path);
    char buf[320];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf),
                      "{\"iter\":%ld,\"delta_r\":%.12g,\"alpha\":%.12g,\"beta\":%.12g,"
                      "\"gamma\":%.12g,\"mean_weight\":%.12g,\"min_weight\":%.12g,"
                      "\"max_weight\":%.12g}\n",
                      r.iter, r.delta_r, r.alpha, r.beta, r.gamma, r.mean_w, r.min_w, r.max_w);
        out << buf;
    }
}

} // namespace detail

// Train on the given dataset under one of the four modes and return the run
// summary. When out_dir is set, emits summary.json, loss.csv, periodic
// histogram snapshots, weighting diagnostics and the final checkpoint.
inline RunSummary train(const Dataset& dataset, const TrainOptions& opts) {
    opts.validate();
    if (dataset.empty()) throw InvalidInputError("train: empty dataset");

    const bool to_files = !opts.out_dir.empty();
    if (to_files) std::filesystem::create_directories(opts.out_dir);

    int num_classes = 0;
    for (const auto& s : dataset) num_classes = std::max(num_classes, s.label + 1);
    const int input_dim = static_cast<int>(dataset.front().features.size());

    std::mt19937_64 rng(opts.sgd.seed);
    std::vector<int> dims{input_dim};
    dims.insert(dims.end(), opts.hidden.begin(), opts.hidden.end());
    dims.push_back(opts.embed_dim);
    EmbedNet net = EmbedNet::init(dims, rng);
    ClassifierHead head = ClassifierHead::random(opts.embed_dim, num_classes, opts.scale, rng);
    SgdOptimizer optimizer(net, head, opts.sgd);

    const SplitDataset split = split_train_holdout(dataset, opts.holdout_frac, rng);
    const std::vector<VerificationPair> pairs = make_verification_pairs(split.holdout, rng);
    const Dataset& train_set = split.train;
    if (train_set.empty()) throw InvalidInputError("train: empty training split");

    const std::size_t ring_capacity = std::min<std::size_t>(kDefaultRingCapacity, train_set.size());
    CosHistogram hist(ring_capacity, ring_capacity / 10);
    CosHistogram diag_hist(ring_capacity, ring_capacity / 10); // dropped samples, clean-oracle only

    const WeightMethod method = (opts.mode == TrainMode::ParadigmLogitScale)
                                    ? WeightMethod::LogitScale
                                    : WeightMethod::LossScale;

    RunSummary summary;
    summary.mode = mode_name(opts.mode);
    summary.seed = opts.sgd.seed;
    summary.iterations = opts.sgd.total_iters;

    std::vector<detail::WeightDiagRow> pending_rows;
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size(); // triggers a shuffle on first use

    const int batch = opts.sgd.batch_size;
    Matrix features(batch, input_dim);
    std::vector<int> labels(batch);
    std::vector<const LabeledSample*> batch_samples(batch);
    Vector weights(batch);

    auto write_snapshot = [&](long done_iters) {
        char name[64];
        std::snprintf(name, sizeof(name), "hist_%06ld.csv", done_iters);
        write_hist_snapshot(hist, opts.out_dir / name, opts.policy.zeta);
        summary.hist_snapshots.push_back(name);
        if (opts.mode == TrainMode::CleanOracle && diag_hist.count() > 0) {
            std::snprintf(name, sizeof(name), "hist_diag_%06ld.csv", done_iters);
            write_hist_csv(diag_hist, opts.out_dir / name);
        }
        if (!pending_rows.empty()) {
            std::snprintf(name, sizeof(name), "weights_%06ld.jsonl", done_iters);
            detail::append_weight_rows(opts.out_dir / name, pending_rows);
            pending_rows.clear();
        }
    };

    for (long iter = 0; iter < opts.sgd.total_iters; ++iter) {
        for (int i = 0; i < batch; ++i) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const LabeledSample& s = train_set[order[cursor++]];
            batch_samples[i] = &s;
            features.row(i) = s.features.transpose();
            labels[i] = s.label;
        }

        try {
            ForwardCache cache;
            const Matrix emb = forward(net, features, &cache);
            const LogitRecord rec = cosines(emb, head, labels);

            for (int i = 0; i < batch; ++i) {
                if (opts.mode == TrainMode::CleanOracle &&
                    batch_samples[i]->provenance != Provenance::Clean)
                    diag_hist.push(rec.target_cos[i]);
                else
                    hist.push(rec.target_cos[i]);
            }

            std::optional<HistStats> st;
            if (is_paradigm(opts.mode) && hist.ready() && hist.count() > 0)
                st = hist.stats(opts.policy.zeta);

            switch (opts.mode) {
                case TrainMode::Normal:
                    weights.setOnes();
                    break;
                case TrainMode::CleanOracle:
                    for (int i = 0; i < batch; ++i)
                        weights[i] =
                            batch_samples[i]->provenance == Provenance::Clean ? 1.0 : 0.0;
                    break;
                default:
                    if (st)
                        for (int i = 0; i < batch; ++i)
                            weights[i] = sample_weight(rec.target_cos[i], *st, opts.policy);
                    else
                        weights.setOnes();
            }

            const LossGrad lg = loss_and_grad(rec, opts.loss, opts.scale, weights, method);
            const FeatureGrads fg = backprop_to_features(rec, lg.dcos, head, emb);
            const NetGrads grads = backward(net, cache, fg.dfeatures);
            optimizer.step(net, head, grads, fg.danchors, iter);

            const long done = iter + 1;
            const bool log_point = done % opts.log_stride == 0 || done == opts.sgd.total_iters;
            if (log_point) {
                summary.loss_curve.push_back({done, lg.loss});
                std::optional<HistStats> log_st = st;
                if (!log_st && hist.ready() && hist.count() > 0)
                    log_st = hist.stats(opts.policy.zeta);
                if (log_st && (log_st->mu_l || log_st->mu_r))
                    summary.noise_rate_estimates.push_back(
                        {done, hist.estimate_noise_rate(*log_st)});
                if (st) {
                    const double dr = std::clamp(st->delta_r, 0.0, 1.0);
                    FusionCoeffs c = fusion_coeffs(dr);
                    if (!st->mu_r) {
                        c.beta += c.gamma;
                        c.gamma = 0.0;
                    }
                    pending_rows.push_back({done, st->delta_r, c.alpha, c.beta, c.gamma,
                                            weights.mean(), weights.minCoeff(),
                                            weights.maxCoeff()});
                }
            }
            if (to_files && (done % opts.snapshot_stride == 0 || done == opts.sgd.total_iters))
                write_snapshot(done);
        } catch (const NumericError& e) {
            if (to_files) {
                write_hist_csv(hist, opts.out_dir / "hist_diverged.csv");
                nlohmann::json j{{"iteration", iter}, {"error", e.what()}};
                std::ofstream out(opts.out_dir / "diverged.json");
                out << j.dump(2) << "\n";
            }
            throw NumericError("training diverged at iteration " + std::to_string(iter) + ": " +
                               e.what());
        }
    }

    // final statistics from a fresh pass with the trained model
    if (hist.ready() && hist.count() > 0) {
        const HistStats st = hist.stats(opts.policy.zeta);
        if (st.mu_l || st.mu_r)
            summary.final_noise_rate_estimate = hist.estimate_noise_rate(st);
    }

    {
        Matrix all(train_set.size(), input_dim);
        std::vector<int> all_labels(train_set.size());
        for (std::size_t i = 0; i < train_set.size(); ++i) {
            all.row(static_cast<Eigen::Index>(i)) = train_set[i].features.transpose();
            all_labels[i] = train_set[i].label;
        }
        const LogitRecord rec = cosines(forward(net, all), head, all_labels);
        std::vector<double> clean_cos, noisy_cos;
        for (std::size_t i = 0; i < train_set.size(); ++i) {
            if (train_set[i].provenance == Provenance::Clean)
                clean_cos.push_back(rec.target_cos[static_cast<Eigen::Index>(i)]);
            else
                noisy_cos.push_back(rec.target_cos[static_cast<Eigen::Index>(i)]);
        }
        if (!clean_cos.empty() && !noisy_cos.empty())
            summary.separation_auc = separation_auc(clean_cos, noisy_cos);
    }

    summary.final_accuracy = evaluate_verification(net, pairs);

    if (to_files) {
        std::ofstream js(opts.out_dir / "summary.json");
        js << summary_json(summary).dump(2) << "\n";
        std::ofstream lc(opts.out_dir / "loss.csv");
        lc << "iter,loss\n";
        char buf[64];
        for (const auto& [it, loss] : summary.loss_curve) {
            std::snprintf(buf, sizeof(buf), "%ld,%.17g\n", it, loss);
            lc << buf;
        }
        save_checkpoint(opts.out_dir / "checkpoint.bin", net, head, optimizer,
                        opts.sgd.total_iters);
    }
    return summary;
}

} // namespace ntol

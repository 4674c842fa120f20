// Streaming cosine histogram over the most recent K target-class cosines.
//
// A bounded ring buffer feeds a fixed 200-bin frequency table over [-1, 1]
// (bin width 0.01). From it we derive the trimmed endpoints (delta_l,
// delta_r), the smoothed-peak locations (mu_l, mu_r) and a noise-rate
// estimate. Single-writer: one logical owner pushes and queries.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntol/errors.hpp"

namespace ntol {

inline constexpr int kNumBins = 200;
inline constexpr double kBinWidth = 0.01;
inline constexpr std::size_t kDefaultRingCapacity = 64000;

// Bin i covers [-1 + i*0.01, -1 + (i+1)*0.01); the right edge v = 1 is
// clamped into the last bin.
inline int bin_index(double v) {
    int i = static_cast<int>(std::floor((v + 1.0) * 100.0));
    return std::clamp(i, 0, kNumBins - 1);
}

inline double bin_center(int i) { return -1.0 + (i + 0.5) * kBinWidth; }

struct Peak {
    int bin = 0;
    double center = 0.0; // bin center, no sub-bin interpolation
    double height = 0.0; // smoothed frequency
};

// Size-5 mean filter with zero padding outside [0, 199].
inline std::array<double, kNumBins> smooth_bins(std::span<const int> bins) {
    std::array<double, kNumBins> out{};
    const int n = static_cast<int>(bins.size());
    for (int i = 0; i < n && i < kNumBins; ++i) {
        double sum = 0.0;
        for (int j = std::max(0, i - 2); j <= std::min(n - 1, i + 2); ++j)
            sum += bins[j];
        out[i] = sum / 5.0;
    }
    return out;
}

// A bin is a peak iff it is strictly larger than every bin within `radius`
// on both sides; out-of-range neighbours are ignored. Returned in ascending
// bin order.
inline std::vector<Peak> find_peaks(std::span<const double> smoothed, int radius = 5) {
    std::vector<Peak> peaks;
    const int n = static_cast<int>(smoothed.size());
    for (int i = 0; i < n; ++i) {
        bool dominant = true;
        for (int j = std::max(0, i - radius); dominant && j <= std::min(n - 1, i + radius); ++j) {
            if (j != i && smoothed[i] <= smoothed[j]) dominant = false;
        }
        if (dominant) peaks.push_back({i, bin_center(i), smoothed[i]});
    }
    return peaks;
}

// Derived view of the distribution at one instant. Immutable value,
// freely shareable.
struct HistStats {
    double delta_l = 0.0;
    double delta_r = 0.0;
    std::optional<double> mu_l; // left peak (noisy mode), bin center
    std::optional<double> mu_r; // right peak (clean mode), bin center
    std::array<double, kNumBins> smoothed{};
    std::vector<Peak> peaks;
};

class CosHistogram {
public:
    explicit CosHistogram(std::size_t capacity = kDefaultRingCapacity)
        : CosHistogram(capacity, capacity / 10) {}

    CosHistogram(std::size_t capacity, std::size_t warmup)
        : capacity_(std::max<std::size_t>(capacity, 1)), warmup_(warmup) {
        ring_.reserve(std::min(capacity_, std::size_t{1} << 20));
    }

    // Values outside [-1, 1] by <= 1e-9 are clamped; larger violations throw.
    void push(double cos_theta) {
        if (!(cos_theta >= -1.0 - 1e-9 && cos_theta <= 1.0 + 1e-9))
            throw InvalidInputError("cosine out of [-1,1]: " + std::to_string(cos_theta));
        const double v = std::clamp(cos_theta, -1.0, 1.0);
        if (ring_.size() < capacity_) {
            ring_.push_back(v);
        } else {
            --bins_[bin_index(ring_[head_])];
            ring_[head_] = v;
            head_ = (head_ + 1) % capacity_;
        }
        ++bins_[bin_index(v)];
    }

    std::size_t count() const { return ring_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::size_t warmup() const { return warmup_; }
    bool ready() const { return count() >= warmup_; }
    const std::array<int, kNumBins>& bins() const { return bins_; }

    std::array<double, kNumBins> smooth() const { return smooth_bins(bins_); }

    // Trimmed endpoints from exact order statistics of the stored values:
    // delta_l is the value at 0-based rank ceil(quantile*count) from the
    // left, delta_r symmetric from the right.
    std::pair<double, double> endpoints(double quantile = 0.005) const {
        const std::size_t n = count();
        if (n == 0) throw NotReadyError("endpoints: empty histogram");
        std::size_t k = static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(n)));
        std::size_t il = std::min(k, n - 1);
        std::size_t ir = (n - 1 >= k) ? n - 1 - k : 0;
        if (il > ir) std::swap(il, ir); // degenerate tiny counts: untrimmed min/max
        std::vector<double> scratch(ring_);
        std::nth_element(scratch.begin(), scratch.begin() + il, scratch.end());
        const double dl = scratch[il];
        std::nth_element(scratch.begin() + il, scratch.begin() + ir, scratch.end());
        const double dr = scratch[ir];
        return {dl, dr};
    }

    // mu_r: highest peak with bin center > zeta (ties -> larger center);
    // mu_l: highest peak with bin center <= zeta (ties -> smaller center);
    // a lone peak is both mu_l and mu_r.
    HistStats stats(double zeta = 0.5, double quantile = 0.005, int radius = 5) const {
        if (count() < warmup_)
            throw NotReadyError("stats: histogram below warmup threshold (" +
                                std::to_string(count()) + " < " + std::to_string(warmup_) + ")");
        HistStats st;
        std::tie(st.delta_l, st.delta_r) = endpoints(quantile);
        st.smoothed = smooth();
        st.peaks = find_peaks(st.smoothed, radius);
        if (st.peaks.size() == 1) {
            st.mu_l = st.mu_r = st.peaks.front().center;
        } else {
            const Peak* best_l = nullptr;
            const Peak* best_r = nullptr;
            for (const Peak& p : st.peaks) {
                if (p.center > zeta) {
                    if (!best_r || p.height >= best_r->height) best_r = &p; // tie: larger center
                } else {
                    if (!best_l || p.height > best_l->height) best_l = &p; // tie: smaller center
                }
            }
            if (best_l) st.mu_l = best_l->center;
            if (best_r) st.mu_r = best_r->center;
        }
        return st;
    }

    double fraction_below(double x) const {
        std::size_t c = 0;
        for (double v : ring_)
            if (v < x) ++c;
        return count() ? static_cast<double>(c) / static_cast<double>(count()) : 0.0;
    }

    double fraction_above(double x) const {
        std::size_t c = 0;
        for (double v : ring_)
            if (v > x) ++c;
        return count() ? static_cast<double>(c) / static_cast<double>(count()) : 0.0;
    }

    // The region left of mu_l holds about half of the noisy samples, so the
    // rate is twice that mass. Without a distinct left peak (mu_l absent, or
    // a lone peak standing in for both modes) the region right of mu_r holds
    // about half of the clean samples and the complement is used.
    double estimate_noise_rate(const HistStats& st) const {
        const bool distinct_left = st.mu_l && (!st.mu_r || *st.mu_l != *st.mu_r);
        if (distinct_left)
            return std::clamp(2.0 * fraction_below(*st.mu_l), 0.0, 1.0);
        if (st.mu_r)
            return std::clamp(1.0 - 2.0 * fraction_above(*st.mu_r), 0.0, 1.0);
        throw EstimationUnavailableError("estimate_noise_rate: no peak detected");
    }

    // Unordered snapshot of the stored values.
    std::vector<double> values() const { return ring_; }

private:
    std::vector<double> ring_;
    std::size_t head_ = 0;
    std::size_t capacity_;
    std::size_t warmup_;
    std::array<int, kNumBins> bins_{};
};

inline void write_hist_csv(const CosHistogram& h, const std::filesystem::path& path) {
    const auto sm = h.smooth();
    const auto& bins = h.bins();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << "bin_center,raw_freq,smoothed_freq\n";
    char line[80];
    for (int i = 0; i < kNumBins; ++i) {
        std::snprintf(line, sizeof(line), "%.3f,%d,%.6f\n", bin_center(i), bins[i], sm[i]);
        out << line;
    }
}

// JSON sidecar next to the CSV dump. Fields are null while the histogram is
// below warmup or the corresponding peak is missing.
inline nlohmann::json hist_sidecar(const CosHistogram& h, double zeta = 0.5) {
    nlohmann::json j;
    j["count"] = h.count();
    j["delta_l"] = nullptr;
    j["delta_r"] = nullptr;
    j["mu_l"] = nullptr;
    j["mu_r"] = nullptr;
    j["noise_rate_estimate"] = nullptr;
    if (h.ready() && h.count() > 0) {
        const HistStats st = h.stats(zeta);
        j["delta_l"] = st.delta_l;
        j["delta_r"] = st.delta_r;
        if (st.mu_l) j["mu_l"] = *st.mu_l;
        if (st.mu_r) j["mu_r"] = *st.mu_r;
        if (st.mu_l || st.mu_r) j["noise_rate_estimate"] = h.estimate_noise_rate(st);
    }
    return j;
}

inline void write_hist_snapshot(const CosHistogram& h, const std::filesystem::path& csv_path,
                                double zeta = 0.5) {
    write_hist_csv(h, csv_path);
    std::filesystem::path side = csv_path;
    side.replace_extension(".json");
    std::ofstream out(side);
    out << hist_sidecar(h, zeta).dump(2) << "\n";
}

} // namespace ntol

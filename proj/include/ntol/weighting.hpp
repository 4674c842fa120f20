// Per-sample training weights from the cosine distribution statistics.
//
// Three strategies fused by coefficients that depend only on delta_r, the
// trimmed right endpoint of the distribution (a proxy for training
// progress): equal weights early, larger-cosine-larger-weight in the middle,
// and a Gaussian emphasis around the clean mode late. All functions here are
// pure; weights never carry gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "ntol/errors.hpp"
#include "ntol/histogram.hpp"

namespace ntol {

enum class WeightMethod {
    LossScale, // weight multiplies the per-sample loss term
    LogitScale // weight multiplies the logit scale s
};

struct WeightPolicy {
    double lambda = 10.0;        // softplus sharpness
    double zeta = 0.5;           // strategy-transition threshold on delta_r
    double sigma_divisor = 2.576; // right-tail spread covering 99% of the clean mass
    WeightMethod method = WeightMethod::LogitScale;
    double eps = 1e-6; // denominator floor

    void validate() const {
        if (!(lambda > 0.0)) throw ConfigError("weight policy: lambda must be > 0");
        if (!(zeta > 0.0 && zeta < 1.0)) throw ConfigError("weight policy: zeta must be in (0,1)");
        if (!(sigma_divisor > 0.0)) throw ConfigError("weight policy: sigma_divisor must be > 0");
        if (!(eps > 0.0)) throw ConfigError("weight policy: eps must be > 0");
    }
};

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Strategy one: uniform.
inline double weight_uniform(double /*cos_theta*/) { return 1.0; }

// Strategy two: normalized softplus ramp from mu_l (or delta_l when the left
// peak is missing) up to delta_r. z is deliberately not clamped: values past
// delta_r may weigh slightly above 1, values below the anchor stay positive.
inline double weight_ramp(double cos_theta, const HistStats& st, const WeightPolicy& pol) {
    const double anchor = st.mu_l ? *st.mu_l : st.delta_l;
    const double denom = std::max(st.delta_r - anchor, pol.eps);
    const double z = (cos_theta - anchor) / denom;
    return softplus(pol.lambda * z) / softplus(pol.lambda);
}

// Strategy three: Gaussian bump centered on the clean mode mu_r with
// sigma = (delta_r - mu_r) / sigma_divisor. Requires mu_r.
inline double weight_semihard(double cos_theta, const HistStats& st, const WeightPolicy& pol) {
    const double mu = st.mu_r.value();
    const double sigma = std::max((st.delta_r - mu) / pol.sigma_divisor, pol.eps);
    const double d = cos_theta - mu;
    return std::exp(-(d * d) / (2.0 * sigma * sigma));
}

struct FusionCoeffs {
    double alpha = 1.0;
    double beta = 0.0;
    double gamma = 0.0;
};

// alpha(delta_r) with the ceil(0.5 - delta_r) gate evaluated over the reals:
// the gate is 1 for delta_r < 0.5 and 0 at and beyond 0.5.
inline double fusion_alpha(double delta_r) {
    if (delta_r >= 0.5) return 0.0;
    return 2.0 - 1.0 / (1.0 + std::exp(5.0 - 20.0 * delta_r)) -
           1.0 / (1.0 + std::exp(20.0 * delta_r - 15.0));
}

// gamma mirrors alpha around 0.5; beta takes the remainder so the three sum
// to 1 exactly. Caller clamps delta_r to [0,1].
inline FusionCoeffs fusion_coeffs(double delta_r) {
    FusionCoeffs c;
    c.alpha = fusion_alpha(delta_r);
    c.gamma = fusion_alpha(1.0 - delta_r);
    c.beta = 1.0 - c.alpha - c.gamma;
    return c;
}

// Fused weight for one sample's target-class cosine. When mu_r is missing
// (heavy noise, undetected clean mode), strategy three's mass folds into
// strategy two. The result is floored at the smallest normal double: the
// ramp and bump terms can underflow for far-left-tail samples once alpha has
// gated off, and the contract is a strictly positive weight.
inline double sample_weight(double cos_theta, const HistStats& st, const WeightPolicy& pol) {
    const double dr = std::clamp(st.delta_r, 0.0, 1.0);
    FusionCoeffs c = fusion_coeffs(dr);
    if (!st.mu_r) {
        c.beta += c.gamma;
        c.gamma = 0.0;
    }
    double w = c.alpha * weight_uniform(cos_theta) + c.beta * weight_ramp(cos_theta, st, pol);
    if (c.gamma != 0.0) w += c.gamma * weight_semihard(cos_theta, st, pol);
    return std::max(w, std::numeric_limits<double>::min());
}

} // namespace ntol

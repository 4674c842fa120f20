// Angular-margin softmax losses over normalized features and unit-norm class
// anchors, with two ways of applying per-sample weights: scaling the loss
// term or scaling the logit magnitude. Produces exact analytic gradients
// w.r.t. the cosine matrix, the raw features, and the anchors.

#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "ntol/errors.hpp"
#include "ntol/weighting.hpp"

namespace ntol {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class LossVariant { L2Softmax, ArcFace };

struct LossKind {
    LossVariant variant = LossVariant::L2Softmax;
    double margin = 0.5; // radians, ArcFace only

    void validate() const {
        if (!(margin >= 0.0 && margin < M_PI / 2))
            throw ConfigError("loss: margin must be in [0, pi/2)");
    }
};

// Unit-norm class-anchor matrix (one column per class), zero bias, scale s.
struct ClassifierHead {
    Matrix anchors; // d x C
    double scale = 32.0;

    int embed_dim() const { return static_cast<int>(anchors.rows()); }
    int num_classes() const { return static_cast<int>(anchors.cols()); }

    void renormalize() {
        for (Eigen::Index j = 0; j < anchors.cols(); ++j) {
            const double n = anchors.col(j).norm();
            if (n > 0.0) anchors.col(j) /= n;
        }
    }

    static ClassifierHead random(int embed_dim, int num_classes, double scale,
                                 std::mt19937_64& rng) {
        std::normal_distribution<double> gauss(0.0, 1.0);
        ClassifierHead head;
        head.scale = scale;
        head.anchors.resize(embed_dim, num_classes);
        for (Eigen::Index j = 0; j < num_classes; ++j)
            for (Eigen::Index i = 0; i < embed_dim; ++i) head.anchors(i, j) = gauss(rng);
        head.renormalize();
        return head;
    }
};

struct LogitRecord {
    Matrix cos_matrix;       // N x C, entries clamped to [-1, 1]
    Vector target_cos;       // target-class cosine per sample
    std::vector<int> labels; // class index per sample
};

// Cosines between L2-normalized feature rows and the anchors.
inline LogitRecord cosines(const Matrix& features, const ClassifierHead& head,
                           const std::vector<int>& labels) {
    const Eigen::Index n = features.rows();
    if (features.cols() != head.anchors.rows())
        throw InvalidInputError("cosines: feature dim does not match anchor dim");
    if (static_cast<Eigen::Index>(labels.size()) != n)
        throw InvalidInputError("cosines: labels size does not match batch");

    Matrix normalized(n, features.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const double norm = features.row(i).norm();
        if (!(norm > 0.0))
            throw InvalidInputError("cosines: zero-norm feature row " + std::to_string(i));
        normalized.row(i) = features.row(i) / norm;
    }

    LogitRecord rec;
    rec.cos_matrix = (normalized * head.anchors).cwiseMax(-1.0).cwiseMin(1.0);
    rec.labels = labels;
    rec.target_cos.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= head.num_classes())
            throw InvalidInputError("cosines: label out of range at row " + std::to_string(i));
        rec.target_cos[i] = rec.cos_matrix(i, y);
    }
    return rec;
}

struct LossGrad {
    double loss = 0.0; // mean over the batch
    Matrix dcos;       // N x C, d(loss)/d(cos_matrix)
};

namespace detail {
inline constexpr double kTrigClamp = 1.0 - 1e-7;
}

// Weighted loss and its gradient w.r.t. the cosine matrix.
//
// LossScale:  logits s*cos, per-sample loss -w_i*log softmax(target);
// LogitScale: logits w_i*s*cos, per-sample loss -log softmax(target).
// Both yield d(loss)/dcos_ij = (w_i*s/N)(p_ij - [j==y_i]), with p taken over
// that method's logits. ArcFace replaces the target logit's cosine with
// cos(theta + m) and chains the factor sin(theta+m)/sin(theta) through the
// target entry. Weights are constants: no gradient flows into them.
inline LossGrad loss_and_grad(const LogitRecord& rec, const LossKind& kind, double s,
                              const Vector& weights, WeightMethod method) {
    const Eigen::Index n = rec.cos_matrix.rows();
    const Eigen::Index c = rec.cos_matrix.cols();
    if (weights.size() != n) throw InvalidInputError("loss_and_grad: weights size mismatch");
    if (!(s > 0.0)) throw InvalidInputError("loss_and_grad: scale must be > 0");
    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(weights[i]) || weights[i] < 0.0)
            throw InvalidInputError("loss_and_grad: weights must be finite and >= 0");

    const double cos_m = std::cos(kind.margin);
    const double sin_m = std::sin(kind.margin);
    const bool arc = kind.variant == LossVariant::ArcFace;

    LossGrad out;
    out.dcos.setZero(n, c);
    Vector logits(c);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = rec.labels[i];
        const double w = weights[i];
        const double smul = (method == WeightMethod::LogitScale) ? w * s : s;

        logits = smul * rec.cos_matrix.row(i).transpose();
        double chain = 1.0;
        if (arc) {
            const double ct = rec.target_cos[i];
            const double ct_safe = std::clamp(ct, -detail::kTrigClamp, detail::kTrigClamp);
            const double st = std::sqrt(std::max(1.0 - ct_safe * ct_safe, 0.0));
            logits[y] = smul * (ct * cos_m - st * sin_m);
            chain = cos_m + (ct_safe / st) * sin_m; // = sin(theta+m)/sin(theta)
        }
        if (!logits.allFinite()) throw NumericError("loss_and_grad: non-finite logits");

        // max-subtraction stabilized softmax
        const double mx = logits.maxCoeff();
        const Vector ex = (logits.array() - mx).exp();
        const double denom = ex.sum();
        const double log_p_target = logits[y] - mx - std::log(denom);

        total += (method == WeightMethod::LossScale ? w : 1.0) * (-log_p_target);

        const double coeff = w * s / static_cast<double>(n);
        for (Eigen::Index j = 0; j < c; ++j) {
            const double p = ex[j] / denom;
            double g = coeff * (p - (j == y ? 1.0 : 0.0));
            if (arc && j == y) g *= chain;
            out.dcos(i, j) = g;
        }
    }
    out.loss = total / static_cast<double>(n);
    if (!std::isfinite(out.loss)) throw NumericError("loss_and_grad: non-finite loss");
    return out;
}

struct FeatureGrads {
    Matrix dfeatures; // N x d
    Matrix danchors;  // d x C
};

// Chain rule from d(loss)/dcos back through the anchor product and the L2
// feature normalization. Entries sitting at the cosine clamp boundary get
// zero gradient.
inline FeatureGrads backprop_to_features(const LogitRecord& rec, const Matrix& dcos,
                                         const ClassifierHead& head, const Matrix& features) {
    const Eigen::Index n = features.rows();
    if (dcos.rows() != n || dcos.cols() != head.anchors.cols() ||
        features.cols() != head.anchors.rows() || rec.cos_matrix.rows() != n)
        throw InvalidInputError("backprop_to_features: shape mismatch");

    Matrix g = dcos;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j)
            if (std::abs(rec.cos_matrix(i, j)) >= 1.0) g(i, j) = 0.0;

    Matrix normalized(n, features.cols());
    Vector norms(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        norms[i] = features.row(i).norm();
        if (!(norms[i] > 0.0))
            throw InvalidInputError("backprop_to_features: zero-norm feature row");
        normalized.row(i) = features.row(i) / norms[i];
    }

    FeatureGrads out;
    out.danchors = normalized.transpose() * g;
    const Matrix dnormalized = g * head.anchors.transpose(); // N x d
    out.dfeatures.resize(n, features.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        // (I - x^ x^T) / ||x|| projects out the radial component
        const double radial = dnormalized.row(i).dot(normalized.row(i));
        out.dfeatures.row(i) = (dnormalized.row(i) - radial * normalized.row(i)) / norms[i];
    }
    return out;
}

} // namespace ntol

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ntol/losses.hpp"

using namespace ntol;
using Catch::Approx;

namespace {

double rel_err(const Matrix& a, const Matrix& b) {
    const double scale = std::max({a.norm(), b.norm(), 1e-12});
    return (a - b).norm() / scale;
}

struct Case {
    Matrix features; // N x d
    ClassifierHead head;
    std::vector<int> labels;
    Vector weights;
    LossKind kind;
    double s = 16.0;
    WeightMethod method = WeightMethod::LossScale;
};

Case random_case(std::mt19937_64& rng, LossVariant variant, WeightMethod method,
                 double max_abs_cos = 0.99) {
    std::uniform_int_distribution<int> pick_n(1, 8), pick_c(2, 10), pick_d(3, 16);
    std::uniform_real_distribution<double> uni01(0.05, 1.0), pick_s(4.0, 40.0),
        pick_m(0.05, 0.7);
    std::normal_distribution<double> gauss(0.0, 1.0);
    while (true) {
        Case cs;
        const int n = pick_n(rng), c = pick_c(rng), d = pick_d(rng);
        cs.features.resize(n, d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) cs.features(i, j) = gauss(rng);
        cs.head = ClassifierHead::random(d, c, 32.0, rng);
        std::uniform_int_distribution<int> pick_label(0, c - 1);
        cs.labels.resize(n);
        for (int i = 0; i < n; ++i) cs.labels[i] = pick_label(rng);
        cs.weights.resize(n);
        for (int i = 0; i < n; ++i) cs.weights[i] = uni01(rng);
        cs.kind.variant = variant;
        cs.kind.margin = variant == LossVariant::ArcFace ? pick_m(rng) : 0.0;
        cs.s = pick_s(rng);
        cs.method = method;
        const auto rec = cosines(cs.features, cs.head, cs.labels);
        if (rec.cos_matrix.cwiseAbs().maxCoeff() < max_abs_cos) return cs;
    }
}

double loss_of_cos(Matrix cos, const std::vector<int>& labels, const LossKind& kind, double s,
                   const Vector& w, WeightMethod method) {
    LogitRecord rec;
    rec.cos_matrix = std::move(cos);
    rec.labels = labels;
    rec.target_cos.resize(rec.cos_matrix.rows());
    for (Eigen::Index i = 0; i < rec.cos_matrix.rows(); ++i)
        rec.target_cos[i] = rec.cos_matrix(i, labels[i]);
    return loss_and_grad(rec, kind, s, w, method).loss;
}

double loss_of_features(const Case& cs, const Matrix& features) {
    const auto rec = cosines(features, cs.head, cs.labels);
    return loss_and_grad(rec, cs.kind, cs.s, cs.weights, cs.method).loss;
}

double loss_of_anchors(const Case& cs, const Matrix& anchors) {
    ClassifierHead head = cs.head;
    head.anchors = anchors;
    const auto rec = cosines(cs.features, head, cs.labels);
    return loss_and_grad(rec, cs.kind, cs.s, cs.weights, cs.method).loss;
}

constexpr double kFdStep = 1e-5;

template <typename F>
Matrix central_diff(const Matrix& x, F&& f) {
    Matrix g(x.rows(), x.cols());
    Matrix xp = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            xp(i, j) = x(i, j) + kFdStep;
            const double up = f(xp);
            xp(i, j) = x(i, j) - kFdStep;
            const double dn = f(xp);
            xp(i, j) = x(i, j);
            g(i, j) = (up - dn) / (2.0 * kFdStep);
        }
    }
    return g;
}

} // namespace

TEST_CASE("cosines of normalized features against anchors") {
    std::mt19937_64 rng(1);
    ClassifierHead head = ClassifierHead::random(4, 3, 32.0, rng);

    SECTION("parallel and orthogonal features") {
        Matrix f(2, 4);
        f.row(0) = 2.5 * head.anchors.col(0).transpose(); // parallel to anchor 0
        // orthogonal to anchor 0 via one Gram-Schmidt step
        Eigen::VectorXd v(4);
        v << 1.0, -0.3, 0.8, 0.2;
        v -= v.dot(head.anchors.col(0)) * head.anchors.col(0);
        f.row(1) = v.transpose();
        const auto rec = cosines(f, head, {0, 0});
        CHECK(rec.cos_matrix(0, 0) == Approx(1.0).margin(1e-12));
        CHECK(rec.cos_matrix(1, 0) == Approx(0.0).margin(1e-12));
        CHECK(rec.target_cos[0] == rec.cos_matrix(0, 0));
    }

    SECTION("random case matches naive dot-product-over-norms") {
        Matrix f(3, 4);
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j) f(i, j) = gauss(rng);
        const auto rec = cosines(f, head, {2, 0, 1});
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                double dot = 0, nf = 0, na = 0;
                for (int k = 0; k < 4; ++k) {
                    dot += f(i, k) * head.anchors(k, j);
                    nf += f(i, k) * f(i, k);
                    na += head.anchors(k, j) * head.anchors(k, j);
                }
                const double naive = dot / (std::sqrt(nf) * std::sqrt(na));
                REQUIRE(rec.cos_matrix(i, j) == Approx(naive).epsilon(0).margin(1e-12));
            }
        }
    }

    SECTION("degenerate inputs") {
        Matrix f = Matrix::Zero(1, 4);
        CHECK_THROWS_AS(cosines(f, head, {0}), InvalidInputError);
        Matrix ok = Matrix::Ones(1, 4);
        CHECK_THROWS_AS(cosines(ok, head, {7}), InvalidInputError);
        CHECK_THROWS_AS(cosines(ok, head, {0, 1}), InvalidInputError);
    }
}

TEST_CASE("two-class symmetric logits") {
    LogitRecord rec;
    rec.cos_matrix.resize(1, 2);
    rec.cos_matrix << 0.3, 0.3;
    rec.labels = {0};
    rec.target_cos = Vector::Constant(1, 0.3);
    const double s = 8.0;
    const auto lg = loss_and_grad(rec, LossKind{LossVariant::L2Softmax, 0.0}, s,
                                  Vector::Ones(1), WeightMethod::LossScale);
    CHECK(lg.loss == Approx(std::log(2.0)).epsilon(0).margin(1e-14));
    CHECK(lg.dcos(0, 0) == Approx(-s / 2).epsilon(0).margin(1e-14));
    CHECK(lg.dcos(0, 1) == Approx(s / 2).epsilon(0).margin(1e-14));
}

TEST_CASE("gradient rows of p minus onehot sum to zero") {
    std::mt19937_64 rng(2);
    const Case cs = random_case(rng, LossVariant::L2Softmax, WeightMethod::LogitScale);
    const auto rec = cosines(cs.features, cs.head, cs.labels);
    const auto lg = loss_and_grad(rec, cs.kind, cs.s, cs.weights, cs.method);
    for (Eigen::Index i = 0; i < lg.dcos.rows(); ++i)
        CHECK(std::abs(lg.dcos.row(i).sum()) < 1e-12 * cs.s);
}

TEST_CASE("methods coincide at unit weights") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        const auto variant = rep % 2 == 0 ? LossVariant::L2Softmax : LossVariant::ArcFace;
        Case cs = random_case(rng, variant, WeightMethod::LossScale);
        cs.weights.setOnes();
        const auto rec = cosines(cs.features, cs.head, cs.labels);
        const auto m1 = loss_and_grad(rec, cs.kind, cs.s, cs.weights, WeightMethod::LossScale);
        const auto m2 = loss_and_grad(rec, cs.kind, cs.s, cs.weights, WeightMethod::LogitScale);
        REQUIRE(std::abs(m1.loss - m2.loss) < 1e-12);
        REQUIRE((m1.dcos - m2.dcos).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("arcface at zero margin reduces to plain scaled softmax") {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 20; ++rep) {
        Case cs = random_case(rng, LossVariant::ArcFace,
                              rep % 2 == 0 ? WeightMethod::LossScale : WeightMethod::LogitScale);
        cs.kind.margin = 0.0;
        const auto rec = cosines(cs.features, cs.head, cs.labels);
        const auto arc = loss_and_grad(rec, cs.kind, cs.s, cs.weights, cs.method);
        const auto plain = loss_and_grad(rec, LossKind{LossVariant::L2Softmax, 0.0}, cs.s,
                                         cs.weights, cs.method);
        REQUIRE(std::abs(arc.loss - plain.loss) < 1e-12);
        REQUIRE((arc.dcos - plain.dcos).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("analytic cosine gradients match central differences") {
    std::mt19937_64 rng(5);
    const LossVariant variants[] = {LossVariant::L2Softmax, LossVariant::ArcFace};
    const WeightMethod methods[] = {WeightMethod::LossScale, WeightMethod::LogitScale};
    int done = 0;
    for (int rep = 0; done < 16; ++rep) {
        const Case cs = random_case(rng, variants[rep % 2], methods[(rep / 2) % 2]);
        const auto rec = cosines(cs.features, cs.head, cs.labels);
        const auto lg = loss_and_grad(rec, cs.kind, cs.s, cs.weights, cs.method);
        const Matrix fd = central_diff(rec.cos_matrix, [&](const Matrix& c) {
            return loss_of_cos(c, cs.labels, cs.kind, cs.s, cs.weights, cs.method);
        });
        REQUIRE(rel_err(lg.dcos, fd) < 1e-6);
        ++done;
    }
}

TEST_CASE("feature and anchor gradients match central differences") {
    std::mt19937_64 rng(6);
    const LossVariant variants[] = {LossVariant::L2Softmax, LossVariant::ArcFace};
    const WeightMethod methods[] = {WeightMethod::LossScale, WeightMethod::LogitScale};
    for (int rep = 0; rep < 12; ++rep) {
        const Case cs = random_case(rng, variants[rep % 2], methods[(rep / 2) % 2]);
        const auto rec = cosines(cs.features, cs.head, cs.labels);
        const auto lg = loss_and_grad(rec, cs.kind, cs.s, cs.weights, cs.method);
        const auto fg = backprop_to_features(rec, lg.dcos, cs.head, cs.features);

        const Matrix fd_feat = central_diff(
            cs.features, [&](const Matrix& f) { return loss_of_features(cs, f); });
        REQUIRE(rel_err(fg.dfeatures, fd_feat) < 1e-6);

        const Matrix fd_anchor = central_diff(
            cs.head.anchors, [&](const Matrix& a) { return loss_of_anchors(cs, a); });
        REQUIRE(rel_err(fg.danchors, fd_anchor) < 1e-6);
    }
}

TEST_CASE("backprop through normalization") {
    std::mt19937_64 rng(7);
    ClassifierHead head = ClassifierHead::random(5, 4, 32.0, rng);

    SECTION("zero upstream gradient gives zero everywhere") {
        Matrix f = Matrix::Random(3, 5);
        const auto rec = cosines(f, head, {0, 1, 2});
        const auto fg = backprop_to_features(rec, Matrix::Zero(3, 4), head, f);
        CHECK(fg.dfeatures.norm() == 0.0);
        CHECK(fg.danchors.norm() == 0.0);
    }

    SECTION("feature gradient is orthogonal to the feature") {
        Matrix f = Matrix::Random(2, 5);
        const auto rec = cosines(f, head, {0, 1});
        Matrix g = Matrix::Zero(2, 4);
        g(0, 2) = 1.0;
        g(1, 0) = -0.5;
        const auto fg = backprop_to_features(rec, g, head, f);
        for (int i = 0; i < 2; ++i)
            CHECK(std::abs(fg.dfeatures.row(i).dot(f.row(i))) < 1e-12);
    }

    SECTION("aligned feature and anchor give a vanishing feature gradient") {
        Matrix f(1, 5);
        f.row(0) = 3.0 * head.anchors.col(1).transpose();
        const auto rec = cosines(f, head, {1});
        Matrix g = Matrix::Zero(1, 4);
        g(0, 1) = 1.0;
        const auto fg = backprop_to_features(rec, g, head, f);
        CHECK(fg.dfeatures.norm() < 1e-12);
    }
}

TEST_CASE("loss scaling behavior in the sample weight") {
    LogitRecord rec;
    rec.cos_matrix.resize(1, 3);
    rec.cos_matrix << 0.8, 0.2, -0.1; // correct prediction, target strictly largest
    rec.labels = {0};
    rec.target_cos = Vector::Constant(1, 0.8);
    const LossKind kind{LossVariant::L2Softmax, 0.0};

    double prev_m2 = 1e9;
    for (double w : {0.2, 0.5, 0.9, 1.3}) {
        const Vector wv = Vector::Constant(1, w);
        const auto m1 = loss_and_grad(rec, kind, 16.0, wv, WeightMethod::LossScale);
        const auto m2 = loss_and_grad(rec, kind, 16.0, wv, WeightMethod::LogitScale);
        // method 1 is linear in the weight
        const auto base = loss_and_grad(rec, kind, 16.0, Vector::Ones(1), WeightMethod::LossScale);
        CHECK(m1.loss == Approx(w * base.loss).epsilon(1e-12));
        // method 2 strictly decreases for a correct prediction
        CHECK(m2.loss < prev_m2);
        prev_m2 = m2.loss;
    }

    SECTION("zero weight drops the sample under loss scaling") {
        const auto lg = loss_and_grad(rec, kind, 16.0, Vector::Zero(1), WeightMethod::LossScale);
        CHECK(lg.loss == 0.0);
        CHECK(lg.dcos.norm() == 0.0);
    }

    SECTION("invalid weights are rejected") {
        CHECK_THROWS_AS(
            loss_and_grad(rec, kind, 16.0, Vector::Constant(1, -0.1), WeightMethod::LossScale),
            InvalidInputError);
        CHECK_THROWS_AS(loss_and_grad(rec, kind, 16.0,
                                      Vector::Constant(1, std::nan("")), WeightMethod::LossScale),
                        InvalidInputError);
    }
}

TEST_CASE("non-finite logits are detected") {
    LogitRecord rec;
    rec.cos_matrix.resize(1, 2);
    rec.cos_matrix << std::numeric_limits<double>::infinity(), 0.0;
    rec.labels = {0};
    rec.target_cos = Vector::Constant(1, 1.0);
    CHECK_THROWS_AS(loss_and_grad(rec, LossKind{LossVariant::L2Softmax, 0.0}, 16.0,
                                  Vector::Ones(1), WeightMethod::LossScale),
                    NumericError);
}

TEST_CASE("anchor renormalization is idempotent") {
    std::mt19937_64 rng(8);
    ClassifierHead head = ClassifierHead::random(6, 5, 32.0, rng);
    head.anchors *= 3.7;
    head.renormalize();
    const Matrix once = head.anchors;
    head.renormalize();
    CHECK((head.anchors - once).cwiseAbs().maxCoeff() < 1e-15);
    for (int j = 0; j < 5; ++j) CHECK(head.anchors.col(j).norm() == Approx(1.0).margin(1e-12));
}

// Small dense embedding network with exact analytic gradients, plus SGD with
// momentum, weight decay and a stepped learning-rate schedule, and a binary
// checkpoint format with exact round-tripping.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ntol/errors.hpp"
#include "ntol/losses.hpp"

namespace ntol {

enum class Activation : std::uint8_t { Relu = 0, Identity = 1 };

struct DenseLayer {
    Matrix weight; // out x in
    Vector bias;   // out
    Activation act = Activation::Identity;
};

struct EmbedNet {
    std::vector<DenseLayer> layers;

    int input_dim() const { return static_cast<int>(layers.front().weight.cols()); }
    int output_dim() const { return static_cast<int>(layers.back().weight.rows()); }

    std::vector<int> dims() const {
        std::vector<int> d{input_dim()};
        for (const auto& l : layers) d.push_back(static_cast<int>(l.weight.rows()));
        return d;
    }

    // dims = [D, h1, ..., d]; relu on hidden layers, identity on the last.
    // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    static EmbedNet init(const std::vector<int>& dims, std::mt19937_64& rng) {
        if (dims.size() < 2) throw ConfigError("model: need at least input and output dims");
        EmbedNet net;
        for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
            const int in = dims[k], out = dims[k + 1];
            if (in <= 0 || out <= 0) throw ConfigError("model: dims must be positive");
            DenseLayer layer;
            const double bound = 1.0 / std::sqrt(static_cast<double>(in));
            std::uniform_real_distribution<double> uni(-bound, bound);
            layer.weight.resize(out, in);
            for (Eigen::Index j = 0; j < in; ++j)
                for (Eigen::Index i = 0; i < out; ++i) layer.weight(i, j) = uni(rng);
            layer.bias = Vector::Zero(out);
            layer.act = (k + 2 < dims.size()) ? Activation::Relu : Activation::Identity;
            net.layers.push_back(std::move(layer));
        }
        return net;
    }
};

struct ForwardCache {
    Matrix input;                   // N x D
    std::vector<Matrix> pre;        // pre-activation per layer, N x out
    std::vector<Matrix> activated;  // post-activation per layer, N x out
};

inline Matrix forward(const EmbedNet& net, const Matrix& batch, ForwardCache* cache = nullptr) {
    Matrix cur = batch;
    if (cache) {
        cache->input = batch;
        cache->pre.clear();
        cache->activated.clear();
    }
    for (const auto& layer : net.layers) {
        Matrix pre = cur * layer.weight.transpose();
        pre.rowwise() += layer.bias.transpose();
        if (layer.act == Activation::Relu)
            cur = pre.cwiseMax(0.0);
        else
            cur = pre;
        if (cache) {
            cache->pre.push_back(std::move(pre));
            cache->activated.push_back(cur);
        }
    }
    if (!cur.allFinite()) throw NumericError("forward: non-finite activations");
    return cur;
}

struct NetGrads {
    std::vector<Matrix> dweight;
    std::vector<Vector> dbias;
};

// Exact chain rule; relu uses subgradient 0 at exactly 0.
inline NetGrads backward(const EmbedNet& net, const ForwardCache& cache,
                         const Matrix& dembeddings) {
    const std::size_t nl = net.layers.size();
    NetGrads grads;
    grads.dweight.resize(nl);
    grads.dbias.resize(nl);
    Matrix delta = dembeddings;
    for (std::size_t k = nl; k-- > 0;) {
        const auto& layer = net.layers[k];
        if (layer.act == Activation::Relu)
            delta = (cache.pre[k].array() > 0.0).cast<double>() * delta.array();
        const Matrix& in = (k == 0) ? cache.input : cache.activated[k - 1];
        grads.dweight[k] = delta.transpose() * in;
        grads.dbias[k] = delta.colwise().sum();
        if (k > 0) delta = delta * layer.weight;
    }
    return grads;
}

struct SgdConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-5;
    std::vector<std::pair<long, double>> lr_milestones = {{8000, 10.0}, {16000, 10.0}};
    long total_iters = 20000;
    int batch_size = 64;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("optimizer: lr must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw ConfigError("optimizer: momentum must be in [0,1)");
        if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
        if (total_iters <= 0) throw ConfigError("optimizer: total_iters must be > 0");
        if (batch_size <= 0) throw ConfigError("optimizer: batch_size must be > 0");
        for (const auto& [it, div] : lr_milestones)
            if (it < 0 || !(div > 0.0)) throw ConfigError("optimizer: bad lr milestone");
    }

    double lr_at(long iter) const {
        double v = lr;
        for (const auto& [milestone, divisor] : lr_milestones)
            if (iter >= milestone) v /= divisor;
        return v;
    }
};

// v <- momentum*v + grad + wd*param; param <- param - lr*v
inline void sgd_update(Matrix& param, const Matrix& grad, Matrix& vel, double lr,
                       double momentum, double weight_decay) {
    vel = momentum * vel + grad + weight_decay * param;
    param -= lr * vel;
}

// Momentum state for every trainable tensor (net layers + anchors). The
// anchors are renormalized to unit columns after each step.
struct SgdOptimizer {
    SgdConfig cfg;
    std::vector<Matrix> vel_weight;
    std::vector<Matrix> vel_bias; // stored as 1 x out matrices
    Matrix vel_anchors;

    SgdOptimizer() = default;
    SgdOptimizer(const EmbedNet& net, const ClassifierHead& head, SgdConfig config)
        : cfg(std::move(config)) {
        for (const auto& layer : net.layers) {
            vel_weight.push_back(Matrix::Zero(layer.weight.rows(), layer.weight.cols()));
            vel_bias.push_back(Matrix::Zero(1, layer.bias.size()));
        }
        vel_anchors = Matrix::Zero(head.anchors.rows(), head.anchors.cols());
    }

    void step(EmbedNet& net, ClassifierHead& head, const NetGrads& grads,
              const Matrix& danchors, long iter) {
        const double lr = cfg.lr_at(iter);
        for (std::size_t k = 0; k < net.layers.size(); ++k) {
            sgd_update(net.layers[k].weight, grads.dweight[k], vel_weight[k], lr, cfg.momentum,
                       cfg.weight_decay);
            Matrix b = net.layers[k].bias.transpose();
            const Matrix db = grads.dbias[k].transpose();
            sgd_update(b, db, vel_bias[k], lr, cfg.momentum, cfg.weight_decay);
            net.layers[k].bias = b.transpose();
        }
        sgd_update(head.anchors, danchors, vel_anchors, lr, cfg.momentum, cfg.weight_decay);
        head.renormalize();
    }
};

// ---- checkpoint io ----------------------------------------------------
//
// Little-endian binary: magic, version, iteration, head, layers, momentum
// state. save -> load -> save is byte-identical.

namespace detail {

inline constexpr char kCkptMagic[8] = {'N', 'T', 'O', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_matrix(std::ostream& os, const Matrix& m) {
    put_u32(os, static_cast<std::uint32_t>(m.rows()));
    put_u32(os, static_cast<std::uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
inline double get_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
inline Matrix get_matrix(std::istream& is) {
    const auto rows = get_u32(is);
    const auto cols = get_u32(is);
    Matrix m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
    return m;
}

} // namespace detail

struct Checkpoint {
    EmbedNet net;
    ClassifierHead head;
    SgdOptimizer optimizer; // velocities only; cfg must be re-supplied
    long iteration = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, const EmbedNet& net,
                            const ClassifierHead& head, const SgdOptimizer& opt,
                            long iteration) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    os.write(detail::kCkptMagic, sizeof detail::kCkptMagic);
    detail::put_u32(os, detail::kCkptVersion);
    detail::put_u64(os, static_cast<std::uint64_t>(iteration));
    detail::put_f64(os, head.scale);
    detail::put_matrix(os, head.anchors);
    detail::put_u32(os, static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& layer : net.layers) {
        detail::put_u32(os, static_cast<std::uint32_t>(layer.act));
        detail::put_matrix(os, layer.weight);
        detail::put_matrix(os, Matrix(layer.bias.transpose()));
    }
    detail::put_matrix(os, opt.vel_anchors);
    for (std::size_t k = 0; k < opt.vel_weight.size(); ++k) {
        detail::put_matrix(os, opt.vel_weight[k]);
        detail::put_matrix(os, opt.vel_bias[k]);
    }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || !std::equal(magic, magic + 8, detail::kCkptMagic))
        throw ParseError("not a checkpoint file: " + path.string());
    if (detail::get_u32(is) != detail::kCkptVersion)
        throw ParseError("unsupported checkpoint version in " + path.string());

    Checkpoint ck;
    ck.iteration = static_cast<long>(detail::get_u64(is));
    ck.head.scale = detail::get_f64(is);
    ck.head.anchors = detail::get_matrix(is);
    const auto nl = detail::get_u32(is);
    for (std::uint32_t k = 0; k < nl; ++k) {
        DenseLayer layer;
        layer.act = static_cast<Activation>(detail::get_u32(is));
        layer.weight = detail::get_matrix(is);
        layer.bias = detail::get_matrix(is).row(0).transpose();
        ck.net.layers.push_back(std::move(layer));
    }
    ck.optimizer.vel_anchors = detail::get_matrix(is);
    for (std::uint32_t k = 0; k < nl; ++k) {
        ck.optimizer.vel_weight.push_back(detail::get_matrix(is));
        ck.optimizer.vel_bias.push_back(detail::get_matrix(is));
    }
    if (!is) throw ParseError("truncated checkpoint: " + path.string());
    return ck;
}

} // namespace ntol

#pragma once

// Layer stack with BatchNorm running-statistics tracking, model assembly
// and forward modes. SynthEval normalizes with the recorded running
// stats while harvesting the batch moments for the synthesis loss.

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "bninvert/tensor.hpp"

namespace bninvert {

enum class ForwardMode { Train, Eval, SynthEval };

enum class LayerKind : std::uint8_t {
    Conv = 1,
    Linear = 2,
    BatchNorm = 3,
    ReLU = 4,
    MaxPool = 5,
    GlobalAvgPool = 6,
    Residual = 7,
};

template <class T>
struct LayerT {
    LayerKind kind;

    // Conv / Linear
    TensorT<T> weight;
    TensorT<T> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;

    // BatchNorm
    TensorT<T> gamma;
    TensorT<T> beta;
    TensorT<T> running_mean;
    TensorT<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    // MaxPool
    std::size_t pool_size = 2;

    // Residual: body layers applied around an identity shortcut
    std::vector<LayerT<T>> sub;
};

template <class T>
struct ModelT {
    std::vector<LayerT<T>> layers;
    std::array<std::size_t, 3> input_dims{};  // C_img, H, W
    std::size_t class_count = 0;

    std::size_t num_bn_layers() const {
        std::size_t n = 0;
        count_bn(layers, n);
        return n;
    }

private:
    static void count_bn(const std::vector<LayerT<T>>& ls, std::size_t& n) {
        for (const auto& l : ls) {
            if (l.kind == LayerKind::BatchNorm) ++n;
            if (l.kind == LayerKind::Residual) count_bn(l.sub, n);
        }
    }
};

using Layer = LayerT<float>;
using Model = ModelT<float>;

// Per-BN-layer running statistics, deep-copied in layer order.
template <class T>
struct BNStatsSnapshotT {
    std::vector<std::vector<T>> mean;
    std::vector<std::vector<T>> var;
    std::size_t layer_count() const { return mean.size(); }
};

using BNStatsSnapshot = BNStatsSnapshotT<float>;

// ---------------------------------------------------------------------------
// Layer constructors
// ---------------------------------------------------------------------------

template <class T>
LayerT<T> make_conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
                    std::size_t stride, std::size_t padding, std::uint64_t seed) {
    LayerT<T> l;
    l.kind = LayerKind::Conv;
    const T std_dev = std::sqrt(T(2) / static_cast<T>(in_ch * kernel * kernel));
    l.weight = randn<T>({out_ch, in_ch, kernel, kernel}, T(0), std_dev, seed);
    l.bias = TensorT<T>::zeros({out_ch});
    l.stride = stride;
    l.padding = padding;
    return l;
}

template <class T>
LayerT<T> make_linear(std::size_t in_features, std::size_t out_features, std::uint64_t seed) {
    LayerT<T> l;
    l.kind = LayerKind::Linear;
    const T std_dev = std::sqrt(T(2) / static_cast<T>(in_features));
    l.weight = randn<T>({out_features, in_features}, T(0), std_dev, seed);
    l.bias = TensorT<T>::zeros({out_features});
    return l;
}

template <class T>
LayerT<T> make_batchnorm(std::size_t channels, T momentum = T(0.1), T eps = T(1e-5)) {
    LayerT<T> l;
    l.kind = LayerKind::BatchNorm;
    l.gamma = TensorT<T>::full({channels}, T(1));
    l.beta = TensorT<T>::zeros({channels});
    l.running_mean = TensorT<T>::zeros({channels});
    l.running_var = TensorT<T>::full({channels}, T(1));
    l.momentum = momentum;
    l.eps = eps;
    return l;
}

template <class T>
LayerT<T> make_relu() {
    LayerT<T> l;
    l.kind = LayerKind::ReLU;
    return l;
}

template <class T>
LayerT<T> make_maxpool(std::size_t size) {
    LayerT<T> l;
    l.kind = LayerKind::MaxPool;
    l.pool_size = size;
    return l;
}

template <class T>
LayerT<T> make_gap() {
    LayerT<T> l;
    l.kind = LayerKind::GlobalAvgPool;
    return l;
}

template <class T>
LayerT<T> make_residual(std::vector<LayerT<T>> body) {
    LayerT<T> l;
    l.kind = LayerKind::Residual;
    l.sub = std::move(body);
    return l;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// BatchNorm forward. Train normalizes by batch moments and updates the
// running EMA: running <- (1 - momentum) * running + momentum * batch.
// Eval normalizes by the running stats. SynthEval does the same but also
// appends this layer's batch moments to bn_stats for the synthesis loss.
template <class T>
TensorT<T> bn_forward(GraphT<T>* g, LayerT<T>& layer, const TensorT<T>& x, ForwardMode mode,
                      std::vector<std::pair<TensorT<T>, TensorT<T>>>* bn_stats = nullptr) {
    if (x.shape().size() < 2 || x.shape()[1] != layer.gamma.shape()[0])
        throw std::invalid_argument("bn_forward: input " + shape_str(x.shape()) +
                                    " does not match " + std::to_string(layer.gamma.size()) +
                                    " channels");
    TensorT<T> mean_t, var_t;
    if (mode == ForwardMode::Train) {
        auto [bm, bv] = batch_moments(g, x);
        mean_t = bm;
        var_t = bv;
        const T m = layer.momentum;
        for (std::size_t c = 0; c < layer.running_mean.size(); ++c) {
            layer.running_mean.data()[c] =
                (T(1) - m) * layer.running_mean.data()[c] + m * bm.data()[c];
            layer.running_var.data()[c] =
                (T(1) - m) * layer.running_var.data()[c] + m * bv.data()[c];
        }
    } else {
        mean_t = layer.running_mean;
        var_t = layer.running_var;
        if (mode == ForwardMode::SynthEval && bn_stats) {
            bn_stats->push_back(batch_moments(g, x));
        }
    }
    auto denom = sqrt_op(g, add_scalar(g, var_t, layer.eps));
    auto xhat = div_cw(g, sub_cw(g, x, mean_t), denom);
    return add_cw(g, mul_cw(g, xhat, layer.gamma), layer.beta);
}

template <class T>
TensorT<T> layer_forward(GraphT<T>* g, LayerT<T>& layer, const TensorT<T>& x, ForwardMode mode,
                         std::vector<std::pair<TensorT<T>, TensorT<T>>>* bn_stats) {
    switch (layer.kind) {
        case LayerKind::Conv:
            return conv2d(g, x, layer.weight, layer.bias, layer.stride, layer.padding);
        case LayerKind::Linear: {
            if (x.shape().size() != 2)
                throw std::invalid_argument("linear: input must be [N, F], got " +
                                            shape_str(x.shape()));
            auto y = matmul(g, x, layer.weight, /*transpose_b=*/true);
            return add_cw(g, y, layer.bias);
        }
        case LayerKind::BatchNorm:
            return bn_forward(g, layer, x, mode, bn_stats);
        case LayerKind::ReLU:
            return relu(g, x);
        case LayerKind::MaxPool:
            return max_pool2d(g, x, layer.pool_size);
        case LayerKind::GlobalAvgPool:
            return global_avg_pool(g, x);
        case LayerKind::Residual: {
            TensorT<T> y = x;
            for (auto& l : layer.sub) y = layer_forward(g, l, y, mode, bn_stats);
            return relu(g, add(g, y, x));
        }
    }
    throw std::runtime_error("layer_forward: unknown layer kind");
}

// Runs the stack. In SynthEval mode, bn_stats (when given) receives one
// (mean, var) pair per BatchNorm layer, in layer order.
template <class T>
TensorT<T> model_forward(ModelT<T>& model, const TensorT<T>& x, ForwardMode mode,
                         GraphT<T>* g = nullptr,
                         std::vector<std::pair<TensorT<T>, TensorT<T>>>* bn_stats = nullptr) {
    if (x.shape().size() != 4 || x.shape()[1] != model.input_dims[0] ||
        x.shape()[2] != model.input_dims[1] || x.shape()[3] != model.input_dims[2])
        throw std::invalid_argument(
            "model_forward: input " + shape_str(x.shape()) + " does not match model dims [N," +
            std::to_string(model.input_dims[0]) + "," + std::to_string(model.input_dims[1]) +
            "," + std::to_string(model.input_dims[2]) + "]");
    TensorT<T> y = x;
    for (auto& l : model.layers) y = layer_forward(g, l, y, mode, bn_stats);
    if (y.shape().size() != 2 || y.shape()[1] != model.class_count)
        throw std::invalid_argument("model_forward: logits " + shape_str(y.shape()) +
                                    " do not match class count " +
                                    std::to_string(model.class_count));
    return y;
}

// ---------------------------------------------------------------------------
// Parameter access
// ---------------------------------------------------------------------------

template <class T>
void collect_parameters(std::vector<LayerT<T>>& layers, std::vector<TensorT<T>>& out) {
    for (auto& l : layers) {
        switch (l.kind) {
            case LayerKind::Conv:
            case LayerKind::Linear:
                out.push_back(l.weight);
                out.push_back(l.bias);
                break;
            case LayerKind::BatchNorm:
                out.push_back(l.gamma);
                out.push_back(l.beta);
                break;
            case LayerKind::Residual:
                collect_parameters(l.sub, out);
                break;
            default:
                break;
        }
    }
}

// Trainable parameters in a fixed, layer-order traversal. Running stats
// are not parameters.
template <class T>
std::vector<TensorT<T>> parameters(ModelT<T>& model) {
    std::vector<TensorT<T>> out;
    collect_parameters(model.layers, out);
    return out;
}

template <class T>
void set_parameter_grads(ModelT<T>& model, bool enabled) {
    for (auto& p : parameters(model)) p.set_requires_grad(enabled);
}

template <class T>
void zero_parameter_grads(ModelT<T>& model) {
    for (auto& p : parameters(model)) p.zero_grad();
}

// ---------------------------------------------------------------------------
// BN statistics snapshot
// ---------------------------------------------------------------------------

template <class T>
void collect_bn_stats(const std::vector<LayerT<T>>& layers, BNStatsSnapshotT<T>& snap) {
    for (const auto& l : layers) {
        if (l.kind == LayerKind::BatchNorm) {
            snap.mean.push_back(l.running_mean.data());
            snap.var.push_back(l.running_var.data());
        }
        if (l.kind == LayerKind::Residual) collect_bn_stats(l.sub, snap);
    }
}

template <class T>
BNStatsSnapshotT<T> record_bn_stats(const ModelT<T>& model) {
    BNStatsSnapshotT<T> snap;
    collect_bn_stats(model.layers, snap);
    if (snap.mean.empty())
        throw std::invalid_argument("record_bn_stats: model has no BatchNorm layers");
    return snap;
}

// ---------------------------------------------------------------------------
// Reference architecture: 6-BN-layer residual CNN
// ---------------------------------------------------------------------------

// conv-BN-ReLU stem, pool, two identity-shortcut residual blocks (2 BN
// each), pool, global average pool, feature BN, linear head.
template <class T>
ModelT<T> make_tiny_resnet(std::array<std::size_t, 3> input_dims, std::size_t class_count,
                           std::uint64_t seed, std::size_t width = 16) {
    if (class_count == 0) throw std::invalid_argument("make_tiny_resnet: class_count == 0");
    if (input_dims[1] % 4 != 0 || input_dims[2] % 4 != 0)
        throw std::invalid_argument("make_tiny_resnet: spatial dims must be divisible by 4");
    ModelT<T> m;
    m.input_dims = input_dims;
    m.class_count = class_count;
    std::uint64_t t = 0;
    auto next_seed = [&] { return rng::derive(seed, t++); };

    m.layers.push_back(make_conv<T>(input_dims[0], width, 3, 1, 1, next_seed()));
    m.layers.push_back(make_batchnorm<T>(width));
    m.layers.push_back(make_relu<T>());
    m.layers.push_back(make_maxpool<T>(2));
    for (int block = 0; block < 2; ++block) {
        std::vector<LayerT<T>> body;
        body.push_back(make_conv<T>(width, width, 3, 1, 1, next_seed()));
        body.push_back(make_batchnorm<T>(width));
        body.push_back(make_relu<T>());
        body.push_back(make_conv<T>(width, width, 3, 1, 1, next_seed()));
        body.push_back(make_batchnorm<T>(width));
        m.layers.push_back(make_residual<T>(std::move(body)));
        if (block == 0) m.layers.push_back(make_maxpool<T>(2));
    }
    m.layers.push_back(make_gap<T>());
    m.layers.push_back(make_batchnorm<T>(width));
    m.layers.push_back(make_linear<T>(width, class_count, next_seed()));
    return m;
}

}  // namespace bninvert

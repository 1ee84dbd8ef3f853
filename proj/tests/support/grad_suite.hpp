#pragma once

// Finite-difference gradient suite covering every differentiable
// primitive plus the full synthesis loss on a toy BN network. Shared by
// the unit tests and the acceptance runner.

#include <string>
#include <utility>
#include <vector>

#include "bninvert/layers.hpp"
#include "bninvert/synthesis.hpp"
#include "grad_check.hpp"

namespace testsupport {

namespace bn = bninvert;

// Worst relative error per primitive over `cases` random instances.
inline std::vector<std::pair<std::string, double>> primitive_grad_suite(int cases) {
    std::vector<std::pair<std::string, double>> results;
    auto record = [&](const std::string& name, double err) {
        for (auto& [n, e] : results)
            if (n == name) {
                e = std::max(e, err);
                return;
            }
        results.emplace_back(name, err);
    };

    for (int cs = 0; cs < cases; ++cs) {
        const std::uint64_t s = bn::rng::derive(0xfeedULL, static_cast<std::uint64_t>(cs));
        auto sd = [&](std::uint64_t k) { return bn::rng::derive(s, k); };

        {
            auto a = rand_tensor({2, 3}, sd(1));
            auto b = rand_tensor({2, 3}, sd(2));
            record("add", max_grad_rel_error({a, b}, [&](DGraph* g) {
                       return weighted_sum(g, bn::add(g, a, b), sd(3));
                   }));
            record("sub", max_grad_rel_error({a, b}, [&](DGraph* g) {
                       return weighted_sum(g, bn::sub(g, a, b), sd(4));
                   }));
            record("mul", max_grad_rel_error({a, b}, [&](DGraph* g) {
                       return weighted_sum(g, bn::mul(g, a, b), sd(5));
                   }));
            const double c = 2.0 * bn::rng::uniform01(sd(6), 0) - 1.0;
            record("scale", max_grad_rel_error({a}, [&](DGraph* g) {
                       return weighted_sum(g, bn::scale(g, a, c), sd(7));
                   }));
            record("add_scalar", max_grad_rel_error({a}, [&](DGraph* g) {
                       return weighted_sum(g, bn::add_scalar(g, a, c), sd(8));
                   }));
            record("square", max_grad_rel_error({a}, [&](DGraph* g) {
                       return weighted_sum(g, bn::square(g, a), sd(9));
                   }));
            record("reshape", max_grad_rel_error({a}, [&](DGraph* g) {
                       return weighted_sum(g, bn::reshape(g, a, {3, 2}), sd(10));
                   }));
            record("sum", max_grad_rel_error({a}, [&](DGraph* g) { return bn::sum(g, a); }));
            record("mean", max_grad_rel_error({a}, [&](DGraph* g) { return bn::mean(g, a); }));
        }
        {
            auto a = rand_tensor({2, 4}, sd(11), 0.5, 1.0);  // in [0.5, 1.5]
            record("sqrt", max_grad_rel_error({a}, [&](DGraph* g) {
                       return weighted_sum(g, bn::sqrt_op(g, a), sd(12));
                   }));
        }
        {
            // keep inputs away from the ReLU kink
            auto a = rand_tensor({3, 3}, sd(13));
            for (auto& v : a.data()) v += (v >= 0 ? 0.1 : -0.1);
            record("relu", max_grad_rel_error({a}, [&](DGraph* g) {
                       return weighted_sum(g, bn::relu(g, a), sd(14));
                   }));
        }
        {
            auto x = rand_tensor({2, 3, 2, 2}, sd(15));
            auto v = rand_tensor({3}, sd(16));
            auto vpos = rand_tensor({3}, sd(17), 0.5, 1.0);
            record("add_cw", max_grad_rel_error({x, v}, [&](DGraph* g) {
                       return weighted_sum(g, bn::add_cw(g, x, v), sd(18));
                   }));
            record("sub_cw", max_grad_rel_error({x, v}, [&](DGraph* g) {
                       return weighted_sum(g, bn::sub_cw(g, x, v), sd(19));
                   }));
            record("mul_cw", max_grad_rel_error({x, v}, [&](DGraph* g) {
                       return weighted_sum(g, bn::mul_cw(g, x, v), sd(20));
                   }));
            record("div_cw", max_grad_rel_error({x, vpos}, [&](DGraph* g) {
                       return weighted_sum(g, bn::div_cw(g, x, vpos), sd(21));
                   }));
            record("batch_moments", max_grad_rel_error({x}, [&](DGraph* g) {
                       auto [m, v2] = bn::batch_moments(g, x);
                       return bn::add(g, weighted_sum(g, m, sd(22)),
                                      weighted_sum(g, v2, sd(23)));
                   }));
            record("global_avg_pool", max_grad_rel_error({x}, [&](DGraph* g) {
                       return weighted_sum(g, bn::global_avg_pool(g, x), sd(24));
                   }));
        }
        {
            auto a = rand_tensor({3, 4}, sd(25));
            auto b = rand_tensor({4, 2}, sd(26));
            auto bt = rand_tensor({2, 4}, sd(27));
            record("matmul", max_grad_rel_error({a, b}, [&](DGraph* g) {
                       return weighted_sum(g, bn::matmul(g, a, b), sd(28));
                   }));
            record("matmul_t", max_grad_rel_error({a, bt}, [&](DGraph* g) {
                       return weighted_sum(g, bn::matmul(g, a, bt, true), sd(29));
                   }));
        }
        {
            const std::size_t stride = 1 + cs % 2, pad = cs % 2;
            auto x = rand_tensor({2, 2, 5, 5}, sd(30));
            auto w = rand_tensor({3, 2, 3, 3}, sd(31));
            auto b = rand_tensor({3}, sd(32));
            record("conv2d", max_grad_rel_error({x, w, b}, [&](DGraph* g) {
                       return weighted_sum(g, bn::conv2d(g, x, w, b, stride, pad), sd(33));
                   }));
        }
        {
            auto x = rand_tensor({2, 2, 4, 4}, sd(34));
            record("max_pool2d", max_grad_rel_error({x}, [&](DGraph* g) {
                       return weighted_sum(g, bn::max_pool2d(g, x, 2), sd(35));
                   }));
        }
        {
            auto x = rand_tensor({3, 4}, sd(36), 2.0);
            std::vector<std::size_t> labels(3);
            for (std::size_t i = 0; i < 3; ++i) labels[i] = bn::rng::below(sd(37), i, 4);
            record("log_softmax", max_grad_rel_error({x}, [&](DGraph* g) {
                       return weighted_sum(g, bn::log_softmax(g, x), sd(38));
                   }));
            record("gather_rows", max_grad_rel_error({x}, [&](DGraph* g) {
                       return weighted_sum(g, bn::gather_rows(g, x, labels), sd(39));
                   }));
            record("cross_entropy", max_grad_rel_error({x}, [&](DGraph* g) {
                       return bn::cross_entropy(g, x, labels);
                   }));
        }
    }
    return results;
}

// Toy BN network for end-to-end synthesis-loss gradient checks.
inline bn::ModelT<double> make_toy_bn_net(std::uint64_t seed, std::size_t bn_layers = 1) {
    bn::ModelT<double> m;
    m.input_dims = {1, 4, 4};
    m.class_count = 3;
    m.layers.push_back(bn::make_conv<double>(1, 2, 3, 1, 1, bn::rng::derive(seed, 0)));
    m.layers.push_back(bn::make_batchnorm<double>(2));
    m.layers.push_back(bn::make_relu<double>());
    if (bn_layers > 1) {
        m.layers.push_back(bn::make_conv<double>(2, 2, 3, 1, 1, bn::rng::derive(seed, 1)));
        m.layers.push_back(bn::make_batchnorm<double>(2));
        m.layers.push_back(bn::make_relu<double>());
    }
    m.layers.push_back(bn::make_gap<double>());
    m.layers.push_back(bn::make_linear<double>(2, 3, bn::rng::derive(seed, 2)));
    return m;
}

inline bn::BNStatsSnapshotT<double> random_snapshot(const bn::ModelT<double>& m,
                                                    std::uint64_t seed) {
    auto snap = bn::record_bn_stats(m);
    for (std::size_t i = 0; i < snap.mean.size(); ++i)
        for (std::size_t c = 0; c < snap.mean[i].size(); ++c) {
            snap.mean[i][c] = bn::rng::uniform01(bn::rng::derive(seed, 2 * i), c) - 0.5;
            snap.var[i][c] = 0.5 + bn::rng::uniform01(bn::rng::derive(seed, 2 * i + 1), c);
        }
    return snap;
}

// d(total)/d(x_r) of the full synthesis loss vs central differences.
inline double synthesis_loss_grad_worst(int cases, std::size_t bn_layers) {
    double worst = 0;
    for (int cs = 0; cs < cases; ++cs) {
        const std::uint64_t s = bn::rng::derive(0xabcdULL, static_cast<std::uint64_t>(cs));
        auto model = make_toy_bn_net(bn::rng::derive(s, 0), bn_layers);
        auto snap = random_snapshot(model, bn::rng::derive(s, 1));
        auto x = rand_tensor({4, 1, 4, 4}, bn::rng::derive(s, 2));
        std::vector<std::size_t> labels = {0, 1, 2, 0};
        auto make_loss = [&](DGraph* g) {
            std::vector<std::pair<DTensor, DTensor>> stats;
            auto logits = bn::model_forward(model, x, bn::ForwardMode::SynthEval, g, &stats);
            auto [total, bd] = bn::synthesis_loss(g, stats, snap, logits, labels);
            return total;
        };
        worst = std::max(worst, max_grad_rel_error({x}, make_loss));
    }
    return worst;
}

}  // namespace testsupport

#pragma once

// Central finite-difference gradient checking, run in double precision.
// The loss builder is invoked with a fresh graph for the analytic pass
// and with nullptr for the perturbed evaluations, so the same closure
// serves both paths.

#include <cmath>
#include <functional>
#include <vector>

#include "bninvert/tensor.hpp"

namespace testsupport {

using DTensor = bninvert::TensorT<double>;
using DGraph = bninvert::GraphT<double>;

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

// Returns the worst relative error between analytic and central-difference
// gradients over every element of every leaf.
template <class F>
double max_grad_rel_error(std::vector<DTensor> leaves, F&& make_loss, double h = 1e-4) {
    for (auto& l : leaves) l.zero_grad();
    DGraph g;
    auto loss = make_loss(&g);
    g.backward(loss);

    double worst = 0;
    for (auto& leaf : leaves) {
        const std::vector<double> analytic = leaf.grad();
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            const double orig = leaf.data()[i];
            leaf.data()[i] = orig + h;
            const double fp = make_loss(static_cast<DGraph*>(nullptr)).item();
            leaf.data()[i] = orig - h;
            const double fm = make_loss(static_cast<DGraph*>(nullptr)).item();
            leaf.data()[i] = orig;
            const double fd = (fp - fm) / (2 * h);
            worst = std::max(worst, rel_err(analytic[i], fd));
        }
    }
    return worst;
}

// Random double tensor with entries in roughly [-1, 1].
inline DTensor rand_tensor(bninvert::Shape shape, std::uint64_t seed, double scale = 1.0,
                           double offset = 0.0, bool requires_grad = true) {
    auto t = DTensor::zeros(std::move(shape), requires_grad);
    for (std::size_t i = 0; i < t.size(); ++i)
        t.data()[i] = offset + scale * (2.0 * bninvert::rng::uniform01(seed, i) - 1.0);
    return t;
}

// Contract a tensor to a scalar with fixed random weights, so per-op
// gradient checks exercise every output element.
inline DTensor weighted_sum(DGraph* g, const DTensor& t, std::uint64_t seed) {
    auto w = DTensor::zeros(t.shape());
    for (std::size_t i = 0; i < w.size(); ++i)
        w.data()[i] = 2.0 * bninvert::rng::uniform01(seed, i) - 1.0;
    return bninvert::sum(g, bninvert::mul(g, t, w));
}

}  // namespace testsupport

#pragma once

// Update rules: Adam with bias-corrected moments for input synthesis,
// plain SGD with a cosine-annealed learning rate for model training.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "bninvert/tensor.hpp"

namespace bninvert {

template <class T>
class AdamT {
    std::vector<TensorT<T>> params_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    T lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;

public:
    AdamT(std::vector<TensorT<T>> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
          T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(beta1 > T(0) && beta1 < T(1)) || !(beta2 > T(0) && beta2 < T(1)))
            throw std::invalid_argument("adam: betas must lie in (0, 1)");
        for (auto& p : params_) {
            if (!p.requires_grad())
                throw std::invalid_argument("adam: parameter does not require grad");
            m_.emplace_back(p.size(), T(0));
            v_.emplace_back(p.size(), T(0));
        }
    }

    std::size_t step_count() const { return t_; }

    // p <- p - lr * m_hat / (sqrt(v_hat) + eps)
    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (std::size_t j = 0; j < params_.size(); ++j) {
            auto& p = params_[j];
            if (p.grad().size() != p.size())
                throw std::runtime_error("adam: gradient buffer missing");
            for (std::size_t i = 0; i < p.size(); ++i) {
                const T grad = p.grad()[i];
                m_[j][i] = beta1_ * m_[j][i] + (T(1) - beta1_) * grad;
                v_[j][i] = beta2_ * v_[j][i] + (T(1) - beta2_) * grad * grad;
                const T m_hat = m_[j][i] / bc1;
                const T v_hat = v_[j][i] / bc2;
                p.data()[i] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }
};

using Adam = AdamT<float>;

template <class T>
void sgd_step(std::vector<TensorT<T>>& params, T lr) {
    for (auto& p : params) {
        if (!p.requires_grad()) throw std::invalid_argument("sgd: parameter does not require grad");
        for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] -= lr * p.grad()[i];
    }
}

struct CosineSchedule {
    double eta_max;
    double eta_min;
    std::size_t total_steps;

    // eta_min + 0.5 * (eta_max - eta_min) * (1 + cos(pi * t / T))
    double lr(std::size_t t) const {
        if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps == 0");
        if (t > total_steps) throw std::invalid_argument("cosine_lr: t exceeds total_steps");
        const double frac = static_cast<double>(t) / static_cast<double>(total_steps);
        return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * frac));
    }
};

inline double cosine_lr(const CosineSchedule& s, std::size_t t) { return s.lr(t); }

}  // namespace bninvert

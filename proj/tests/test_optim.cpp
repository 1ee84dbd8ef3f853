#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bninvert/optim.hpp"

using namespace bninvert;

TEST_CASE("adam first step approximates -lr * sign(g)") {
    auto p = Tensor::from_data({3}, {1.0f, 2.0f, 3.0f}, true);
    p.grad() = {0.5f, -2.0f, 10.0f};
    Adam adam({p}, 0.1f);
    adam.step();
    CHECK(p.data()[0] == doctest::Approx(1.0f - 0.1f).epsilon(1e-4));
    CHECK(p.data()[1] == doctest::Approx(2.0f + 0.1f).epsilon(1e-4));
    CHECK(p.data()[2] == doctest::Approx(3.0f - 0.1f).epsilon(1e-4));
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
    auto p = Tensor::from_data({2}, {1.5f, -0.5f}, true);
    Adam adam({p}, 0.1f);
    for (int i = 0; i < 10; ++i) {
        adam.zero_grad();
        adam.step();
    }
    CHECK(p.data()[0] == 1.5f);
    CHECK(p.data()[1] == -0.5f);
}

namespace {

// Independent scalar Adam on f(x) = ||x - c||^2, coded from the update
// rule directly.
std::vector<double> adam_ref(std::vector<double> x, const std::vector<double>& c, double lr,
                             int steps) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<double> m(x.size(), 0), v(x.size(), 0);
    for (int t = 1; t <= steps; ++t)
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double g = 2.0 * (x[i] - c[i]);
            m[i] = b1 * m[i] + (1 - b1) * g;
            v[i] = b2 * v[i] + (1 - b2) * g * g;
            const double mh = m[i] / (1 - std::pow(b1, t));
            const double vh = v[i] / (1 - std::pow(b2, t));
            x[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    return x;
}

}  // namespace

TEST_CASE("adam tracks the scalar reference and contracts ||x - c||") {
    std::vector<double> x0 = {3.0, -2.0, 0.5, 4.0};
    std::vector<double> c = {1.0, 1.0, -1.0, 0.0};
    auto p = TensorT<double>::from_data({4}, x0, true);
    AdamT<double> adam({p}, 0.1);
    for (int t = 0; t < 50; ++t) {
        for (std::size_t i = 0; i < 4; ++i) p.grad()[i] = 2.0 * (p.data()[i] - c[i]);
        adam.step();
        adam.zero_grad();
    }
    auto ref = adam_ref(x0, c, 0.1, 50);
    double dist = 0, dist0 = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(p.data()[i] == doctest::Approx(ref[i]).epsilon(1e-9));
        dist += (p.data()[i] - c[i]) * (p.data()[i] - c[i]);
        dist0 += (x0[i] - c[i]) * (x0[i] - c[i]);
    }
    CHECK(std::sqrt(dist) <= 0.2 * std::sqrt(dist0));
}

TEST_CASE("adam t=1 update is invariant to gradient scaling") {
    auto run = [](double scale) {
        auto p = TensorT<double>::from_data({3}, {1.0, 2.0, 3.0}, true);
        p.grad() = {0.3 * scale, -1.1 * scale, 0.02 * scale};
        AdamT<double> adam({p}, 0.1);
        adam.step();
        return p.data();
    };
    auto a = run(1.0);
    auto b = run(100.0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
}

TEST_CASE("adam rejects parameters without gradients") {
    auto p = Tensor::from_data({2}, {1.0f, 2.0f});
    CHECK_THROWS_AS(Adam({p}, 0.1f), std::invalid_argument);
}

TEST_CASE("sgd hand cases") {
    auto p = Tensor::from_data({1}, {5.0f}, true);
    p.grad() = {2.0f};
    std::vector<Tensor> params = {p};
    sgd_step(params, 0.0f);
    CHECK(p.data()[0] == 5.0f);
    sgd_step(params, 0.5f);
    CHECK(p.data()[0] == doctest::Approx(4.0f));
}

TEST_CASE("sgd contracts a quadratic bowl below 1e-3 of initial loss") {
    auto p = TensorT<double>::from_data({4}, {2.0, -3.0, 1.0, 0.7}, true);
    std::vector<TensorT<double>> params = {p};
    auto loss = [&] {
        double s = 0;
        for (auto v : p.data()) s += v * v;
        return s;
    };
    const double initial = loss();
    for (int t = 0; t < 100; ++t) {
        for (std::size_t i = 0; i < 4; ++i) p.grad()[i] = 2.0 * p.data()[i];
        sgd_step(params, 0.1);
    }
    // closed form: each step multiplies x by (1 - 2*lr) = 0.8
    CHECK(loss() < 1e-3 * initial);
    CHECK(p.data()[0] == doctest::Approx(2.0 * std::pow(0.8, 100)).epsilon(1e-9));
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    CosineSchedule s{0.1, 0.001, 100};
    CHECK(s.lr(0) == doctest::Approx(0.1));
    CHECK(s.lr(100) == doctest::Approx(0.001));
    CosineSchedule z{0.2, 0.0, 10};
    CHECK(z.lr(5) == doctest::Approx(0.1));
}

TEST_CASE("cosine schedule is non-increasing over [0, T]") {
    CosineSchedule s{1.0, 0.01, 37};
    double prev = s.lr(0);
    for (std::size_t t = 1; t <= 37; ++t) {
        const double cur = s.lr(t);
        CHECK(cur <= prev + 1e-12);
        prev = cur;
    }
    CHECK_THROWS_AS(s.lr(38), std::invalid_argument);
}

TEST_CASE("optimizer steps only touch registered parameters") {
    auto p = Tensor::from_data({2}, {1.0f, 1.0f}, true);
    auto other = Tensor::from_data({2}, {9.0f, 9.0f}, true);
    p.grad() = {1.0f, 1.0f};
    other.grad() = {1.0f, 1.0f};
    Adam adam({p}, 0.1f);
    adam.step();
    CHECK(other.data() == std::vector<float>{9.0f, 9.0f});
    CHECK(other.grad() == std::vector<float>{1.0f, 1.0f});
}

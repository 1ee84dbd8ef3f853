#pragma once

// Minimal reverse-mode autodiff: value-semantic tensor handles plus a
// single-use tape (Graph). Ops record their backward closure onto the
// graph when any input requires a gradient. float is the working
// precision; every op is templated so tests instantiate double for
// finite-difference verification.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "bninvert/rng.hpp"

namespace bninvert {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <class T>
class TensorT {
    struct Impl {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> p_;

public:
    TensorT() : p_(std::make_shared<Impl>()) {}

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        TensorT t;
        t.p_->shape = std::move(shape);
        t.p_->data.assign(numel(t.p_->shape), T(0));
        t.p_->requires_grad = requires_grad;
        if (requires_grad) t.p_->grad.assign(t.p_->data.size(), T(0));
        return t;
    }

    static TensorT full(Shape shape, T value, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.p_->data) x = value;
        return t;
    }

    static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        TensorT t;
        t.p_->shape = std::move(shape);
        t.p_->data = std::move(data);
        t.p_->requires_grad = requires_grad;
        if (requires_grad) t.p_->grad.assign(t.p_->data.size(), T(0));
        return t;
    }

    static TensorT scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    const Shape& shape() const { return p_->shape; }
    std::size_t size() const { return p_->data.size(); }
    // Handle semantics: a const TensorT is a const handle to shared,
    // mutable storage (gradients accumulate through captured copies).
    std::vector<T>& data() const { return p_->data; }
    std::vector<T>& grad() const { return p_->grad; }
    bool requires_grad() const { return p_->requires_grad; }

    void set_requires_grad(bool on) {
        p_->requires_grad = on;
        if (on)
            p_->grad.assign(p_->data.size(), T(0));
        else
            p_->grad.clear();
    }

    void zero_grad() {
        if (p_->requires_grad) p_->grad.assign(p_->data.size(), T(0));
    }

    T item() const {
        if (p_->data.size() != 1)
            throw std::invalid_argument("item: tensor has " + std::to_string(p_->data.size()) +
                                        " elements, expected 1");
        return p_->data[0];
    }

    // Deep copy, detached from any graph.
    TensorT clone() const {
        TensorT t;
        t.p_->shape = p_->shape;
        t.p_->data = p_->data;
        t.p_->requires_grad = false;
        return t;
    }

    bool same_storage(const TensorT& other) const { return p_ == other.p_; }
};

using Tensor = TensorT<float>;

// Single-use backward tape for one forward pass.
template <class T>
class GraphT {
    std::vector<std::function<void()>> tape_;
    bool consumed_ = false;

public:
    void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

    bool consumed() const { return consumed_; }
    std::size_t node_count() const { return tape_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse
    // topological (= recording) order. Leaf grads accumulate by
    // summation; the graph is dead afterwards.
    void backward(TensorT<T> loss) {
        if (loss.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(loss.shape()));
        if (consumed_)
            throw std::runtime_error("backward: graph already consumed; run a new forward pass");
        if (!loss.requires_grad())
            throw std::invalid_argument("backward: loss does not require grad");
        consumed_ = true;
        loss.grad()[0] += T(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
        tape_.clear();
    }
};

using Graph = GraphT<float>;

namespace detail {

template <class T>
bool want_grad(GraphT<T>* g, std::initializer_list<const TensorT<T>*> inputs) {
    if (!g) return false;
    for (auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
}

// Decompose an [N, C, ...] tensor for channel-broadcast ops.
inline void channel_dims(const Shape& s, const Shape& vs, const char* op, std::size_t& outer,
                         std::size_t& channels, std::size_t& inner) {
    if (s.size() < 2)
        throw std::invalid_argument(std::string(op) + ": need rank >= 2, got " + shape_str(s));
    if (vs.size() != 1 || vs[0] != s[1])
        throw std::invalid_argument(std::string(op) + ": channel vector " + shape_str(vs) +
                                    " does not match " + shape_str(s));
    outer = s[0];
    channels = s[1];
    inner = 1;
    for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Random initialization
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> randn(Shape shape, T mean, T stddev, std::uint64_t seed) {
    if (shape.empty()) throw std::invalid_argument("randn: empty shape");
    if (!(stddev > T(0))) throw std::invalid_argument("randn: stddev must be > 0");
    TensorT<T> t = TensorT<T>::zeros(std::move(shape));
    auto& d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = mean + stddev * static_cast<T>(rng::normal(seed, i));
    return t;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(GraphT<T>* g, const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "add");
    bool wg = detail::want_grad(g, {&a, &b});
    auto out = TensorT<T>::zeros(a.shape(), wg);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (wg)
        g->record([a, b, out]() mutable {
            const auto& go = out.grad();
            if (a.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) a.grad()[i] += go[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) b.grad()[i] += go[i];
        });
    return out;
}

template <class T>
TensorT<T> sub(GraphT<T>* g, const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "sub");
    bool wg = detail::want_grad(g, {&a, &b});
    auto out = TensorT<T>::zeros(a.shape(), wg);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (wg)
        g->record([a, b, out]() mutable {
            const auto& go = out.grad();
            if (a.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) a.grad()[i] += go[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) b.grad()[i] -= go[i];
        });
    return out;
}

template <class T>
TensorT<T> mul(GraphT<T>* g, const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a.shape(), b.shape(), "mul");
    bool wg = detail::want_grad(g, {&a, &b});
    auto out = TensorT<T>::zeros(a.shape(), wg);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (wg)
        g->record([a, b, out]() mutable {
            const auto& go = out.grad();
            if (a.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) a.grad()[i] += go[i] * b.data()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) b.grad()[i] += go[i] * a.data()[i];
        });
    return out;
}

template <class T>
TensorT<T> scale(GraphT<T>* g, const TensorT<T>& a, T c) {
    bool wg = detail::want_grad(g, {&a});
    auto out = TensorT<T>::zeros(a.shape(), wg);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = c * a.data()[i];
    if (wg)
        g->record([a, out, c]() mutable {
            for (std::size_t i = 0; i < out.size(); ++i) a.grad()[i] += c * out.grad()[i];
        });
    return out;
}

template <class T>
TensorT<T> add_scalar(GraphT<T>* g, const TensorT<T>& a, T c) {
    bool wg = detail::want_grad(g, {&a});
    auto out = TensorT<T>::zeros(a.shape(), wg);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + c;
    if (wg)
        g->record([a, out]() mutable {
            for (std::size_t i = 0; i < out.size(); ++i) a.grad()[i] += out.grad()[i];
        });
    return out;
}

template <class T>
TensorT<T> square(GraphT<T>* g, const TensorT<T>& a) {
    bool wg = detail::want_grad(g, {&a});
    auto out = TensorT<T>::zeros(a.shape(), wg);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * a.data()[i];
    if (wg)
        g->record([a, out]() mutable {
            for (std::size_t i = 0; i < out.size(); ++i)
                a.grad()[i] += T(2) * a.data()[i] * out.grad()[i];
        });
    return out;
}

template <class T>
TensorT<T> sqrt_op(GraphT<T>* g, const TensorT<T>& a) {
    for (auto x : a.data())
        if (x < T(0)) throw std::invalid_argument("sqrt: negative input");
    bool wg = detail::want_grad(g, {&a});
    auto out = TensorT<T>::zeros(a.shape(), wg);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::sqrt(a.data()[i]);
    if (wg)
        g->record([a, out]() mutable {
            for (std::size_t i = 0; i < out.size(); ++i)
                a.grad()[i] += out.grad()[i] / (T(2) * out.data()[i]);
        });
    return out;
}

template <class T>
TensorT<T> relu(GraphT<T>* g, const TensorT<T>& a) {
    bool wg = detail::want_grad(g, {&a});
    auto out = TensorT<T>::zeros(a.shape(), wg);
    for (std::size_t i = 0; i < a.size(); ++i)
        out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    if (wg)
        g->record([a, out]() mutable {
            for (std::size_t i = 0; i < out.size(); ++i)
                if (a.data()[i] > T(0)) a.grad()[i] += out.grad()[i];
        });
    return out;
}

// ---------------------------------------------------------------------------
// Channel-broadcast ops: x is [N, C, ...], v is [C]
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add_cw(GraphT<T>* g, const TensorT<T>& x, const TensorT<T>& v) {
    std::size_t outer, channels, inner;
    detail::channel_dims(x.shape(), v.shape(), "add_cw", outer, channels, inner);
    bool wg = detail::want_grad(g, {&x, &v});
    auto out = TensorT<T>::zeros(x.shape(), wg);
    std::size_t idx = 0;
    for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t k = 0; k < inner; ++k, ++idx)
                out.data()[idx] = x.data()[idx] + v.data()[c];
    if (wg)
        g->record([x, v, out, outer, channels, inner]() mutable {
            const auto& go = out.grad();
            std::size_t idx = 0;
            for (std::size_t n = 0; n < outer; ++n)
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t k = 0; k < inner; ++k, ++idx) {
                        if (x.requires_grad()) x.grad()[idx] += go[idx];
                        if (v.requires_grad()) v.grad()[c] += go[idx];
                    }
        });
    return out;
}

template <class T>
TensorT<T> sub_cw(GraphT<T>* g, const TensorT<T>& x, const TensorT<T>& v) {
    std::size_t outer, channels, inner;
    detail::channel_dims(x.shape(), v.shape(), "sub_cw", outer, channels, inner);
    bool wg = detail::want_grad(g, {&x, &v});
    auto out = TensorT<T>::zeros(x.shape(), wg);
    std::size_t idx = 0;
    for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t k = 0; k < inner; ++k, ++idx)
                out.data()[idx] = x.data()[idx] - v.data()[c];
    if (wg)
        g->record([x, v, out, outer, channels, inner]() mutable {
            const auto& go = out.grad();
            std::size_t idx = 0;
            for (std::size_t n = 0; n < outer; ++n)
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t k = 0; k < inner; ++k, ++idx) {
                        if (x.requires_grad()) x.grad()[idx] += go[idx];
                        if (v.requires_grad()) v.grad()[c] -= go[idx];
                    }
        });
    return out;
}

template <class T>
TensorT<T> mul_cw(GraphT<T>* g, const TensorT<T>& x, const TensorT<T>& v) {
    std::size_t outer, channels, inner;
    detail::channel_dims(x.shape(), v.shape(), "mul_cw", outer, channels, inner);
    bool wg = detail::want_grad(g, {&x, &v});
    auto out = TensorT<T>::zeros(x.shape(), wg);
    std::size_t idx = 0;
    for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t k = 0; k < inner; ++k, ++idx)
                out.data()[idx] = x.data()[idx] * v.data()[c];
    if (wg)
        g->record([x, v, out, outer, channels, inner]() mutable {
            const auto& go = out.grad();
            std::size_t idx = 0;
            for (std::size_t n = 0; n < outer; ++n)
                for (std::size_t c = 0; c < channels; ++c)
                    for (std::size_t k = 0; k < inner; ++k, ++idx) {
                        if (x.requires_grad()) x.grad()[idx] += go[idx] * v.data()[c];
                        if (v.requires_grad()) v.grad()[c] += go[idx] * x.data()[idx];
                    }
        });
    return out;
}

template <class T>
TensorT<T> div_cw(GraphT<T>* g, const TensorT<T>& x, const TensorT<T>& v) {
    std::size_t outer, channels, inner;
    detail::channel_dims(x.shape(), v.shape(), "div_cw", outer, channels, inner);
    for (auto c : v.data())
        if (c == T(0)) throw std::invalid_argument("div_cw: zero divisor");
    bool wg = detail::want_grad(g, {&x, &v});
    auto out = TensorT<T>::zeros(x.shape(), wg);
    std::size_t idx = 0;
    for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t k = 0; k < inner; ++k, ++idx)
                out.data()[idx] = x.data()[idx] / v.data()[c];
    if (wg)
        g->record([x, v, out, outer, channels, inner]() mutable {
            const auto& go = out.grad();
            std::size_t idx = 0;
            for (std::size_t n = 0; n < outer; ++n)
                for (std::size_t c = 0; c < channels; ++c) {
                    const T vc = v.data()[c];
                    for (std::size_t k = 0; k < inner; ++k, ++idx) {
                        if (x.requires_grad()) x.grad()[idx] += go[idx] / vc;
                        if (v.requires_grad())
                            v.grad()[c] -= go[idx] * x.data()[idx] / (vc * vc);
                    }
                }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Shape / reduction ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> reshape(GraphT<T>* g, const TensorT<T>& a, Shape new_shape) {
    if (numel(new_shape) != a.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(new_shape));
    bool wg = detail::want_grad(g, {&a});
    auto out = TensorT<T>::from_data(std::move(new_shape), a.data(), wg);
    if (wg)
        g->record([a, out]() mutable {
            for (std::size_t i = 0; i < out.size(); ++i) a.grad()[i] += out.grad()[i];
        });
    return out;
}

template <class T>
TensorT<T> sum(GraphT<T>* g, const TensorT<T>& a) {
    bool wg = detail::want_grad(g, {&a});
    T s = 0;
    for (auto x : a.data()) s += x;
    auto out = TensorT<T>::from_data({1}, {s}, wg);
    if (wg)
        g->record([a, out]() mutable {
            const T go = out.grad()[0];
            for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += go;
        });
    return out;
}

template <class T>
TensorT<T> mean(GraphT<T>* g, const TensorT<T>& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    bool wg = detail::want_grad(g, {&a});
    T s = 0;
    for (auto x : a.data()) s += x;
    const T inv = T(1) / static_cast<T>(a.size());
    auto out = TensorT<T>::from_data({1}, {s * inv}, wg);
    if (wg)
        g->record([a, out, inv]() mutable {
            const T go = out.grad()[0] * inv;
            for (std::size_t i = 0; i < a.size(); ++i) a.grad()[i] += go;
        });
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// out = a @ b (transpose_b = false, b is [K, M]) or a @ b^T (b is [M, K]).
template <class T>
TensorT<T> matmul(GraphT<T>* g, const TensorT<T>& a, const TensorT<T>& b,
                  bool transpose_b = false) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw std::invalid_argument("matmul: need rank-2 operands");
    const std::size_t N = a.shape()[0], K = a.shape()[1];
    const std::size_t M = transpose_b ? b.shape()[0] : b.shape()[1];
    const std::size_t bk = transpose_b ? b.shape()[1] : b.shape()[0];
    if (bk != K)
        throw std::invalid_argument("matmul: inner dim mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    bool wg = detail::want_grad(g, {&a, &b});
    auto out = TensorT<T>::zeros({N, M}, wg);
    const T* A = a.data().data();
    const T* B = b.data().data();
    T* O = out.data().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t m = 0; m < M; ++m) {
            T acc = 0;
            for (std::size_t k = 0; k < K; ++k)
                acc += A[n * K + k] * (transpose_b ? B[m * K + k] : B[k * M + m]);
            O[n * M + m] = acc;
        }
    if (wg)
        g->record([a, b, out, N, K, M, transpose_b]() mutable {
            const T* A = a.data().data();
            const T* B = b.data().data();
            const T* GO = out.grad().data();
            if (a.requires_grad()) {
                T* GA = a.grad().data();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t k = 0; k < K; ++k) {
                        T acc = 0;
                        for (std::size_t m = 0; m < M; ++m)
                            acc += GO[n * M + m] * (transpose_b ? B[m * K + k] : B[k * M + m]);
                        GA[n * K + k] += acc;
                    }
            }
            if (b.requires_grad()) {
                T* GB = b.grad().data();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t m = 0; m < M; ++m) {
                        const T go = GO[n * M + m];
                        for (std::size_t k = 0; k < K; ++k) {
                            if (transpose_b)
                                GB[m * K + k] += go * A[n * K + k];
                            else
                                GB[k * M + m] += go * A[n * K + k];
                        }
                    }
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> conv2d(GraphT<T>* g, const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, std::size_t stride, std::size_t padding) {
    if (input.shape().size() != 4 || weight.shape().size() != 4)
        throw std::invalid_argument("conv2d: input and weight must be rank 4");
    const std::size_t N = input.shape()[0], Cin = input.shape()[1];
    const std::size_t H = input.shape()[2], W = input.shape()[3];
    const std::size_t Cout = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
    if (weight.shape()[1] != Cin)
        throw std::invalid_argument("conv2d: weight channels " + shape_str(weight.shape()) +
                                    " do not match input " + shape_str(input.shape()));
    if (bias.shape() != Shape{Cout})
        throw std::invalid_argument("conv2d: bias must be [Cout]");
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
    const std::size_t Hp = H + 2 * padding, Wp = W + 2 * padding;
    if (Hp < kh || Wp < kw || (Hp - kh) % stride != 0 || (Wp - kw) % stride != 0)
        throw std::invalid_argument("conv2d: non-integral output size for input " +
                                    shape_str(input.shape()) + ", kernel " +
                                    shape_str(weight.shape()) + ", stride " +
                                    std::to_string(stride) + ", padding " +
                                    std::to_string(padding));
    const std::size_t Ho = (Hp - kh) / stride + 1;
    const std::size_t Wo = (Wp - kw) / stride + 1;

    bool wg = detail::want_grad(g, {&input, &weight, &bias});
    auto out = TensorT<T>::zeros({N, Cout, Ho, Wo}, wg);
    const T* X = input.data().data();
    const T* Wt = weight.data().data();
    const T* B = bias.data().data();
    T* O = out.data().data();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);

    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    T acc = B[co];
                    const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(ho * stride) - pad;
                    const std::ptrdiff_t w0 = static_cast<std::ptrdiff_t>(wo * stride) - pad;
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t r = 0; r < kh; ++r) {
                            const std::ptrdiff_t h = h0 + static_cast<std::ptrdiff_t>(r);
                            if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t s = 0; s < kw; ++s) {
                                const std::ptrdiff_t w = w0 + static_cast<std::ptrdiff_t>(s);
                                if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += X[((n * Cin + ci) * H + h) * W + w] *
                                       Wt[((co * Cin + ci) * kh + r) * kw + s];
                            }
                        }
                    O[((n * Cout + co) * Ho + ho) * Wo + wo] = acc;
                }

    if (wg)
        g->record([input, weight, bias, out, N, Cin, H, W, Cout, kh, kw, Ho, Wo, stride,
                   pad]() mutable {
            const T* X = input.data().data();
            const T* Wt = weight.data().data();
            const T* GO = out.grad().data();
            T* GX = input.requires_grad() ? input.grad().data() : nullptr;
            T* GW = weight.requires_grad() ? weight.grad().data() : nullptr;
            T* GB = bias.requires_grad() ? bias.grad().data() : nullptr;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t ho = 0; ho < Ho; ++ho)
                        for (std::size_t wo = 0; wo < Wo; ++wo) {
                            const T go = GO[((n * Cout + co) * Ho + ho) * Wo + wo];
                            if (go == T(0)) continue;
                            if (GB) GB[co] += go;
                            const std::ptrdiff_t h0 =
                                static_cast<std::ptrdiff_t>(ho * stride) - pad;
                            const std::ptrdiff_t w0 =
                                static_cast<std::ptrdiff_t>(wo * stride) - pad;
                            for (std::size_t ci = 0; ci < Cin; ++ci)
                                for (std::size_t r = 0; r < kh; ++r) {
                                    const std::ptrdiff_t h =
                                        h0 + static_cast<std::ptrdiff_t>(r);
                                    if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t s = 0; s < kw; ++s) {
                                        const std::ptrdiff_t w =
                                            w0 + static_cast<std::ptrdiff_t>(s);
                                        if (w < 0 || w >= static_cast<std::ptrdiff_t>(W))
                                            continue;
                                        const std::size_t xi =
                                            ((n * Cin + ci) * H + h) * W + w;
                                        const std::size_t wi =
                                            ((co * Cin + ci) * kh + r) * kw + s;
                                        if (GX) GX[xi] += go * Wt[wi];
                                        if (GW) GW[wi] += go * X[xi];
                                    }
                                }
                        }
        });
    return out;
}

// Non-overlapping max pooling, window = stride = size. Ties break to the
// first (row-major) maximum so backward routing is deterministic.
template <class T>
TensorT<T> max_pool2d(GraphT<T>* g, const TensorT<T>& input, std::size_t size) {
    if (input.shape().size() != 4)
        throw std::invalid_argument("max_pool2d: input must be rank 4");
    if (size == 0) throw std::invalid_argument("max_pool2d: size must be >= 1");
    const std::size_t N = input.shape()[0], C = input.shape()[1];
    const std::size_t H = input.shape()[2], W = input.shape()[3];
    if (H % size != 0 || W % size != 0)
        throw std::invalid_argument("max_pool2d: spatial dims " + shape_str(input.shape()) +
                                    " not divisible by " + std::to_string(size));
    const std::size_t Ho = H / size, Wo = W / size;
    bool wg = detail::want_grad(g, {&input});
    auto out = TensorT<T>::zeros({N, C, Ho, Wo}, wg);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* X = input.data().data();
    T* O = out.data().data();
    std::size_t oi = 0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo, ++oi) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::size_t best_i = 0;
                    for (std::size_t r = 0; r < size; ++r)
                        for (std::size_t s = 0; s < size; ++s) {
                            const std::size_t xi =
                                ((n * C + c) * H + ho * size + r) * W + wo * size + s;
                            if (X[xi] > best) {
                                best = X[xi];
                                best_i = xi;
                            }
                        }
                    O[oi] = best;
                    (*argmax)[oi] = best_i;
                }
    if (wg)
        g->record([input, out, argmax]() mutable {
            for (std::size_t i = 0; i < out.size(); ++i)
                input.grad()[(*argmax)[i]] += out.grad()[i];
        });
    return out;
}

template <class T>
TensorT<T> global_avg_pool(GraphT<T>* g, const TensorT<T>& input) {
    if (input.shape().size() != 4)
        throw std::invalid_argument("global_avg_pool: input must be rank 4");
    const std::size_t N = input.shape()[0], C = input.shape()[1];
    const std::size_t HW = input.shape()[2] * input.shape()[3];
    bool wg = detail::want_grad(g, {&input});
    auto out = TensorT<T>::zeros({N, C}, wg);
    const T inv = T(1) / static_cast<T>(HW);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            T acc = 0;
            for (std::size_t k = 0; k < HW; ++k) acc += input.data()[(n * C + c) * HW + k];
            out.data()[n * C + c] = acc * inv;
        }
    if (wg)
        g->record([input, out, N, C, HW, inv]() mutable {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const T go = out.grad()[n * C + c] * inv;
                    for (std::size_t k = 0; k < HW; ++k)
                        input.grad()[(n * C + c) * HW + k] += go;
                }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Batch moments: per-channel mean and biased variance over all other axes
// ---------------------------------------------------------------------------

template <class T>
std::pair<TensorT<T>, TensorT<T>> batch_moments(GraphT<T>* g, const TensorT<T>& x) {
    if (x.shape().size() < 2)
        throw std::invalid_argument("batch_moments: need rank >= 2, got " +
                                    shape_str(x.shape()));
    const std::size_t N = x.shape()[0], C = x.shape()[1];
    std::size_t inner = 1;
    for (std::size_t i = 2; i < x.shape().size(); ++i) inner *= x.shape()[i];
    const std::size_t cnt = N * inner;
    if (cnt < 2)
        throw std::invalid_argument("batch_moments: reduction set per channel must have >= 2 "
                                    "elements, got " + std::to_string(cnt));
    bool wg = detail::want_grad(g, {&x});
    auto mean_t = TensorT<T>::zeros({C}, wg);
    auto var_t = TensorT<T>::zeros({C}, wg);
    const T inv = T(1) / static_cast<T>(cnt);
    for (std::size_t c = 0; c < C; ++c) {
        T s = 0;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < inner; ++k) s += x.data()[(n * C + c) * inner + k];
        mean_t.data()[c] = s * inv;
    }
    for (std::size_t c = 0; c < C; ++c) {
        const T m = mean_t.data()[c];
        T s = 0;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < inner; ++k) {
                const T d = x.data()[(n * C + c) * inner + k] - m;
                s += d * d;
            }
        var_t.data()[c] = s * inv;
    }
    if (wg)
        g->record([x, mean_t, var_t, N, C, inner, inv]() mutable {
            for (std::size_t c = 0; c < C; ++c) {
                const T gm = mean_t.grad()[c] * inv;
                const T gv = var_t.grad()[c] * inv * T(2);
                const T m = mean_t.data()[c];
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t k = 0; k < inner; ++k) {
                        const std::size_t i = (n * C + c) * inner + k;
                        x.grad()[i] += gm + gv * (x.data()[i] - m);
                    }
            }
        });
    return {mean_t, var_t};
}

// ---------------------------------------------------------------------------
// Classification head ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> log_softmax(GraphT<T>* g, const TensorT<T>& logits) {
    if (logits.shape().size() != 2)
        throw std::invalid_argument("log_softmax: logits must be [N, C]");
    const std::size_t N = logits.shape()[0], C = logits.shape()[1];
    bool wg = detail::want_grad(g, {&logits});
    auto out = TensorT<T>::zeros(logits.shape(), wg);
    for (std::size_t n = 0; n < N; ++n) {
        T m = logits.data()[n * C];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, logits.data()[n * C + c]);
        T lse = 0;
        for (std::size_t c = 0; c < C; ++c) lse += std::exp(logits.data()[n * C + c] - m);
        lse = m + std::log(lse);
        for (std::size_t c = 0; c < C; ++c) out.data()[n * C + c] = logits.data()[n * C + c] - lse;
    }
    if (wg)
        g->record([logits, out, N, C]() mutable {
            for (std::size_t n = 0; n < N; ++n) {
                T gsum = 0;
                for (std::size_t c = 0; c < C; ++c) gsum += out.grad()[n * C + c];
                for (std::size_t c = 0; c < C; ++c)
                    logits.grad()[n * C + c] +=
                        out.grad()[n * C + c] - std::exp(out.data()[n * C + c]) * gsum;
            }
        });
    return out;
}

// y[n] = x[n, idx[n]]
template <class T>
TensorT<T> gather_rows(GraphT<T>* g, const TensorT<T>& x, const std::vector<std::size_t>& idx) {
    if (x.shape().size() != 2) throw std::invalid_argument("gather_rows: x must be [N, C]");
    const std::size_t N = x.shape()[0], C = x.shape()[1];
    if (idx.size() != N) throw std::invalid_argument("gather_rows: index count mismatch");
    for (auto i : idx)
        if (i >= C) throw std::invalid_argument("gather_rows: index out of range");
    bool wg = detail::want_grad(g, {&x});
    auto out = TensorT<T>::zeros({N}, wg);
    for (std::size_t n = 0; n < N; ++n) out.data()[n] = x.data()[n * C + idx[n]];
    if (wg) {
        auto saved = std::make_shared<std::vector<std::size_t>>(idx);
        g->record([x, out, saved, C]() mutable {
            for (std::size_t n = 0; n < out.size(); ++n)
                x.grad()[n * C + (*saved)[n]] += out.grad()[n];
        });
    }
    return out;
}

// Mean cross-entropy over the batch.
template <class T>
TensorT<T> cross_entropy(GraphT<T>* g, const TensorT<T>& logits,
                         const std::vector<std::size_t>& labels) {
    auto ls = log_softmax(g, logits);
    auto picked = gather_rows(g, ls, labels);
    return scale(g, mean(g, picked), T(-1));
}

}  // namespace bninvert

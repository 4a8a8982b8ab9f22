#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "momo/common.hpp"
#include "momo/rng.hpp"

namespace momo {

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += "x";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

template <class T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first needed; same length as value after
    bool requires_grad = false;
    bool leaf = true;

    int numel() const { return static_cast<int>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Shared-handle dense tensor. Value semantics on the handle; the payload is
// shared, which is what makes weight tying (one storage, two uses) direct.
template <class T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape) { return filled(std::move(shape), T(0)); }

    static Tensor filled(std::vector<int> shape, T v) {
        auto n = std::make_shared<Node>();
        int total = 1;
        for (int e : shape) {
            MOMO_CHECK(e > 0, "tensor extents must be positive, got " << shape_str(shape));
            total *= e;
        }
        n->shape = std::move(shape);
        n->value.assign(static_cast<size_t>(total), v);
        return Tensor(std::move(n));
    }

    static Tensor from(std::vector<int> shape, std::vector<T> data) {
        auto n = std::make_shared<Node>();
        int total = 1;
        for (int e : shape) total *= e;
        MOMO_CHECK(static_cast<size_t>(total) == data.size(),
                   "data length " << data.size() << " does not match shape " << shape_str(shape));
        n->shape = std::move(shape);
        n->value = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    static Tensor randn(std::vector<int> shape, Rng& rng, T sigma = T(1)) {
        Tensor t = zeros(std::move(shape));
        for (T& v : t.node_->value) v = static_cast<T>(rng.normal()) * sigma;
        return t;
    }

    static Tensor trunc_normal(std::vector<int> shape, Rng& rng, T sigma) {
        Tensor t = zeros(std::move(shape));
        for (T& v : t.node_->value) v = static_cast<T>(rng.truncated_normal(sigma));
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int numel() const { return node_->numel(); }

    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }
    std::vector<T>& grad() { return node_->grad; }
    const std::vector<T>& grad() const { return node_->grad; }

    T item() const {
        MOMO_CHECK(numel() == 1, "item() on non-scalar tensor " << shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool r) {
        node_->requires_grad = r;
        if (r) node_->ensure_grad();
        return *this;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Same values, no history. Used where the spec wants gradient-detached inputs.
    Tensor detach() const { return from(node_->shape, node_->value); }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Reverse-mode tape: ops append (output, backward-rule) in creation order,
// which is topological by construction. backward() zeroes non-leaf grads,
// seeds the loss and runs every rule once in reverse. Leaf grads are never
// cleared here, so successive backward calls accumulate additively.
template <class T>
class Tape {
public:
    using NodePtr = std::shared_ptr<TensorNode<T>>;

    void record(NodePtr out, std::function<void()> back) {
        steps_.push_back(Step{std::move(out), std::move(back)});
    }

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }
    size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    void backward(const Tensor<T>& loss) {
        MOMO_CHECK(loss.numel() == 1,
                   "backward expects a scalar loss, got " << shape_str(loss.shape()));
        MOMO_CHECK(loss.node()->requires_grad,
                   "backward on a tensor with no grad history (tape not recording?)");
        for (auto& s : steps_) {
            if (!s.out->leaf) {
                s.out->grad.assign(s.out->value.size(), T(0));
            }
        }
        loss.node()->ensure_grad();
        loss.node()->grad[0] = T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->back();
    }

private:
    struct Step {
        NodePtr out;
        std::function<void()> back;
    };
    std::vector<Step> steps_;
    bool recording_ = true;
};

// RAII recording switch, for inference-only forwards on a live tape.
template <class T>
class NoGradScope {
public:
    explicit NoGradScope(Tape<T>& tape) : tape_(tape), prev_(tape.recording()) {
        tape_.set_recording(false);
    }
    ~NoGradScope() { tape_.set_recording(prev_); }

private:
    Tape<T>& tape_;
    bool prev_;
};

namespace detail {

template <class T>
inline void debug_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
    for (T v : t.values()) {
        MOMO_CHECK(is_finite(v), "non-finite value produced by " << op);
    }
#else
    (void)t;
    (void)op;
#endif
}

template <class T>
inline bool want_grad(const Tape<T>& tape, std::initializer_list<const Tensor<T>*> ins) {
    if (!tape.recording()) return false;
    for (const Tensor<T>* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

template <class T>
inline void mark_out(Tensor<T>& out) {
    out.node()->requires_grad = true;
    out.node()->leaf = false;
}

// C = A.B (accumulate optional); row-major, fixed sequential order.
template <class T>
inline void gemm_nn(const T* A, const T* B, T* C, int m, int k, int n, bool accum) {
    for (int i = 0; i < m; ++i) {
        T* c = C + static_cast<size_t>(i) * n;
        if (!accum) std::fill(c, c + n, T(0));
        const T* a = A + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            T av = a[p];
            const T* b = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C += A.B^T  with A[m×k], B[n×k]
template <class T>
inline void gemm_nt_accum(const T* A, const T* B, T* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* a = A + static_cast<size_t>(i) * k;
        T* c = C + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* b = B + static_cast<size_t>(j) * k;
            T s = T(0);
            for (int p = 0; p < k; ++p) s += a[p] * b[p];
            c[j] += s;
        }
    }
}

// C += A^T.B  with A[k×m], B[k×n]
template <class T>
inline void gemm_tn_accum(const T* A, const T* B, T* C, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const T* a = A + static_cast<size_t>(p) * m;
        const T* b = B + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            T av = a[i];
            T* c = C + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    MOMO_CHECK(a.shape() == b.shape(),
               "add shape mismatch: " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    detail::debug_finite(out, "add");
    if (detail::want_grad(tape, {&a, &b})) {
        detail::mark_out(out);
        tape.record(out.node(), [an = a.node(), bn = b.node(), on = out.node()]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    MOMO_CHECK(a.shape() == b.shape(),
               "sub shape mismatch: " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    detail::debug_finite(out, "sub");
    if (detail::want_grad(tape, {&a, &b})) {
        detail::mark_out(out);
        tape.record(out.node(), [an = a.node(), bn = b.node(), on = out.node()]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    MOMO_CHECK(a.shape() == b.shape(),
               "mul shape mismatch: " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    detail::debug_finite(out, "mul");
    if (detail::want_grad(tape, {&a, &b})) {
        detail::mark_out(out);
        tape.record(out.node(), [an = a.node(), bn = b.node(), on = out.node()]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    detail::debug_finite(out, "scale");
    if (detail::want_grad(tape, {&a})) {
        detail::mark_out(out);
        tape.record(out.node(), [an = a.node(), on = out.node(), c]() {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        });
    }
    return out;
}

// x * s with s a 1-element tensor (learnable scalar, e.g. 1/temperature).
template <class T>
Tensor<T> mul_scalar(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& s) {
    MOMO_CHECK(s.numel() == 1, "mul_scalar expects a 1-element scale tensor");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T sv = s.values()[0];
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * sv;
    detail::debug_finite(out, "mul_scalar");
    if (detail::want_grad(tape, {&x, &s})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), sn = s.node(), on = out.node()]() {
            if (xn->requires_grad) {
                xn->ensure_grad();
                const T sv2 = sn->value[0];
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * sv2;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                T acc = T(0);
                for (size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * xn->value[i];
                sn->grad[0] += acc;
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> reciprocal(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = T(1) / xv[i];
    detail::debug_finite(out, "reciprocal");
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node()]() {
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                T y = on->value[i];
                xn->grad[i] -= on->grad[i] * y * y;
            }
        });
    }
    return out;
}

// exact-erf GELU: x * Phi(x)
template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (size_t i = 0; i < ov.size(); ++i) {
        double v = static_cast<double>(xv[i]);
        ov[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
    }
    detail::debug_finite(out, "gelu");
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node()]() {
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) {
                double v = static_cast<double>(xn->value[i]);
                double phi = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                xn->grad[i] += on->grad[i] * static_cast<T>(phi + v * pdf);
            }
        });
    }
    return out;
}

// rows of x plus a trailing-axis bias (the one broadcast the engine allows)
template <class T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& b) {
    MOMO_CHECK(b.rank() == 1 && x.rank() >= 1 && b.dim(0) == x.dim(x.rank() - 1),
               "add_bias: bias " << shape_str(b.shape()) << " does not match trailing axis of "
                                 << shape_str(x.shape()));
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const int cols = b.dim(0);
    const int rows = x.numel() / cols;
    const auto& xv = x.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            ov[static_cast<size_t>(r) * cols + c] = xv[static_cast<size_t>(r) * cols + c] + bv[c];
    detail::debug_finite(out, "add_bias");
    if (detail::want_grad(tape, {&x, &b})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), bn = b.node(), on = out.node(), rows, cols]() {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c)
                        bn->grad[c] += on->grad[static_cast<size_t>(r) * cols + c];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    MOMO_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
               "matmul shape mismatch: " << shape_str(a.shape()) << " x " << shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::gemm_nn(a.values().data(), b.values().data(), out.values().data(), m, k, n, false);
    detail::debug_finite(out, "matmul");
    if (detail::want_grad(tape, {&a, &b})) {
        detail::mark_out(out);
        tape.record(out.node(), [an = a.node(), bn = b.node(), on = out.node(), m, k, n]() {
            if (an->requires_grad) {
                an->ensure_grad();
                // dA += dC.B^T
                detail::gemm_nt_accum(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                // dB += A^T.dC
                detail::gemm_tn_accum(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n);
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
    MOMO_CHECK(a.rank() == 2, "transpose expects rank-2, got " << shape_str(a.shape()));
    const int r = a.dim(0), c = a.dim(1);
    Tensor<T> out = Tensor<T>::zeros({c, r});
    const auto& av = a.values();
    auto& ov = out.values();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ov[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
    if (detail::want_grad(tape, {&a})) {
        detail::mark_out(out);
        tape.record(out.node(), [an = a.node(), on = out.node(), r, c]() {
            an->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    an->grad[static_cast<size_t>(i) * c + j] += on->grad[static_cast<size_t>(j) * r + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalizations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, int axis) {
    MOMO_CHECK(axis >= 0 && axis < x.rank(),
               "softmax axis " << axis << " out of range for " << shape_str(x.shape()));
    const int extent = x.dim(axis);
    int inner = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    int outer = x.numel() / (extent * inner);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int o = 0; o < outer; ++o) {
        for (int in = 0; in < inner; ++in) {
            const size_t base = static_cast<size_t>(o) * extent * inner + in;
            T mx = xv[base];
            for (int e = 1; e < extent; ++e) mx = std::max(mx, xv[base + static_cast<size_t>(e) * inner]);
            double denom = 0.0;
            for (int e = 0; e < extent; ++e) {
                T ev = static_cast<T>(std::exp(static_cast<double>(xv[base + static_cast<size_t>(e) * inner] - mx)));
                ov[base + static_cast<size_t>(e) * inner] = ev;
                denom += static_cast<double>(ev);
            }
            for (int e = 0; e < extent; ++e)
                ov[base + static_cast<size_t>(e) * inner] = static_cast<T>(
                    static_cast<double>(ov[base + static_cast<size_t>(e) * inner]) / denom);
        }
    }
    detail::debug_finite(out, "softmax");
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node(), outer, inner, extent]() {
            xn->ensure_grad();
            // dx = (dy - sum(dy*y)) * y per line
            for (int o = 0; o < outer; ++o) {
                for (int in = 0; in < inner; ++in) {
                    const size_t base = static_cast<size_t>(o) * extent * inner + in;
                    double dot = 0.0;
                    for (int e = 0; e < extent; ++e) {
                        size_t idx = base + static_cast<size_t>(e) * inner;
                        dot += static_cast<double>(on->grad[idx]) * static_cast<double>(on->value[idx]);
                    }
                    for (int e = 0; e < extent; ++e) {
                        size_t idx = base + static_cast<size_t>(e) * inner;
                        xn->grad[idx] += static_cast<T>(
                            (static_cast<double>(on->grad[idx]) - dot) * static_cast<double>(on->value[idx]));
                    }
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    const int cols = x.dim(x.rank() - 1);
    MOMO_CHECK(gamma.rank() == 1 && beta.rank() == 1 && gamma.dim(0) == cols && beta.dim(0) == cols,
               "layer_norm: gamma/beta must match last extent " << cols);
    const int rows = x.numel() / cols;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    auto& ov = out.values();
    std::vector<T> means(static_cast<size_t>(rows)), inv_stds(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * cols;
        double mean = 0.0;
        for (int c = 0; c < cols; ++c) mean += static_cast<double>(xv[base + c]);
        mean /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
            double d = static_cast<double>(xv[base + c]) - mean;
            var += d * d;
        }
        var /= cols;
        double inv_std = 1.0 / std::sqrt(var + static_cast<double>(eps));
        means[static_cast<size_t>(r)] = static_cast<T>(mean);
        inv_stds[static_cast<size_t>(r)] = static_cast<T>(inv_std);
        for (int c = 0; c < cols; ++c) {
            double xh = (static_cast<double>(xv[base + c]) - mean) * inv_std;
            ov[base + c] = static_cast<T>(xh * static_cast<double>(gv[c]) + static_cast<double>(bv[c]));
        }
    }
    detail::debug_finite(out, "layer_norm");
    if (detail::want_grad(tape, {&x, &gamma, &beta})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(),
                                 rows, cols, means, inv_stds]() {
            for (int r = 0; r < rows; ++r) {
                const size_t base = static_cast<size_t>(r) * cols;
                const double mean = static_cast<double>(means[static_cast<size_t>(r)]);
                const double inv_std = static_cast<double>(inv_stds[static_cast<size_t>(r)]);
                double g_mean = 0.0, gx_mean = 0.0;
                for (int c = 0; c < cols; ++c) {
                    double xh = (static_cast<double>(xn->value[base + c]) - mean) * inv_std;
                    double g = static_cast<double>(on->grad[base + c]) * static_cast<double>(gn->value[c]);
                    g_mean += g;
                    gx_mean += g * xh;
                }
                g_mean /= cols;
                gx_mean /= cols;
                for (int c = 0; c < cols; ++c) {
                    double xh = (static_cast<double>(xn->value[base + c]) - mean) * inv_std;
                    double g = static_cast<double>(on->grad[base + c]) * static_cast<double>(gn->value[c]);
                    if (xn->requires_grad) {
                        xn->ensure_grad();
                        xn->grad[base + c] += static_cast<T>((g - g_mean - xh * gx_mean) * inv_std);
                    }
                    if (gn->requires_grad) {
                        gn->ensure_grad();
                        gn->grad[c] += static_cast<T>(static_cast<double>(on->grad[base + c]) * xh);
                    }
                    if (bn->requires_grad) {
                        bn->ensure_grad();
                        bn->grad[c] += on->grad[base + c];
                    }
                }
            }
        });
    }
    return out;
}

// row-wise L2 normalization; rows become unit vectors
template <class T>
Tensor<T> l2_normalize_rows(Tape<T>& tape, const Tensor<T>& x) {
    MOMO_CHECK(x.rank() == 2, "l2_normalize_rows expects rank-2, got " << shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto& xv = x.values();
    auto& ov = out.values();
    std::vector<T> norms(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * cols;
        double s = 0.0;
        for (int c = 0; c < cols; ++c) s += static_cast<double>(xv[base + c]) * static_cast<double>(xv[base + c]);
        double nrm = std::sqrt(std::max(s, 1e-24));
        norms[static_cast<size_t>(r)] = static_cast<T>(nrm);
        for (int c = 0; c < cols; ++c) ov[base + c] = static_cast<T>(static_cast<double>(xv[base + c]) / nrm);
    }
    detail::debug_finite(out, "l2_normalize_rows");
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node(), rows, cols, norms]() {
            xn->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const size_t base = static_cast<size_t>(r) * cols;
                double inv_n = 1.0 / static_cast<double>(norms[static_cast<size_t>(r)]);
                double dot = 0.0;
                for (int c = 0; c < cols; ++c)
                    dot += static_cast<double>(on->value[base + c]) * static_cast<double>(on->grad[base + c]);
                for (int c = 0; c < cols; ++c) {
                    double u = static_cast<double>(on->value[base + c]);
                    xn->grad[base + c] +=
                        static_cast<T>((static_cast<double>(on->grad[base + c]) - u * dot) * inv_n);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
    double acc = 0.0;
    for (T v : x.values()) acc += static_cast<double>(v);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node()]() {
            xn->ensure_grad();
            const T g = on->grad[0];
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
    const int n = x.numel();
    double acc = 0.0;
    for (T v : x.values()) acc += static_cast<double>(v);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node(), n]() {
            xn->ensure_grad();
            const T g = on->grad[0] / static_cast<T>(n);
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
    MOMO_CHECK(pred.shape() == target.shape(), "mse shape mismatch: " << shape_str(pred.shape())
                                                                      << " vs " << shape_str(target.shape()));
    const int n = pred.numel();
    const auto& pv = pred.values();
    const auto& tv = target.values();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double d = static_cast<double>(pv[static_cast<size_t>(i)]) - static_cast<double>(tv[static_cast<size_t>(i)]);
        acc += d * d;
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
    if (detail::want_grad(tape, {&pred, &target})) {
        detail::mark_out(out);
        tape.record(out.node(), [pn = pred.node(), tn = target.node(), on = out.node(), n]() {
            const T g = on->grad[0] * T(2) / static_cast<T>(n);
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (size_t i = 0; i < pn->value.size(); ++i)
                    pn->grad[i] += g * (pn->value[i] - tn->value[i]);
            }
            if (tn->requires_grad) {
                tn->ensure_grad();
                for (size_t i = 0; i < tn->value.size(); ++i)
                    tn->grad[i] -= g * (pn->value[i] - tn->value[i]);
            }
        });
    }
    return out;
}

// mean over rows of -log softmax(logits)[target]
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, const std::vector<int>& targets) {
    MOMO_CHECK(logits.rank() == 2, "cross_entropy expects rank-2 logits, got " << shape_str(logits.shape()));
    const int n = logits.dim(0), vocab = logits.dim(1);
    MOMO_CHECK(static_cast<int>(targets.size()) == n,
               "cross_entropy: " << targets.size() << " targets for " << n << " rows");
    for (int t : targets)
        MOMO_CHECK(t >= 0 && t < vocab, "cross_entropy: target " << t << " out of range [0," << vocab << ")");
    const auto& lv = logits.values();
    double acc = 0.0;
    for (int r = 0; r < n; ++r) {
        const size_t base = static_cast<size_t>(r) * vocab;
        double mx = static_cast<double>(lv[base]);
        for (int c = 1; c < vocab; ++c) mx = std::max(mx, static_cast<double>(lv[base + c]));
        double denom = 0.0;
        for (int c = 0; c < vocab; ++c) denom += std::exp(static_cast<double>(lv[base + c]) - mx);
        acc += std::log(denom) + mx - static_cast<double>(lv[base + targets[static_cast<size_t>(r)]]);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
    if (detail::want_grad(tape, {&logits})) {
        detail::mark_out(out);
        tape.record(out.node(), [ln = logits.node(), on = out.node(), targets, n, vocab]() {
            ln->ensure_grad();
            const double g = static_cast<double>(on->grad[0]) / n;
            for (int r = 0; r < n; ++r) {
                const size_t base = static_cast<size_t>(r) * vocab;
                double mx = static_cast<double>(ln->value[base]);
                for (int c = 1; c < vocab; ++c) mx = std::max(mx, static_cast<double>(ln->value[base + c]));
                double denom = 0.0;
                for (int c = 0; c < vocab; ++c) denom += std::exp(static_cast<double>(ln->value[base + c]) - mx);
                for (int c = 0; c < vocab; ++c) {
                    double p = std::exp(static_cast<double>(ln->value[base + c]) - mx) / denom;
                    double onehot = (c == targets[static_cast<size_t>(r)]) ? 1.0 : 0.0;
                    ln->grad[base + c] += static_cast<T>(g * (p - onehot));
                }
            }
        });
    }
    return out;
}

// weighted binary cross-entropy on raw logits; labels in {0,1}, loss is the
// weight-normalized mean. Stable via max(x,0) - x*y + log1p(exp(-|x|)).
template <class T>
Tensor<T> bce_logits(Tape<T>& tape, const Tensor<T>& logits, const std::vector<T>& labels,
                     const std::vector<T>& weights) {
    const int n = logits.numel();
    MOMO_CHECK(static_cast<int>(labels.size()) == n && static_cast<int>(weights.size()) == n,
               "bce_logits: labels/weights must match logit count " << n);
    const auto& xv = logits.values();
    double wsum = 0.0, acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = static_cast<double>(xv[static_cast<size_t>(i)]);
        double y = static_cast<double>(labels[static_cast<size_t>(i)]);
        double w = static_cast<double>(weights[static_cast<size_t>(i)]);
        acc += w * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
        wsum += w;
    }
    MOMO_CHECK(wsum > 0, "bce_logits: total weight must be positive");
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / wsum));
    if (detail::want_grad(tape, {&logits})) {
        detail::mark_out(out);
        tape.record(out.node(), [ln = logits.node(), on = out.node(), labels, weights, wsum, n]() {
            ln->ensure_grad();
            const double g = static_cast<double>(on->grad[0]) / wsum;
            for (int i = 0; i < n; ++i) {
                double x = static_cast<double>(ln->value[static_cast<size_t>(i)]);
                double sig = 1.0 / (1.0 + std::exp(-x));
                ln->grad[static_cast<size_t>(i)] += static_cast<T>(
                    g * static_cast<double>(weights[static_cast<size_t>(i)]) *
                    (sig - static_cast<double>(labels[static_cast<size_t>(i)])));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// indexing / layout
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, const std::vector<int>& idx) {
    MOMO_CHECK(x.rank() == 2, "gather_rows expects rank-2, got " << shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    for (int i : idx)
        MOMO_CHECK(i >= 0 && i < rows, "gather_rows: index " << i << " out of range [0," << rows << ")");
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(idx.size()), cols});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(xv.begin() + static_cast<size_t>(idx[r]) * cols, cols, ov.begin() + r * cols);
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node(), idx, cols]() {
            xn->ensure_grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int c = 0; c < cols; ++c)
                    xn->grad[static_cast<size_t>(idx[r]) * cols + c] += on->grad[r * cols + c];
        });
    }
    return out;
}

template <class T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, int start, int len) {
    MOMO_CHECK(x.rank() == 2 && start >= 0 && len >= 1 && start + len <= x.dim(0),
               "slice_rows [" << start << "," << start + len << ") out of " << shape_str(x.shape()));
    const int cols = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({len, cols});
    std::copy_n(x.values().begin() + static_cast<size_t>(start) * cols, static_cast<size_t>(len) * cols,
                out.values().begin());
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node(), start, len, cols]() {
            xn->ensure_grad();
            for (size_t i = 0; i < static_cast<size_t>(len) * cols; ++i)
                xn->grad[static_cast<size_t>(start) * cols + i] += on->grad[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x, int start, int len) {
    MOMO_CHECK(x.rank() == 2 && start >= 0 && len >= 1 && start + len <= x.dim(1),
               "slice_cols [" << start << "," << start + len << ") out of " << shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor<T> out = Tensor<T>::zeros({rows, len});
    const auto& xv = x.values();
    auto& ov = out.values();
    for (int r = 0; r < rows; ++r)
        std::copy_n(xv.begin() + static_cast<size_t>(r) * cols + start, len, ov.begin() + static_cast<size_t>(r) * len);
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node(), start, len, rows, cols]() {
            xn->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < len; ++c)
                    xn->grad[static_cast<size_t>(r) * cols + start + c] +=
                        on->grad[static_cast<size_t>(r) * len + c];
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
    MOMO_CHECK(!parts.empty(), "concat_rows: no parts");
    const int cols = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        MOMO_CHECK(p.rank() == 2 && p.dim(1) == cols, "concat_rows: column mismatch");
        rows += p.dim(0);
    }
    Tensor<T> out = Tensor<T>::zeros({rows, cols});
    auto& ov = out.values();
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), ov.begin() + off);
        off += p.values().size();
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape.recording() && any) {
        detail::mark_out(out);
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        nodes.reserve(parts.size());
        for (const auto& p : parts) nodes.push_back(p.node());
        tape.record(out.node(), [nodes, on = out.node()]() {
            size_t off2 = 0;
            for (auto& pn : nodes) {
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (size_t i = 0; i < pn->value.size(); ++i) pn->grad[i] += on->grad[off2 + i];
                }
                off2 += pn->value.size();
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> concat_cols(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
    MOMO_CHECK(!parts.empty(), "concat_cols: no parts");
    const int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        MOMO_CHECK(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch");
        cols += p.dim(1);
    }
    Tensor<T> out = Tensor<T>::zeros({rows, cols});
    auto& ov = out.values();
    int coff = 0;
    for (const auto& p : parts) {
        const int pc = p.dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy_n(p.values().begin() + static_cast<size_t>(r) * pc, pc,
                        ov.begin() + static_cast<size_t>(r) * cols + coff);
        coff += pc;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape.recording() && any) {
        detail::mark_out(out);
        std::vector<std::shared_ptr<TensorNode<T>>> nodes;
        std::vector<int> widths;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            widths.push_back(p.dim(1));
        }
        tape.record(out.node(), [nodes, widths, on = out.node(), rows, cols]() {
            int coff2 = 0;
            for (size_t k = 0; k < nodes.size(); ++k) {
                auto& pn = nodes[k];
                const int pc = widths[k];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < pc; ++c)
                            pn->grad[static_cast<size_t>(r) * pc + c] +=
                                on->grad[static_cast<size_t>(r) * cols + coff2 + c];
                }
                coff2 += pc;
            }
        });
    }
    return out;
}

// broadcast a length-C vector to n identical rows
template <class T>
Tensor<T> repeat_row(Tape<T>& tape, const Tensor<T>& v, int n) {
    MOMO_CHECK(v.rank() == 1 && n >= 1, "repeat_row expects rank-1 input and n >= 1");
    const int cols = v.dim(0);
    Tensor<T> out = Tensor<T>::zeros({n, cols});
    auto& ov = out.values();
    for (int r = 0; r < n; ++r) std::copy(v.values().begin(), v.values().end(), ov.begin() + static_cast<size_t>(r) * cols);
    if (detail::want_grad(tape, {&v})) {
        detail::mark_out(out);
        tape.record(out.node(), [vn = v.node(), on = out.node(), n, cols]() {
            vn->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < cols; ++c) vn->grad[c] += on->grad[static_cast<size_t>(r) * cols + c];
        });
    }
    return out;
}

template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, std::vector<int> shape) {
    int total = 1;
    for (int e : shape) total *= e;
    MOMO_CHECK(total == x.numel(),
               "reshape " << shape_str(x.shape()) << " -> " << shape_str(shape) << " changes element count");
    Tensor<T> out = Tensor<T>::from(std::move(shape), x.values());
    if (detail::want_grad(tape, {&x})) {
        detail::mark_out(out);
        tape.record(out.node(), [xn = x.node(), on = out.node()]() {
            xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

using TensorF = Tensor<float>;
using TapeF = Tape<float>;

}  // namespace momo

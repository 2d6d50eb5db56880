#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <utility>

#include "mspg/common.hpp"
#include "mspg/rng.hpp"

namespace mspg {

template <typename T>
class Tape;

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // sized like values iff requires_grad
    bool requires_grad = false;
    bool leaf = true;
    const void* origin = nullptr;  // tape that produced this node, if any
};

// Value-semantics handle to a tensor node. Copies share the underlying data.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (mspg::numel(shape) != values.size())
            fail("tensor: shape " + shape_str(shape) + " wants " + std::to_string(mspg::numel(shape)) +
                 " values, got " + std::to_string(values.size()));
        Tensor t;
        t.d = std::make_shared<TensorData<T>>();
        t.d->shape = std::move(shape);
        t.d->values = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> v(mspg::numel(shape), T(0));
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> v(mspg::numel(shape), value);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from(Shape{}, std::vector<T>{value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d); }
    const Shape& shape() const { return d->shape; }
    std::size_t rank() const { return d->shape.size(); }
    std::size_t numel() const { return d->values.size(); }
    std::vector<T>& values() { return d->values; }
    const std::vector<T>& values() const { return d->values; }
    bool requires_grad() const { return d && d->requires_grad; }

    std::vector<T>& grad() {
        if (!requires_grad()) fail("grad() on tensor without requires_grad");
        return d->grad;
    }
    const std::vector<T>& grad() const {
        if (!requires_grad()) fail("grad() on tensor without requires_grad");
        return d->grad;
    }

    T item() const {
        if (numel() != 1) fail("item() on non-scalar tensor " + shape_str(d->shape));
        return d->values[0];
    }

    void zero_grad() {
        if (requires_grad()) std::fill(d->grad.begin(), d->grad.end(), T(0));
    }

    void set_requires_grad(bool rg) {
        d->requires_grad = rg;
        if (rg && d->grad.size() != d->values.size()) d->grad.assign(d->values.size(), T(0));
    }

    std::shared_ptr<TensorData<T>> d;
};

// Ordered record of executed operations. Ops append one backward closure per
// recorded node; backward() replays them in exact reverse execution order.
template <typename T>
class Tape {
public:
    explicit Tape(bool grad_enabled = true, bool strict_domain = true)
        : grad_(grad_enabled), strict_(strict_domain) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_; }
    bool strict() const { return strict_; }
    std::size_t size() const { return nodes_.size(); }

    // Marks `out` as produced by this tape and registers its backward rule.
    void record(const Tensor<T>& out, std::function<void()> bwd) {
        out.d->leaf = false;
        out.d->origin = this;
        outputs_.push_back(out.d);
        nodes_.push_back(std::move(bwd));
    }

    // Populates grads of every requires_grad tensor reachable from `loss`.
    // Leaf grads accumulate across calls; non-leaf grads are per-pass.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            fail("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            fail("backward: tensor does not require gradients (detached)");
        if (!loss.d->leaf && loss.d->origin != this)
            fail("backward: tensor is detached from this tape");
        for (auto& o : outputs_)
            if (o->requires_grad) std::fill(o->grad.begin(), o->grad.end(), T(0));
        loss.d->grad[0] += T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
    }

    void clear() {
        for (auto& o : outputs_) o->origin = nullptr;
        outputs_.clear();
        nodes_.clear();
    }

private:
    bool grad_;
    bool strict_;
    std::vector<std::function<void()>> nodes_;
    std::vector<std::shared_ptr<TensorData<T>>> outputs_;
};

namespace detail {

// Per-dimension strides of `in` aligned to a broadcast result of shape `rs`;
// broadcast dimensions get stride 0.
inline std::vector<std::size_t> bcast_strides(const Shape& rs, const Shape& in) {
    std::vector<std::size_t> eff(rs.size(), 0);
    auto ist = row_major_strides(in);
    std::size_t off = rs.size() - in.size();
    for (std::size_t d = 0; d < in.size(); ++d)
        eff[off + d] = (in[d] == 1) ? 0 : ist[d];
    return eff;
}

// Odometer walk over a result shape, yielding (linear, offa, offb).
template <class F>
void bcast_walk(const Shape& rs, const std::vector<std::size_t>& ea,
                const std::vector<std::size_t>& eb, F&& f) {
    std::size_t n = numel(rs), r = rs.size();
    if (r == 0) {
        f(std::size_t(0), std::size_t(0), std::size_t(0));
        return;
    }
    std::vector<std::size_t> coord(r, 0);
    std::size_t offa = 0, offb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, offa, offb);
        for (std::size_t d = r; d-- > 0;) {
            ++coord[d];
            offa += ea[d];
            offb += eb[d];
            if (coord[d] < rs[d]) break;
            coord[d] = 0;
            offa -= ea[d] * rs[d];
            offb -= eb[d] * rs[d];
        }
    }
}

}  // namespace detail

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            fail("broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

enum class EwKind { Add, Sub, Mul, Div, Neg, Exp, Log, Relu, LeakyRelu, Sigmoid, Tanh, Pow };

namespace detail {

template <typename T, class FwdF, class BwdF>
Tensor<T> unary_op(Tape<T>& tp, const Tensor<T>& a, FwdF fwd, BwdF dydx) {
    std::size_t n = a.numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.values()[i]);
    Tensor<T> y = Tensor<T>::from(a.shape(), std::move(out));
    if (tp.grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto yd = y.d;
        tp.record(y, [ad, yd, dydx] {
            for (std::size_t i = 0; i < yd->values.size(); ++i) {
                T g = yd->grad[i];
                if (g == T(0)) continue;
                ad->grad[i] += g * dydx(ad->values[i], yd->values[i]);
            }
        });
    }
    return y;
}

template <typename T, class FwdF, class DaF, class DbF>
Tensor<T> binary_op(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b, FwdF fwd, DaF dfa,
                    DbF dfb, bool b_grad_ok = true) {
    Shape rs = broadcast_shape(a.shape(), b.shape());
    auto ea = bcast_strides(rs, a.shape());
    auto eb = bcast_strides(rs, b.shape());
    std::vector<T> out(numel(rs));
    const T* av = a.values().data();
    const T* bv = b.values().data();
    bcast_walk(rs, ea, eb,
               [&](std::size_t i, std::size_t oa, std::size_t ob) { out[i] = fwd(av[oa], bv[ob]); });
    Tensor<T> y = Tensor<T>::from(rs, std::move(out));
    bool need = tp.grad_enabled() && (a.requires_grad() || (b_grad_ok && b.requires_grad()));
    if (need) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto bd = b.d;
        auto yd = y.d;
        bool bg = b_grad_ok;
        tp.record(y, [ad, bd, yd, ea, eb, rs, dfa, dfb, bg] {
            bcast_walk(rs, ea, eb, [&](std::size_t i, std::size_t oa, std::size_t ob) {
                T g = yd->grad[i];
                if (g == T(0)) return;
                T x = ad->values[oa], w = bd->values[ob], v = yd->values[i];
                if (ad->requires_grad) ad->grad[oa] += g * dfa(x, w, v);
                if (bg && bd->requires_grad) bd->grad[ob] += g * dfb(x, w, v);
            });
        });
    }
    return y;
}

}  // namespace detail

template <typename T>
Tensor<T> add(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        tp, a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        tp, a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        tp, a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (tp.strict()) {
        for (T y : b.values())
            if (y == T(0)) fail("div: zero divisor in strict mode");
    }
    return detail::binary_op(
        tp, a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Tensor<T> pow_(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (tp.strict() && tp.grad_enabled() && b.requires_grad()) {
        for (T x : a.values())
            if (x <= T(0)) fail("pow: exponent gradient needs positive base in strict mode");
    }
    return detail::binary_op(
        tp, a, b, [](T x, T y) { return std::pow(x, y); },
        [](T x, T y, T) { return y * std::pow(x, y - T(1)); },
        [](T x, T, T v) { return v * std::log(x); });
}

template <typename T>
Tensor<T> neg(Tape<T>& tp, const Tensor<T>& a) {
    return detail::unary_op(
        tp, a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp_(Tape<T>& tp, const Tensor<T>& a) {
    return detail::unary_op(
        tp, a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_(Tape<T>& tp, const Tensor<T>& a) {
    if (tp.strict()) {
        for (T x : a.values())
            if (x <= T(0)) fail("log: nonpositive operand in strict mode");
    }
    return detail::unary_op(
        tp, a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> relu(Tape<T>& tp, const Tensor<T>& a) {
    return detail::unary_op(
        tp, a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tp, const Tensor<T>& a, T slope = T(0.01)) {
    return detail::unary_op(
        tp, a, [slope](T x) { return x > T(0) ? x : slope * x; },
        [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
T sigmoid_value(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tp, const Tensor<T>& a) {
    return detail::unary_op(
        tp, a, [](T x) { return sigmoid_value(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh_(Tape<T>& tp, const Tensor<T>& a) {
    return detail::unary_op(
        tp, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

// Scalar conveniences.
template <typename T>
Tensor<T> add(Tape<T>& tp, const Tensor<T>& a, T s) {
    return add(tp, a, Tensor<T>::scalar(s));
}
template <typename T>
Tensor<T> sub(Tape<T>& tp, const Tensor<T>& a, T s) {
    return sub(tp, a, Tensor<T>::scalar(s));
}
template <typename T>
Tensor<T> mul(Tape<T>& tp, const Tensor<T>& a, T s) {
    return mul(tp, a, Tensor<T>::scalar(s));
}
template <typename T>
Tensor<T> pow_(Tape<T>& tp, const Tensor<T>& a, T s) {
    return pow_(tp, a, Tensor<T>::scalar(s));
}

template <typename T>
Tensor<T> elementwise(Tape<T>& tp, EwKind kind, const Tensor<T>& a,
                      const Tensor<T>* b = nullptr) {
    auto need2 = [&]() -> const Tensor<T>& {
        if (!b) fail("elementwise: binary op requires two operands");
        return *b;
    };
    switch (kind) {
        case EwKind::Add: return add(tp, a, need2());
        case EwKind::Sub: return sub(tp, a, need2());
        case EwKind::Mul: return mul(tp, a, need2());
        case EwKind::Div: return div(tp, a, need2());
        case EwKind::Pow: return pow_(tp, a, need2());
        case EwKind::Neg: return neg(tp, a);
        case EwKind::Exp: return exp_(tp, a);
        case EwKind::Log: return log_(tp, a);
        case EwKind::Relu: return relu(tp, a);
        case EwKind::LeakyRelu: return leaky_relu(tp, a);
        case EwKind::Sigmoid: return sigmoid(tp, a);
        case EwKind::Tanh: return tanh_(tp, a);
    }
    fail("elementwise: unknown op kind");
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(Tape<T>& tp, const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.numel())
        fail("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes numel");
    Tensor<T> y = Tensor<T>::from(std::move(shape), a.values());
    if (tp.grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto yd = y.d;
        tp.record(y, [ad, yd] {
            for (std::size_t i = 0; i < yd->grad.size(); ++i) ad->grad[i] += yd->grad[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> permute(Tape<T>& tp, const Tensor<T>& a, const std::vector<std::size_t>& perm) {
    std::size_t r = a.rank();
    if (perm.size() != r) fail("permute: perm rank mismatch");
    std::vector<bool> seen(r, false);
    Shape os(r);
    for (std::size_t d = 0; d < r; ++d) {
        if (perm[d] >= r || seen[perm[d]]) fail("permute: invalid permutation");
        seen[perm[d]] = true;
        os[d] = a.shape()[perm[d]];
    }
    auto ist = row_major_strides(a.shape());
    auto ost = row_major_strides(os);
    std::vector<T> out(a.numel());
    // walk output linearly; input offset moves by the permuted stride
    std::vector<std::size_t> estr(r);
    for (std::size_t d = 0; d < r; ++d) estr[d] = ist[perm[d]];
    std::vector<std::size_t> coord(r, 0);
    std::size_t ioff = 0;
    const T* av = a.values().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[ioff];
        for (std::size_t d = r; d-- > 0;) {
            ++coord[d];
            ioff += estr[d];
            if (coord[d] < os[d]) break;
            coord[d] = 0;
            ioff -= estr[d] * os[d];
        }
    }
    Tensor<T> y = Tensor<T>::from(os, std::move(out));
    if (tp.grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto yd = y.d;
        tp.record(y, [ad, yd, estr, os, r] {
            std::vector<std::size_t> c(r, 0);
            std::size_t io = 0;
            for (std::size_t i = 0; i < yd->grad.size(); ++i) {
                ad->grad[io] += yd->grad[i];
                for (std::size_t d = r; d-- > 0;) {
                    ++c[d];
                    io += estr[d];
                    if (c[d] < os[d]) break;
                    c[d] = 0;
                    io -= estr[d] * os[d];
                }
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> concat(Tape<T>& tp, const std::vector<Tensor<T>>& xs, std::size_t axis) {
    if (xs.empty()) fail("concat: empty input list");
    std::size_t r = xs[0].rank();
    if (axis >= r) fail("concat: axis out of range");
    Shape os = xs[0].shape();
    std::size_t total = 0;
    for (const auto& x : xs) {
        if (x.rank() != r) fail("concat: rank mismatch");
        for (std::size_t d = 0; d < r; ++d)
            if (d != axis && x.shape()[d] != os[d])
                fail("concat: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(os));
        total += x.shape()[axis];
    }
    os[axis] = total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= os[d];
    for (std::size_t d = axis + 1; d < r; ++d) inner *= os[d];
    std::vector<T> out(numel(os));
    std::size_t pos = 0;
    for (const auto& x : xs) {
        std::size_t len = x.shape()[axis];
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + pos) * inner,
                        x.values().data() + o * len * inner, len * inner * sizeof(T));
        pos += len;
    }
    Tensor<T> y = Tensor<T>::from(os, std::move(out));
    bool any = false;
    for (const auto& x : xs) any = any || x.requires_grad();
    if (tp.grad_enabled() && any) {
        y.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorData<T>>> ins;
        for (const auto& x : xs) ins.push_back(x.d);
        auto yd = y.d;
        tp.record(y, [ins, yd, outer, inner, total, axis] {
            std::size_t p = 0;
            for (auto& in : ins) {
                std::size_t len = in->shape[axis];
                if (in->requires_grad) {
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* g = yd->grad.data() + (o * total + p) * inner;
                        T* dst = in->grad.data() + o * len * inner;
                        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                    }
                }
                p += len;
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> slice(Tape<T>& tp, const Tensor<T>& a, std::size_t axis, std::size_t start,
                std::size_t len) {
    std::size_t r = a.rank();
    if (axis >= r) fail("slice: axis out of range");
    if (start + len > a.shape()[axis]) fail("slice: range exceeds extent");
    Shape os = a.shape();
    os[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
    for (std::size_t d = axis + 1; d < r; ++d) inner *= a.shape()[d];
    std::size_t full = a.shape()[axis];
    std::vector<T> out(numel(os));
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner,
                    a.values().data() + (o * full + start) * inner, len * inner * sizeof(T));
    Tensor<T> y = Tensor<T>::from(os, std::move(out));
    if (tp.grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto yd = y.d;
        tp.record(y, [ad, yd, outer, inner, full, len, start] {
            for (std::size_t o = 0; o < outer; ++o) {
                const T* g = yd->grad.data() + o * len * inner;
                T* dst = ad->grad.data() + (o * full + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
            }
        });
    }
    return y;
}

// Zero padding on the two spatial axes of a [B,C,H,W] tensor.
template <typename T>
Tensor<T> pad2d(Tape<T>& tp, const Tensor<T>& a, std::size_t top, std::size_t bottom,
                std::size_t left, std::size_t right) {
    if (a.rank() != 4) fail("pad2d: expects rank-4 input, got " + shape_str(a.shape()));
    auto s = a.shape();
    std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    std::size_t Ho = H + top + bottom, Wo = W + left + right;
    std::vector<T> out(B * C * Ho * Wo, T(0));
    const T* av = a.values().data();
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t y0 = 0; y0 < H; ++y0)
            std::memcpy(out.data() + ((bc * Ho + y0 + top) * Wo + left),
                        av + (bc * H + y0) * W, W * sizeof(T));
    Tensor<T> y = Tensor<T>::from({B, C, Ho, Wo}, std::move(out));
    if (tp.grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto yd = y.d;
        tp.record(y, [ad, yd, B, C, H, W, Ho, Wo, top, left] {
            for (std::size_t bc = 0; bc < B * C; ++bc)
                for (std::size_t y0 = 0; y0 < H; ++y0) {
                    const T* g = yd->grad.data() + ((bc * Ho + y0 + top) * Wo + left);
                    T* dst = ad->grad.data() + (bc * H + y0) * W;
                    for (std::size_t x0 = 0; x0 < W; ++x0) dst[x0] += g[x0];
                }
        });
    }
    return y;
}

template <typename T>
Tensor<T> crop2d(Tape<T>& tp, const Tensor<T>& a, std::size_t top, std::size_t left,
                 std::size_t h, std::size_t w) {
    Tensor<T> y = slice(tp, a, 2, top, h);
    return slice(tp, y, 3, left, w);
}

// New leaf holding the same values, cut from the graph.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
    return Tensor<T>::from(a.shape(), a.values(), false);
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

// a: [..., m, k]; b: [..., k, n] with identical leading dims, or rank-2 [k, n]
// shared across the batch. Gradients: dA = dC.B^T, dB = A^T.dC.
template <typename T>
Tensor<T> matmul(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) fail("matmul: operands must have rank >= 2");
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
    std::size_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
    if (k != kb)
        fail("matmul: inner dimension mismatch " + shape_str(as) + " vs " + shape_str(bs));
    bool shared_b = (bs.size() == 2);
    Shape lead(as.begin(), as.end() - 2);
    if (!shared_b) {
        Shape bl(bs.begin(), bs.end() - 2);
        if (bl != lead)
            fail("matmul: batch dims mismatch " + shape_str(as) + " vs " + shape_str(bs));
    }
    std::size_t L = numel(lead);
    Shape os = lead;
    os.push_back(m);
    os.push_back(n);
    std::vector<T> out(numel(os), T(0));
    const T* A = a.values().data();
    const T* Bv = b.values().data();
    parallel_for(L, [&](std::size_t l) {
        const T* Al = A + l * m * k;
        const T* Bl = Bv + (shared_b ? 0 : l * k * n);
        T* Cl = out.data() + l * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                T av = Al[i * k + p];
                if (av == T(0)) continue;
                const T* brow = Bl + p * n;
                T* crow = Cl + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    });
    Tensor<T> y = Tensor<T>::from(os, std::move(out));
    if (tp.grad_enabled() && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto bd = b.d;
        auto yd = y.d;
        tp.record(y, [ad, bd, yd, L, m, n, k, shared_b] {
            const T* A = ad->values.data();
            const T* Bv = bd->values.data();
            const T* G = yd->grad.data();
            if (ad->requires_grad) {
                T* dA = ad->grad.data();
                parallel_for(L, [&](std::size_t l) {
                    const T* Gl = G + l * m * n;
                    const T* Bl = Bv + (shared_b ? 0 : l * k * n);
                    T* dAl = dA + l * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            T g = Gl[i * n + j];
                            if (g == T(0)) continue;
                            const T* brow = Bl + j;
                            T* darow = dAl + i * k;
                            for (std::size_t p = 0; p < k; ++p) darow[p] += g * brow[p * n];
                        }
                });
            }
            if (bd->requires_grad) {
                T* dB = bd->grad.data();
                // serial over the batch: shared-b accumulation must stay ordered
                for (std::size_t l = 0; l < L; ++l) {
                    const T* Gl = G + l * m * n;
                    const T* Al = A + l * m * k;
                    T* dBl = dB + (shared_b ? 0 : l * k * n);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            T av = Al[i * k + p];
                            if (av == T(0)) continue;
                            const T* grow = Gl + i * n;
                            T* dbrow = dBl + p * n;
                            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
                        }
                }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

enum class Pad { Same, Valid };

// x: [B,C,H,W]; kernel: [O,C,k,k], or [C,1,k,k] when depthwise. Odd k only.
template <typename T>
Tensor<T> conv2d(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 Pad padding, bool depthwise = false) {
    if (x.rank() != 4) fail("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    if (kernel.rank() != 4) fail("conv2d: kernel must be rank 4, got " + shape_str(kernel.shape()));
    if (stride < 1) fail("conv2d: stride must be >= 1");
    auto xs = x.shape();
    auto ks = kernel.shape();
    std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    std::size_t O = ks[0], KC = ks[1], kh = ks[2], kw = ks[3];
    if (kh != kw || kh % 2 == 0) fail("conv2d: kernel must be square with odd extent, got " + shape_str(ks));
    std::size_t k = kh;
    if (depthwise) {
        if (O != C || KC != 1)
            fail("conv2d: depthwise kernel must be [C,1,k,k] with C=" + std::to_string(C) +
                 ", got " + shape_str(ks));
    } else if (KC != C) {
        fail("conv2d: kernel channels " + std::to_string(KC) + " != input channels " +
             std::to_string(C));
    }
    std::size_t p = (padding == Pad::Same) ? k / 2 : 0;
    if (k > H + 2 * p || k > W + 2 * p)
        fail("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
             shape_str(xs));
    std::size_t Ho = (H + 2 * p - k) / stride + 1;
    std::size_t Wo = (W + 2 * p - k) / stride + 1;
    std::vector<T> out(B * O * Ho * Wo, T(0));
    const T* X = x.values().data();
    const T* Kv = kernel.values().data();
    auto run_fwd = [&](std::size_t b) {
        for (std::size_t o = 0; o < O; ++o) {
            std::size_t c_lo = depthwise ? o : 0;
            std::size_t c_hi = depthwise ? o + 1 : C;
            T* dst = out.data() + (b * O + o) * Ho * Wo;
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    T acc = T(0);
                    for (std::size_t c = c_lo; c < c_hi; ++c) {
                        const T* xc = X + (b * C + c) * H * W;
                        const T* kc = Kv + (o * KC + (depthwise ? 0 : c)) * k * k;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            std::ptrdiff_t iy =
                                std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(p);
                            if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                std::ptrdiff_t ix =
                                    std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(p);
                                if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                                acc += xc[iy * W + ix] * kc[ky * k + kx];
                            }
                        }
                    }
                    dst[oy * Wo + ox] = acc;
                }
        }
    };
    parallel_for(B, run_fwd);
    Tensor<T> y = Tensor<T>::from({B, O, Ho, Wo}, std::move(out));
    if (tp.grad_enabled() && (x.requires_grad() || kernel.requires_grad())) {
        y.set_requires_grad(true);
        auto xd = x.d;
        auto kd = kernel.d;
        auto yd = y.d;
        tp.record(y, [xd, kd, yd, B, C, O, KC, H, W, Ho, Wo, k, p, stride, depthwise] {
            const T* X = xd->values.data();
            const T* Kv = kd->values.data();
            const T* G = yd->grad.data();
            if (xd->requires_grad) {
                T* dX = xd->grad.data();
                parallel_for(B, [&](std::size_t b) {
                    for (std::size_t o = 0; o < O; ++o) {
                        std::size_t c_lo = depthwise ? o : 0;
                        std::size_t c_hi = depthwise ? o + 1 : C;
                        const T* g = G + (b * O + o) * Ho * Wo;
                        for (std::size_t oy = 0; oy < Ho; ++oy)
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                T gv = g[oy * Wo + ox];
                                if (gv == T(0)) continue;
                                for (std::size_t c = c_lo; c < c_hi; ++c) {
                                    T* dxc = dX + (b * C + c) * H * W;
                                    const T* kc = Kv + (o * KC + (depthwise ? 0 : c)) * k * k;
                                    for (std::size_t ky = 0; ky < k; ++ky) {
                                        std::ptrdiff_t iy =
                                            std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(p);
                                        if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                                        for (std::size_t kx = 0; kx < k; ++kx) {
                                            std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) -
                                                                std::ptrdiff_t(p);
                                            if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                                            dxc[iy * W + ix] += gv * kc[ky * k + kx];
                                        }
                                    }
                                }
                            }
                    }
                });
            }
            if (kd->requires_grad) {
                T* dK = kd->grad.data();
                // serial: every batch element touches the same kernel grads
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t o = 0; o < O; ++o) {
                        std::size_t c_lo = depthwise ? o : 0;
                        std::size_t c_hi = depthwise ? o + 1 : C;
                        const T* g = G + (b * O + o) * Ho * Wo;
                        for (std::size_t oy = 0; oy < Ho; ++oy)
                            for (std::size_t ox = 0; ox < Wo; ++ox) {
                                T gv = g[oy * Wo + ox];
                                if (gv == T(0)) continue;
                                for (std::size_t c = c_lo; c < c_hi; ++c) {
                                    const T* xc = X + (b * C + c) * H * W;
                                    T* dkc = dK + (o * KC + (depthwise ? 0 : c)) * k * k;
                                    for (std::size_t ky = 0; ky < k; ++ky) {
                                        std::ptrdiff_t iy =
                                            std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(p);
                                        if (iy < 0 || iy >= std::ptrdiff_t(H)) continue;
                                        for (std::size_t kx = 0; kx < k; ++kx) {
                                            std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) -
                                                                std::ptrdiff_t(p);
                                            if (ix < 0 || ix >= std::ptrdiff_t(W)) continue;
                                            dkc[ky * k + kx] += gv * xc[iy * W + ix];
                                        }
                                    }
                                }
                            }
                    }
            }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Reductions and softmax
// ---------------------------------------------------------------------------

enum class Reduce { Sum, Mean, Max };

namespace detail {

inline void check_axes(const Shape& shape, const std::vector<std::size_t>& axes) {
    if (axes.empty()) fail("reduce: empty axis list");
    std::vector<bool> seen(shape.size(), false);
    for (std::size_t a : axes) {
        if (a >= shape.size()) fail("reduce: axis out of range for " + shape_str(shape));
        if (seen[a]) fail("reduce: duplicate axis");
        seen[a] = true;
    }
}

}  // namespace detail

template <typename T>
Tensor<T> reduce(Tape<T>& tp, const Tensor<T>& a, Reduce kind,
                 const std::vector<std::size_t>& axes, bool keepdims = false) {
    detail::check_axes(a.shape(), axes);
    std::size_t r = a.rank();
    std::vector<bool> red(r, false);
    for (std::size_t ax : axes) red[ax] = true;
    Shape os;
    for (std::size_t d = 0; d < r; ++d) {
        if (!red[d]) os.push_back(a.shape()[d]);
        else if (keepdims) os.push_back(1);
    }
    std::size_t on = numel(os);
    std::size_t cnt = a.numel() / on;
    // map every input element to its output cell
    auto ist = row_major_strides(a.shape());
    std::vector<std::size_t> ost;  // per input dim, stride into output
    {
        Shape kept;
        for (std::size_t d = 0; d < r; ++d)
            if (!red[d]) kept.push_back(a.shape()[d]);
        auto ks = row_major_strides(kept);
        std::size_t ki = 0;
        ost.assign(r, 0);
        for (std::size_t d = 0; d < r; ++d)
            if (!red[d]) ost[d] = ks[ki++];
    }
    std::vector<T> out(on, kind == Reduce::Max ? -std::numeric_limits<T>::infinity() : T(0));
    std::vector<std::size_t> argmax(kind == Reduce::Max ? on : 0, 0);
    const T* av = a.values().data();
    {
        std::vector<std::size_t> coord(r, 0);
        std::size_t off = 0;
        for (std::size_t i = 0; i < a.numel(); ++i) {
            if (kind == Reduce::Max) {
                if (av[i] > out[off]) {
                    out[off] = av[i];
                    argmax[off] = i;
                }
            } else {
                out[off] += av[i];
            }
            for (std::size_t d = r; d-- > 0;) {
                ++coord[d];
                off += ost[d];
                if (coord[d] < a.shape()[d]) break;
                coord[d] = 0;
                off -= ost[d] * a.shape()[d];
            }
        }
    }
    if (kind == Reduce::Mean)
        for (T& v : out) v /= T(cnt);
    Tensor<T> y = Tensor<T>::from(os, std::move(out));
    if (tp.grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto yd = y.d;
        if (kind == Reduce::Max) {
            tp.record(y, [ad, yd, argmax] {
                for (std::size_t j = 0; j < yd->grad.size(); ++j)
                    ad->grad[argmax[j]] += yd->grad[j];
            });
        } else {
            T scale = kind == Reduce::Mean ? T(1) / T(cnt) : T(1);
            auto shape = a.shape();
            tp.record(y, [ad, yd, ost, shape, scale, r] {
                std::vector<std::size_t> coord(r, 0);
                std::size_t off = 0;
                for (std::size_t i = 0; i < ad->grad.size(); ++i) {
                    ad->grad[i] += yd->grad[off] * scale;
                    for (std::size_t d = r; d-- > 0;) {
                        ++coord[d];
                        off += ost[d];
                        if (coord[d] < shape[d]) break;
                        coord[d] = 0;
                        off -= ost[d] * shape[d];
                    }
                }
            });
        }
    }
    return y;
}

template <typename T>
Tensor<T> sum(Tape<T>& tp, const Tensor<T>& a, const std::vector<std::size_t>& axes,
              bool keepdims = false) {
    return reduce(tp, a, Reduce::Sum, axes, keepdims);
}
template <typename T>
Tensor<T> mean(Tape<T>& tp, const Tensor<T>& a, const std::vector<std::size_t>& axes,
               bool keepdims = false) {
    return reduce(tp, a, Reduce::Mean, axes, keepdims);
}
template <typename T>
Tensor<T> max_reduce(Tape<T>& tp, const Tensor<T>& a, const std::vector<std::size_t>& axes,
                     bool keepdims = false) {
    return reduce(tp, a, Reduce::Max, axes, keepdims);
}

template <typename T>
std::vector<std::size_t> all_axes(const Tensor<T>& a) {
    std::vector<std::size_t> ax(a.rank());
    std::iota(ax.begin(), ax.end(), 0);
    return ax;
}

template <typename T>
Tensor<T> sum_all(Tape<T>& tp, const Tensor<T>& a) {
    if (a.rank() == 0) return add(tp, a, T(0));
    return sum(tp, a, all_axes(a));
}
template <typename T>
Tensor<T> mean_all(Tape<T>& tp, const Tensor<T>& a) {
    if (a.rank() == 0) return add(tp, a, T(0));
    return mean(tp, a, all_axes(a));
}

// Max-subtracted softmax along one axis.
template <typename T>
Tensor<T> softmax(Tape<T>& tp, const Tensor<T>& a, std::size_t axis) {
    if (axis >= a.rank()) fail("softmax: axis out of range for " + shape_str(a.shape()));
    std::size_t L = a.shape()[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
    for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
    std::vector<T> out(a.numel());
    const T* av = a.values().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * L * inner + in;
            T mx = av[base];
            for (std::size_t j = 1; j < L; ++j) mx = std::max(mx, av[base + j * inner]);
            T z = T(0);
            for (std::size_t j = 0; j < L; ++j) {
                T e = std::exp(av[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < L; ++j) out[base + j * inner] /= z;
        }
    Tensor<T> y = Tensor<T>::from(a.shape(), std::move(out));
    if (tp.grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto yd = y.d;
        tp.record(y, [ad, yd, outer, inner, L] {
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    std::size_t base = o * L * inner + in;
                    T dots = T(0);
                    for (std::size_t j = 0; j < L; ++j)
                        dots += yd->grad[base + j * inner] * yd->values[base + j * inner];
                    for (std::size_t j = 0; j < L; ++j) {
                        std::size_t idx = base + j * inner;
                        ad->grad[idx] += yd->values[idx] * (yd->grad[idx] - dots);
                    }
                }
        });
    }
    return y;
}

// Inverted dropout with a seeded mask; identity when rate == 0.
template <typename T>
Tensor<T> dropout(Tape<T>& tp, const Tensor<T>& a, T rate, Rng& rng) {
    if (rate < T(0) || rate >= T(1)) fail("dropout: rate must be in [0,1)");
    if (rate == T(0)) return a;
    std::size_t n = a.numel();
    auto mask = std::make_shared<std::vector<T>>(n);
    T keep = T(1) - rate;
    for (std::size_t i = 0; i < n; ++i)
        (*mask)[i] = (T(rng.uniform()) < rate) ? T(0) : T(1) / keep;
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] * (*mask)[i];
    Tensor<T> y = Tensor<T>::from(a.shape(), std::move(out));
    if (tp.grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        auto ad = a.d;
        auto yd = y.d;
        tp.record(y, [ad, yd, mask] {
            for (std::size_t i = 0; i < yd->grad.size(); ++i)
                ad->grad[i] += yd->grad[i] * (*mask)[i];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Tensor serialization: magic "MSPT", u8 dtype, u8 rank, u32 extents, values.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 0 : 1;
}

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}

template <typename U>
void put(std::string& out, U v) {
    put_bytes(out, &v, sizeof(U));  // little-endian host assumed
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;
    void read(void* p, std::size_t n) {
        if (pos + n > buf.size()) fail("deserialize: truncated buffer");
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    template <typename U>
    U get() {
        U v;
        read(&v, sizeof(U));
        return v;
    }
};

}  // namespace detail

template <typename T>
void serialize_tensor(std::string& out, const Tensor<T>& t) {
    out += "MSPT";
    detail::put<std::uint8_t>(out, detail::dtype_code<T>());
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    detail::put_bytes(out, t.values().data(), t.numel() * sizeof(T));
}

template <typename T>
Tensor<T> deserialize_tensor(detail::ByteReader& r) {
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, "MSPT", 4) != 0) fail("deserialize: bad tensor magic");
    auto dtype = r.template get<std::uint8_t>();
    if (dtype != detail::dtype_code<T>()) fail("deserialize: tensor dtype mismatch");
    auto rank = r.template get<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = r.template get<std::uint32_t>();
    std::vector<T> vals(numel(shape));
    r.read(vals.data(), vals.size() * sizeof(T));
    return Tensor<T>::from(std::move(shape), std::move(vals));
}

}  // namespace mspg

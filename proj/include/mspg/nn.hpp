#pragma once

#include <string>

#include "mspg/rng.hpp"
#include "mspg/tensor.hpp"

namespace mspg {

// Named parameter registry. Modules append their tensors here so optimizers,
// EMA shadows and checkpoints all see one flat ordered list.
template <typename T>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor<T>> items;

    void add(const std::string& name, const Tensor<T>& t) {
        names.push_back(name);
        items.push_back(t);
    }
    void absorb(const ParamSet& other) {
        for (std::size_t i = 0; i < other.items.size(); ++i)
            add(other.names[i], other.items[i]);
    }
    std::size_t size() const { return items.size(); }
    void set_requires_grad(bool rg) {
        for (auto& t : items) t.set_requires_grad(rg);
    }
    void zero_grad() {
        for (auto& t : items) t.zero_grad();
    }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& t : items) n += t.numel();
        return n;
    }
};

template <typename T>
Tensor<T> xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    T bound = std::sqrt(T(6) / T(fan_in + fan_out));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = T(rng.uniform(-double(bound), double(bound)));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

enum class Act { None, Relu, LeakyRelu, Sigmoid, Tanh };

template <typename T>
Tensor<T> activate(Tape<T>& tp, const Tensor<T>& x, Act act) {
    switch (act) {
        case Act::None: return x;
        case Act::Relu: return relu(tp, x);
        case Act::LeakyRelu: return leaky_relu(tp, x, T(0.2));
        case Act::Sigmoid: return sigmoid(tp, x);
        case Act::Tanh: return tanh_(tp, x);
    }
    fail("activate: unknown activation");
}

template <typename T>
struct Linear {
    Tensor<T> W;  // [in, out]
    Tensor<T> b;  // [out]

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng)
        : W(xavier_uniform<T>({in, out}, in, out, rng)),
          b(Tensor<T>::zeros({out}, true)) {}

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& x) const {
        return add(tp, matmul(tp, x, W), b);
    }
    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".W", W);
        ps.add(prefix + ".b", b);
    }
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> K;  // [O,C,k,k] or [C,1,k,k] depthwise
    Tensor<T> b;  // [O]
    std::size_t stride = 1;
    Pad pad = Pad::Same;
    bool depthwise = false;

    Conv2dLayer() = default;
    Conv2dLayer(std::size_t in_ch, std::size_t out_ch, std::size_t k, Rng& rng,
                std::size_t stride_ = 1, Pad pad_ = Pad::Same, bool depthwise_ = false)
        : stride(stride_), pad(pad_), depthwise(depthwise_) {
        std::size_t fan_in = (depthwise_ ? 1 : in_ch) * k * k;
        std::size_t fan_out = (depthwise_ ? 1 : out_ch) * k * k;
        Shape ks = depthwise_ ? Shape{in_ch, 1, k, k} : Shape{out_ch, in_ch, k, k};
        K = xavier_uniform<T>(ks, fan_in, fan_out, rng);
        b = Tensor<T>::zeros({depthwise_ ? in_ch : out_ch}, true);
    }

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& x) const {
        auto y = conv2d(tp, x, K, stride, pad, depthwise);
        auto bb = reshape(tp, b, {1, b.numel(), 1, 1});
        return add(tp, y, bb);
    }
    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        ps.add(prefix + ".K", K);
        ps.add(prefix + ".b", b);
    }
};

template <typename T>
struct Mlp {
    std::vector<Linear<T>> layers;
    Act hidden_act = Act::LeakyRelu;
    Act out_act = Act::None;

    Mlp() = default;
    Mlp(const std::vector<std::size_t>& widths, Rng& rng, Act hidden = Act::LeakyRelu,
        Act out = Act::None)
        : hidden_act(hidden), out_act(out) {
        if (widths.size() < 2) fail("mlp: needs at least input and output widths");
        for (std::size_t i = 0; i + 1 < widths.size(); ++i)
            layers.emplace_back(widths[i], widths[i + 1], rng);
    }

    Tensor<T> forward(Tape<T>& tp, Tensor<T> x) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i].forward(tp, x);
            x = activate(tp, x, i + 1 == layers.size() ? out_act : hidden_act);
        }
        return x;
    }
    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].collect(ps, prefix + ".fc" + std::to_string(i));
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean binary cross-entropy on raw logits, computed in the overflow-safe form
// max(z,0) - z*y + log1p(exp(-|z|)). Fused backward: d/dz = (sigmoid(z)-y)/N.
template <typename T>
Tensor<T> bce_logits(Tape<T>& tp, const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.shape() != targets.shape())
        fail("bce_logits: shape mismatch " + shape_str(logits.shape()) + " vs " +
             shape_str(targets.shape()));
    std::size_t n = logits.numel();
    if (n == 0) fail("bce_logits: empty input");
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        T z = logits.values()[i], y = targets.values()[i];
        acc += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor<T> out = Tensor<T>::scalar(acc / T(n));
    if (tp.grad_enabled() && logits.requires_grad()) {
        out.set_requires_grad(true);
        auto ld = logits.d;
        auto td = targets.d;
        auto od = out.d;
        tp.record(out, [ld, td, od, n] {
            T g = od->grad[0] / T(n);
            if (g == T(0)) return;
            for (std::size_t i = 0; i < n; ++i)
                ld->grad[i] += g * (sigmoid_value(ld->values[i]) - td->values[i]);
        });
    }
    return out;
}

// Mean squared error over all elements.
template <typename T>
Tensor<T> mse(Tape<T>& tp, const Tensor<T>& a, const Tensor<T>& b) {
    auto d = sub(tp, a, b);
    return mean_all(tp, mul(tp, d, d));
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

// AdamW: Adam moments with decoupled weight decay, bias-corrected.
// SGD mode reuses the same interface without moment buffers.
template <typename T>
struct AdamW {
    ParamSet<T> params;
    std::vector<std::vector<T>> m, v;
    std::uint64_t t = 0;
    T lr = T(1e-3);
    T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
    T weight_decay = T(0.01);
    bool plain_sgd = false;

    AdamW() = default;
    explicit AdamW(ParamSet<T> ps, T lr_, T b1 = T(0.9), T b2 = T(0.999), T eps_ = T(1e-8),
                   T wd = T(0.01), bool sgd = false)
        : params(std::move(ps)), t(0), lr(lr_), beta1(b1), beta2(b2), eps(eps_),
          weight_decay(wd), plain_sgd(sgd) {
        if (!plain_sgd)
            for (const auto& p : params.items) {
                m.emplace_back(p.numel(), T(0));
                v.emplace_back(p.numel(), T(0));
            }
    }

    void step() {
        ++t;
        if (plain_sgd) {
            for (auto& p : params.items) {
                if (!p.requires_grad()) continue;
                auto& val = p.values();
                const auto& g = p.grad();
                for (std::size_t i = 0; i < val.size(); ++i)
                    val[i] -= lr * (g[i] + weight_decay * val[i]);
            }
            return;
        }
        T bc1 = T(1) - std::pow(beta1, T(t));
        T bc2 = T(1) - std::pow(beta2, T(t));
        for (std::size_t k = 0; k < params.items.size(); ++k) {
            auto& p = params.items[k];
            if (!p.requires_grad()) continue;
            auto& val = p.values();
            const auto& g = p.grad();
            auto& mk = m[k];
            auto& vk = v[k];
            for (std::size_t i = 0; i < val.size(); ++i) {
                mk[i] = beta1 * mk[i] + (T(1) - beta1) * g[i];
                vk[i] = beta2 * vk[i] + (T(1) - beta2) * g[i] * g[i];
                T mhat = mk[i] / bc1;
                T vhat = vk[i] / bc2;
                val[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * val[i]);
            }
        }
    }

    void zero_grad() { params.zero_grad(); }
};

// Exponential moving average of a parameter set. update() applies
// shadow = decay * shadow + (1 - decay) * param exactly; with warmup enabled
// the decay used at step t is min(decay, (1 + t) / (10 + t)), so early shadows
// track the model instead of the random init.
template <typename T>
struct Ema {
    std::vector<std::vector<T>> shadow;
    T decay = T(0.9999);
    bool warmup = true;
    std::uint64_t t = 0;

    Ema() = default;
    Ema(const ParamSet<T>& ps, T decay_, bool warmup_ = true) : decay(decay_), warmup(warmup_) {
        for (const auto& p : ps.items) shadow.push_back(p.values());
    }

    T effective_decay() const {
        if (!warmup) return decay;
        return std::min(decay, T(1 + t) / T(10 + t));
    }

    void update(const ParamSet<T>& ps) {
        T d = effective_decay();
        ++t;
        for (std::size_t k = 0; k < shadow.size(); ++k) {
            const auto& val = ps.items[k].values();
            auto& sh = shadow[k];
            for (std::size_t i = 0; i < sh.size(); ++i)
                sh[i] = d * sh[i] + (T(1) - d) * val[i];
        }
    }

    // Overwrites live params with the shadow (used for eval/sampling).
    void copy_to(ParamSet<T>& ps) const {
        for (std::size_t k = 0; k < shadow.size(); ++k) ps.items[k].values() = shadow[k];
    }

    // Swap shadow and live values; call twice to restore.
    void swap_with(ParamSet<T>& ps) {
        for (std::size_t k = 0; k < shadow.size(); ++k) std::swap(ps.items[k].values(), shadow[k]);
    }
};

}  // namespace mspg

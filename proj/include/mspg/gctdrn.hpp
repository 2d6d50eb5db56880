#pragma once

#include "mspg/dema.hpp"
#include "mspg/nn.hpp"

namespace mspg {

enum class FuseMode { Additive, Weighted };

// Two-flow dynamic residual block: three full conv branches (3/5/7), an
// attention flow, and a shortcut. Additive mode blends with learnable scalars
// alpha (init 1.0) and beta (init 0.1); weighted mode builds a per-position
// softmax over per-branch 1x1 scores instead.
template <typename T>
struct GctdrnBlock {
    std::size_t in_ch = 0, out_ch = 0;
    FuseMode mode = FuseMode::Additive;
    std::vector<std::size_t> kernels = {3, 5, 7};

    std::vector<Conv2dLayer<T>> branches;
    Tensor<T> alpha, beta;             // scalars, additive mode
    Dema<T> attention;                 // the attention flow of the additive form
    std::vector<Tensor<T>> score_proj; // per-branch [C,1], weighted mode
    Tensor<T> shortcut_proj;           // [in,out] 1x1, only when channels differ

    GctdrnBlock() = default;
    GctdrnBlock(std::size_t in_ch_, std::size_t out_ch_, Rng& rng,
                FuseMode mode_ = FuseMode::Additive, std::size_t heads = 3,
                std::size_t tokens = 4, std::size_t task_dim = 8, T tau = T(0.1),
                T dropout = T(0.1))
        : in_ch(in_ch_), out_ch(out_ch_), mode(mode_) {
        for (std::size_t k : kernels) branches.emplace_back(in_ch, out_ch, k, rng);
        if (branches.size() < 2) fail("gctdrn: needs at least 2 branches");
        alpha = Tensor<T>::scalar(T(1.0), true);
        beta = Tensor<T>::scalar(T(0.1), true);
        if (mode == FuseMode::Additive)
            attention = Dema<T>(in_ch, rng, heads, tokens, task_dim, tau, dropout);
        for (std::size_t i = 0; i < kernels.size(); ++i)
            score_proj.push_back(xavier_uniform<T>({out_ch, 1}, out_ch, 1, rng));
        if (in_ch != out_ch)
            shortcut_proj = xavier_uniform<T>({in_ch, out_ch}, in_ch, out_ch, rng);
    }

    Tensor<T> shortcut(Tape<T>& tp, const Tensor<T>& x) const {
        if (in_ch == out_ch) return x;
        return channel_map(tp, x, shortcut_proj);
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        for (std::size_t i = 0; i < branches.size(); ++i)
            branches[i].collect(ps, prefix + ".branch" + std::to_string(kernels[i]));
        if (mode == FuseMode::Additive) {
            ps.add(prefix + ".alpha", alpha);
            ps.add(prefix + ".beta", beta);
            attention.collect(ps, prefix + ".attn");
        } else {
            for (std::size_t i = 0; i < score_proj.size(); ++i)
                ps.add(prefix + ".score" + std::to_string(kernels[i]), score_proj[i]);
        }
        if (shortcut_proj.defined()) ps.add(prefix + ".shortcut", shortcut_proj);
    }
};

// F_final = alpha * (sum of branch convs) + beta * Attention(X) + Shortcut(X).
// With alpha = beta = 0 and matching channels this is the exact identity.
template <typename T>
Tensor<T> block_forward_additive(Tape<T>& tp, const Tensor<T>& x, const GctdrnBlock<T>& p,
                                 bool training, Rng& dropout_rng,
                                 Tensor<T>* contrastive_out = nullptr) {
    if (p.mode != FuseMode::Additive) fail("gctdrn: block was not built in additive mode");
    Tensor<T> bsum;
    for (std::size_t i = 0; i < p.branches.size(); ++i) {
        auto bi = p.branches[i].forward(tp, x);
        bsum = i == 0 ? bi : add(tp, bsum, bi);
    }
    auto attn = dema_forward(tp, x, p.attention, training, dropout_rng);
    if (contrastive_out) *contrastive_out = attn.contrastive;
    auto blend = add(tp, mul(tp, bsum, p.alpha), mul(tp, attn.fused, p.beta));
    return add(tp, blend, p.shortcut(tp, x));
}

// F_final = sum_i W_i * Branch_i + Shortcut(X), with W the per-position
// softmax over per-branch 1x1 score maps.
template <typename T>
Tensor<T> block_forward_weighted(Tape<T>& tp, const Tensor<T>& x, const GctdrnBlock<T>& p) {
    if (p.branches.size() < 2) fail("gctdrn: weighted fusion needs >= 2 branches");
    std::vector<Tensor<T>> outs, scores;
    for (std::size_t i = 0; i < p.branches.size(); ++i) {
        outs.push_back(p.branches[i].forward(tp, x));
        scores.push_back(channel_map(tp, outs.back(), p.score_proj[i]));  // [B,1,H,W]
    }
    auto w = softmax(tp, concat(tp, scores, 1), 1);  // [B,n,H,W]
    Tensor<T> acc;
    for (std::size_t i = 0; i < outs.size(); ++i) {
        auto wi = slice(tp, w, 1, i, 1);  // [B,1,H,W] broadcasts over channels
        auto term = mul(tp, outs[i], wi);
        acc = i == 0 ? term : add(tp, acc, term);
    }
    return add(tp, acc, p.shortcut(tp, x));
}

template <typename T>
Tensor<T> block_forward(Tape<T>& tp, const Tensor<T>& x, const GctdrnBlock<T>& p, bool training,
                        Rng& dropout_rng, Tensor<T>* contrastive_out = nullptr) {
    return p.mode == FuseMode::Additive
               ? block_forward_additive(tp, x, p, training, dropout_rng, contrastive_out)
               : block_forward_weighted(tp, x, p);
}

// Tail enhancement: F + broadcast(project(GAP(F))). Two-stage projection so
// the pooled vector passes through a nonlinearity before the broadcast add.
template <typename T>
struct GlobalEnhance {
    Linear<T> pool_proj, add_proj;

    GlobalEnhance() = default;
    GlobalEnhance(std::size_t channels, Rng& rng)
        : pool_proj(channels, channels, rng), add_proj(channels, channels, rng) {}

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& f) const {
        auto g = global_avg_pool(tp, f);  // [B,C]
        auto v = leaky_relu(tp, pool_proj.forward(tp, g), T(0.2));
        auto a = add_proj.forward(tp, v);  // [B,C]
        auto s = f.shape();
        auto a4 = reshape(tp, a, {s[0], s[1], std::size_t(1), std::size_t(1)});
        return add(tp, f, a4);
    }
    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        pool_proj.collect(ps, prefix + ".pool");
        add_proj.collect(ps, prefix + ".add");
    }
};

}  // namespace mspg

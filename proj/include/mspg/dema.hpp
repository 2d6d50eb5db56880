#pragma once

#include "mspg/nn.hpp"
#include "mspg/rng.hpp"
#include "mspg/tensor.hpp"

namespace mspg {

// 1x1 channel map on NCHW: x [B,C,H,W], W [C_in, C_out] -> [B,C_out,H,W].
template <typename T>
Tensor<T> channel_map(Tape<T>& tp, const Tensor<T>& x, const Tensor<T>& w) {
    auto s = x.shape();
    auto q = permute(tp, x, {0, 2, 3, 1});
    q = reshape(tp, q, {s[0] * s[2] * s[3], s[1]});
    auto y = matmul(tp, q, w);
    y = reshape(tp, y, {s[0], s[2], s[3], w.shape()[1]});
    return permute(tp, y, {0, 3, 1, 2});
}

template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tp, const Tensor<T>& x) {
    return mean(tp, x, {2, 3});  // [B,C,H,W] -> [B,C]
}

template <typename T>
Tensor<T> global_max_pool(Tape<T>& tp, const Tensor<T>& x) {
    return max_reduce(tp, x, {2, 3});
}

// Multi-scale attention block: depthwise multi-scale features, windowed local
// attention heads, pooled context tokens with cross-attention, and a softmax
// gate blending the local and global paths per sample.
template <typename T>
struct Dema {
    std::size_t channels = 0;
    std::size_t heads = 3;
    std::size_t tokens = 4;     // context tokens: avg, max, learned mixtures
    std::size_t task_dim = 8;
    T tau = T(0.1);
    T dropout_rate = T(0.1);
    std::vector<std::size_t> scales = {3, 5, 7};
    std::vector<std::size_t> windows = {2, 4, 8};  // one per head

    std::vector<Tensor<T>> scale_kernels;  // depthwise [C,1,k,k]
    std::vector<Tensor<T>> head_proj;      // per head [C/H, C/H]
    Tensor<T> head_fuse;                   // [C, C]
    Tensor<T> embed_avg, embed_max;        // [C, C]
    std::vector<Tensor<T>> embed_mix;      // tokens-2 of [2C, C]
    Mlp<T> gate;                           // C + task_dim -> C -> 2
    Tensor<T> task_embed;                  // [task_dim]
    Tensor<T> scale_fuse;                  // [scales*C, C]

    Dema() = default;
    Dema(std::size_t channels_, Rng& rng, std::size_t heads_ = 3, std::size_t tokens_ = 4,
         std::size_t task_dim_ = 8, T tau_ = T(0.1), T dropout_ = T(0.1))
        : channels(channels_), heads(heads_), tokens(tokens_), task_dim(task_dim_), tau(tau_),
          dropout_rate(dropout_) {
        if (heads < 1) fail("dema: head count must be >= 1");
        if (channels % heads != 0)
            fail("dema: channels " + std::to_string(channels) + " not divisible by " +
                 std::to_string(heads) + " heads");
        if (tokens < 2) fail("dema: needs at least 2 context tokens");
        if (!(tau > T(0))) fail("dema: temperature must be positive");
        if (windows.size() < heads) fail("dema: not enough window sizes for heads");
        std::size_t cs = channels / heads;
        for (std::size_t k : scales)
            scale_kernels.push_back(
                xavier_uniform<T>({channels, 1, k, k}, k * k, k * k, rng));
        for (std::size_t h = 0; h < heads; ++h)
            head_proj.push_back(xavier_uniform<T>({cs, cs}, cs, cs, rng));
        head_fuse = xavier_uniform<T>({channels, channels}, channels, channels, rng);
        embed_avg = xavier_uniform<T>({channels, channels}, channels, channels, rng);
        embed_max = xavier_uniform<T>({channels, channels}, channels, channels, rng);
        for (std::size_t k = 2; k < tokens; ++k)
            embed_mix.push_back(
                xavier_uniform<T>({2 * channels, channels}, 2 * channels, channels, rng));
        gate = Mlp<T>({channels + task_dim, channels, 2}, rng, Act::LeakyRelu, Act::None);
        {
            std::vector<T> te(task_dim);
            for (auto& v : te) v = T(rng.uniform(-0.1, 0.1));
            task_embed = Tensor<T>::from({task_dim}, std::move(te), true);
        }
        scale_fuse = xavier_uniform<T>({scales.size() * channels, channels},
                                       scales.size() * channels, channels, rng);
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        for (std::size_t i = 0; i < scale_kernels.size(); ++i)
            ps.add(prefix + ".scale" + std::to_string(scales[i]), scale_kernels[i]);
        for (std::size_t h = 0; h < head_proj.size(); ++h)
            ps.add(prefix + ".head" + std::to_string(h), head_proj[h]);
        ps.add(prefix + ".head_fuse", head_fuse);
        ps.add(prefix + ".embed_avg", embed_avg);
        ps.add(prefix + ".embed_max", embed_max);
        for (std::size_t k = 0; k < embed_mix.size(); ++k)
            ps.add(prefix + ".embed_mix" + std::to_string(k), embed_mix[k]);
        gate.collect(ps, prefix + ".gate");
        ps.add(prefix + ".task_embed", task_embed);
        ps.add(prefix + ".scale_fuse", scale_fuse);
    }
};

template <typename T>
struct DemaOutput {
    Tensor<T> fused;                 // [B,C,H,W]
    std::vector<Tensor<T>> focus;    // per scale, local-attention path
    std::vector<Tensor<T>> expand;   // per scale, context-attention path
    Tensor<T> alpha, beta;           // [B,1] gate weights, alpha + beta = 1
    Tensor<T> contrastive;           // scalar; zero when batch < 2
};

// Shape-preserving depthwise conv per configured scale.
template <typename T>
std::vector<Tensor<T>> multi_scale_features(Tape<T>& tp, const Tensor<T>& x,
                                            const Dema<T>& p) {
    if (x.rank() != 4) fail("dema: input must be [B,C,H,W], got " + shape_str(x.shape()));
    if (x.shape()[1] != p.channels)
        fail("dema: input channels " + std::to_string(x.shape()[1]) + " != configured " +
             std::to_string(p.channels));
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < p.scales.size(); ++i)
        out.push_back(conv2d(tp, x, p.scale_kernels[i], 1, Pad::Same, true));
    return out;
}

// Scaled dot-product self-attention within non-overlapping w x w windows of
// one head's channel slice, projected by that head's matrix. Q = K = V.
template <typename T>
Tensor<T> local_head_attention(Tape<T>& tp, const Tensor<T>& xi, const Dema<T>& p,
                               std::size_t h) {
    if (h >= p.heads) fail("dema: head index out of range");
    auto s = xi.shape();
    std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    std::size_t cs = C / p.heads;
    std::size_t w = p.windows[h];
    if (w < 1) fail("dema: window size must be >= 1");
    auto slice_h = slice(tp, xi, 1, h * cs, cs);  // [B,cs,H,W]
    std::size_t Hp = (H + w - 1) / w * w, Wp = (W + w - 1) / w * w;
    auto padded = (Hp != H || Wp != W) ? pad2d(tp, slice_h, 0, Hp - H, 0, Wp - W) : slice_h;
    if (w > Hp || w > Wp) fail("dema: window larger than padded spatial extent");
    std::size_t nh = Hp / w, nw = Wp / w, nwin = B * nh * nw;
    // [B,cs,Hp,Wp] -> windows of w*w positions with cs features each
    auto t = reshape(tp, padded, {B, cs, nh, w, nw, w});
    t = permute(tp, t, {0, 2, 4, 3, 5, 1});  // [B,nh,nw,w,w,cs]
    t = reshape(tp, t, {nwin, w * w, cs});
    auto proj = matmul(tp, t, p.head_proj[h]);  // Q = K = V
    auto scores = matmul(tp, proj, permute(tp, proj, {0, 2, 1}));
    scores = mul(tp, scores, T(1) / std::sqrt(T(cs)));
    auto attn = softmax(tp, scores, 2);
    auto out = matmul(tp, attn, proj);  // [nwin, w*w, cs]
    out = reshape(tp, out, {B, nh, nw, w, w, cs});
    out = permute(tp, out, {0, 5, 1, 3, 2, 4});  // [B,cs,nh,w,nw,w]
    out = reshape(tp, out, {B, cs, Hp, Wp});
    if (Hp != H || Wp != W) out = crop2d(tp, out, 0, 0, H, W);
    return out;
}

// Channel-concat all heads and map back to C channels with a 1x1 matrix.
template <typename T>
Tensor<T> fuse_heads(Tape<T>& tp, const std::vector<Tensor<T>>& head_outs,
                     const Tensor<T>& wc) {
    if (head_outs.empty()) fail("dema: no heads to fuse");
    for (const auto& ho : head_outs)
        if (ho.shape() != head_outs[0].shape())
            fail("dema: head shape mismatch " + shape_str(ho.shape()) + " vs " +
                 shape_str(head_outs[0].shape()));
    auto cat = head_outs.size() == 1 ? head_outs[0] : concat(tp, head_outs, 1);
    return channel_map(tp, cat, wc);
}

// K context tokens [B,K,C]: linear maps of the average pool, the max pool,
// and learned mixtures of both.
template <typename T>
Tensor<T> global_embed(Tape<T>& tp, const Tensor<T>& x, const Dema<T>& p) {
    auto avg = global_avg_pool(tp, x);  // [B,C]
    auto mx = global_max_pool(tp, x);
    std::size_t B = x.shape()[0], C = x.shape()[1];
    std::vector<Tensor<T>> toks;
    toks.push_back(reshape(tp, matmul(tp, avg, p.embed_avg), {B, std::size_t(1), C}));
    toks.push_back(reshape(tp, matmul(tp, mx, p.embed_max), {B, std::size_t(1), C}));
    auto both = concat<T>(tp, {avg, mx}, 1);  // [B,2C]
    for (const auto& wmix : p.embed_mix)
        toks.push_back(reshape(tp, matmul(tp, both, wmix), {B, std::size_t(1), C}));
    return concat(tp, toks, 1);  // [B,K,C]
}

// Projection-free cross-attention: each spatial position queries the context
// tokens; weights softmax(x . c / sqrt(C)) over K.
template <typename T>
Tensor<T> context_attention(Tape<T>& tp, const Tensor<T>& xi, const Tensor<T>& ctx) {
    auto s = xi.shape();
    std::size_t B = s[0], C = s[1], H = s[2], W = s[3];
    if (ctx.rank() != 3 || ctx.shape()[0] != B || ctx.shape()[2] != C)
        fail("dema: context tokens " + shape_str(ctx.shape()) + " mismatch features " +
             shape_str(s));
    if (ctx.shape()[1] < 2) fail("dema: needs at least 2 context tokens");
    auto q = reshape(tp, permute(tp, xi, {0, 2, 3, 1}), {B, H * W, C});
    auto scores = matmul(tp, q, permute(tp, ctx, {0, 2, 1}));  // [B,HW,K]
    scores = mul(tp, scores, T(1) / std::sqrt(T(C)));
    auto attn = softmax(tp, scores, 2);
    auto e = matmul(tp, attn, ctx);  // [B,HW,C]
    return permute(tp, reshape(tp, e, {B, H, W, C}), {0, 3, 1, 2});
}

// Softmax gate over two logits from MLP(concat(pooled features, task embed)).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dynamic_gate(Tape<T>& tp, const Tensor<T>& x,
                                             const Dema<T>& p) {
    if (p.task_embed.numel() != p.task_dim)
        fail("dema: task embedding length " + std::to_string(p.task_embed.numel()) +
             " != configured " + std::to_string(p.task_dim));
    std::size_t B = x.shape()[0];
    auto g = global_avg_pool(tp, x);  // [B,C]
    auto tvec = reshape(tp, p.task_embed, {std::size_t(1), p.task_dim});
    auto tb = add(tp, tvec, Tensor<T>::zeros({B, p.task_dim}));  // broadcast to [B,task_dim]
    auto logits = p.gate.forward(tp, concat<T>(tp, {g, tb}, 1));
    auto ab = softmax(tp, logits, 1);  // [B,2]
    return {slice(tp, ab, 1, 0, 1), slice(tp, ab, 1, 1, 1)};
}

// InfoNCE over pooled focus/expansion features [B,D]: anchor F_i, positive
// E_i, negatives E_j. Cosine similarity with a zero-norm guard epsilon.
template <typename T>
Tensor<T> lgcl_loss(Tape<T>& tp, const Tensor<T>& f, const Tensor<T>& e, T tau) {
    if (!(tau > T(0))) fail("lgcl: temperature must be positive");
    if (f.rank() != 2 || f.shape() != e.shape())
        fail("lgcl: pooled features must share [B,D], got " + shape_str(f.shape()) + " vs " +
             shape_str(e.shape()));
    std::size_t B = f.shape()[0];
    if (B < 2) fail("lgcl: batch must be >= 2 to have negatives");
    const T guard = T(1e-8);
    auto normalize = [&](const Tensor<T>& t) {
        auto n = pow_(tp, sum(tp, mul(tp, t, t), {1}, true), T(0.5));  // [B,1]
        auto safe = add(tp, relu(tp, sub(tp, n, guard)), guard);
        return div(tp, t, safe);
    };
    auto fh = normalize(f);
    auto eh = normalize(e);
    auto sim = matmul(tp, fh, permute(tp, eh, {1, 0}));  // [B,B] cosine
    auto logits = mul(tp, sim, T(1) / tau);
    auto mx = max_reduce(tp, logits, {1}, true);                       // [B,1]
    auto lse = add(tp, log_(tp, sum(tp, exp_(tp, sub(tp, logits, mx)), {1}, true)), mx);
    std::vector<T> eye(B * B, T(0));
    for (std::size_t i = 0; i < B; ++i) eye[i * B + i] = T(1);
    auto diag = sum(tp, mul(tp, logits, Tensor<T>::from({B, B}, std::move(eye))), {1}, true);
    return mean_all(tp, sub(tp, lse, diag));
}

// Full block: per-scale focus/expansion paths, per-sample gate blend, learned
// 1x1 fusion across scales, dropout in training mode. The contrastive term
// compares scale-averaged pooled focus vs expansion features.
template <typename T>
DemaOutput<T> dema_forward(Tape<T>& tp, const Tensor<T>& x, const Dema<T>& p, bool training,
                           Rng& dropout_rng) {
    DemaOutput<T> out;
    auto xs = multi_scale_features(tp, x, p);
    auto ctx = global_embed(tp, x, p);
    auto [alpha, beta] = dynamic_gate(tp, x, p);
    out.alpha = alpha;
    out.beta = beta;
    std::size_t B = x.shape()[0];
    auto a4 = reshape(tp, alpha, {B, std::size_t(1), std::size_t(1), std::size_t(1)});
    auto b4 = reshape(tp, beta, {B, std::size_t(1), std::size_t(1), std::size_t(1)});
    std::vector<Tensor<T>> blended;
    for (auto& xi : xs) {
        std::vector<Tensor<T>> head_outs;
        for (std::size_t h = 0; h < p.heads; ++h)
            head_outs.push_back(local_head_attention(tp, xi, p, h));
        auto fi = fuse_heads(tp, head_outs, p.head_fuse);
        auto ei = context_attention(tp, xi, ctx);
        out.focus.push_back(fi);
        out.expand.push_back(ei);
        blended.push_back(add(tp, mul(tp, fi, a4), mul(tp, ei, b4)));
    }
    auto fused = channel_map(tp, concat(tp, blended, 1), p.scale_fuse);
    if (training && p.dropout_rate > T(0)) fused = dropout(tp, fused, p.dropout_rate, dropout_rng);
    out.fused = fused;
    if (B >= 2) {
        Tensor<T> fp, ep;
        for (std::size_t i = 0; i < out.focus.size(); ++i) {
            auto fgap = global_avg_pool(tp, out.focus[i]);
            auto egap = global_avg_pool(tp, out.expand[i]);
            fp = i == 0 ? fgap : add(tp, fp, fgap);
            ep = i == 0 ? egap : add(tp, ep, egap);
        }
        T inv = T(1) / T(out.focus.size());
        out.contrastive = lgcl_loss(tp, mul(tp, fp, inv), mul(tp, ep, inv), p.tau);
    } else {
        out.contrastive = Tensor<T>::scalar(T(0));
    }
    return out;
}

}  // namespace mspg

#pragma once

#include "mspg/gctdrn.hpp"

namespace mspg {

enum class SampleSpace { Point, Image };

template <typename T>
struct GenOutput {
    Tensor<T> sample;       // [B,2] point mode, [B,1,S,S] image mode
    Tensor<T> f_gen;        // mid-block feature tap [B,C,S,S]
    Tensor<T> contrastive;  // summed attention contrastive terms (scalar)
};

// Latent projection, residual block stack with a mid-layer feature tap,
// global enhancement, and a space-specific head (tanh-bounded for images).
template <typename T>
struct Generator {
    std::size_t dz = 8, channels = 12, spatial = 4;
    SampleSpace space = SampleSpace::Point;
    std::size_t mid = 0;
    T point_bound = T(4);

    Linear<T> input_proj;
    std::vector<GctdrnBlock<T>> blocks;
    GlobalEnhance<T> enhance;
    Linear<T> point_head;
    Conv2dLayer<T> image_head;

    Generator() = default;
    Generator(std::size_t dz_, std::size_t channels_, std::size_t spatial_,
              std::size_t n_blocks, Rng& rng, SampleSpace space_ = SampleSpace::Point,
              FuseMode mode = FuseMode::Additive, std::size_t heads = 3, std::size_t tokens = 4,
              std::size_t task_dim = 8, T tau = T(0.1), T dropout = T(0.1),
              T point_bound_ = T(4))
        : dz(dz_), channels(channels_), spatial(spatial_), space(space_),
          point_bound(point_bound_) {
        if (space == SampleSpace::Point && point_bound <= T(0))
            fail("generator: point bound must be positive");
        if (n_blocks < 1) fail("generator: needs at least one block");
        input_proj = Linear<T>(dz, channels * spatial * spatial, rng);
        for (std::size_t i = 0; i < n_blocks; ++i)
            blocks.emplace_back(channels, channels, rng, mode, heads, tokens, task_dim, tau,
                                dropout);
        mid = (n_blocks - 1) / 2;
        enhance = GlobalEnhance<T>(channels, rng);
        if (space == SampleSpace::Point) point_head = Linear<T>(channels, 2, rng);
        else image_head = Conv2dLayer<T>(channels, 1, 3, rng);
    }

    Shape f_gen_shape(std::size_t batch) const { return {batch, channels, spatial, spatial}; }

    GenOutput<T> forward(Tape<T>& tp, const Tensor<T>& z, bool training,
                         Rng& dropout_rng) const {
        if (z.rank() != 2 || z.shape()[1] != dz)
            fail("generator: latent must be [B," + std::to_string(dz) + "], got " +
                 shape_str(z.shape()));
        std::size_t B = z.shape()[0];
        auto h = leaky_relu(tp, input_proj.forward(tp, z), T(0.2));
        auto x = reshape(tp, h, {B, channels, spatial, spatial});
        GenOutput<T> out;
        out.contrastive = Tensor<T>::scalar(T(0));
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            Tensor<T> lgcl;
            x = block_forward(tp, x, blocks[i], training, dropout_rng, &lgcl);
            if (lgcl.defined()) out.contrastive = add(tp, out.contrastive, lgcl);
            if (i == mid) out.f_gen = x;
        }
        x = enhance.forward(tp, x);
        if (space == SampleSpace::Point) {
            // Soft-bounded coordinates: near-identity around the origin but
            // trapped in (-bound, bound), so an overconfident critic can
            // never push samples off to infinity.
            auto u = point_head.forward(tp, global_avg_pool(tp, x));
            out.sample = mul(tp, tanh_(tp, mul(tp, u, T(1) / point_bound)), point_bound);
        } else {
            out.sample = tanh_(tp, image_head.forward(tp, x));
        }
        return out;
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        input_proj.collect(ps, prefix + ".in");
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(ps, prefix + ".blk" + std::to_string(i));
        enhance.collect(ps, prefix + ".enh");
        if (space == SampleSpace::Point) point_head.collect(ps, prefix + ".head");
        else image_head.collect(ps, prefix + ".head");
    }
};

template <typename T>
struct DiscOutput {
    Tensor<T> logits;                 // [B,1]
    std::vector<Tensor<T>> features;  // intermediate taps, outermost first
};

// Feature stack with a scalar logit head. Exposes its intermediate features
// for feature matching and can encode inputs into the generator's feature
// shape for the auxiliary discriminator's real side.
template <typename T>
struct Discriminator {
    SampleSpace space = SampleSpace::Point;
    std::size_t hidden = 64;
    std::size_t fgen_numel = 0;  // per-sample elements of the target feature shape
    Shape fgen_shape;            // without batch extent

    Linear<T> fc1, fc2, fc3;          // point mode
    Conv2dLayer<T> c1, c2;            // image mode
    Linear<T> fci;
    Linear<T> to_fgen;

    Discriminator() = default;
    Discriminator(SampleSpace space_, std::size_t hidden_, Shape fgen, Rng& rng,
                  std::size_t image_size = 16)
        : space(space_), hidden(hidden_), fgen_shape(fgen) {
        fgen_numel = numel(fgen);
        if (space == SampleSpace::Point) {
            fc1 = Linear<T>(2, hidden, rng);
            fc2 = Linear<T>(hidden, hidden, rng);
            fc3 = Linear<T>(hidden, 1, rng);
            to_fgen = Linear<T>(hidden, fgen_numel, rng);
        } else {
            c1 = Conv2dLayer<T>(1, 8, 3, rng, 2);
            c2 = Conv2dLayer<T>(8, 16, 3, rng, 2);
            std::size_t s4 = image_size / 4;
            fci = Linear<T>(16 * s4 * s4, 1, rng);
            to_fgen = Linear<T>(8 * (image_size / 2) * (image_size / 2), fgen_numel, rng);
        }
    }

    DiscOutput<T> forward(Tape<T>& tp, const Tensor<T>& x) const {
        DiscOutput<T> out;
        if (space == SampleSpace::Point) {
            auto h1 = leaky_relu(tp, fc1.forward(tp, x), T(0.2));
            auto h2 = leaky_relu(tp, fc2.forward(tp, h1), T(0.2));
            out.features = {h1, h2};
            out.logits = fc3.forward(tp, h2);
        } else {
            auto h1 = leaky_relu(tp, c1.forward(tp, x), T(0.2));
            auto h2 = leaky_relu(tp, c2.forward(tp, h1), T(0.2));
            out.features = {h1, h2};
            auto flat = reshape(tp, h2, {x.shape()[0], h2.numel() / x.shape()[0]});
            out.logits = fci.forward(tp, flat);
        }
        return out;
    }

    // Encode real samples into the generator's feature geometry via the first
    // feature layer, for the auxiliary discriminator's positive side.
    Tensor<T> encode(Tape<T>& tp, const Tensor<T>& x) const {
        std::size_t B = x.shape()[0];
        Tensor<T> h;
        if (space == SampleSpace::Point) {
            h = leaky_relu(tp, fc1.forward(tp, x), T(0.2));
        } else {
            auto h1 = leaky_relu(tp, c1.forward(tp, x), T(0.2));
            h = reshape(tp, h1, {B, h1.numel() / B});
        }
        auto v = to_fgen.forward(tp, h);
        Shape out_shape = {B};
        for (std::size_t d : fgen_shape) out_shape.push_back(d);
        return reshape(tp, v, out_shape);
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        if (space == SampleSpace::Point) {
            fc1.collect(ps, prefix + ".fc1");
            fc2.collect(ps, prefix + ".fc2");
            fc3.collect(ps, prefix + ".fc3");
        } else {
            c1.collect(ps, prefix + ".c1");
            c2.collect(ps, prefix + ".c2");
            fci.collect(ps, prefix + ".fci");
        }
        to_fgen.collect(ps, prefix + ".to_fgen");
    }
};

// Small classifier on generator features; scalar logit per sample.
template <typename T>
struct AuxDiscriminator {
    Shape fgen_shape;  // without batch extent
    Linear<T> fc1, fc2;

    AuxDiscriminator() = default;
    AuxDiscriminator(Shape fgen, std::size_t hidden, Rng& rng) : fgen_shape(fgen) {
        fc1 = Linear<T>(numel(fgen), hidden, rng);
        fc2 = Linear<T>(hidden, 1, rng);
    }

    Tensor<T> forward(Tape<T>& tp, const Tensor<T>& f) const {
        Shape expect = {f.shape()[0]};
        for (std::size_t d : fgen_shape) expect.push_back(d);
        if (f.shape() != expect)
            fail("aux: feature shape " + shape_str(f.shape()) + " != declared " +
                 shape_str(expect));
        auto flat = reshape(tp, f, {f.shape()[0], numel(fgen_shape)});
        auto h = leaky_relu(tp, fc1.forward(tp, flat), T(0.2));
        return fc2.forward(tp, h);
    }

    void collect(ParamSet<T>& ps, const std::string& prefix) const {
        fc1.collect(ps, prefix + ".fc1");
        fc2.collect(ps, prefix + ".fc2");
    }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// -E[log D(real)] - E[log(1 - D(fake))] in stable logit form. real_target
// below 1 applies one-sided label smoothing.
template <typename T>
Tensor<T> loss_d_main(Tape<T>& tp, const Tensor<T>& real_logits, const Tensor<T>& fake_logits,
                      T real_target = T(1)) {
    if (real_logits.shape() != fake_logits.shape())
        fail("loss_d_main: batch mismatch " + shape_str(real_logits.shape()) + " vs " +
             shape_str(fake_logits.shape()));
    auto lr = bce_logits(tp, real_logits, Tensor<T>::full(real_logits.shape(), real_target));
    auto lf = bce_logits(tp, fake_logits, Tensor<T>::zeros(fake_logits.shape()));
    return add(tp, lr, lf);
}

// Auxiliary discriminator loss: encoded-real features target 1, generator
// features target 0.
template <typename T>
Tensor<T> loss_d_aux(Tape<T>& tp, const Tensor<T>& real_feat_logits,
                     const Tensor<T>& gen_feat_logits) {
    if (real_feat_logits.shape() != gen_feat_logits.shape())
        fail("loss_d_aux: batch mismatch " + shape_str(real_feat_logits.shape()) + " vs " +
             shape_str(gen_feat_logits.shape()));
    auto lr = bce_logits(tp, real_feat_logits, Tensor<T>::full(real_feat_logits.shape(), T(1)));
    auto lf = bce_logits(tp, gen_feat_logits, Tensor<T>::zeros(gen_feat_logits.shape()));
    return add(tp, lr, lf);
}

// Generator adversarial loss: -E[log D_main(G(z))], plus the auxiliary term
// -E[log D_aux(F_gen)] when provided.
template <typename T>
Tensor<T> loss_g(Tape<T>& tp, const Tensor<T>& fake_main_logits,
                 const Tensor<T>* aux_logits = nullptr) {
    auto lg = bce_logits(tp, fake_main_logits,
                         Tensor<T>::full(fake_main_logits.shape(), T(1)));
    if (!aux_logits) return lg;
    auto la = bce_logits(tp, *aux_logits, Tensor<T>::full(aux_logits->shape(), T(1)));
    return add(tp, lg, la);
}

template <typename T>
Tensor<T> loss_g_total(Tape<T>& tp, const Tensor<T>& lg, const Tensor<T>& laux, T lambda_aux) {
    if (lambda_aux < T(0)) fail("loss_g_total: lambda_aux must be >= 0");
    return add(tp, lg, mul(tp, laux, lambda_aux));
}

// Sum over layers of (1/N_i) * ||mean_batch(phi_i(real)) - mean_batch(phi_i(fake))||^2.
template <typename T>
Tensor<T> feature_matching_loss(Tape<T>& tp, const std::vector<Tensor<T>>& phi_real,
                                const std::vector<Tensor<T>>& phi_fake) {
    if (phi_real.size() != phi_fake.size() || phi_real.empty())
        fail("feature_matching: layer count mismatch or empty");
    Tensor<T> total;
    for (std::size_t i = 0; i < phi_real.size(); ++i) {
        if (phi_real[i].shape() != phi_fake[i].shape())
            fail("feature_matching: layer " + std::to_string(i) + " shape mismatch " +
                 shape_str(phi_real[i].shape()) + " vs " + shape_str(phi_fake[i].shape()));
        auto mr = mean(tp, phi_real[i], {0});
        auto mf = mean(tp, phi_fake[i], {0});
        auto d = sub(tp, mr, mf);
        auto term = mul(tp, sum_all(tp, mul(tp, d, d)), T(1) / T(mr.numel()));
        total = i == 0 ? term : add(tp, total, term);
    }
    return total;
}

// Fraction of logits on the requested side of zero; the accuracy signal the
// feedback loops consume. Plain value, no gradient.
template <typename T>
double logit_accuracy(const Tensor<T>& logits, bool positive) {
    std::size_t hit = 0;
    for (T v : logits.values()) {
        if (positive ? (v > T(0)) : (v < T(0))) ++hit;
    }
    return double(hit) / double(logits.numel());
}

}  // namespace mspg

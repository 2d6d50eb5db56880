#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "mspg/models.hpp"
#include "oracles.hpp"

using namespace mspg;
using DT = Tensor<double>;

namespace {

double bce_ref(const std::vector<double>& z, double target) {
    double acc = 0;
    for (double v : z) acc += std::max(v, 0.0) - v * target + std::log1p(std::exp(-std::abs(v)));
    return acc / double(z.size());
}

Generator<double> small_gen(Rng& rng, SampleSpace space = SampleSpace::Point) {
    // 3 channels / 3 heads, 2 blocks, 4x4 grid, dropout off for determinism tests
    return Generator<double>(4, 3, space == SampleSpace::Image ? 8 : 4, 2, rng, space,
                             FuseMode::Additive, 3, 2, 2, 0.1, 0.0);
}

}  // namespace

TEST_CASE("generator is deterministic in eval mode") {
    Rng rng(1, 1);
    auto g = small_gen(rng);
    auto z = oracle::rand_signed({3, 4}, rng, 0.1, 1.0, false);
    Rng d1(0, 0), d2(0, 0);
    Tape<double> t1, t2;
    auto a = g.forward(t1, z, false, d1);
    auto b = g.forward(t2, z, false, d2);
    REQUIRE(a.sample.numel() == b.sample.numel());
    CHECK(std::memcmp(a.sample.values().data(), b.sample.values().data(),
                      a.sample.numel() * sizeof(double)) == 0);
    CHECK(a.sample.shape() == Shape{3, 2});
    CHECK(a.f_gen.shape() == g.f_gen_shape(3));
}

TEST_CASE("image-mode samples stay inside the tanh bound") {
    Rng rng(2, 1);
    Generator<double> g(4, 3, 8, 1, rng, SampleSpace::Image, FuseMode::Additive, 3, 2, 2, 0.1,
                        0.0);
    auto z = oracle::rand_signed({16, 4}, rng, 0.5, 2.0, false);
    Rng drop(0, 0);
    Tape<double> tp;
    auto out = g.forward(tp, z, false, drop);
    CHECK(out.sample.shape() == Shape{16, 1, 8, 8});
    for (double v : out.sample.values()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("generator rejects a latent width mismatch") {
    Rng rng(3, 1);
    auto g = small_gen(rng);
    Rng drop(0, 0);
    Tape<double> tp;
    CHECK_THROWS_WITH_AS(g.forward(tp, DT::zeros({2, 7}), false, drop),
                         doctest::Contains("latent"), Error);
}

TEST_CASE("discriminator emits one logit per sample and nonempty features") {
    Rng rng(4, 1);
    Discriminator<double> d(SampleSpace::Point, 16, {3, 4, 4}, rng);
    Tape<double> tp;
    auto out = d.forward(tp, oracle::rand_signed({5, 2}, rng, 0.1, 1.0, false));
    CHECK(out.logits.shape() == Shape{5, 1});
    REQUIRE(out.features.size() == 2);
    CHECK(out.features[0].shape() == Shape{5, 16});
    auto enc = d.encode(tp, oracle::rand_signed({5, 2}, rng, 0.1, 1.0, false));
    CHECK(enc.shape() == Shape{5, 3, 4, 4});
}

TEST_CASE("image discriminator handles 16x16 inputs") {
    Rng rng(5, 1);
    Discriminator<double> d(SampleSpace::Image, 16, {3, 8, 8}, rng, 16);
    Tape<double> tp;
    auto out = d.forward(tp, oracle::rand_signed({2, 1, 16, 16}, rng, 0.1, 1.0, false));
    CHECK(out.logits.shape() == Shape{2, 1});
    CHECK(out.features[0].shape() == Shape{2, 8, 8, 8});
    CHECK(out.features[1].shape() == Shape{2, 16, 4, 4});
    CHECK(d.encode(tp, DT::zeros({2, 1, 16, 16})).shape() == Shape{2, 3, 8, 8});
}

TEST_CASE("main discriminator loss hits the symmetric midpoint 2 ln 2") {
    Tape<double> tp;
    auto zero = DT::zeros({4, 1});
    auto loss = loss_d_main(tp, zero, zero);
    CHECK(loss.item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("a perfect discriminator drives its loss to zero") {
    Tape<double> tp;
    auto real = DT::full({4, 1}, 40.0);
    auto fake = DT::full({4, 1}, -40.0);
    CHECK(loss_d_main(tp, real, fake).item() < 1e-9);
}

TEST_CASE("main discriminator loss matches the direct formula on random logits") {
    Rng rng(6, 1);
    for (int trial = 0; trial < 10; ++trial) {
        auto r = oracle::rand_signed({8, 1}, rng, 0.1, 4.0, false);
        auto f = oracle::rand_signed({8, 1}, rng, 0.1, 4.0, false);
        Tape<double> tp;
        double want = bce_ref(r.values(), 1.0) + bce_ref(f.values(), 0.0);
        CHECK(loss_d_main(tp, r, f).item() == doctest::Approx(want).epsilon(1e-9));
        double smoothed = bce_ref(r.values(), 0.9) + bce_ref(f.values(), 0.0);
        CHECK(loss_d_main(tp, r, f, 0.9).item() == doctest::Approx(smoothed).epsilon(1e-9));
    }
}

TEST_CASE("auxiliary loss midpoint, saturation, and oracle agreement") {
    Tape<double> tp;
    auto zero = DT::zeros({4, 1});
    CHECK(loss_d_aux(tp, zero, zero).item() ==
          doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(loss_d_aux(tp, DT::full({4, 1}, 40.0), DT::full({4, 1}, -40.0)).item() < 1e-9);
    Rng rng(7, 1);
    auto r = oracle::rand_signed({6, 1}, rng, 0.1, 3.0, false);
    auto g = oracle::rand_signed({6, 1}, rng, 0.1, 3.0, false);
    double want = bce_ref(r.values(), 1.0) + bce_ref(g.values(), 0.0);
    CHECK(loss_d_aux(tp, r, g).item() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("generator loss: ln 2 at the midpoint without aux, zero at saturation") {
    Tape<double> tp;
    auto zero = DT::zeros({4, 1});
    CHECK(loss_g<double>(tp, zero).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    auto high = DT::full({4, 1}, 40.0);
    auto both = loss_g(tp, high, &high);
    CHECK(both.item() < 1e-9);
    Rng rng(8, 1);
    auto f = oracle::rand_signed({5, 1}, rng, 0.1, 3.0, false);
    auto a = oracle::rand_signed({5, 1}, rng, 0.1, 3.0, false);
    double want = bce_ref(f.values(), 1.0) + bce_ref(a.values(), 1.0);
    CHECK(loss_g(tp, f, &a).item() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("total generator loss is linear in lambda and collapses at zero") {
    Tape<double> tp;
    auto lg = DT::scalar(0.5);
    auto la = DT::scalar(0.25);
    CHECK(loss_g_total(tp, lg, la, 0.0).item() == 0.5);
    CHECK(loss_g_total(tp, lg, la, 1.0).item() == doctest::Approx(0.75).epsilon(1e-15));
    for (double lam : {0.0, 0.5, 2.0})
        CHECK(loss_g_total(tp, lg, la, lam).item() ==
              doctest::Approx(0.5 + lam * 0.25).epsilon(1e-15));
    CHECK_THROWS_AS(loss_g_total(tp, lg, la, -0.1), Error);
}

TEST_CASE("feature matching: zero on identical sets, hand value on the 2-element case") {
    Tape<double> tp;
    auto a = DT::from({1, 2}, {1, 0});
    auto b = DT::from({1, 2}, {0, 1});
    CHECK(feature_matching_loss<double>(tp, {a}, {a}).item() == 0.0);
    CHECK(feature_matching_loss<double>(tp, {a}, {b}).item() ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("feature matching is symmetric and uses batch means") {
    Tape<double> tp;
    // different samples, identical batch means -> zero loss
    auto real = DT::from({2, 2}, {1, 0, 0, 1});
    auto fake = DT::from({2, 2}, {0, 1, 1, 0});
    CHECK(feature_matching_loss<double>(tp, {real}, {fake}).item() ==
          doctest::Approx(0.0).epsilon(1e-15));

    Rng rng(9, 1);
    auto p1 = oracle::rand_signed({3, 4}, rng, 0.1, 1.0, false);
    auto p2 = oracle::rand_signed({3, 2, 2, 2}, rng, 0.1, 1.0, false);
    auto q1 = oracle::rand_signed({3, 4}, rng, 0.1, 1.0, false);
    auto q2 = oracle::rand_signed({3, 2, 2, 2}, rng, 0.1, 1.0, false);
    auto ab = feature_matching_loss<double>(tp, {p1, p2}, {q1, q2});
    auto ba = feature_matching_loss<double>(tp, {q1, q2}, {p1, p2});
    CHECK(ab.item() == doctest::Approx(ba.item()).epsilon(1e-12));

    // direct two-layer oracle
    double want = 0;
    for (int layer = 0; layer < 2; ++layer) {
        const auto& r = layer ? p2 : p1;
        const auto& f = layer ? q2 : q1;
        std::size_t n = r.numel() / 3;
        for (std::size_t i = 0; i < n; ++i) {
            double mr = 0, mf = 0;
            for (std::size_t b = 0; b < 3; ++b) {
                mr += r.values()[b * n + i] / 3.0;
                mf += f.values()[b * n + i] / 3.0;
            }
            want += (mr - mf) * (mr - mf) / double(n);
        }
    }
    CHECK(ab.item() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("feature matching gradients agree with finite differences") {
    Rng rng(10, 1);
    std::vector<oracle::DTensor> xs = {oracle::rand_signed({3, 4}, rng, 0.1, 1.0),
                                       oracle::rand_signed({3, 4}, rng, 0.1, 1.0)};
    auto f = [](Tape<double>& tp, std::vector<oracle::DTensor>& in) {
        return feature_matching_loss<double>(tp, {in[0]}, {in[1]});
    };
    CHECK(oracle::fd_max_rel_err(f, xs) < 1e-4);
}

TEST_CASE("all adversarial losses are nonnegative and finite on random logits") {
    Rng rng(11, 1);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = oracle::rand_signed({6, 1}, rng, 0.0, 30.0, false);
        auto b = oracle::rand_signed({6, 1}, rng, 0.0, 30.0, false);
        Tape<double> tp;
        for (double v : {loss_d_main(tp, a, b).item(), loss_d_aux(tp, a, b).item(),
                         loss_g(tp, a, &b).item()}) {
            CHECK(v >= 0.0);
            CHECK(std::isfinite(v));
        }
    }
}

TEST_CASE("aux discriminator rejects features of the wrong geometry") {
    Rng rng(12, 1);
    AuxDiscriminator<double> aux({3, 4, 4}, 8, rng);
    Tape<double> tp;
    CHECK_THROWS_WITH_AS(aux.forward(tp, DT::zeros({2, 3, 2, 2})), doctest::Contains("declared"),
                         Error);
    CHECK(aux.forward(tp, DT::zeros({2, 3, 4, 4})).shape() == Shape{2, 1});
}

TEST_CASE("discriminator separates linearly separable data after training") {
    Rng rng(13, 1);
    Discriminator<double> d(SampleSpace::Point, 32, {1, 2, 2}, rng);
    ParamSet<double> ps;
    d.collect(ps, "d");
    AdamW<double> opt(ps, 0.01, 0.9, 0.999, 1e-8, 0.0);
    Rng data(14, 2);
    auto make_batch = [&](bool real) {
        std::vector<double> v(16 * 2);
        for (std::size_t i = 0; i < 16; ++i) {
            v[i * 2] = data.normal() * 0.3 + (real ? 2.0 : -2.0);
            v[i * 2 + 1] = data.normal() * 0.3;
        }
        return DT::from({16, 2}, std::move(v));
    };
    for (int step = 0; step < 200; ++step) {
        Tape<double> tp;
        auto real = d.forward(tp, make_batch(true));
        auto fake = d.forward(tp, make_batch(false));
        auto loss = loss_d_main(tp, real.logits, fake.logits);
        opt.zero_grad();
        tp.backward(loss);
        opt.step();
    }
    Tape<double> tp;
    double acc_real = logit_accuracy(d.forward(tp, make_batch(true)).logits, true);
    double acc_fake = logit_accuracy(d.forward(tp, make_batch(false)).logits, false);
    CHECK((acc_real + acc_fake) / 2.0 > 0.95);
}

TEST_CASE("generator gradients flow into every parameter group") {
    Rng rng(15, 1);
    auto g = small_gen(rng);
    ParamSet<double> ps;
    g.collect(ps, "g");
    auto z = oracle::rand_signed({2, 4}, rng, 0.1, 1.0, false);
    Rng drop(0, 0);
    Tape<double> tp;
    auto out = g.forward(tp, z, true, drop);
    auto loss = add(tp, mean_all(tp, mul(tp, out.sample, out.sample)),
                    mul(tp, out.contrastive, 0.1));
    ps.zero_grad();
    tp.backward(loss);
    std::size_t nonzero_groups = 0;
    for (auto& p : ps.items) {
        double s = 0;
        for (double gv : p.grad()) s += std::abs(gv);
        if (s > 0) ++nonzero_groups;
    }
    // everything except the unused weighted-mode score projections should move
    CHECK(nonzero_groups > ps.items.size() * 3 / 4);
}

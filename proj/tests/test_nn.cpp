#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mspg/nn.hpp"
#include "oracles.hpp"

using namespace mspg;
using DT = Tensor<double>;

TEST_CASE("xavier bounds follow the fan sizes") {
    Rng rng(3, 1);
    auto w = xavier_uniform<double>({64, 32}, 64, 32, rng);
    double bound = std::sqrt(6.0 / 96.0);
    double mx = 0;
    for (double v : w.values()) mx = std::max(mx, std::abs(v));
    CHECK(mx <= bound);
    CHECK(mx > 0.5 * bound);  // something would be off if everything clustered at zero
    CHECK(w.requires_grad());
}

TEST_CASE("linear layer computes x W + b") {
    Rng rng(1, 1);
    Linear<double> fc(2, 2, rng);
    fc.W.values() = {1, 2, 3, 4};
    fc.b.values() = {10, 20};
    Tape<double> tp;
    auto y = fc.forward(tp, DT::from({1, 2}, {1, 1}));
    CHECK(y.values() == std::vector<double>{14, 26});
}

TEST_CASE("mlp gradient agrees with finite differences") {
    Rng rng(5, 1);
    Mlp<double> net({3, 4, 2}, rng, Act::Tanh, Act::None);
    ParamSet<double> ps;
    net.collect(ps, "net");
    std::vector<oracle::DTensor> xs = ps.items;
    auto x_in = oracle::rand_signed({2, 3}, rng, 0.1, 1.0, false);
    auto f = [&](Tape<double>& tp, std::vector<oracle::DTensor>&) {
        auto y = net.forward(tp, x_in);
        return mean_all(tp, mul(tp, y, y));
    };
    CHECK(oracle::fd_max_rel_err(f, xs) < 1e-4);
}

TEST_CASE("conv layer broadcasts its bias over space") {
    Rng rng(6, 1);
    Conv2dLayer<double> conv(1, 2, 3, rng);
    std::fill(conv.K.values().begin(), conv.K.values().end(), 0.0);
    conv.b.values() = {1.5, -2.5};
    Tape<double> tp;
    auto y = conv.forward(tp, DT::zeros({1, 1, 2, 2}));
    CHECK(y.values() == std::vector<double>{1.5, 1.5, 1.5, 1.5, -2.5, -2.5, -2.5, -2.5});
}

TEST_CASE("bce_logits matches the analytic value and gradient") {
    Tape<double> tp;
    // loss at z=0, y=1 is ln 2; at z=0, y=0 also ln 2
    auto z = DT::from({2}, {0.0, 0.0}, true);
    auto y = DT::from({2}, {1.0, 0.0});
    auto loss = bce_logits(tp, z, y);
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    tp.backward(loss);
    // d/dz = (sigmoid(0) - y)/2 = (0.5 - y)/2
    CHECK(z.grad()[0] == doctest::Approx(-0.25).epsilon(1e-12));
    CHECK(z.grad()[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("bce_logits stays finite at extreme logits") {
    Tape<double> tp;
    auto z = DT::from({2}, {500.0, -500.0}, true);
    auto y = DT::from({2}, {0.0, 1.0});
    auto loss = bce_logits(tp, z, y);
    CHECK(std::isfinite(loss.item()));
    CHECK(loss.item() == doctest::Approx(500.0).epsilon(1e-9));
    tp.backward(loss);
    for (double g : z.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("bce_logits gradient agrees with finite differences") {
    Rng rng(8, 2);
    std::vector<oracle::DTensor> xs = {oracle::rand_signed({4, 3}, rng, 0.1, 3.0)};
    std::vector<double> tv(12);
    for (auto& t : tv) t = rng.uniform();
    auto targets = DT::from({4, 3}, tv);
    auto f = [&](Tape<double>& tp, std::vector<oracle::DTensor>& in) {
        return bce_logits(tp, in[0], targets);
    };
    CHECK(oracle::fd_max_rel_err(f, xs) < 1e-4);
}

TEST_CASE("adamw first step matches the hand-derived update") {
    // p0 = 1, g = 3, lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.1
    // m1 = 0.3, v1 = 0.009; bias-corrected mhat = 3, vhat = 9
    // p1 = 1 - 0.01 * (3 / (3 + 1e-8) + 0.1 * 1)
    auto p = DT::from({1}, {1.0}, true);
    ParamSet<double> ps;
    ps.add("p", p);
    AdamW<double> opt(ps, 0.01, 0.9, 0.999, 1e-8, 0.1);
    p.grad()[0] = 3.0;
    opt.step();
    double expect = 1.0 - 0.01 * (3.0 / (3.0 + 1e-8) + 0.1);
    CHECK(p.values()[0] == doctest::Approx(expect).epsilon(1e-15));
    CHECK(opt.t == 1);

    // second step with the same gradient
    double m2 = 0.9 * 0.3 + 0.1 * 3.0, v2 = 0.999 * 0.009 + 0.001 * 9.0;
    double mh = m2 / (1 - 0.9 * 0.9), vh = v2 / (1 - 0.999 * 0.999);
    double expect2 = expect - 0.01 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * expect);
    opt.step();
    CHECK(p.values()[0] == doctest::Approx(expect2).epsilon(1e-12));
}

TEST_CASE("adamw skips frozen params but keeps their moments aligned") {
    auto a = DT::from({1}, {1.0}, true);
    auto b = DT::from({1}, {1.0}, true);
    ParamSet<double> ps;
    ps.add("a", a);
    ps.add("b", b);
    AdamW<double> opt(ps, 0.1, 0.9, 0.999, 1e-8, 0.0);
    a.grad()[0] = 1.0;
    b.grad()[0] = 1.0;
    b.set_requires_grad(false);
    opt.step();
    CHECK(a.values()[0] < 1.0);
    CHECK(b.values()[0] == 1.0);
}

TEST_CASE("sgd mode applies lr * (g + wd * p)") {
    auto p = DT::from({1}, {2.0}, true);
    ParamSet<double> ps;
    ps.add("p", p);
    AdamW<double> opt(ps, 0.5, 0.9, 0.999, 1e-8, 0.1, true);
    p.grad()[0] = 1.0;
    opt.step();
    CHECK(p.values()[0] == doctest::Approx(2.0 - 0.5 * (1.0 + 0.2)).epsilon(1e-15));
}

TEST_CASE("ema one-step update is exactly decay*shadow + (1-decay)*param") {
    auto p = DT::from({1}, {0.0}, true);
    ParamSet<double> ps;
    ps.add("p", p);
    Ema<double> ema(ps, 0.9999, false);  // warmup off: the raw contract
    p.values()[0] = 1.0;
    ema.update(ps);
    CHECK(ema.shadow[0][0] == doctest::Approx(0.9999 * 0.0 + 0.0001 * 1.0).epsilon(1e-15));
}

TEST_CASE("ema warmup tracks early and approaches the nominal decay") {
    auto p = DT::from({1}, {1.0}, true);
    ParamSet<double> ps;
    ps.add("p", p);
    Ema<double> ema(ps, 0.9999, true);
    CHECK(ema.effective_decay() == doctest::Approx(0.1));  // t = 0
    ema.update(ps);
    CHECK(ema.effective_decay() == doctest::Approx(2.0 / 11.0));
    for (int i = 0; i < 200000; ++i) ++ema.t;
    CHECK(ema.effective_decay() == doctest::Approx(0.9999));
}

TEST_CASE("ema swap_with twice restores the live parameters") {
    auto p = DT::from({2}, {1.0, 2.0}, true);
    ParamSet<double> ps;
    ps.add("p", p);
    Ema<double> ema(ps, 0.5, false);
    p.values() = {5.0, 6.0};
    ema.swap_with(ps);
    CHECK(p.values() == std::vector<double>{1.0, 2.0});
    ema.swap_with(ps);
    CHECK(p.values() == std::vector<double>{5.0, 6.0});
}

TEST_CASE("a small mlp fits xor, end to end") {
    Rng rng(11, 1);
    Mlp<double> net({2, 8, 1}, rng, Act::Tanh, Act::None);
    ParamSet<double> ps;
    net.collect(ps, "net");
    AdamW<double> opt(ps, 0.05, 0.9, 0.999, 1e-8, 0.0);
    auto x = DT::from({4, 2}, {0, 0, 0, 1, 1, 0, 1, 1});
    auto y = DT::from({4, 1}, {0, 1, 1, 0});
    double last = 1e9;
    for (int it = 0; it < 400; ++it) {
        Tape<double> tp;
        auto out = net.forward(tp, x);
        auto loss = bce_logits(tp, out, y);
        opt.zero_grad();
        tp.backward(loss);
        opt.step();
        last = loss.item();
    }
    CHECK(last < 0.05);
}

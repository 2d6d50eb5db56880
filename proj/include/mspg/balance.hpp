#pragma once
// Q-learning referee: observes per-round training metrics, nudges learning
// rates and the aux-loss weight, and learns from an experience-replay pool.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <string>
#include <vector>

#include "mspg/apfl.hpp"
#include "mspg/common.hpp"
#include "mspg/nn.hpp"
#include "mspg/rng.hpp"
#include "mspg/tensor.hpp"

namespace mspg {

inline constexpr std::size_t kObsDim = 8;
inline constexpr std::size_t kActions = 7;

// Actions: 0 no-op, 1/2 eta_G x1.2 or /1.2, 3/4 eta_D x1.2 or /1.2,
// 5/6 lambda_aux x1.5 or /1.5. Rates clamp to [1e-6, 1], lambda_aux to [0, 1].
inline void apply_action(int a, double& eta_g, double& eta_d, double& lambda_aux) {
    auto rate = [](double v) { return std::clamp(v, 1e-6, 1.0); };
    switch (a) {
        case 0: break;
        case 1: eta_g = rate(eta_g * 1.2); break;
        case 2: eta_g = rate(eta_g / 1.2); break;
        case 3: eta_d = rate(eta_d * 1.2); break;
        case 4: eta_d = rate(eta_d / 1.2); break;
        case 5: lambda_aux = std::clamp(lambda_aux * 1.5, 0.0, 1.0); break;
        case 6: lambda_aux = std::clamp(lambda_aux / 1.5, 0.0, 1.0); break;
        default: fail("apply_action: unknown action id " + std::to_string(a));
    }
}

// Bounded summary of the round: accuracies and quality stay in [0,1], losses
// squash through tanh, learning rates map log10 [1e-6, 1] onto [0, 1].
inline std::array<double, kObsDim> make_obs(const RoundRecord& r, double eta_g, double eta_d) {
    if (!r.finite()) fail("observation: non-finite metrics");
    if (!(eta_g > 0.0) || !(eta_d > 0.0)) fail("observation: learning rates must be positive");
    auto lg10 = [](double v) { return std::clamp(std::log10(v) / 6.0 + 1.0, 0.0, 1.0); };
    return {r.d_acc_real,        r.d_acc_fake,  std::tanh(r.l_g),
            std::tanh(r.l_d),    std::tanh(r.l_fm), lg10(eta_g),
            lg10(eta_d),         std::clamp(r.quality, 0.0, 1.0)};
}

// Improvement in quality, penalty for drifting from the 0.7 accuracy balance
// point, small bonus when the generator loss moved down; clipped to [-1, 1].
inline double compute_reward(const RoundRecord& prev, const RoundRecord& curr) {
    if (!prev.finite() || !curr.finite()) fail("reward: non-finite metrics");
    double dq = curr.quality - prev.quality;
    double drift = std::abs(curr.d_acc() - 0.7);
    double dlg = curr.l_g - prev.l_g;
    double trend = dlg < 0.0 ? 1.0 : (dlg > 0.0 ? -1.0 : 0.0);
    return std::clamp(dq - 0.5 * drift + 0.1 * trend, -1.0, 1.0);
}

// Linear exploration decay from start to floor across the first frac of the
// run, flat afterwards. Rounds are 1-indexed.
inline double epsilon_at(std::size_t round, std::size_t total, double frac = 0.5,
                         double start = 1.0, double floor_eps = 0.05) {
    std::size_t span = std::max<std::size_t>(1, stage_boundary(frac, total));
    double p = std::min(1.0, double(round) / double(span));
    return start + (floor_eps - start) * p;
}

struct Transition {
    std::array<double, kObsDim> s{};
    std::array<double, kObsDim> s2{};
    int action = 0;
    double reward = 0.0;
    bool done = false;
};

// Bounded FIFO of transitions; sampling is uniform without replacement and
// only allowed once the warmup fill is reached.
class ReplayBuffer {
  public:
    explicit ReplayBuffer(std::size_t capacity = 10000, std::size_t warmup = 500)
        : cap_(capacity), warmup_(warmup) {
        if (capacity == 0) fail("replay: capacity must be positive");
        if (warmup > capacity) fail("replay: warmup exceeds capacity");
    }

    void push(const Transition& t) {
        items_.push_back(t);
        if (items_.size() > cap_) items_.pop_front();
    }

    std::size_t size() const { return items_.size(); }
    std::size_t capacity() const { return cap_; }
    std::size_t warmup() const { return warmup_; }
    bool warm() const { return items_.size() >= warmup_; }
    const std::deque<Transition>& items() const { return items_; }
    void assign(std::deque<Transition> items) {
        if (items.size() > cap_) fail("replay: restored contents exceed capacity");
        items_ = std::move(items);
    }

    std::vector<Transition> sample(std::size_t batch, Rng& rng) const {
        if (batch == 0) fail("replay: batch must be positive");
        if (batch > items_.size())
            fail("replay: batch " + std::to_string(batch) + " exceeds buffer size " +
                 std::to_string(items_.size()));
        std::vector<std::size_t> idx(items_.size());
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        std::vector<Transition> out;
        out.reserve(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            std::size_t j = i + std::size_t(rng.below(std::uint64_t(idx.size() - i)));
            std::swap(idx[i], idx[j]);
            out.push_back(items_[idx[i]]);
        }
        return out;
    }

  private:
    std::size_t cap_, warmup_;
    std::deque<Transition> items_;
};

inline std::vector<Transition> store_and_sample(ReplayBuffer& buf, const Transition& t,
                                                std::size_t batch, Rng& rng) {
    buf.push(t);
    if (!buf.warm()) return {};
    return buf.sample(batch, rng);
}

template <typename T>
Tensor<T> obs_batch(const std::vector<std::array<double, kObsDim>>& rows) {
    std::vector<T> flat;
    flat.reserve(rows.size() * kObsDim);
    for (const auto& r : rows)
        for (double v : r) flat.push_back(T(v));
    return Tensor<T>::from({rows.size(), kObsDim}, flat);
}

// Online/target MLP pair over the 8-dim observation, one output per action.
template <typename T = double>
struct QNetwork {
    Mlp<T> online, target;
    ParamSet<T> online_params, target_params;
    AdamW<T> opt;
    double gamma_q = 0.95;
    std::size_t updates = 0;

    QNetwork() = default;
    explicit QNetwork(Rng& rng, double lr = 1e-3, std::size_t hidden = 64) {
        std::vector<std::size_t> widths{kObsDim, hidden, hidden, kActions};
        online = Mlp<T>(widths, rng, Act::Relu, Act::None);
        target = Mlp<T>(widths, rng, Act::Relu, Act::None);
        online.collect(online_params, "q_online");
        target.collect(target_params, "q_target");
        target_params.set_requires_grad(false);
        // Zero head: every action starts with an identical Q value, so the
        // lowest-id tie rule makes the greedy choice a no-op until real TD
        // updates differentiate the actions. A randomly initialized head
        // would pick one arbitrary-but-consistent knob action on every
        // greedy round of the warmup phase and ratchet that knob far away.
        for (std::size_t i = 0; i < online_params.items.size(); ++i) {
            if (online_params.names[i].find(".fc2.") != std::string::npos) {
                auto& vals = online_params.items[i].values();
                std::fill(vals.begin(), vals.end(), T(0));
            }
        }
        opt = AdamW<T>(online_params, T(lr), T(0.9), T(0.999), T(1e-8), T(0));
        sync_now();
    }

    void sync_now() {
        for (std::size_t i = 0; i < online_params.items.size(); ++i)
            target_params.items[i].values() = online_params.items[i].values();
    }

    Tensor<T> q_values(const std::array<double, kObsDim>& obs) const {
        Tape<T> tp(false);
        return online.forward(tp, obs_batch<T>({obs}));
    }
};

template <typename T>
void sync_target(QNetwork<T>& q) {
    q.sync_now();
}

// Epsilon-greedy over the online head; ties go to the lowest action id.
template <typename T>
int select_action(const std::array<double, kObsDim>& obs, const QNetwork<T>& q, double eps,
                  Rng& rng) {
    if (!(eps >= 0.0) || eps > 1.0)
        fail("select_action: epsilon must be in [0,1], got " + std::to_string(eps));
    if (rng.uniform() < eps) return int(rng.below(kActions));
    Tape<T> tp(false);
    auto qs = q.online.forward(tp, obs_batch<T>({obs}));
    const auto& v = qs.values();
    int best = 0;
    for (int a = 1; a < int(kActions); ++a)
        if (v[std::size_t(a)] > v[std::size_t(best)]) best = a;
    return best;
}

// One step on mean squared TD error against the frozen target head; returns
// the pre-step loss.
template <typename T>
double dqn_update(QNetwork<T>& q, const std::vector<Transition>& batch, double eta_q) {
    if (batch.empty()) fail("dqn: batch must be nonempty");
    const std::size_t b = batch.size();
    std::vector<std::array<double, kObsDim>> s, s2;
    s.reserve(b);
    s2.reserve(b);
    for (const Transition& t : batch) {
        if (t.action < 0 || t.action >= int(kActions))
            fail("dqn: action id out of range: " + std::to_string(t.action));
        s.push_back(t.s);
        s2.push_back(t.s2);
    }

    Tape<T> frozen(false);
    auto q2 = q.target.forward(frozen, obs_batch<T>(s2));
    std::vector<T> y(b);
    for (std::size_t i = 0; i < b; ++i) {
        T best = q2.values()[i * kActions];
        for (std::size_t a = 1; a < kActions; ++a)
            best = std::max(best, q2.values()[i * kActions + a]);
        y[i] = T(batch[i].reward) + (batch[i].done ? T(0) : T(q.gamma_q) * best);
        if (!std::isfinite(double(y[i]))) fail("dqn: non-finite target");
    }

    Tape<T> tp;
    auto qa = q.online.forward(tp, obs_batch<T>(s));
    std::vector<T> mask_vals(b * kActions, T(0));
    for (std::size_t i = 0; i < b; ++i) mask_vals[i * kActions + std::size_t(batch[i].action)] = T(1);
    auto mask = Tensor<T>::from({b, kActions}, mask_vals);
    auto q_sel = sum(tp, mul(tp, qa, mask), {1});
    auto loss = mse(tp, q_sel, Tensor<T>::from({b}, y));
    double out = double(loss.item());
    tp.backward(loss);
    q.opt.lr = T(eta_q);
    q.opt.step();
    q.online_params.zero_grad();
    ++q.updates;
    return out;
}

struct BalanceStep {
    std::array<double, kObsDim> obs{};
    int action = 0;
    double reward = 0.0;
    double epsilon = 0.0;
    double td_loss = 0.0;
    bool learned = false;
};

// Per-round referee: closes the previous transition, learns from replay, then
// picks and applies the next action. Keeps its own RNG stream so enabling or
// disabling it never perturbs model randomness.
template <typename T = double>
struct Balancer {
    QNetwork<T> qnet;
    ReplayBuffer buffer;
    Rng rng;
    double q_lr = 1e-3;
    std::size_t batch = 64;
    std::size_t sync_every = 200;
    double eps_frac = 0.5, eps_start = 1.0, eps_floor = 0.05;

    bool have_prev = false;
    std::array<double, kObsDim> prev_obs{};
    int prev_action = 0;
    RoundRecord prev_rec{};

    explicit Balancer(std::uint64_t seed, double lr = 1e-3, std::size_t q_hidden = 64,
                      std::size_t capacity = 10000, std::size_t warmup = 500)
        : buffer(capacity, warmup), rng(make_stream(seed, RngStream::Balance)), q_lr(lr) {
        Rng init = make_stream(seed, RngStream::QNetInit);
        qnet = QNetwork<T>(init, lr, q_hidden);
    }

    BalanceStep step(const RoundRecord& curr, double& eta_g, double& eta_d, double& lambda_aux,
                     std::size_t round, std::size_t total, bool done) {
        BalanceStep out;
        out.obs = make_obs(curr, eta_g, eta_d);
        if (have_prev) {
            out.reward = compute_reward(prev_rec, curr);
            Transition t;
            t.s = prev_obs;
            t.s2 = out.obs;
            t.action = prev_action;
            t.reward = out.reward;
            t.done = done;
            auto sample = store_and_sample(buffer, t, batch, rng);
            if (!sample.empty()) {
                out.td_loss = dqn_update(qnet, sample, q_lr);
                out.learned = true;
                if (sync_every > 0 && qnet.updates % sync_every == 0) sync_target(qnet);
            }
        }
        out.epsilon = epsilon_at(round, total, eps_frac, eps_start, eps_floor);
        out.action = select_action(out.obs, qnet, out.epsilon, rng);
        apply_action(out.action, eta_g, eta_d, lambda_aux);
        prev_obs = out.obs;
        prev_action = out.action;
        prev_rec = curr;
        have_prev = true;
        return out;
    }
};

}  // namespace mspg

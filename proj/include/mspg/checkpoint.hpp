#pragma once
// Byte-level persistence helpers for training state. Everything is written in
// a fixed order so save -> load -> save reproduces the file exactly.

#include <cstdint>
#include <string>

#include "mspg/apfl.hpp"
#include "mspg/balance.hpp"
#include "mspg/nn.hpp"
#include "mspg/tensor.hpp"

namespace mspg {
namespace ck {

inline void put_str(std::string& out, const std::string& s) {
    detail::put<std::uint64_t>(out, s.size());
    out += s;
}

inline std::string get_str(detail::ByteReader& r) {
    auto n = r.get<std::uint64_t>();
    if (r.pos + n > r.buf.size()) fail("checkpoint: truncated string");
    std::string s = r.buf.substr(r.pos, std::size_t(n));
    r.pos += std::size_t(n);
    return s;
}

template <typename T>
void put_params(std::string& out, const ParamSet<T>& ps) {
    detail::put<std::uint32_t>(out, std::uint32_t(ps.items.size()));
    for (std::size_t i = 0; i < ps.items.size(); ++i) {
        put_str(out, ps.names[i]);
        serialize_tensor(out, ps.items[i]);
    }
}

// Loads values into an already-built parameter set; names and shapes must
// match the architecture implied by the config echo.
template <typename T>
void load_params(detail::ByteReader& r, ParamSet<T>& ps) {
    auto n = r.get<std::uint32_t>();
    if (n != ps.items.size()) fail("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < ps.items.size(); ++i) {
        std::string name = get_str(r);
        if (name != ps.names[i]) fail("checkpoint: parameter name mismatch: " + name);
        auto t = deserialize_tensor<T>(r);
        if (t.shape() != ps.items[i].shape()) fail("checkpoint: shape mismatch for " + name);
        ps.items[i].values() = t.values();
    }
}

template <typename T>
void put_opt(std::string& out, const AdamW<T>& o) {
    detail::put<std::uint64_t>(out, o.t);
    detail::put<std::uint32_t>(out, std::uint32_t(o.m.size()));
    for (std::size_t k = 0; k < o.m.size(); ++k) {
        detail::put<std::uint64_t>(out, o.m[k].size());
        detail::put_bytes(out, o.m[k].data(), o.m[k].size() * sizeof(T));
        detail::put_bytes(out, o.v[k].data(), o.v[k].size() * sizeof(T));
    }
}

template <typename T>
void load_opt(detail::ByteReader& r, AdamW<T>& o) {
    o.t = r.get<std::uint64_t>();
    auto n = r.get<std::uint32_t>();
    if (n != o.m.size()) fail("checkpoint: optimizer moment count mismatch");
    for (std::size_t k = 0; k < o.m.size(); ++k) {
        auto len = r.get<std::uint64_t>();
        if (len != o.m[k].size()) fail("checkpoint: optimizer moment size mismatch");
        r.read(o.m[k].data(), o.m[k].size() * sizeof(T));
        r.read(o.v[k].data(), o.v[k].size() * sizeof(T));
    }
}

template <typename T>
void put_ema(std::string& out, const Ema<T>& e) {
    detail::put<std::uint64_t>(out, e.t);
    detail::put<std::uint32_t>(out, std::uint32_t(e.shadow.size()));
    for (const auto& s : e.shadow) {
        detail::put<std::uint64_t>(out, s.size());
        detail::put_bytes(out, s.data(), s.size() * sizeof(T));
    }
}

template <typename T>
void load_ema(detail::ByteReader& r, Ema<T>& e) {
    e.t = r.get<std::uint64_t>();
    auto n = r.get<std::uint32_t>();
    if (n != e.shadow.size()) fail("checkpoint: shadow count mismatch");
    for (auto& s : e.shadow) {
        auto len = r.get<std::uint64_t>();
        if (len != s.size()) fail("checkpoint: shadow size mismatch");
        r.read(s.data(), s.size() * sizeof(T));
    }
}

inline void put_rng(std::string& out, const Rng& g) {
    for (auto w : g.state()) detail::put<std::uint64_t>(out, w);
}

inline void load_rng(detail::ByteReader& r, Rng& g) {
    std::array<std::uint64_t, 4> s{};
    for (auto& w : s) w = r.get<std::uint64_t>();
    g.set_state(s);
}

inline void put_record(std::string& out, const RoundRecord& rec) {
    detail::put<double>(out, rec.l_g);
    detail::put<double>(out, rec.l_d);
    detail::put<double>(out, rec.l_fm);
    detail::put<double>(out, rec.d_acc_real);
    detail::put<double>(out, rec.d_acc_fake);
    detail::put<double>(out, rec.quality);
}

inline RoundRecord get_record(detail::ByteReader& r) {
    RoundRecord rec;
    rec.l_g = r.get<double>();
    rec.l_d = r.get<double>();
    rec.l_fm = r.get<double>();
    rec.d_acc_real = r.get<double>();
    rec.d_acc_fake = r.get<double>();
    rec.quality = r.get<double>();
    return rec;
}

inline void put_trainer_state(std::string& out, const TrainerState& ts) {
    detail::put<double>(out, ts.eta_g);
    detail::put<double>(out, ts.eta_d);
    detail::put<double>(out, ts.gamma);
    detail::put<std::int32_t>(out, ts.step);
    detail::put<std::uint8_t>(out, std::uint8_t(ts.stage));
    detail::put<std::uint64_t>(out, ts.window_cap);
    detail::put<std::uint64_t>(out, ts.round);
    detail::put<std::uint64_t>(out, ts.seed);
    detail::put<std::uint8_t>(out, ts.smooth_labels ? 1 : 0);
    detail::put<double>(out, ts.noise_sigma);
    detail::put<std::int32_t>(out, ts.d_steps);
    detail::put<double>(out, ts.weight_reg);
    detail::put<double>(out, ts.lambda_fm);
    detail::put<double>(out, ts.lambda_fm_cap);
    detail::put<std::uint8_t>(out, ts.strong_d_active ? 1 : 0);
    detail::put<std::uint32_t>(out, std::uint32_t(ts.window.size()));
    for (const auto& rec : ts.window) put_record(out, rec);
}

inline void load_trainer_state(detail::ByteReader& r, TrainerState& ts) {
    ts.eta_g = r.get<double>();
    ts.eta_d = r.get<double>();
    ts.gamma = r.get<double>();
    ts.step = r.get<std::int32_t>();
    ts.stage = Stage(r.get<std::uint8_t>());
    ts.window_cap = std::size_t(r.get<std::uint64_t>());
    ts.round = std::size_t(r.get<std::uint64_t>());
    ts.seed = r.get<std::uint64_t>();
    ts.smooth_labels = r.get<std::uint8_t>() != 0;
    ts.noise_sigma = r.get<double>();
    ts.d_steps = r.get<std::int32_t>();
    ts.weight_reg = r.get<double>();
    ts.lambda_fm = r.get<double>();
    ts.lambda_fm_cap = r.get<double>();
    ts.strong_d_active = r.get<std::uint8_t>() != 0;
    auto n = r.get<std::uint32_t>();
    ts.window.clear();
    for (std::uint32_t i = 0; i < n; ++i) ts.window.push_back(get_record(r));
}

inline void put_transition(std::string& out, const Transition& t) {
    for (double v : t.s) detail::put<double>(out, v);
    for (double v : t.s2) detail::put<double>(out, v);
    detail::put<std::int32_t>(out, t.action);
    detail::put<double>(out, t.reward);
    detail::put<std::uint8_t>(out, t.done ? 1 : 0);
}

inline Transition get_transition(detail::ByteReader& r) {
    Transition t;
    for (auto& v : t.s) v = r.get<double>();
    for (auto& v : t.s2) v = r.get<double>();
    t.action = r.get<std::int32_t>();
    t.reward = r.get<double>();
    t.done = r.get<std::uint8_t>() != 0;
    return t;
}

template <typename T>
void put_balancer(std::string& out, const Balancer<T>& b) {
    put_params(out, b.qnet.online_params);
    put_params(out, b.qnet.target_params);
    put_opt(out, b.qnet.opt);
    detail::put<std::uint64_t>(out, b.qnet.updates);
    detail::put<std::uint32_t>(out, std::uint32_t(b.buffer.items().size()));
    for (const auto& t : b.buffer.items()) put_transition(out, t);
    put_rng(out, b.rng);
    detail::put<std::uint8_t>(out, b.have_prev ? 1 : 0);
    for (double v : b.prev_obs) detail::put<double>(out, v);
    detail::put<std::int32_t>(out, b.prev_action);
    put_record(out, b.prev_rec);
}

template <typename T>
void load_balancer(detail::ByteReader& r, Balancer<T>& b) {
    load_params(r, b.qnet.online_params);
    load_params(r, b.qnet.target_params);
    load_opt(r, b.qnet.opt);
    b.qnet.updates = std::size_t(r.get<std::uint64_t>());
    auto n = r.get<std::uint32_t>();
    std::deque<Transition> items;
    for (std::uint32_t i = 0; i < n; ++i) items.push_back(get_transition(r));
    b.buffer.assign(std::move(items));
    load_rng(r, b.rng);
    b.have_prev = r.get<std::uint8_t>() != 0;
    for (auto& v : b.prev_obs) v = r.get<double>();
    b.prev_action = r.get<std::int32_t>();
    b.prev_rec = get_record(r);
}

}  // namespace ck
}  // namespace mspg

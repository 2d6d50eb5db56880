#pragma once
// Flat key=value run configuration: parse, validate, serialize. Unknown keys
// are rejected and every value is range-checked so a bad file fails loudly.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mspg/common.hpp"

namespace mspg {

struct RunConfig {
    // run
    std::uint64_t seed = 1;
    std::string dataset = "ring";  // ring | shapes | dir:PATH
    std::size_t total_rounds = 2000;
    std::size_t batch_size = 16;
    // model
    std::size_t latent_dim = 8;
    std::size_t gen_channels = 12;
    std::size_t gen_spatial = 4;
    std::size_t gen_blocks = 2;
    std::size_t disc_hidden = 64;
    double point_bound = 2.75;           // soft output bound for 2-D sample heads
    std::string fuse_mode = "additive";  // additive | weighted
    std::size_t dema_heads = 3;
    std::size_t dema_tokens = 4;
    std::size_t dema_task_dim = 8;
    double dema_tau = 0.1;
    double dropout = 0.1;
    std::size_t image_size = 16;
    // optimizer
    double eta_g = 0.004;
    double eta_d = 0.004;
    double eta_apply_max = 0.02;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    bool plain_sgd = false;
    double ema_decay = 0.9999;
    bool ema_warmup = true;
    // schedule
    double gamma = 0.5;
    std::size_t step = 2;
    bool steplr_every_round = false;
    double early_frac = 0.2;
    double late_frac = 0.7;
    double instance_noise = 0.05;
    double label_smooth_real = 0.9;
    // losses and toggles
    double lambda_fm = 1.0;
    double lambda_fm_cap = 8.0;
    double lambda_lgcl = 0.1;
    double lambda_aux = 0.1;
    bool afe_enabled = true;
    bool apfl_enabled = true;
    bool balance_enabled = true;
    bool aux_literal_form = false;
    // monitor
    std::size_t monitor_window = 20;
    double strong_d_threshold = 0.8;
    double overconf_threshold = 0.7;
    double stagnation_slope = 1e-3;
    double plateau_eps = 0.01;
    double plateau_min = 0.05;
    // referee
    double q_lr = 1e-3;
    std::size_t q_hidden = 64;
    double q_gamma = 0.95;
    std::size_t q_capacity = 10000;
    std::size_t q_warmup = 500;
    std::size_t q_batch = 64;
    std::size_t q_sync = 200;
    double q_eps_frac = 0.5;
    double q_eps_floor = 0.05;
    // datasets and evaluation
    std::size_t ring_modes = 8;
    double ring_radius = 2.0;
    double ring_sigma = 0.02;
    std::size_t eval_samples = 128;

    bool operator==(const RunConfig&) const = default;
};

namespace cfg_detail {

// std::uint64_t fields (the seed) share the std::size_t alternative; they are
// the same type on every platform this builds for.
using FieldRef = std::variant<double RunConfig::*, std::size_t RunConfig::*, bool RunConfig::*,
                              std::string RunConfig::*>;
static_assert(std::is_same_v<std::size_t, std::uint64_t>);

struct Field {
    const char* name;
    FieldRef ref;
};

inline const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"seed", &RunConfig::seed},
        {"dataset", &RunConfig::dataset},
        {"total_rounds", &RunConfig::total_rounds},
        {"batch_size", &RunConfig::batch_size},
        {"latent_dim", &RunConfig::latent_dim},
        {"gen_channels", &RunConfig::gen_channels},
        {"gen_spatial", &RunConfig::gen_spatial},
        {"gen_blocks", &RunConfig::gen_blocks},
        {"disc_hidden", &RunConfig::disc_hidden},
        {"point_bound", &RunConfig::point_bound},
        {"fuse_mode", &RunConfig::fuse_mode},
        {"dema_heads", &RunConfig::dema_heads},
        {"dema_tokens", &RunConfig::dema_tokens},
        {"dema_task_dim", &RunConfig::dema_task_dim},
        {"dema_tau", &RunConfig::dema_tau},
        {"dropout", &RunConfig::dropout},
        {"image_size", &RunConfig::image_size},
        {"eta_g", &RunConfig::eta_g},
        {"eta_d", &RunConfig::eta_d},
        {"eta_apply_max", &RunConfig::eta_apply_max},
        {"beta1", &RunConfig::beta1},
        {"beta2", &RunConfig::beta2},
        {"adam_eps", &RunConfig::adam_eps},
        {"weight_decay", &RunConfig::weight_decay},
        {"plain_sgd", &RunConfig::plain_sgd},
        {"ema_decay", &RunConfig::ema_decay},
        {"ema_warmup", &RunConfig::ema_warmup},
        {"gamma", &RunConfig::gamma},
        {"step", &RunConfig::step},
        {"steplr_every_round", &RunConfig::steplr_every_round},
        {"early_frac", &RunConfig::early_frac},
        {"late_frac", &RunConfig::late_frac},
        {"instance_noise", &RunConfig::instance_noise},
        {"label_smooth_real", &RunConfig::label_smooth_real},
        {"lambda_fm", &RunConfig::lambda_fm},
        {"lambda_fm_cap", &RunConfig::lambda_fm_cap},
        {"lambda_lgcl", &RunConfig::lambda_lgcl},
        {"lambda_aux", &RunConfig::lambda_aux},
        {"afe_enabled", &RunConfig::afe_enabled},
        {"apfl_enabled", &RunConfig::apfl_enabled},
        {"balance_enabled", &RunConfig::balance_enabled},
        {"aux_literal_form", &RunConfig::aux_literal_form},
        {"monitor_window", &RunConfig::monitor_window},
        {"strong_d_threshold", &RunConfig::strong_d_threshold},
        {"overconf_threshold", &RunConfig::overconf_threshold},
        {"stagnation_slope", &RunConfig::stagnation_slope},
        {"plateau_eps", &RunConfig::plateau_eps},
        {"plateau_min", &RunConfig::plateau_min},
        {"q_lr", &RunConfig::q_lr},
        {"q_hidden", &RunConfig::q_hidden},
        {"q_gamma", &RunConfig::q_gamma},
        {"q_capacity", &RunConfig::q_capacity},
        {"q_warmup", &RunConfig::q_warmup},
        {"q_batch", &RunConfig::q_batch},
        {"q_sync", &RunConfig::q_sync},
        {"q_eps_frac", &RunConfig::q_eps_frac},
        {"q_eps_floor", &RunConfig::q_eps_floor},
        {"ring_modes", &RunConfig::ring_modes},
        {"ring_radius", &RunConfig::ring_radius},
        {"ring_sigma", &RunConfig::ring_sigma},
        {"eval_samples", &RunConfig::eval_samples},
    };
    return table;
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

[[noreturn]] inline void bad(const std::string& key, const std::string& why) {
    throw ConfigError("config: key '" + key + "' " + why);
}

inline void set_value(RunConfig& c, const Field& f, const std::string& raw) {
    const std::string key = f.name;
    if (std::holds_alternative<std::string RunConfig::*>(f.ref)) {
        if (raw.empty()) bad(key, "has an empty value");
        c.*std::get<std::string RunConfig::*>(f.ref) = raw;
        return;
    }
    if (raw.empty()) bad(key, "has an empty value");
    if (std::holds_alternative<bool RunConfig::*>(f.ref)) {
        if (raw == "true") c.*std::get<bool RunConfig::*>(f.ref) = true;
        else if (raw == "false") c.*std::get<bool RunConfig::*>(f.ref) = false;
        else bad(key, "expects true or false, got '" + raw + "'");
        return;
    }
    const char* begin = raw.c_str();
    char* end = nullptr;
    if (std::holds_alternative<double RunConfig::*>(f.ref)) {
        double v = std::strtod(begin, &end);
        if (end != begin + raw.size()) bad(key, "is not a number: '" + raw + "'");
        c.*std::get<double RunConfig::*>(f.ref) = v;
        return;
    }
    if (raw[0] == '-') bad(key, "must be non-negative, got '" + raw + "'");
    unsigned long long v = std::strtoull(begin, &end, 10);
    if (end != begin + raw.size()) bad(key, "is not an integer: '" + raw + "'");
    c.*std::get<std::size_t RunConfig::*>(f.ref) = std::size_t(v);
}

inline std::string get_value(const RunConfig& c, const Field& f) {
    char buf[64];
    if (auto* pd = std::get_if<double RunConfig::*>(&f.ref)) {
        std::snprintf(buf, sizeof(buf), "%.17g", c.**pd);
        return buf;
    }
    if (auto* ps = std::get_if<std::size_t RunConfig::*>(&f.ref))
        return std::to_string(c.**ps);
    if (auto* pb = std::get_if<bool RunConfig::*>(&f.ref)) return c.**pb ? "true" : "false";
    return c.*std::get<std::string RunConfig::*>(f.ref);
}

}  // namespace cfg_detail

// Range checks with the offending key named in the message.
inline void validate_config(const RunConfig& c) {
    using cfg_detail::bad;
    auto in01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (c.dataset != "ring" && c.dataset != "shapes" &&
        !(c.dataset.rfind("dir:", 0) == 0 && c.dataset.size() > 4))
        bad("dataset", "must be ring, shapes, or dir:PATH");
    if (c.total_rounds < 1) bad("total_rounds", "must be >= 1");
    if (c.batch_size < 1) bad("batch_size", "must be >= 1");
    if (c.latent_dim < 1) bad("latent_dim", "must be >= 1");
    if (c.gen_channels < 1) bad("gen_channels", "must be >= 1");
    if (c.gen_spatial < 1) bad("gen_spatial", "must be >= 1");
    if (c.gen_blocks < 1) bad("gen_blocks", "must be >= 1");
    if (c.disc_hidden < 1) bad("disc_hidden", "must be >= 1");
    if (!(c.point_bound > 0.0 && c.point_bound <= 100.0))
        bad("point_bound", "must be in (0, 100]");
    if (c.fuse_mode != "additive" && c.fuse_mode != "weighted")
        bad("fuse_mode", "must be additive or weighted");
    if (c.dema_heads < 1) bad("dema_heads", "must be >= 1");
    if (c.gen_channels % c.dema_heads != 0)
        bad("dema_heads", "must divide gen_channels");
    if (c.dema_tokens < 2) bad("dema_tokens", "must be >= 2");
    if (c.dema_task_dim < 1) bad("dema_task_dim", "must be >= 1");
    if (!(c.dema_tau > 0.0)) bad("dema_tau", "must be > 0");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) bad("dropout", "must be in [0,1)");
    if (c.image_size < 8 || c.image_size % 4 != 0)
        bad("image_size", "must be >= 8 and a multiple of 4");
    if (!(c.eta_g >= 1e-6 && c.eta_g <= 1.0)) bad("eta_g", "must be in [1e-6, 1]");
    if (!(c.eta_d >= 1e-6 && c.eta_d <= 1.0)) bad("eta_d", "must be in [1e-6, 1]");
    if (!(c.eta_apply_max >= 1e-6 && c.eta_apply_max <= 1.0))
        bad("eta_apply_max", "must be in [1e-6, 1]");
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) bad("beta1", "must be in [0,1)");
    if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) bad("beta2", "must be in [0,1)");
    if (!(c.adam_eps > 0.0)) bad("adam_eps", "must be > 0");
    if (!(c.weight_decay >= 0.0)) bad("weight_decay", "must be >= 0");
    if (!(c.ema_decay >= 0.0 && c.ema_decay < 1.0)) bad("ema_decay", "must be in [0,1)");
    if (!(c.gamma > 0.0 && c.gamma <= 1.0)) bad("gamma", "must be in (0,1]");
    if (c.step < 1) bad("step", "must be >= 1");
    if (!(c.early_frac > 0.0 && c.early_frac <= 1.0)) bad("early_frac", "must be in (0,1]");
    if (!(c.late_frac > 0.0 && c.late_frac <= 1.0)) bad("late_frac", "must be in (0,1]");
    if (c.early_frac > c.late_frac) bad("early_frac", "must not exceed late_frac");
    if (!(c.instance_noise >= 0.0)) bad("instance_noise", "must be >= 0");
    if (!(c.label_smooth_real > 0.0 && c.label_smooth_real <= 1.0))
        bad("label_smooth_real", "must be in (0,1]");
    if (!(c.lambda_fm >= 0.0)) bad("lambda_fm", "must be >= 0");
    if (!(c.lambda_fm_cap >= c.lambda_fm)) bad("lambda_fm_cap", "must be >= lambda_fm");
    if (!(c.lambda_lgcl >= 0.0)) bad("lambda_lgcl", "must be >= 0");
    if (!(c.lambda_aux >= 0.0)) bad("lambda_aux", "must be >= 0");
    if (c.monitor_window < 2) bad("monitor_window", "must be >= 2");
    if (!in01(c.strong_d_threshold)) bad("strong_d_threshold", "must be in (0,1)");
    if (!in01(c.overconf_threshold)) bad("overconf_threshold", "must be in (0,1)");
    if (!(c.stagnation_slope >= 0.0)) bad("stagnation_slope", "must be >= 0");
    if (!(c.plateau_eps >= 0.0)) bad("plateau_eps", "must be >= 0");
    if (!(c.plateau_min >= 0.0)) bad("plateau_min", "must be >= 0");
    if (!(c.q_lr > 0.0 && c.q_lr <= 1.0)) bad("q_lr", "must be in (0,1]");
    if (c.q_hidden < 1) bad("q_hidden", "must be >= 1");
    if (!(c.q_gamma >= 0.0 && c.q_gamma < 1.0)) bad("q_gamma", "must be in [0,1)");
    if (c.q_capacity < 1) bad("q_capacity", "must be >= 1");
    if (c.q_warmup > c.q_capacity) bad("q_warmup", "must not exceed q_capacity");
    if (c.q_batch < 1) bad("q_batch", "must be >= 1");
    if (c.q_warmup < c.q_batch) bad("q_warmup", "must be >= q_batch");
    if (c.q_sync < 1) bad("q_sync", "must be >= 1");
    if (!(c.q_eps_frac > 0.0 && c.q_eps_frac <= 1.0)) bad("q_eps_frac", "must be in (0,1]");
    if (!(c.q_eps_floor >= 0.0 && c.q_eps_floor <= 1.0)) bad("q_eps_floor", "must be in [0,1]");
    if (c.ring_modes < 2) bad("ring_modes", "must be >= 2");
    if (!(c.ring_radius > 0.0)) bad("ring_radius", "must be > 0");
    if (!(c.ring_sigma > 0.0)) bad("ring_sigma", "must be > 0");
    if (c.eval_samples < 1) bad("eval_samples", "must be >= 1");
}

// Lines are `key = value`; blank lines and lines starting with # are skipped.
inline RunConfig parse_config(const std::string& text, bool validate = true) {
    RunConfig c;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = cfg_detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " has no '=': " + t);
        std::string key = cfg_detail::trim(t.substr(0, eq));
        std::string val = cfg_detail::trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config: line " + std::to_string(lineno) + " has an empty key");
        const cfg_detail::Field* field = nullptr;
        for (const auto& f : cfg_detail::fields())
            if (key == f.name) {
                field = &f;
                break;
            }
        if (!field) throw ConfigError("config: unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError("config: duplicate key '" + key + "'");
        cfg_detail::set_value(c, *field, val);
    }
    if (validate) validate_config(c);
    return c;
}

inline std::string serialize_config(const RunConfig& c) {
    std::string out;
    for (const auto& f : cfg_detail::fields()) {
        out += f.name;
        out += " = ";
        out += cfg_detail::get_value(c, f);
        out += "\n";
    }
    return out;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

}  // namespace mspg

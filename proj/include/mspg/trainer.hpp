#pragma once
// Training orchestration: one object owns the models, optimizers, schedules,
// referee, and RNG streams, advances them one round at a time, and reports a
// flat per-round result that the runners turn into CSV rows. The whole round
// is a pure function of saved state, which is what makes checkpoint resume
// and schedule replay byte-exact.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mspg/apfl.hpp"
#include "mspg/balance.hpp"
#include "mspg/checkpoint.hpp"
#include "mspg/config.hpp"
#include "mspg/datasets.hpp"
#include "mspg/models.hpp"
#include "mspg/nn.hpp"

namespace mspg {

inline std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline constexpr const char* kMetricsHeader =
    "round,stage,L_G,L_D,L_FM,L_LGCL,d_acc_real,d_acc_fake,eta_G,eta_D,lambda_aux,"
    "balance_action,reward,quality,coverage";
inline constexpr const char* kBalanceHeader =
    "round,s0,s1,s2,s3,s4,s5,s6,s7,action,reward,epsilon,td_loss";
inline constexpr const char* kScheduleHeader =
    "round,eta_G,eta_D,lambda_aux,balance_action,triggers";

struct RoundResult {
    RoundRecord rec;       // losses, accuracies, quality fed to the monitor
    Stage stage = Stage::Early;
    double l_lgcl = 0.0;
    double eta_g_used = 0.0, eta_d_used = 0.0, lambda_aux_used = 0.0;
    std::vector<Adjust> adjustments;
    bool balance_on = false;
    BalanceStep bstep;
    Coverage cov;          // point datasets only; image quality lives in rec
    bool aborted = false;
    std::string abort_msg;
};

inline std::string metrics_row(std::size_t round, const RoundResult& r) {
    std::string s = std::to_string(round);
    s += ',';
    s += r.aborted ? "abort" : stage_name(r.stage);
    for (double v : {r.rec.l_g, r.rec.l_d, r.rec.l_fm, r.l_lgcl, r.rec.d_acc_real,
                     r.rec.d_acc_fake, r.eta_g_used, r.eta_d_used, r.lambda_aux_used}) {
        s += ',';
        s += fmt_g(v);
    }
    s += ',';
    s += std::to_string(r.balance_on ? r.bstep.action : -1);
    s += ',';
    s += fmt_g(r.balance_on ? r.bstep.reward : 0.0);
    s += ',';
    s += fmt_g(r.rec.quality);
    s += ',';
    s += std::to_string(r.cov.covered);
    return s;
}

inline std::string balance_row(std::size_t round, const RoundResult& r) {
    std::string s = std::to_string(round);
    for (double v : r.bstep.obs) {
        s += ',';
        s += fmt_g(v);
    }
    s += ',';
    s += std::to_string(r.bstep.action);
    s += ',';
    s += fmt_g(r.bstep.reward);
    s += ',';
    s += fmt_g(r.bstep.epsilon);
    s += ',';
    s += fmt_g(r.bstep.learned ? r.bstep.td_loss : 0.0);
    return s;
}

inline std::string schedule_row(std::size_t round, const RoundResult& r) {
    std::string s = std::to_string(round);
    for (double v : {r.eta_g_used, r.eta_d_used, r.lambda_aux_used}) {
        s += ',';
        s += fmt_g(v);
    }
    s += ',';
    s += std::to_string(r.balance_on ? r.bstep.action : -1);
    s += ',';
    if (r.adjustments.empty()) {
        s += '-';
    } else {
        for (std::size_t i = 0; i < r.adjustments.size(); ++i) {
            if (i) s += ';';
            s += adjust_name(r.adjustments[i]);
        }
    }
    return s;
}

template <typename T = float>
class Trainer {
  public:
    RunConfig cfg;
    SampleSpace space = SampleSpace::Point;
    Generator<T> gen;
    Discriminator<T> disc;
    AuxDiscriminator<T> auxd;
    ParamSet<T> g_params, d_params, aux_params;
    AdamW<T> g_opt, d_opt, aux_opt;
    Ema<T> ema;
    TrainerState ts;
    MonitorConfig mc;
    CurriculumConfig cc;
    double lambda_aux = 0.1;
    Balancer<double> bal;
    Rng data_rng, latent_rng, dropout_rng, noise_rng, eval_rng;
    RingSpec ring;
    Tensor<T> pool;  // ingested image pool, [N,1,S,S]
    std::size_t pool_cleaned = 0;
    std::size_t rounds_done = 0;

    explicit Trainer(const RunConfig& c)
        : cfg(c),
          bal(c.seed, c.q_lr, c.q_hidden, c.q_capacity, c.q_warmup) {
        validate_config(cfg);
        space = cfg.dataset == "ring" ? SampleSpace::Point : SampleSpace::Image;
        ring = RingSpec{cfg.ring_modes, cfg.ring_radius, cfg.ring_sigma};

        Rng init = make_stream(cfg.seed, RngStream::ModelInit);
        FuseMode fm = cfg.fuse_mode == "weighted" ? FuseMode::Weighted : FuseMode::Additive;
        gen = Generator<T>(cfg.latent_dim, cfg.gen_channels, cfg.gen_spatial, cfg.gen_blocks,
                           init, space, fm, cfg.dema_heads, cfg.dema_tokens, cfg.dema_task_dim,
                           T(cfg.dema_tau), T(cfg.dropout), T(cfg.point_bound));
        Shape fgen = gen.f_gen_shape(1);
        fgen.erase(fgen.begin());
        disc = Discriminator<T>(space, cfg.disc_hidden, fgen, init, cfg.image_size);
        // Built even when the auxiliary path is toggled off so that toggling
        // it never shifts the init stream of the main models.
        auxd = AuxDiscriminator<T>(fgen, cfg.disc_hidden, init);

        gen.collect(g_params, "g");
        disc.collect(d_params, "d");
        auxd.collect(aux_params, "aux");
        g_opt = AdamW<T>(g_params, T(cfg.eta_g), T(cfg.beta1), T(cfg.beta2), T(cfg.adam_eps),
                         T(cfg.weight_decay), cfg.plain_sgd);
        d_opt = AdamW<T>(d_params, T(cfg.eta_d), T(cfg.beta1), T(cfg.beta2), T(cfg.adam_eps),
                         T(cfg.weight_decay), cfg.plain_sgd);
        aux_opt = AdamW<T>(aux_params, T(cfg.eta_d), T(cfg.beta1), T(cfg.beta2), T(cfg.adam_eps),
                           T(cfg.weight_decay), cfg.plain_sgd);
        ema = Ema<T>(g_params, T(cfg.ema_decay), cfg.ema_warmup);

        ts.eta_g = cfg.eta_g;
        ts.eta_d = cfg.eta_d;
        ts.gamma = cfg.gamma;
        ts.step = int(cfg.step);
        ts.window_cap = cfg.monitor_window;
        ts.seed = cfg.seed;
        ts.lambda_fm = cfg.lambda_fm;
        ts.lambda_fm_cap = cfg.lambda_fm_cap;
        if (!cfg.apfl_enabled) {
            // Fixed neutral schedule: no smoothing, single critic step, no
            // instance noise, constant feature weight.
            ts.smooth_labels = false;
            ts.d_steps = 1;
            ts.noise_sigma = 0.0;
            ts.weight_reg = 0.0;
        }
        mc = MonitorConfig{cfg.strong_d_threshold, cfg.overconf_threshold, cfg.stagnation_slope,
                           cfg.plateau_eps, cfg.plateau_min};
        cc = CurriculumConfig{cfg.early_frac, cfg.late_frac, cfg.instance_noise, cfg.weight_decay,
                              cfg.lambda_fm};
        lambda_aux = cfg.lambda_aux;

        bal.batch = cfg.q_batch;
        bal.sync_every = cfg.q_sync;
        bal.eps_frac = cfg.q_eps_frac;
        bal.eps_floor = cfg.q_eps_floor;
        bal.qnet.gamma_q = cfg.q_gamma;

        data_rng = make_stream(cfg.seed, RngStream::Data);
        latent_rng = make_stream(cfg.seed, RngStream::Latent);
        dropout_rng = make_stream(cfg.seed, RngStream::Dropout);
        noise_rng = make_stream(cfg.seed, RngStream::InstanceNoise);
        eval_rng = make_stream(cfg.seed, RngStream::Eval);

        if (cfg.dataset.rfind("dir:", 0) == 0) {
            auto ing = ingest_images<T>(cfg.dataset.substr(4), cfg.image_size);
            pool = ing.images;
            pool_cleaned = ing.cleaned;
        }
    }

    Tensor<T> real_batch() {
        if (space == SampleSpace::Point) return generate_ring<T>(cfg.batch_size, ring, data_rng);
        if (cfg.dataset == "shapes")
            return shapes_batch<T>(cfg.batch_size, cfg.image_size, data_rng).images;
        std::size_t n = pool.shape()[0];
        std::size_t row = numel(pool.shape()) / n;
        std::vector<T> out(cfg.batch_size * row);
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            std::size_t i = std::size_t(data_rng.below(n));
            std::copy_n(pool.values().begin() + std::ptrdiff_t(i * row), row,
                        out.begin() + std::ptrdiff_t(b * row));
        }
        Shape s = pool.shape();
        s[0] = cfg.batch_size;
        return Tensor<T>::from(s, std::move(out));
    }

    Tensor<T> latents(std::size_t n, Rng& rng) {
        std::vector<T> v(n * cfg.latent_dim);
        for (auto& x : v) x = T(rng.normal());
        return Tensor<T>::from({n, cfg.latent_dim}, std::move(v));
    }

    // Fresh leaf with additive Gaussian noise; draws nothing when sigma == 0.
    Tensor<T> with_noise(const Tensor<T>& x, double sigma) {
        if (sigma <= 0.0) return x;
        std::vector<T> v = x.values();
        for (auto& e : v) e += T(sigma * noise_rng.normal());
        return Tensor<T>::from(x.shape(), std::move(v));
    }

    // Samples from the EMA generator in eval mode. Swap-in/swap-out keeps the
    // live weights bit-exact.
    Tensor<T> sample_ema(std::size_t n, Rng& rng) {
        ema.swap_with(g_params);
        Tape<T> tp(false);
        Tensor<T> z = latents(n, rng);
        Tensor<T> s = gen.forward(tp, z, false, dropout_rng).sample;
        ema.swap_with(g_params);
        return s;
    }

    // Ring runs score mode coverage; image runs score a two-moment match
    // against the current real batch (mean within half the pixel range and a
    // spread ratio), which is cheap and monotone enough for the monitor.
    Coverage evaluate(const Tensor<T>& real) {
        Tensor<T> s = sample_ema(cfg.eval_samples, eval_rng);
        if (space == SampleSpace::Point) return mode_coverage(points_of(s), ring);
        auto stats = [](const std::vector<T>& v) {
            double mu = 0.0;
            for (T x : v) mu += double(x);
            mu /= double(v.size());
            double var = 0.0;
            for (T x : v) var += (double(x) - mu) * (double(x) - mu);
            return std::pair<double, double>(mu, std::sqrt(var / double(v.size())));
        };
        auto [mg, sg] = stats(s.values());
        auto [mr, sr] = stats(real.values());
        double m = 1.0 - std::min(1.0, std::abs(mg - mr) / 2.0);
        double hi = std::max(sg, sr);
        double ratio = hi > 1e-9 ? std::min(sg, sr) / hi : 0.0;
        Coverage c;
        c.quality = m * ratio;
        c.hq = ratio;
        return c;
    }

    RoundResult train_round(std::size_t round) {
        RoundResult res;
        res.stage = stage_for_round(round, cfg.total_rounds, cc.early_frac, cc.late_frac);
        if (cfg.apfl_enabled) curriculum_update(ts, round, cfg.total_rounds, cc);
        // the balance knobs roam [1e-6, 1]; the applied optimizer rate is capped
        // so a knob excursion degrades training instead of destroying the nets
        res.eta_g_used = std::min(ts.eta_g, cfg.eta_apply_max);
        res.eta_d_used = std::min(ts.effective_eta_d(), cfg.eta_apply_max);
        res.lambda_aux_used = lambda_aux;
        double sigma = ts.noise_sigma;
        // stage regularization stacks on the optimizer's constant decay
        T wd = T(cfg.weight_decay + ts.weight_reg);
        T smooth = T(ts.smooth_labels ? cfg.label_smooth_real : 1.0);

        Tensor<T> real = real_batch();
        double acc_r = 0.0, acc_f = 0.0, ld_val = 0.0;

        for (int k = 0; k < ts.effective_d_steps(); ++k) {
            Tensor<T> fake, f_gen_fake;
            {
                Tape<T> tg(false);
                auto go = gen.forward(tg, latents(cfg.batch_size, latent_rng), true, dropout_rng);
                fake = Tensor<T>::from(go.sample.shape(), go.sample.values());
                f_gen_fake = Tensor<T>::from(go.f_gen.shape(), go.f_gen.values());
            }
            Tensor<T> real_in = with_noise(real, sigma);
            Tensor<T> fake_in = with_noise(fake, sigma);
            Tape<T> tp;
            auto dr = disc.forward(tp, real_in);
            auto df = disc.forward(tp, fake_in);
            Tensor<T> ld = loss_d_main(tp, dr.logits, df.logits, smooth);
            if (cfg.afe_enabled) {
                Tensor<T> enc = disc.encode(tp, real_in);
                Tensor<T> a_real = auxd.forward(tp, enc);
                Tensor<T> a_fake = auxd.forward(tp, f_gen_fake);
                // The degenerate form scores the generated features on both
                // sides; the default contrasts encoded real vs generated.
                Tensor<T> laux = cfg.aux_literal_form ? loss_d_aux(tp, a_fake, a_fake)
                                                      : loss_d_aux(tp, a_real, a_fake);
                ld = add(tp, ld, laux);
            }
            ld_val = double(ld.item());
            if (!std::isfinite(ld_val)) {
                res.rec = RoundRecord{0.0, ld_val, 0.0, acc_r, acc_f, 0.0};
                res.aborted = true;
                res.abort_msg = "round " + std::to_string(round) + ": non-finite critic loss";
                return res;
            }
            acc_r = logit_accuracy(dr.logits, true);
            acc_f = logit_accuracy(df.logits, false);
            tp.backward(ld);
            d_opt.lr = T(res.eta_d_used);
            d_opt.weight_decay = wd;
            d_opt.step();
            d_params.zero_grad();
            if (cfg.afe_enabled) {
                aux_opt.lr = T(res.eta_d_used);
                aux_opt.weight_decay = wd;
                aux_opt.step();
            }
            aux_params.zero_grad();
        }

        double lg_val = 0.0, fm_val = 0.0, lgcl_val = 0.0;
        {
            d_params.set_requires_grad(false);
            aux_params.set_requires_grad(false);
            Tape<T> tp;
            auto go = gen.forward(tp, latents(cfg.batch_size, latent_rng), true, dropout_rng);
            Tensor<T> fake_in = with_noise(go.sample, sigma);
            Tensor<T> real_in = with_noise(real, sigma);
            auto df = disc.forward(tp, fake_in);
            Tensor<T> lg = loss_g(tp, df.logits);
            if (cfg.afe_enabled) {
                Tensor<T> a_fake = auxd.forward(tp, go.f_gen);
                Tensor<T> laux = loss_g(tp, a_fake);
                lg = loss_g_total(tp, lg, laux, T(lambda_aux));
            }
            auto dr = disc.forward(tp, real_in);
            Tensor<T> l_fm = feature_matching_loss(tp, dr.features, df.features);
            Tensor<T> total = add(tp, lg, mul(tp, l_fm, T(ts.lambda_fm)));
            total = add(tp, total, mul(tp, go.contrastive, T(cfg.lambda_lgcl)));
            lg_val = double(lg.item());
            fm_val = double(l_fm.item());
            lgcl_val = double(go.contrastive.item());
            double tot_val = double(total.item());
            if (!std::isfinite(tot_val)) {
                d_params.set_requires_grad(true);
                aux_params.set_requires_grad(true);
                res.rec = RoundRecord{lg_val, ld_val, fm_val, acc_r, acc_f, 0.0};
                res.l_lgcl = lgcl_val;
                res.aborted = true;
                res.abort_msg = "round " + std::to_string(round) + ": non-finite generator loss";
                return res;
            }
            tp.backward(total);
            g_opt.lr = T(res.eta_g_used);
            g_opt.weight_decay = wd;
            g_opt.step();
            g_params.zero_grad();
            d_params.set_requires_grad(true);
            aux_params.set_requires_grad(true);
        }
        ema.update(g_params);

        res.cov = evaluate(real);
        res.l_lgcl = lgcl_val;
        res.rec = RoundRecord{lg_val, ld_val, fm_val, acc_r, acc_f, res.cov.quality};

        if (cfg.apfl_enabled) {
            res.adjustments = monitor_update(ts, res.rec, mc);
            apply_adjustments(ts, res.adjustments);
        }
        if (cfg.steplr_every_round) {
            ts.eta_g = steplr_update(ts.eta_g, ts.gamma, ts.step);
            ts.eta_d = steplr_update(ts.eta_d, ts.gamma, ts.step);
        }
        if (cfg.balance_enabled) {
            res.balance_on = true;
            res.bstep = bal.step(res.rec, ts.eta_g, ts.eta_d, lambda_aux, round, cfg.total_rounds,
                                 round == cfg.total_rounds);
        }
        ts.round = round;
        rounds_done = round;
        return res;
    }

    std::string checkpoint_bytes() const {
        std::string out = "MSPC";
        detail::put<std::uint8_t>(out, 1);
        ck::put_str(out, serialize_config(cfg));
        detail::put<std::uint64_t>(out, rounds_done);
        ck::put_params(out, g_params);
        ck::put_params(out, d_params);
        ck::put_params(out, aux_params);
        ck::put_opt(out, g_opt);
        ck::put_opt(out, d_opt);
        ck::put_opt(out, aux_opt);
        ck::put_ema(out, ema);
        ck::put_trainer_state(out, ts);
        detail::put<double>(out, lambda_aux);
        ck::put_balancer(out, bal);
        for (const Rng* g : {&data_rng, &latent_rng, &dropout_rng, &noise_rng, &eval_rng})
            ck::put_rng(out, *g);
        return out;
    }

    // Restores everything after the config echo; the trainer must have been
    // constructed from that same config.
    void restore(detail::ByteReader& r) {
        rounds_done = std::size_t(r.get<std::uint64_t>());
        ck::load_params(r, g_params);
        ck::load_params(r, d_params);
        ck::load_params(r, aux_params);
        ck::load_opt(r, g_opt);
        ck::load_opt(r, d_opt);
        ck::load_opt(r, aux_opt);
        ck::load_ema(r, ema);
        ck::load_trainer_state(r, ts);
        lambda_aux = r.get<double>();
        ck::load_balancer(r, bal);
        for (Rng* g : {&data_rng, &latent_rng, &dropout_rng, &noise_rng, &eval_rng})
            ck::load_rng(r, *g);
    }
};

// Reads the fixed header of a checkpoint blob and returns the embedded config;
// leaves the reader positioned for Trainer::restore.
inline RunConfig read_checkpoint_header(detail::ByteReader& r) {
    char magic[4];
    if (r.buf.size() < 5) fail("checkpoint: file too short");
    r.read(magic, 4);
    if (std::string(magic, 4) != "MSPC") fail("checkpoint: bad magic");
    auto version = r.get<std::uint8_t>();
    if (version != 1) fail("checkpoint: unsupported version " + std::to_string(int(version)));
    return parse_config(ck::get_str(r));
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) fail("write failed for " + path);
}

struct TrainReport {
    std::size_t rounds_run = 0;
    Coverage final_cov;
    double final_quality = 0.0;
    bool aborted = false;
    std::string abort_msg;
    std::string metrics_csv;   // rows produced by this invocation only
    std::string balance_csv;
    std::string schedule_csv;
};

// Runs rounds [first, last] on an existing trainer, accumulating CSV text.
template <typename T>
TrainReport run_rounds(Trainer<T>& tr, std::size_t first, std::size_t last) {
    TrainReport rep;
    rep.metrics_csv = std::string(kMetricsHeader) + "\n";
    rep.balance_csv = std::string(kBalanceHeader) + "\n";
    rep.schedule_csv = std::string(kScheduleHeader) + "\n";
    for (std::size_t round = first; round <= last; ++round) {
        RoundResult res = tr.train_round(round);
        rep.metrics_csv += metrics_row(round, res) + "\n";
        if (res.balance_on) rep.balance_csv += balance_row(round, res) + "\n";
        rep.schedule_csv += schedule_row(round, res) + "\n";
        rep.rounds_run = round;
        rep.final_cov = res.cov;
        rep.final_quality = res.rec.quality;
        if (res.aborted) {
            rep.aborted = true;
            rep.abort_msg = res.abort_msg;
            break;
        }
    }
    return rep;
}

struct TrainOptions {
    std::string out_dir = ".";
    std::size_t stop_after = 0;  // 0 = run to total_rounds
    std::string resume_path;     // checkpoint to continue from
    bool write_files = true;
};

// Full train entry point: fresh run or checkpoint continuation. Writes
// metrics.csv, balance.csv, and checkpoint.bin into out_dir; rows cover only
// the rounds this invocation ran. Non-finite losses emit a final row flagged
// "abort" in the stage column and then raise.
template <typename T = float>
TrainReport run_train(const RunConfig& cfg_in, const TrainOptions& opt) {
    RunConfig cfg = cfg_in;
    std::unique_ptr<Trainer<T>> tr;
    std::size_t first = 1;
    if (!opt.resume_path.empty()) {
        std::string bytes = read_file_bytes(opt.resume_path);
        detail::ByteReader r{bytes, 0};
        RunConfig saved = read_checkpoint_header(r);
        if (cfg_in.seed != saved.seed)
            fail("resume: seed " + std::to_string(cfg_in.seed) + " does not match checkpoint seed " +
                 std::to_string(saved.seed));
        cfg = saved;
        tr = std::make_unique<Trainer<T>>(cfg);
        tr->restore(r);
        first = tr->rounds_done + 1;
    } else {
        tr = std::make_unique<Trainer<T>>(cfg);
    }
    std::size_t last = opt.stop_after ? std::min(opt.stop_after, cfg.total_rounds)
                                      : cfg.total_rounds;
    if (first > last) fail("resume: checkpoint already at round " + std::to_string(first - 1));

    TrainReport rep = run_rounds(*tr, first, last);
    if (opt.write_files) {
        write_file_bytes(opt.out_dir + "/metrics.csv", rep.metrics_csv);
        if (cfg.balance_enabled) write_file_bytes(opt.out_dir + "/balance.csv", rep.balance_csv);
        if (!rep.aborted) write_file_bytes(opt.out_dir + "/checkpoint.bin", tr->checkpoint_bytes());
    }
    if (rep.aborted) fail(rep.abort_msg);
    return rep;
}

struct ReplayReport {
    std::string schedule_csv;
    bool compared = false;
    std::size_t first_divergence = 0;  // 0 = identical
    std::string divergence_note;
};

// Re-runs the schedule deterministically from a seed + config (optionally
// through the checkpointed portion of a run) and emits per-round knob values,
// referee actions, and fired monitor rules. With a reference CSV the replay
// reports the first line that differs.
template <typename T = float>
ReplayReport run_replay(const RunConfig& cfg, const std::string& against_csv) {
    Trainer<T> tr(cfg);
    TrainReport rep = run_rounds(tr, 1, cfg.total_rounds);
    ReplayReport out;
    out.schedule_csv = rep.schedule_csv;
    if (rep.aborted) fail(rep.abort_msg);
    if (!against_csv.empty()) {
        out.compared = true;
        // a metrics CSV reference is reduced to its knob columns; a schedule
        // CSV is compared as-is minus the triggers column
        bool metrics_ref = against_csv.rfind(kMetricsHeader, 0) == 0;
        auto project = [](const std::string& line, const std::vector<std::size_t>& cols) {
            std::vector<std::string> f;
            std::string cur;
            for (char c : line) {
                if (c == ',') { f.push_back(cur); cur.clear(); }
                else cur += c;
            }
            f.push_back(cur);
            std::string o;
            for (std::size_t i = 0; i < cols.size(); ++i) {
                if (i) o += ',';
                o += cols[i] < f.size() ? f[cols[i]] : std::string();
            }
            return o;
        };
        const std::vector<std::size_t> sched_cols = {0, 1, 2, 3, 4};
        const std::vector<std::size_t> ref_cols = metrics_ref
                                                      ? std::vector<std::size_t>{0, 8, 9, 10, 11}
                                                      : sched_cols;
        std::istringstream a(rep.schedule_csv), b(against_csv);
        std::string la, lb;
        std::size_t line = 0;
        while (true) {
            bool ga = bool(std::getline(a, la));
            bool gb = bool(std::getline(b, lb));
            ++line;
            if (!ga && !gb) break;
            std::string pa = ga ? project(la, sched_cols) : std::string("<eof>");
            std::string pb = gb ? project(lb, ref_cols) : std::string("<eof>");
            if (line == 1) continue;  // headers differ by design across the two schemas
            if (pa != pb) {
                out.first_divergence = line;
                out.divergence_note =
                    "line " + std::to_string(line) + ": '" + pa + "' vs '" + pb + "'";
                break;
            }
        }
    }
    return out;
}

struct AblateCell {
    bool apfl = false, balance = false, afe = false;
    double mean_quality = 0.0, mean_coverage = 0.0, mean_hq = 0.0;
};

// 2x2x2 toggle grid, each cell averaged over consecutive seeds. Cells run on
// worker threads; each run owns all of its state so results are identical to
// a serial sweep.
template <typename T = float>
std::vector<AblateCell> run_ablate(const RunConfig& base, std::size_t seeds) {
    if (seeds == 0) fail("ablate: need at least one seed");
    std::vector<AblateCell> cells(8);
    std::vector<std::thread> pool;
    // serial unless MSPG_THREADS asks for workers; every cell owns its state,
    // so the threaded sweep is bitwise identical to the serial one
    std::size_t workers = 1;
    if (const char* env = std::getenv("MSPG_THREADS")) {
        char* end = nullptr;
        unsigned long v = std::strtoul(env, &end, 10);
        if (end && *end == '\0' && v > 1) workers = std::min<std::size_t>(8, v);
    }
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < 8; i += workers) {
                AblateCell& cell = cells[i];
                cell.apfl = (i & 4) != 0;
                cell.balance = (i & 2) != 0;
                cell.afe = (i & 1) != 0;
                for (std::size_t s = 0; s < seeds; ++s) {
                    RunConfig c = base;
                    c.seed = base.seed + s;
                    c.apfl_enabled = cell.apfl;
                    c.balance_enabled = cell.balance;
                    c.afe_enabled = cell.afe;
                    Trainer<T> tr(c);
                    TrainReport rep = run_rounds(tr, 1, c.total_rounds);
                    cell.mean_quality += rep.final_quality;
                    cell.mean_coverage += double(rep.final_cov.covered);
                    cell.mean_hq += rep.final_cov.hq;
                }
                cell.mean_quality /= double(seeds);
                cell.mean_coverage /= double(seeds);
                cell.mean_hq /= double(seeds);
            }
        });
    }
    for (auto& t : pool) t.join();
    return cells;
}

inline std::string ablate_table(const std::vector<AblateCell>& cells, std::size_t seeds) {
    std::string s = "apfl,balance,afe,seeds,mean_quality,mean_coverage,mean_hq\n";
    for (const auto& c : cells) {
        s += c.apfl ? "on," : "off,";
        s += c.balance ? "on," : "off,";
        s += c.afe ? "on," : "off,";
        s += std::to_string(seeds);
        s += ',';
        s += fmt_g(c.mean_quality);
        s += ',';
        s += fmt_g(c.mean_coverage);
        s += ',';
        s += fmt_g(c.mean_hq);
        s += '\n';
    }
    return s;
}

}  // namespace mspg

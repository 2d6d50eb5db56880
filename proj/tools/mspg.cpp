// Command-line front end: train / sample / eval / ablate / replay.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mspg/trainer.hpp"

namespace {

constexpr const char* kUsage = R"(usage: mspg <command> [flags]

commands:
  train    run the training loop, write metrics.csv / balance.csv / checkpoint.bin
  sample   draw samples from a checkpoint's averaged generator
  eval     report mode coverage and quality for a checkpoint
  ablate   run the 2x2x2 toggle grid {feedback rules, referee, feature critic}
  replay   regenerate the per-round schedule from seed + config and compare

flags:
  --config PATH      config file (key = value lines); flags override it
  --seed U64         run seed
  --rounds N         total training rounds
  --out PATH         output directory (train/ablate/replay) or file/dir (sample)
  --dataset D        ring | shapes | dir:PATH
  --no-balance       disable the learning-rate referee
  --no-apfl          disable the feedback rules
  --no-afe           disable the auxiliary feature critic
  --resume CKPT      continue training from a checkpoint (train)
  --stop-after N     stop after round N, keeping the checkpoint (train)
  --ckpt PATH        checkpoint to load (sample/eval/replay)
  --n N              number of samples to draw (sample, default 64)
  --seeds K          seeds per grid cell (ablate, default 3)
  --against PATH     schedule or metrics CSV to compare a replay with
)";

struct Args {
    std::string cmd;
    std::map<std::string, std::string> kv;
    bool no_balance = false, no_apfl = false, no_afe = false;
};

[[noreturn]] void usage_error(const std::string& msg) {
    std::fprintf(stderr, "mspg: %s\n%s", msg.c_str(), kUsage);
    std::exit(2);
}

Args parse_args(int argc, char** argv) {
    Args a;
    if (argc < 2) usage_error("missing command");
    a.cmd = argv[1];
    const std::vector<std::string> valued = {"--config", "--seed",  "--rounds",     "--out",
                                             "--dataset", "--resume", "--stop-after", "--ckpt",
                                             "--n",       "--seeds", "--against"};
    for (int i = 2; i < argc; ++i) {
        std::string f = argv[i];
        if (f == "--no-balance") { a.no_balance = true; continue; }
        if (f == "--no-apfl") { a.no_apfl = true; continue; }
        if (f == "--no-afe") { a.no_afe = true; continue; }
        bool known = false;
        for (const auto& v : valued) known = known || f == v;
        if (!known) usage_error("unknown flag '" + f + "'");
        if (i + 1 >= argc) usage_error("flag '" + f + "' needs a value");
        a.kv[f.substr(2)] = argv[++i];
    }
    return a;
}

std::uint64_t to_u64(const std::string& flag, const std::string& s) {
    try {
        std::size_t pos = 0;
        unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        usage_error("flag '--" + flag + "' wants an unsigned integer, got '" + s + "'");
    }
}

mspg::RunConfig build_config(const Args& a) {
    mspg::RunConfig cfg;
    if (auto it = a.kv.find("config"); it != a.kv.end())
        cfg = mspg::parse_config(mspg::read_file_bytes(it->second));
    if (auto it = a.kv.find("seed"); it != a.kv.end()) cfg.seed = to_u64("seed", it->second);
    if (auto it = a.kv.find("rounds"); it != a.kv.end())
        cfg.total_rounds = to_u64("rounds", it->second);
    if (auto it = a.kv.find("dataset"); it != a.kv.end()) cfg.dataset = it->second;
    if (a.no_balance) cfg.balance_enabled = false;
    if (a.no_apfl) cfg.apfl_enabled = false;
    if (a.no_afe) cfg.afe_enabled = false;
    mspg::validate_config(cfg);
    return cfg;
}

std::string flag_or(const Args& a, const std::string& key, const std::string& dflt) {
    auto it = a.kv.find(key);
    return it == a.kv.end() ? dflt : it->second;
}

// Loads a checkpoint into a freshly built trainer; returns the trainer.
std::unique_ptr<mspg::Trainer<float>> load_trainer(const std::string& path) {
    std::string bytes = mspg::read_file_bytes(path);
    mspg::detail::ByteReader r{bytes, 0};
    mspg::RunConfig cfg = mspg::read_checkpoint_header(r);
    auto tr = std::make_unique<mspg::Trainer<float>>(cfg);
    tr->restore(r);
    return tr;
}

int cmd_train(const Args& a) {
    mspg::RunConfig cfg = build_config(a);
    mspg::TrainOptions opt;
    opt.out_dir = flag_or(a, "out", ".");
    opt.resume_path = flag_or(a, "resume", "");
    if (auto it = a.kv.find("stop-after"); it != a.kv.end())
        opt.stop_after = to_u64("stop-after", it->second);
    std::filesystem::create_directories(opt.out_dir);
    mspg::TrainReport rep = mspg::run_train<float>(cfg, opt);
    std::printf("trained through round %zu: coverage %zu, quality %.4f, hq %.4f\n",
                rep.rounds_run, rep.final_cov.covered, rep.final_quality, rep.final_cov.hq);
    std::printf("wrote %s/metrics.csv and %s/checkpoint.bin\n", opt.out_dir.c_str(),
                opt.out_dir.c_str());
    return 0;
}

int cmd_sample(const Args& a) {
    auto it = a.kv.find("ckpt");
    if (it == a.kv.end()) usage_error("sample needs --ckpt PATH");
    auto tr = load_trainer(it->second);
    std::size_t n = 64;
    if (auto f = a.kv.find("n"); f != a.kv.end()) n = to_u64("n", f->second);
    if (n == 0) usage_error("--n must be positive");
    mspg::Tensor<float> s = tr->sample_ema(n, tr->eval_rng);
    if (tr->space == mspg::SampleSpace::Point) {
        std::string out = flag_or(a, "out", "samples.csv");
        std::string csv = "x,y\n";
        for (std::size_t i = 0; i < n; ++i) {
            csv += mspg::fmt_g(s.values()[2 * i]);
            csv += ',';
            csv += mspg::fmt_g(s.values()[2 * i + 1]);
            csv += '\n';
        }
        mspg::write_file_bytes(out, csv);
        std::printf("wrote %zu point samples to %s\n", n, out.c_str());
        return 0;
    }
    std::string dir = flag_or(a, "out", "samples");
    std::filesystem::create_directories(dir);
    std::size_t side = s.shape()[2];
    std::size_t px = side * side;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::uint8_t> pix(px);
        for (std::size_t j = 0; j < px; ++j) {
            float v = (s.values()[i * px + j] + 1.0f) * 0.5f;  // [-1,1] -> [0,1]
            v = std::min(1.0f, std::max(0.0f, v));
            pix[j] = std::uint8_t(v * 255.0f + 0.5f);
        }
        char name[32];
        std::snprintf(name, sizeof name, "/sample_%04zu.pgm", i);
        mspg::write_file_bytes(dir + name, mspg::write_pgm(side, side, pix));
    }
    std::printf("wrote %zu image samples to %s/\n", n, dir.c_str());
    return 0;
}

int cmd_eval(const Args& a) {
    auto it = a.kv.find("ckpt");
    if (it == a.kv.end()) usage_error("eval needs --ckpt PATH");
    auto tr = load_trainer(it->second);
    mspg::Coverage cov = tr->evaluate(tr->real_batch());
    std::printf("coverage %zu, quality %.4f, hq %.4f\n", cov.covered, cov.quality, cov.hq);
    return 0;
}

int cmd_ablate(const Args& a) {
    mspg::RunConfig cfg = build_config(a);
    std::size_t seeds = 3;
    if (auto f = a.kv.find("seeds"); f != a.kv.end()) seeds = to_u64("seeds", f->second);
    if (seeds == 0) usage_error("--seeds must be positive");
    auto cells = mspg::run_ablate<float>(cfg, seeds);
    std::string table = mspg::ablate_table(cells, seeds);
    std::fputs(table.c_str(), stdout);
    if (auto f = a.kv.find("out"); f != a.kv.end()) {
        std::filesystem::create_directories(f->second);
        mspg::write_file_bytes(f->second + "/ablate.csv", table);
        std::printf("wrote %s/ablate.csv\n", f->second.c_str());
    }
    return 0;
}

int cmd_replay(const Args& a) {
    mspg::RunConfig cfg;
    if (auto it = a.kv.find("ckpt"); it != a.kv.end()) {
        std::string bytes = mspg::read_file_bytes(it->second);
        mspg::detail::ByteReader r{bytes, 0};
        cfg = mspg::read_checkpoint_header(r);
        if (auto f = a.kv.find("seed"); f != a.kv.end()) {
            std::uint64_t s = to_u64("seed", f->second);
            if (s != cfg.seed)
                mspg::fail("replay: seed " + std::to_string(s) +
                           " does not match checkpoint seed " + std::to_string(cfg.seed));
        }
    } else {
        cfg = build_config(a);
    }
    std::string against;
    if (auto f = a.kv.find("against"); f != a.kv.end())
        against = mspg::read_file_bytes(f->second);
    mspg::ReplayReport rep = mspg::run_replay<float>(cfg, against);
    std::string dir = flag_or(a, "out", ".");
    std::filesystem::create_directories(dir);
    mspg::write_file_bytes(dir + "/schedule.csv", rep.schedule_csv);
    std::printf("wrote %s/schedule.csv\n", dir.c_str());
    if (rep.compared) {
        if (rep.first_divergence == 0) {
            std::printf("replay matches the reference schedule\n");
        } else {
            std::printf("replay diverges: %s\n", rep.divergence_note.c_str());
            return 3;
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    Args a = parse_args(argc, argv);
    try {
        if (a.cmd == "train") return cmd_train(a);
        if (a.cmd == "sample") return cmd_sample(a);
        if (a.cmd == "eval") return cmd_eval(a);
        if (a.cmd == "ablate") return cmd_ablate(a);
        if (a.cmd == "replay") return cmd_replay(a);
        usage_error("unknown command '" + a.cmd + "'");
    } catch (const mspg::ConfigError& e) {
        std::fprintf(stderr, "mspg: config error: %s\n", e.what());
        return 2;
    } catch (const mspg::Error& e) {
        std::fprintf(stderr, "mspg: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "mspg: %s\n", e.what());
        return 3;
    }
}

#pragma once
// Adaptive training feedback: learning-rate schedule, stage curriculum, and a
// metrics monitor that turns recent-window statistics into corrective actions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "mspg/common.hpp"

namespace mspg {

constexpr double kEtaFloor = 1e-6;

// Multiplicative decay eta * gamma^(1/step), clamped at the floor.
inline double steplr_update(double eta, double gamma, int step) {
  if (!(gamma > 0.0) || gamma > 1.0)
    fail("steplr: gamma must be in (0,1], got " + std::to_string(gamma));
  if (step < 1) fail("steplr: step must be >= 1, got " + std::to_string(step));
  double next = eta * std::pow(gamma, 1.0 / double(step));
  return next < kEtaFloor ? kEtaFloor : next;
}

enum class Stage { Early, Middle, Late };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Early: return "early";
    case Stage::Middle: return "middle";
    default: return "late";
  }
}

// First round belonging to the stage that starts at ceil(frac * total).
// The small bias guards against frac * total landing epsilon above an integer.
inline size_t stage_boundary(double frac, size_t total) {
  double b = std::ceil(frac * double(total) - 1e-9);
  return b < 1.0 ? size_t(1) : size_t(b);
}

// Rounds are 1-indexed; a boundary round already runs under the new stage.
inline Stage stage_for_round(size_t round, size_t total, double early_frac = 0.2,
                             double late_frac = 0.7) {
  if (round >= stage_boundary(late_frac, total)) return Stage::Late;
  if (round >= stage_boundary(early_frac, total)) return Stage::Middle;
  return Stage::Early;
}

// Instance-noise sigma: off early, flat through the middle stage, then linear
// decay that reaches exactly zero at the final round.
inline double instance_noise_at(size_t round, size_t total, double sigma,
                                double early_frac = 0.2, double late_frac = 0.7) {
  Stage s = stage_for_round(round, total, early_frac, late_frac);
  if (s == Stage::Early) return 0.0;
  if (s == Stage::Middle) return sigma;
  size_t late_start = stage_boundary(late_frac, total);
  if (round >= total || total <= late_start) return 0.0;
  return sigma * double(total - round) / double(total - late_start);
}

// Per-stage toggles the curriculum applies when a stage begins.
struct StageConfig {
  bool smooth_labels = false;
  double noise_sigma = 0.0;
  int d_steps = 1;
  double weight_reg = 0.0;
  double lambda_fm = 1.0;
};

struct CurriculumConfig {
  double early_frac = 0.2;
  double late_frac = 0.7;
  double instance_noise = 0.05;  // middle-stage sigma, decays through late
  double weight_reg = 0.01;      // enabled in the late stage only
  double lambda_fm = 1.0;
};

inline StageConfig stage_defaults(Stage s, const CurriculumConfig& cc) {
  switch (s) {
    case Stage::Early: return {true, 0.0, 1, 0.0, cc.lambda_fm};
    case Stage::Middle: return {false, cc.instance_noise, 2, 0.0, cc.lambda_fm};
    default: return {false, cc.instance_noise, 2, cc.weight_reg, cc.lambda_fm};
  }
}

// One row of the metrics window.
struct RoundRecord {
  double l_g = 0.0;
  double l_d = 0.0;
  double l_fm = 0.0;
  double d_acc_real = 0.0;
  double d_acc_fake = 0.0;
  double quality = 0.0;

  double d_acc() const { return 0.5 * (d_acc_real + d_acc_fake); }
  bool finite() const {
    return std::isfinite(l_g) && std::isfinite(l_d) && std::isfinite(l_fm) &&
           std::isfinite(d_acc_real) && std::isfinite(d_acc_fake) && std::isfinite(quality);
  }
};

enum class Adjust { HalveEtaD, DStepsToOne, EnableSmoothing, DoubleLambdaFm, StepLrDecay };

inline const char* adjust_name(Adjust a) {
  switch (a) {
    case Adjust::HalveEtaD: return "halve_eta_d";
    case Adjust::DStepsToOne: return "d_steps_1";
    case Adjust::EnableSmoothing: return "smooth_on";
    case Adjust::DoubleLambdaFm: return "lambda_fm_x2";
    default: return "steplr";
  }
}

struct MonitorConfig {
  double strong_d_threshold = 0.8;  // discriminator dominating
  double overconf_threshold = 0.7;  // discriminator ahead while G stalls
  double stagnation_slope = 1e-3;   // L_G trend flatter than this counts as stalled
  double plateau_eps = 0.01;        // quality spread below this counts as a plateau
  double plateau_min = 0.05;        // plateau rule needs at least this mean quality,
                                    // so a cold start never decays the rates to the floor
};

// Least-squares slope of y against 0..n-1.
inline double lsq_slope(const std::vector<double>& y) {
  size_t n = y.size();
  if (n < 2) return 0.0;
  double xbar = 0.5 * double(n - 1), ybar = 0.0;
  for (double v : y) ybar += v;
  ybar /= double(n);
  double sxy = 0.0, sxx = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double dx = double(i) - xbar;
    sxy += dx * (y[i] - ybar);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

// Pure rule table over the metrics window. Fires only once the window is full:
//   strong D     -> halve eta_D and drop to one D step per G step
//   stalled G    -> turn label smoothing on and double the feature-match weight
//   flat quality -> decay both learning rates
inline std::vector<Adjust> monitor_decide(const std::deque<RoundRecord>& window, size_t cap,
                                          const MonitorConfig& mc) {
  std::vector<Adjust> out;
  if (cap == 0 || window.size() < cap) return out;
  double acc_mean = 0.0, q_mean = 0.0;
  double qmin = window.front().quality, qmax = window.front().quality;
  std::vector<double> lg;
  lg.reserve(window.size());
  for (const RoundRecord& r : window) {
    acc_mean += r.d_acc();
    q_mean += r.quality;
    qmin = std::min(qmin, r.quality);
    qmax = std::max(qmax, r.quality);
    lg.push_back(r.l_g);
  }
  acc_mean /= double(window.size());
  q_mean /= double(window.size());
  if (acc_mean > mc.strong_d_threshold) {
    out.push_back(Adjust::HalveEtaD);
    out.push_back(Adjust::DStepsToOne);
  }
  if (lsq_slope(lg) >= -mc.stagnation_slope && acc_mean > mc.overconf_threshold) {
    out.push_back(Adjust::EnableSmoothing);
    out.push_back(Adjust::DoubleLambdaFm);
  }
  if (qmax - qmin <= mc.plateau_eps && q_mean > mc.plateau_min)
    out.push_back(Adjust::StepLrDecay);
  return out;
}

// Scheduler knobs plus the live toggles the curriculum and monitor drive.
struct TrainerState {
  double eta_g = 0.1;
  double eta_d = 0.1;
  double gamma = 0.5;
  int step = 2;
  Stage stage = Stage::Early;
  std::deque<RoundRecord> window;
  size_t window_cap = 20;
  size_t round = 0;  // completed rounds
  uint64_t seed = 0;

  bool smooth_labels = true;
  double noise_sigma = 0.0;
  int d_steps = 1;
  double weight_reg = 0.0;
  double lambda_fm = 1.0;
  double lambda_fm_cap = 8.0;

  // While the strong-discriminator rule is firing, the critic runs at half
  // rate and a single step per round. A modulation instead of a mutation:
  // the base rate stays intact so the critic recovers as soon as the
  // condition clears, rather than being ratcheted into the floor.
  bool strong_d_active = false;

  double effective_eta_d() const {
    return strong_d_active ? std::max(kEtaFloor, 0.5 * eta_d) : eta_d;
  }
  int effective_d_steps() const { return strong_d_active ? 1 : d_steps; }
};

// Records the round and reports which rules fire; applying them is separate so
// a recorded stream can be replayed into an identical adjustment log.
inline std::vector<Adjust> monitor_update(TrainerState& st, const RoundRecord& rec,
                                          const MonitorConfig& mc) {
  if (!rec.finite()) fail("monitor: non-finite value in round metrics");
  st.window.push_back(rec);
  while (st.window.size() > st.window_cap) st.window.pop_front();
  return monitor_decide(st.window, st.window_cap, mc);
}

inline void apply_adjustments(TrainerState& st, const std::vector<Adjust>& adj) {
  st.strong_d_active = false;
  for (Adjust a : adj) {
    switch (a) {
      case Adjust::HalveEtaD: st.strong_d_active = true; break;
      case Adjust::DStepsToOne: st.strong_d_active = true; break;
      case Adjust::EnableSmoothing: st.smooth_labels = true; break;
      case Adjust::DoubleLambdaFm:
        st.lambda_fm = std::min(st.lambda_fm * 2.0, st.lambda_fm_cap);
        break;
      case Adjust::StepLrDecay:
        st.eta_g = steplr_update(st.eta_g, st.gamma, st.step);
        st.eta_d = steplr_update(st.eta_d, st.gamma, st.step);
        break;
    }
  }
}

// Applies the stage row when a round enters a new stage (or on the first
// round) and refreshes the per-round noise sigma. Returns true on transition.
inline bool curriculum_update(TrainerState& st, size_t round, size_t total,
                              const CurriculumConfig& cc) {
  Stage s = stage_for_round(round, total, cc.early_frac, cc.late_frac);
  bool entered = (s != st.stage) || round == 1;
  if (entered) {
    StageConfig row = stage_defaults(s, cc);
    st.smooth_labels = row.smooth_labels;
    st.d_steps = row.d_steps;
    st.weight_reg = row.weight_reg;
    st.lambda_fm = row.lambda_fm;
    st.stage = s;
  }
  st.noise_sigma = instance_noise_at(round, total, cc.instance_noise, cc.early_frac, cc.late_frac);
  return entered;
}

}  // namespace mspg

#pragma once

// Action-noise attenuation: the closed-form variance of a PD-controlled mass
// driven by white target noise, and Monte Carlo checks of it.

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "gainlab/control.hpp"
#include "gainlab/retarget.hpp"

namespace gainlab {

enum class NoiseMode { ContinuousLimit, Held };

struct NoiseSpec {
  // rad·s^1/2 in continuous-limit mode; rad per held command in held mode.
  double sigma = 0.0;
  NoiseMode mode = NoiseMode::ContinuousLimit;
  double hold_rate = 0.0;  // Hz, held mode only
  std::uint64_t seed = 0;

  static NoiseSpec continuous(double sigma, std::uint64_t seed) {
    return {sigma, NoiseMode::ContinuousLimit, 0.0, seed};
  }
  static NoiseSpec held(double sigma, double rate, std::uint64_t seed) { return {sigma, NoiseMode::Held, rate, seed}; }

  void validate() const {
    require(std::isfinite(sigma) && sigma >= 0.0, "noise sigma must be >= 0");
    if (mode == NoiseMode::Held) require(std::isfinite(hold_rate) && hold_rate > 0.0, "hold rate must be positive");
  }

  std::string mode_label() const {
    return mode == NoiseMode::ContinuousLimit ? "continuous" : "held:" + fmt9(hold_rate);
  }
};

class UnboundedVarianceError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

struct VariancePrediction {
  Vector var_pos;
  Vector attenuation_factor;
};

// Var[dq] = sigma^2 Kp / (2 Kd) per joint. Mass does not enter.
inline VariancePrediction predict_variance(const GainConfig& gains, double sigma) {
  require(gains.kp.size() == gains.kd.size() && gains.kp.size() > 0, "gain vectors must be non-empty and equal length");
  require(sigma >= 0.0, "sigma must be >= 0");
  if ((gains.kd.array() <= 0.0).any()) throw UnboundedVarianceError("Kd = 0 gives unbounded position variance");
  require((gains.kp.array() > 0.0).all(), "Kp must be positive");
  VariancePrediction p;
  const Eigen::ArrayXd ratio = gains.kp.array() / (2.0 * gains.kd.array());
  p.var_pos = (sigma * sigma * ratio).matrix();
  p.attenuation_factor = ratio.sqrt().matrix();
  return p;
}

// E[y^2] = sigma_n^2 / (4 zeta omega_n^3) for y'' + 2 zeta wn y' + wn^2 y = w.
inline double crandall_oracle(double omega_n, double zeta, double sigma_n) {
  require(omega_n > 0.0 && zeta > 0.0, "omega_n and zeta must be positive");
  return sigma_n * sigma_n / (4.0 * zeta * omega_n * omega_n * omega_n);
}

inline double effective_error(const GainConfig& gains, double eps_pi, std::size_t joint = 0) {
  require(eps_pi >= 0.0, "eps_pi must be >= 0");
  require(joint < gains.dof(), "joint index out of range");
  require(gains.kd[joint] > 0.0, "Kd must be positive");
  return std::sqrt(gains.kp[joint] / (2.0 * gains.kd[joint])) * eps_pi;
}

// Slowest decay time of m x'' + Kd x' + Kp x = 0.
inline double perturbation_time_constant(double kp, double kd, double m) {
  const double wn = std::sqrt(kp / m);
  const double zeta = kd / (2.0 * std::sqrt(kp * m));
  if (zeta <= 1.0) return 1.0 / (zeta * wn);
  return 1.0 / (wn * (zeta - std::sqrt(zeta * zeta - 1.0)));
}

struct PerturbationResult {
  double variance = 0.0;
  double std_error = 0.0;
  double burn_in = 0.0;
  std::size_t trials = 0;
  bool unstable = false;
  std::vector<std::string> warnings;
};

// Exact zero-order-hold map of m x'' + Kd x' + Kp x = Kp u over one step.
struct HeldLinearMap {
  double a00, a01, a10, a11, b0, b1;

  HeldLinearMap(double kp, double kd, double m, double dt) {
    Eigen::Matrix3d aug = Eigen::Matrix3d::Zero();
    aug(0, 1) = 1.0;
    aug(1, 0) = -kp / m;
    aug(1, 1) = -kd / m;
    aug(1, 2) = kp / m;
    const Eigen::Matrix3d e = (aug * dt).exp();
    a00 = e(0, 0), a01 = e(0, 1), a10 = e(1, 0), a11 = e(1, 1), b0 = e(0, 2), b1 = e(1, 2);
  }

  double spectral_radius() const {
    Eigen::Matrix2d a;
    a << a00, a01, a10, a11;
    return a.eigenvalues().cwiseAbs().maxCoeff();
  }
};

// Monte Carlo of m dq'' + Kd dq' + Kp dq = Kp da(t). The forcing is drawn per
// hold interval D with variance sigma^2 / D (D = dt in continuous-limit mode,
// 1/f in held mode) and integrated exactly under zero-order hold. Returns the
// time-and-trial mean of dq^2 after a burn-in of 10 time constants; the
// standard error is taken across per-trial means.
inline PerturbationResult simulate_perturbation(const GainConfig& gains, double m, const NoiseSpec& noise, double dt,
                                                double horizon, std::size_t n_trials, std::size_t workers = 0) {
  require(gains.dof() == 1 && gains.kd.size() == 1, "perturbation model is single-joint");
  noise.validate();
  const double kp = gains.kp[0], kd = gains.kd[0];
  require(kp > 0.0 && kd >= 0.0 && m > 0.0, "need Kp > 0, Kd >= 0, m > 0");
  require(dt > 0.0 && horizon > 0.0 && n_trials >= 1, "dt, horizon and trial count must be positive");
  const double wn = std::sqrt(kp / m);
  require(wn * dt < 0.1, "dt does not resolve the natural frequency (omega_n * dt >= 0.1)");

  std::size_t hold = 1;
  if (noise.mode == NoiseMode::Held) {
    const double ratio = 1.0 / (noise.hold_rate * dt);
    hold = static_cast<std::size_t>(std::llround(ratio));
    require(hold >= 1 && std::abs(ratio - static_cast<double>(hold)) < 1e-9 * ratio,
            "hold interval must be an integer number of steps");
  }
  const double delta = static_cast<double>(hold) * dt;

  PerturbationResult out;
  out.trials = n_trials;
  const HeldLinearMap map(kp, kd, m, dt);
  if (kd <= 0.0 || map.spectral_radius() >= 1.0) {
    out.unstable = true;
    out.variance = std::numeric_limits<double>::infinity();
    out.std_error = std::numeric_limits<double>::infinity();
    return out;
  }
  const double tc = perturbation_time_constant(kp, kd, m);
  out.burn_in = 10.0 * tc;
  if (horizon < 20.0 * tc) out.warnings.push_back("horizon shorter than 20 time constants");
  require(horizon > out.burn_in, "horizon must exceed the burn-in of 10 time constants");

  const auto total = static_cast<std::size_t>(std::llround(horizon / dt));
  const auto burn = static_cast<std::size_t>(std::ceil(out.burn_in / dt));
  const double scale = noise.sigma / std::sqrt(delta);

  std::vector<double> means(n_trials);
  parallel_for(
      n_trials,
      [&](std::size_t trial) {
        std::mt19937_64 rng(derive_seed(noise.seed, trial));
        std::normal_distribution<double> normal(0.0, 1.0);
        double x = 0.0, v = 0.0, u = 0.0, acc = 0.0;
        for (std::size_t k = 0; k < total; ++k) {
          if (k % hold == 0) u = scale * normal(rng);
          const double xn = map.a00 * x + map.a01 * v + map.b0 * u;
          v = map.a10 * x + map.a11 * v + map.b1 * u;
          x = xn;
          if (k >= burn) acc += x * x;
        }
        means[trial] = acc / static_cast<double>(total - burn);
      },
      workers);

  double sum = 0.0;
  for (double v : means) sum += v;
  out.variance = sum / static_cast<double>(n_trials);
  double ss = 0.0;
  for (double v : means) ss += (v - out.variance) * (v - out.variance);
  out.std_error = n_trials > 1 ? std::sqrt(ss / static_cast<double>(n_trials - 1) / static_cast<double>(n_trials)) : 0.0;
  out.unstable = !std::isfinite(out.variance);
  return out;
}

// Picks dt and horizon that satisfy the preconditions with margin.
struct PerturbationSetup {
  double dt;
  double horizon;
};

inline PerturbationSetup perturbation_setup(double kp, double kd, double m) {
  const double rate = std::max(std::sqrt(kp / m), kd / m);
  const double tc = perturbation_time_constant(kp, kd, m);
  return {0.05 / rate, 10.0 * tc + std::max(200.0, 100.0 * tc)};
}

inline std::string noise_csv_header() { return "kp,kd,mass,sigma,mode,empirical_var,stderr,analytic_var"; }

inline std::string noise_csv_row(const GainConfig& g, double m, const NoiseSpec& n, const PerturbationResult& r) {
  const double analytic = predict_variance(g, n.sigma).var_pos[0];
  return fmt9(g.kp[0]) + "," + fmt9(g.kd[0]) + "," + fmt9(m) + "," + fmt9(n.sigma) + "," + n.mode_label() + "," +
         fmt9(r.variance) + "," + fmt9(r.std_error) + "," + fmt9(analytic);
}

struct NoisyReplayResult {
  double goal_rate = 0.0;
  double clean_goal = 0.0;
  double rms_deviation = 0.0;  // mean over trials of the per-trial RMS joint deviation
  std::vector<double> trial_rms;
};

// Perturbs every held command with i.i.d. N(0, sigma^2) per joint and replays
// at the command rate given by the noise hold rate.
inline NoisyReplayResult noisy_openloop_replay(const RetargetedDemo& retargeted, const PlantParams& plant,
                                               const NoiseSpec& noise, std::size_t n_trials, std::size_t workers = 0) {
  noise.validate();
  require(noise.mode == NoiseMode::Held, "open-loop noise replay needs held-mode noise");
  require(retargeted.source != nullptr, "retargeted demo has no source");
  require(n_trials >= 1, "need at least one trial");
  const double ratio = retargeted.source->base_rate / noise.hold_rate;
  const auto decimation = static_cast<std::size_t>(std::llround(ratio));
  require(decimation >= 1 && std::abs(ratio - static_cast<double>(decimation)) < 1e-9 * ratio,
          "noise rate must divide the base rate");

  const auto clean = replay(retargeted, decimation, plant);
  const auto dof = static_cast<Eigen::Index>(retargeted.gains.dof());
  NoisyReplayResult out;
  out.clean_goal = clean.report.goal_reached ? 1.0 : 0.0;
  out.trial_rms.assign(n_trials, 0.0);
  std::vector<int> reached(n_trials, 0);
  parallel_for(
      n_trials,
      [&](std::size_t trial) {
        std::mt19937_64 rng(derive_seed(noise.seed, trial));
        std::normal_distribution<double> normal(0.0, noise.sigma);
        // Ticks are visited in order, so drawing lazily keeps one draw per command.
        const TargetNoise perturb = [&](std::size_t) {
          Vector d(dof);
          for (Eigen::Index i = 0; i < dof; ++i) d[i] = noise.sigma > 0.0 ? normal(rng) : 0.0;
          return d;
        };
        const auto run = replay(retargeted, decimation, plant, perturb);
        double sq = 0.0;
        for (std::size_t k = 0; k < run.trajectory.size(); ++k)
          sq += (run.trajectory.records[k].q - clean.trajectory.records[k].q).squaredNorm();
        out.trial_rms[trial] = std::sqrt(sq / static_cast<double>(run.trajectory.size() * dof));
        reached[trial] = run.report.goal_reached ? 1 : 0;
      },
      workers);
  double rms = 0.0, goals = 0.0;
  for (std::size_t i = 0; i < n_trials; ++i) rms += out.trial_rms[i], goals += reached[i];
  out.rms_deviation = rms / static_cast<double>(n_trials);
  out.goal_rate = goals / static_cast<double>(n_trials);
  return out;
}

}  // namespace gainlab

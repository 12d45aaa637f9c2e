#pragma once

// Gain-parameterized joint PD control, torque limiting, gain-regime labels and
// the closed-loop rollout used by every experiment.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gainlab/common.hpp"
#include "gainlab/dynamics.hpp"
#include "gainlab/trajectory.hpp"

namespace gainlab {

struct GainConfig {
  Vector kp;
  Vector kd;
  bool gravity_comp = false;
  // 1 = perfect compensation with the plant's own g(q); <1 models imperfect
  // compensation.
  double gravity_comp_scale = 1.0;

  static GainConfig uniform(std::size_t joints, double kp, double kd, bool gravity_comp = false) {
    const auto n = static_cast<Eigen::Index>(joints);
    return {Vector::Constant(n, kp), Vector::Constant(n, kd), gravity_comp, 1.0};
  }

  std::size_t dof() const { return static_cast<std::size_t>(kp.size()); }

  void validate() const {
    require(kp.size() == kd.size() && kp.size() > 0, "Kp and Kd must have one entry per joint");
    require((kp.array() > 0.0).all(), "Kp must be positive");
    require((kd.array() > 0.0).all(), "Kd must be positive");
  }
};

enum class Regime { CO, SO, CU, SU };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::CO: return "CO";
    case Regime::SO: return "SO";
    case Regime::CU: return "CU";
    case Regime::SU: return "SU";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  if (s == "CO") return Regime::CO;
  if (s == "SO") return Regime::SO;
  if (s == "CU") return Regime::CU;
  if (s == "SU") return Regime::SU;
  throw InvalidArgument("unknown gain regime '" + s + "'");
}

inline Regime regime_of(bool overdamped, bool stiff) {
  if (overdamped) return stiff ? Regime::SO : Regime::CO;
  return stiff ? Regime::SU : Regime::CU;
}

struct GainRegime {
  Vector omega_n;
  Vector zeta;
  std::vector<Regime> labels;  // per joint

  Regime label() const { return labels.front(); }
};

// Natural frequency sqrt(Kp/m) and damping ratio Kd / (2 sqrt(m Kp)) per
// joint. Overdamped means zeta >= 1, stiff means Kp >= stiffness_split.
inline GainRegime classify_regime(const GainConfig& gains, const Vector& m_eff, double stiffness_split) {
  require(m_eff.size() == gains.kp.size(), "m_eff must have one entry per joint");
  require((m_eff.array() > 0.0).all(), "m_eff must be positive");
  GainRegime r;
  r.omega_n = (gains.kp.array() / m_eff.array()).sqrt();
  r.zeta = gains.kd.array() / (2.0 * (m_eff.array() * gains.kp.array()).sqrt());
  for (Eigen::Index i = 0; i < gains.kp.size(); ++i)
    r.labels.push_back(regime_of(r.zeta[i] >= 1.0, gains.kp[i] >= stiffness_split));
  return r;
}

inline GainRegime classify_regime(const GainConfig& gains, double m_eff, double stiffness_split) {
  return classify_regime(gains, Vector::Constant(gains.kp.size(), m_eff), stiffness_split);
}

// Log-spaced Kp x Kd grid. Cells are enumerated row-major with Kd outer and
// Kp inner; that order is the on-disk order of every heatmap.
struct GainGrid {
  std::vector<double> kp;
  std::vector<double> kd;

  static GainGrid log2_spaced(double kp_lo, double kp_hi, double kd_lo, double kd_hi, std::size_t n_kp,
                              std::size_t n_kd) {
    auto axis = [](double lo, double hi, std::size_t n) {
      std::vector<double> a(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        a[i] = std::exp2(std::log2(lo) + f * (std::log2(hi) - std::log2(lo)));
      }
      return a;
    };
    return {axis(kp_lo, kp_hi, n_kp), axis(kd_lo, kd_hi, n_kd)};
  }

  // 7 x 7: Kp in {16, ..., 1024}, Kd in {2, ..., 128}.
  static GainGrid default_grid() { return log2_spaced(16.0, 1024.0, 2.0, 128.0, 7, 7); }

  std::size_t size() const { return kp.size() * kd.size(); }

  struct Cell {
    std::size_t index;
    double kp;
    double kd;
  };

  Cell cell(std::size_t index) const {
    const std::size_t i_kd = index / kp.size();
    const std::size_t i_kp = index % kp.size();
    return {index, kp.at(i_kp), kd.at(i_kd)};
  }

  GainConfig config(std::size_t index, std::size_t joints, bool gravity_comp = false) const {
    const auto c = cell(index);
    return GainConfig::uniform(joints, c.kp, c.kd, gravity_comp);
  }

  // Geometric median of the Kp axis; the compliant/stiff boundary.
  double stiffness_split() const {
    require(!kp.empty(), "grid must be non-empty");
    const std::size_t n = kp.size();
    if (n % 2 == 1) return kp[n / 2];
    return std::sqrt(kp[n / 2 - 1] * kp[n / 2]);
  }

  void validate() const {
    require(!kp.empty() && !kd.empty(), "grid must be non-empty");
    for (const auto* axis : {&kp, &kd}) {
      for (std::size_t i = 0; i < axis->size(); ++i) {
        require((*axis)[i] > 0.0, "grid gains must be positive");
        if (i > 0) require((*axis)[i] > (*axis)[i - 1], "grid axes must be strictly increasing");
      }
    }
  }
};

// tau = Kp (q_des - q) + Kd (q_dot_des - q_dot) [+ scale * g(q)].
inline Vector pd_torque(const GainConfig& gains, const State& state, const Vector& q_des,
                        const Vector& q_dot_des, const Vector& gravity_term) {
  require(q_des.size() == state.q.size() && gains.kp.size() == state.q.size(),
          "gain, state and target dimensions must agree");
  Vector tau = (gains.kp.array() * (q_des - state.q).array() +
                gains.kd.array() * (q_dot_des - state.q_dot).array())
                   .matrix();
  if (gains.gravity_comp) tau += gains.gravity_comp_scale * gravity_term;
  return tau;
}

inline Vector pd_torque(const GainConfig& gains, const State& state, const Vector& q_des) {
  const auto n = state.q.size();
  return pd_torque(gains, state, q_des, Vector::Zero(n), Vector::Zero(n));
}

// Clamp to +-torque_limit, then bound the change from tau_prev to
// torque_rate_limit * dt.
inline Vector limit_torque(const PlantParams& plant, const Vector& tau, const Vector& tau_prev, double dt) {
  require(dt > 0.0, "dt must be positive");
  const double max_delta = plant.torque_rate_limit * dt;
  Vector out(tau.size());
  for (Eigen::Index i = 0; i < tau.size(); ++i) {
    const double clamped = std::clamp(tau[i], -plant.torque_limit[i], plant.torque_limit[i]);
    out[i] = std::clamp(clamped, tau_prev[i] - max_delta, tau_prev[i] + max_delta);
  }
  return out;
}

// --- Closed-loop rollout ---------------------------------------------------

inline Vector gravity_term_for(const PlantParams& plant, const GainConfig& gains, const State& state) {
  if (!gains.gravity_comp) return Vector::Zero(state.q.size());
  return gravity_torque(plant, state.q);
}

// Produces the position target for the next command interval. `tick` counts
// commands, not physics steps.
using TargetPolicy = std::function<Vector(const State& state, std::size_t tick)>;

inline TargetPolicy hold_position(const Vector& q_des) {
  return [q_des](const State&, std::size_t) { return q_des; };
}

struct RolloutOptions {
  double dt = 0.01;                // physics step
  std::size_t steps = 0;           // physics steps to simulate
  std::size_t hold = 1;            // physics steps per command (zero-order hold)
  std::size_t record_every = 1;    // log every k-th physics step
  Integrator integrator = Integrator::SemiImplicitEuler;
  bool apply_limits = false;       // torque clamp + rate limit
  std::optional<Vector> f_ext;     // constant external torque
  // Called with the commanded (pre-limit) torque of every physics step.
  std::function<void(const State&, const Vector& commanded, const Vector& applied)> on_torque;
};

struct Rollout {
  Trajectory trajectory;
  State final_state;
};

// Runs PD control towards the held target. Each record holds the state at the
// start of a physics step together with the target and the applied torque.
inline Rollout rollout(const PlantParams& plant, const GainConfig& gains, State state,
                       const TargetPolicy& policy, const RolloutOptions& opt) {
  require(opt.hold >= 1 && opt.record_every >= 1, "hold and record_every must be >= 1");
  const auto n = static_cast<Eigen::Index>(plant.dof());
  const Vector f_ext = opt.f_ext.value_or(Vector::Zero(n));
  Rollout out;
  Trajectory& traj = out.trajectory;
  traj.sample_rate = 1.0 / (opt.dt * static_cast<double>(opt.record_every));
  traj.records.reserve(opt.steps / opt.record_every + 1);
  Vector q_des = state.q;
  Vector tau_prev = Vector::Zero(n);
  for (std::size_t k = 0; k < opt.steps; ++k) {
    if (k % opt.hold == 0) q_des = policy(state, k / opt.hold);
    const Vector commanded = pd_torque(gains, state, q_des, Vector::Zero(n), gravity_term_for(plant, gains, state));
    const Vector applied = opt.apply_limits ? limit_torque(plant, commanded, tau_prev, opt.dt) : commanded;
    if (opt.on_torque) opt.on_torque(state, commanded, applied);
    if (k % opt.record_every == 0) {
      TrajectoryRecord r{state.t, state.q, state.q_dot, q_des, applied, std::nullopt};
      if (opt.f_ext) r.f_ext = f_ext;
      traj.records.push_back(std::move(r));
    }
    state = step(plant, state, applied, opt.dt, opt.integrator, f_ext);
    tau_prev = applied;
  }
  out.final_state = std::move(state);
  return out;
}

// --- Compliance probe ------------------------------------------------------

class NotSettledError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Outer-loop target q0 - k_pol (q - q0), evaluated every physics step. The
// composed loop has stiffness Kp (1 + k_pol).
inline TargetPolicy proportional_policy(const Vector& q0, double k_pol) {
  return [q0, k_pol](const State& s, std::size_t) -> Vector { return q0 - k_pol * (s.q - q0); };
}

struct ProbeOptions {
  double dt = 1e-3;
  double velocity_tol = 1e-10;
  double accel_tol = 1e-8;
  std::size_t quiet_steps = 20;  // consecutive steps below both tolerances
};

// Applies a constant external torque starting from rest at q0, simulates until
// the joint velocity dies out and returns |F| / |dq|.
inline double effective_stiffness(const PlantParams& plant, const GainConfig& gains, const Vector& q0,
                                  const TargetPolicy& policy, const Vector& probe_force, double settle_time,
                                  const ProbeOptions& opt = {}) {
  require(probe_force.norm() > 0.0, "probe force must be non-zero");
  require(settle_time > 0.0, "settle time must be positive");
  const auto n = static_cast<Eigen::Index>(plant.dof());
  State s{q0, Vector::Zero(n), 0.0};
  const auto steps = static_cast<std::size_t>(std::ceil(settle_time / opt.dt));
  std::size_t quiet = 0;
  for (std::size_t k = 0; k < steps; ++k) {
    const Vector q_des = policy(s, k);
    const Vector tau = pd_torque(gains, s, q_des, Vector::Zero(n), gravity_term_for(plant, gains, s));
    State next = step(plant, s, tau, opt.dt, Integrator::SemiImplicitEuler, probe_force);
    const double accel = (next.q_dot - s.q_dot).norm() / opt.dt;
    s = std::move(next);
    quiet = (s.q_dot.norm() < opt.velocity_tol && accel < opt.accel_tol) ? quiet + 1 : 0;
    if (quiet >= opt.quiet_steps) {
      const double dq = (s.q - q0).norm();
      require(dq > 0.0, "probe produced no displacement");
      return probe_force.norm() / dq;
    }
  }
  throw NotSettledError("compliance probe did not settle within " + std::to_string(settle_time) + " s");
}

inline double effective_stiffness(const PlantParams& plant, const GainConfig& gains, const Vector& probe_force,
                                  double settle_time) {
  const Vector q0 = Vector::Zero(static_cast<Eigen::Index>(plant.dof()));
  return effective_stiffness(plant, gains, q0, hold_position(q0), probe_force, settle_time);
}

}  // namespace gainlab

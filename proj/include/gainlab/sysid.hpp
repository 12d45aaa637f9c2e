#pragma once

// System identification under fixed PD gains and the trajectory-level metrics
// used to compare simulated and reference rollouts.

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "gainlab/cmaes.hpp"
#include "gainlab/control.hpp"
#include "gainlab/dynamics.hpp"
#include "gainlab/trajectory.hpp"

namespace gainlab {

// Parameter order of one joint's sysid vector.
enum SysidParam { kStiffness = 0, kDamping, kArmature, kStaticFriction, kFrictionRatio, kViscous, kSysidParamCount };

inline const std::vector<std::string>& sysid_param_names() {
  static const std::vector<std::string> names{"stiffness", "damping", "armature",
                                              "static_friction", "dynamic_friction_ratio", "viscous_friction"};
  return names;
}

inline Bounds default_sysid_bounds() {
  Bounds b;
  b.names = sysid_param_names();
  b.lower = Vector(6);
  b.upper = Vector(6);
  b.lower << 1.0, 1.0, 0.0, 0.01, 0.0, 0.0;
  b.upper << 1024.0, 1024.0, 0.5, 1.0, 1.0, 1.0;
  return b;
}

// `name,lower,upper` rows, optional header. Every parameter must appear once.
inline Bounds read_sysid_bounds(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read bounds file " + path);
  Bounds b = default_sysid_bounds();
  std::vector<bool> seen(kSysidParamCount, false);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto f = split(line, ',');
    if (f.size() == 3 && f[0] == "name") continue;
    require(f.size() == 3, "bounds rows are name,lower,upper");
    const auto& names = sysid_param_names();
    const auto it = std::find(names.begin(), names.end(), f[0]);
    require(it != names.end(), "unknown sysid parameter " + f[0]);
    const auto i = static_cast<Eigen::Index>(it - names.begin());
    b.lower[i] = std::stod(f[1]);
    b.upper[i] = std::stod(f[2]);
    seen[static_cast<std::size_t>(i)] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) require(seen[i], "bounds file is missing " + sysid_param_names()[i]);
  b.validate();
  return b;
}

struct ExciteOptions {
  double amplitude = 0.1;
  double duration = 4.0;
  double log_rate = 50.0;
  double physics_rate = 500.0;
  Integrator integrator = Integrator::SemiImplicitEuler;
  // Unmodeled external torque as a function of time.
  std::function<Vector(double)> disturbance;
};

// Target q0 + A sin(pi t): the sin(pi k / 50) sinusoid of the 50 Hz sample
// index k expressed in seconds.
inline double excitation_phase(double t) { return std::sin(M_PI * t); }

inline Trajectory excite(const PlantParams& plant, const GainConfig& gains, const Vector& q0,
                         const ExciteOptions& opt = {}) {
  require(opt.amplitude >= 0.0, "amplitude must be >= 0");
  require(opt.duration > 0.0 && opt.log_rate > 0.0 && opt.physics_rate > 0.0, "duration and rates must be positive");
  plant.validate();
  require(gains.dof() == plant.dof() && static_cast<std::size_t>(q0.size()) == plant.dof(),
          "gains and q0 must match the plant");
  const double ratio = opt.physics_rate / opt.log_rate;
  const auto every = static_cast<std::size_t>(std::llround(ratio));
  require(every >= 1 && std::abs(ratio - static_cast<double>(every)) < 1e-9 * ratio,
          "log rate must divide the physics rate");
  const auto samples = static_cast<std::size_t>(std::llround(opt.duration * opt.log_rate));
  const double dt = 1.0 / opt.physics_rate;
  const auto n = static_cast<Eigen::Index>(plant.dof());

  Trajectory traj;
  traj.sample_rate = opt.log_rate;
  traj.records.reserve(samples);
  State s{q0, Vector::Zero(n), 0.0};
  for (std::size_t k = 0; k < samples * every; ++k) {
    s.t = static_cast<double>(k) * dt;
    const Vector q_des = q0 + Vector::Constant(n, opt.amplitude * excitation_phase(s.t));
    const Vector tau = pd_torque(gains, s, q_des, Vector::Zero(n), gravity_term_for(plant, gains, s));
    if (k % every == 0) traj.records.push_back({s.t, s.q, s.q_dot, q_des, tau, std::nullopt});
    if (opt.disturbance)
      s = step(plant, s, tau, dt, opt.integrator, opt.disturbance(s.t));
    else
      s = step(plant, s, tau, dt, opt.integrator);
  }
  return traj;
}

namespace detail {

struct Twiddles {
  std::size_t n = 0;
  std::vector<double> cos, sin;
};

inline const Twiddles& twiddles(std::size_t n) {
  thread_local Twiddles t;
  if (t.n != n) {
    t.n = n;
    t.cos.resize(n);
    t.sin.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double a = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
      t.cos[k] = std::cos(a);
      t.sin[k] = std::sin(a);
    }
  }
  return t;
}

}  // namespace detail

// Mean over bins of |DFT(a) - DFT(b)|^2 with the unnormalized transform
// X_k = sum_n x_n exp(-2 pi i k n / N), evaluated directly.
inline double spectral_mse(const std::vector<double>& a, const std::vector<double>& b, bool include_dc = true) {
  require(a.size() == b.size(), "spectral_mse needs equal-length signals");
  require(!a.empty(), "spectral_mse needs non-empty signals");
  const std::size_t n = a.size();
  const auto& tw = detail::twiddles(n);
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  double total = 0.0;
  std::size_t bins = 0;
  for (std::size_t k = include_dc ? 0 : 1; k < n; ++k, ++bins) {
    double re = 0.0, im = 0.0;
    std::size_t idx = 0;
    for (std::size_t j = 0; j < n; ++j) {
      re += d[j] * tw.cos[idx];
      im += d[j] * tw.sin[idx];
      idx += k;
      if (idx >= n) idx -= n;
    }
    total += re * re + im * im;
  }
  return bins ? total / static_cast<double>(bins) : 0.0;
}

inline std::vector<double> channel(const Trajectory& t, std::size_t joint, bool velocity) {
  std::vector<double> out;
  out.reserve(t.size());
  for (const auto& r : t.records) out.push_back(velocity ? r.q_dot[static_cast<Eigen::Index>(joint)]
                                                         : r.q[static_cast<Eigen::Index>(joint)]);
  return out;
}

inline void require_matching(const Trajectory& a, const Trajectory& b) {
  require(a.size() == b.size(), "trajectories differ in length");
  require(a.dof() == b.dof(), "trajectories differ in joint count");
  require(std::abs(a.sample_rate - b.sample_rate) <= 1e-9 * std::max(a.sample_rate, b.sample_rate),
          "trajectories differ in sample rate");
}

// Sum of spectral losses over the position and velocity channel of every joint.
inline double sysid_loss(const Trajectory& reference, const Trajectory& simulated, bool include_dc = true) {
  require_matching(reference, simulated);
  double loss = 0.0;
  for (std::size_t j = 0; j < reference.dof(); ++j)
    for (bool vel : {false, true})
      loss += spectral_mse(channel(reference, j, vel), channel(simulated, j, vel), include_dc);
  return loss;
}

// Mean over samples of |dq|^2 + |dq_dot|^2.
inline double trajectory_error(const Trajectory& a, const Trajectory& b) {
  require_matching(a, b);
  require(a.size() > 0, "trajectories are empty");
  double sum = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sum += (a.records[k].q - b.records[k].q).squaredNorm() + (a.records[k].q_dot - b.records[k].q_dot).squaredNorm();
  }
  return sum / static_cast<double>(a.size());
}

using StatePolicy = std::function<Vector(const State&)>;

// RMS over samples of |pi(s_a) - pi(s_b)|.
inline double nn_error(const StatePolicy& policy, const Trajectory& a, const Trajectory& b) {
  require(a.size() == b.size() && a.size() > 0, "trajectories must be non-empty and of equal length");
  double sum = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const auto& ra = a.records[k];
    const auto& rb = b.records[k];
    sum += (policy(State{ra.q, ra.q_dot, ra.t}) - policy(State{rb.q, rb.q_dot, ra.t})).squaredNorm();
  }
  return std::sqrt(sum / static_cast<double>(a.size()));
}

struct JitterResult {
  bool jitter = false;
  double max_std = 0.0;
};

// Population std of each joint velocity over the final `window` seconds.
inline JitterResult jitter_detect(const Trajectory& traj, double window = 2.0, double threshold = 0.04) {
  require(window > 0.0 && traj.sample_rate > 0.0, "window and sample rate must be positive");
  const auto count = static_cast<std::size_t>(std::llround(window * traj.sample_rate));
  require(count >= 2 && traj.size() > count, "trajectory is shorter than the jitter window");
  JitterResult out;
  for (std::size_t j = 0; j < traj.dof(); ++j) {
    double mean = 0.0;
    for (std::size_t k = traj.size() - count; k < traj.size(); ++k) mean += traj.records[k].q_dot[static_cast<Eigen::Index>(j)];
    mean /= static_cast<double>(count);
    double ss = 0.0;
    for (std::size_t k = traj.size() - count; k < traj.size(); ++k) {
      const double d = traj.records[k].q_dot[static_cast<Eigen::Index>(j)] - mean;
      ss += d * d;
    }
    out.max_std = std::max(out.max_std, std::sqrt(ss / static_cast<double>(count)));
  }
  out.jitter = out.max_std > threshold;
  return out;
}

// --- Identification --------------------------------------------------------

struct SysidOptions {
  ExciteOptions excite;
  bool fit_gains = false;  // stiffness and damping stay at the commanded gains unless set
  bool include_dc = true;
  std::size_t workers = 0;  // joints fitted in parallel
};

struct SysidFit {
  PlantParams plant;
  GainConfig gains;
  std::vector<FitResult> joints;  // one per joint for decoupled plants, one overall otherwise
  double loss = 0.0;              // sysid_loss of the fitted model against the reference

  std::size_t evaluations() const {
    std::size_t e = 0;
    for (const auto& f : joints) e += f.evaluations;
    return e;
  }
};

// Writes one joint's sysid vector into a plant and gains.
inline void apply_sysid_params(const Vector& psi, std::size_t joint, bool with_gains, PlantParams& plant,
                               GainConfig& gains) {
  const auto j = static_cast<Eigen::Index>(joint);
  Eigen::Index i = 0;
  if (with_gains) {
    gains.kp[j] = psi[i++];
    gains.kd[j] = psi[i++];
  }
  plant.armature[j] = psi[i++];
  plant.static_friction[j] = psi[i++];
  plant.dynamic_friction_ratio[j] = psi[i++];
  plant.viscous_friction[j] = psi[i++];
}

inline Vector extract_sysid_params(const PlantParams& plant, const GainConfig& gains, std::size_t joint,
                                   bool with_gains) {
  const auto j = static_cast<Eigen::Index>(joint);
  Vector psi(with_gains ? 6 : 4);
  Eigen::Index i = 0;
  if (with_gains) {
    psi[i++] = gains.kp[j];
    psi[i++] = gains.kd[j];
  }
  psi[i++] = plant.armature[j];
  psi[i++] = plant.static_friction[j];
  psi[i++] = plant.dynamic_friction_ratio[j];
  psi[i++] = plant.viscous_friction[j];
  return psi;
}

namespace detail {

inline Bounds active_bounds(const Bounds& full, bool with_gains, std::size_t repeats) {
  const Eigen::Index first = with_gains ? 0 : 2;
  const Eigen::Index per = kSysidParamCount - first;
  Bounds b;
  b.lower.resize(per * static_cast<Eigen::Index>(repeats));
  b.upper.resize(b.lower.size());
  for (std::size_t r = 0; r < repeats; ++r) {
    b.lower.segment(static_cast<Eigen::Index>(r) * per, per) = full.lower.segment(first, per);
    b.upper.segment(static_cast<Eigen::Index>(r) * per, per) = full.upper.segment(first, per);
    for (Eigen::Index i = first; i < kSysidParamCount; ++i)
      b.names.push_back(full.names[static_cast<std::size_t>(i)] + std::to_string(r));
  }
  return b;
}

// One-joint model: the template's joint `j` as a point mass.
inline PlantParams joint_plant(const PlantParams& p, std::size_t j) {
  const auto i = static_cast<Eigen::Index>(j);
  PlantParams out = PlantParams::chain(1, p.inertia[i]);
  out.kind = PlantKind::DecoupledChain;
  auto copy = [i](const Vector& from, Vector& to) { to[0] = from[i]; };
  copy(p.armature, out.armature);
  copy(p.static_friction, out.static_friction);
  copy(p.dynamic_friction_ratio, out.dynamic_friction_ratio);
  copy(p.viscous_friction, out.viscous_friction);
  copy(p.passive_stiffness, out.passive_stiffness);
  copy(p.passive_damping, out.passive_damping);
  copy(p.torque_limit, out.torque_limit);
  out.torque_rate_limit = p.torque_rate_limit;
  out.gravity_enabled = p.gravity_enabled;
  out.gravity = p.gravity;
  copy(p.gravity_load, out.gravity_load);
  return out;
}

inline Trajectory joint_reference(const Trajectory& ref, std::size_t j) {
  Trajectory out;
  out.sample_rate = ref.sample_rate;
  const auto i = static_cast<Eigen::Index>(j);
  for (const auto& r : ref.records)
    out.records.push_back({r.t, r.q.segment(i, 1), r.q_dot.segment(i, 1), r.q_des.segment(i, 1),
                           r.tau.segment(i, 1), std::nullopt});
  return out;
}

}  // namespace detail

// Loss of a candidate model: re-run the excitation and compare spectra.
// Simulation failures score +inf.
inline double candidate_loss(const Trajectory& reference, const PlantParams& plant, const GainConfig& gains,
                             const SysidOptions& opt) {
  try {
    const Vector q0 = reference.records.front().q;
    return sysid_loss(reference, excite(plant, gains, q0, opt.excite), opt.include_dc);
  } catch (const SimulationError&) {
    return std::numeric_limits<double>::infinity();
  } catch (const InvalidArgument&) {
    return std::numeric_limits<double>::infinity();
  }
}

// Minimizes the spectral loss between `reference` and the excitation of a
// candidate model. `model` supplies the known structure (inertia, gravity);
// its friction and armature are only used as the starting point when
// cfg.initial is unset. Decoupled plants are fitted joint by joint.
inline SysidFit identify(const Trajectory& reference, const PlantParams& model, const GainConfig& gains,
                         const Bounds& bounds, const CmaesConfig& cfg, const SysidOptions& opt = {}) {
  reference.validate();
  require(reference.size() > 0, "reference is empty");
  require(reference.dof() == model.dof() && gains.dof() == model.dof(), "reference, model and gains must agree");
  require(bounds.size() == kSysidParamCount, "sysid bounds need six parameters");
  bounds.validate();
  ExciteOptions ex = opt.excite;
  ex.log_rate = reference.sample_rate;
  ex.duration = static_cast<double>(reference.size()) / reference.sample_rate;
  SysidOptions run = opt;
  run.excite = ex;

  SysidFit fit;
  fit.plant = model;
  fit.gains = gains;
  const std::size_t n = model.dof();

  if (model.decoupled()) {
    const Bounds active = detail::active_bounds(bounds, opt.fit_gains, 1);
    fit.joints.resize(n);
    std::vector<Vector> best(n);
    parallel_for(
        n,
        [&](std::size_t j) {
          const PlantParams base = detail::joint_plant(model, j);
          const Trajectory ref = detail::joint_reference(reference, j);
          const GainConfig g{gains.kp.segment(static_cast<Eigen::Index>(j), 1),
                             gains.kd.segment(static_cast<Eigen::Index>(j), 1), gains.gravity_comp,
                             gains.gravity_comp_scale};
          CmaesConfig c = cfg;
          c.seed = derive_seed(cfg.seed, j);
          if (cfg.initial) c.initial = cfg.initial->segment(0, static_cast<Eigen::Index>(active.size()));
          const auto objective = [&](const Vector& psi) {
            PlantParams p = base;
            GainConfig gg = g;
            apply_sysid_params(psi, 0, opt.fit_gains, p, gg);
            return candidate_loss(ref, p, gg, run);
          };
          fit.joints[j] = cmaes_minimize(objective, active, c);
          best[j] = fit.joints[j].best;
        },
        opt.workers);
    for (std::size_t j = 0; j < n; ++j) apply_sysid_params(best[j], j, opt.fit_gains, fit.plant, fit.gains);
  } else {
    const Bounds active = detail::active_bounds(bounds, opt.fit_gains, n);
    const auto per = static_cast<Eigen::Index>(active.size() / n);
    const auto unpack = [&](const Vector& psi, PlantParams& p, GainConfig& g) {
      for (std::size_t j = 0; j < n; ++j)
        apply_sysid_params(psi.segment(static_cast<Eigen::Index>(j) * per, per), j, opt.fit_gains, p, g);
    };
    const auto objective = [&](const Vector& psi) {
      PlantParams p = model;
      GainConfig g = gains;
      unpack(psi, p, g);
      return candidate_loss(reference, p, g, run);
    };
    fit.joints.push_back(cmaes_minimize(objective, active, cfg));
    unpack(fit.joints.front().best, fit.plant, fit.gains);
  }
  fit.loss = candidate_loss(reference, fit.plant, fit.gains, run);
  return fit;
}

// --- Files -----------------------------------------------------------------

inline std::string sysid_csv_header(const PlantParams& plant, bool with_gains) {
  std::string h = "kp,kd,final_loss,evals";
  const Eigen::Index first = with_gains ? 0 : 2;
  for (std::size_t j = 0; j < plant.dof(); ++j)
    for (Eigen::Index i = first; i < kSysidParamCount; ++i)
      h += "," + sysid_param_names()[static_cast<std::size_t>(i)] + std::to_string(j);
  return h;
}

inline std::string sysid_csv_row(const GainConfig& commanded, const SysidFit& fit, bool with_gains) {
  std::string row = fmt9(commanded.kp[0]) + "," + fmt9(commanded.kd[0]) + "," + fmt9(fit.loss) + "," +
                    std::to_string(fit.evaluations());
  for (std::size_t j = 0; j < fit.plant.dof(); ++j) {
    const Vector psi = extract_sysid_params(fit.plant, fit.gains, j, with_gains);
    for (Eigen::Index i = 0; i < psi.size(); ++i) row += "," + fmt9(psi[i]);
  }
  return row;
}

// Loss history sidecar: `joint,generation,best_loss`.
inline void write_sysid_history(std::ostream& out, const SysidFit& fit) {
  out << "joint,generation,best_loss\n";
  for (std::size_t j = 0; j < fit.joints.size(); ++j)
    for (std::size_t g = 0; g < fit.joints[j].history.size(); ++g)
      out << j << ',' << g << ',' << fmt9(fit.joints[j].history[g]) << '\n';
}

}  // namespace gainlab

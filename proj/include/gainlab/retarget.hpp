#pragma once

// Torque-to-position retargeting. A torque-level demonstration is converted
// into the position targets that make a PD controller with arbitrary gains
// reproduce the recorded torques, then replayed with zero-order hold.

#include <cmath>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gainlab/control.hpp"
#include "gainlab/dynamics.hpp"
#include "gainlab/hash.hpp"
#include "gainlab/trajectory.hpp"

namespace gainlab {

struct TaskGoal {
  Vector target;
  double tolerance = 0.05;  // rad, Euclidean ball in joint space

  bool reached(const Vector& q) const { return (q - target).norm() <= tolerance; }
};

struct TorqueDemo {
  double base_rate = 500.0;
  // tau holds the recorded torque command; q_des holds the scripted reference.
  Trajectory trajectory;
  // g(q(t)) per sample; empty when the plant has no gravity.
  std::vector<Vector> gravity;
  TaskGoal goal;
  State final_state;
  bool torque_limit_exceeded = false;

  std::size_t size() const { return trajectory.size(); }
  std::size_t dof() const { return trajectory.dof(); }

  std::string content_hash() const {
    std::ostringstream out;
    write_trajectory_csv(out, trajectory);
    return sha256_hex(out.str());
  }
};

struct RetargetedDemo {
  GainConfig gains;
  double command_rate = 0.0;
  std::vector<double> t;
  std::vector<Vector> q_des;
  std::shared_ptr<const TorqueDemo> source;
  std::string source_hash;
  bool gravity_subtracted = false;

  std::size_t size() const { return q_des.size(); }
};

using TorqueController = std::function<Vector(const State&)>;

// Quintic point-to-point reference with zero boundary velocity and
// acceleration, held at qf after `duration`.
struct QuinticReference {
  Vector q0;
  Vector qf;
  double duration = 1.0;

  double blend(double t, int derivative) const {
    const double s = std::clamp(t / duration, 0.0, 1.0);
    if (t >= duration || t <= 0.0) return derivative == 0 ? (t >= duration ? 1.0 : 0.0) : 0.0;
    switch (derivative) {
      case 0: return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
      case 1: return 30.0 * s * s * (1.0 - s) * (1.0 - s) / duration;
      default: return 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (duration * duration);
    }
  }
  Vector position(double t) const { return q0 + blend(t, 0) * (qf - q0); }
  Vector velocity(double t) const { return blend(t, 1) * (qf - q0); }
  Vector acceleration(double t) const { return blend(t, 2) * (qf - q0); }
};

// One-step-ahead computed torque: picks the acceleration that lands the next
// semi-implicit Euler step on the reference, a = (q_ref(t+dt) - q - dt q_dot) / dt^2,
// and maps it through M, C and g. Exact on a frictionless model.
inline TorqueController computed_torque_tracker(const PlantParams& plant, const QuinticReference& ref, double dt) {
  return [=](const State& s) -> Vector {
    const Vector a = (ref.position(s.t + dt) - s.q - dt * s.q_dot) / (dt * dt);
    return mass_matrix(plant, s.q) * a + coriolis_matrix(plant, s.q, s.q_dot) * s.q_dot +
           gravity_torque(plant, s.q);
  };
}

// Records `duration * base_rate` samples of a torque-level controller.
inline TorqueDemo make_demo(const PlantParams& plant, const TorqueController& controller, State initial,
                            double duration, double base_rate, TaskGoal goal,
                            const std::function<Vector(double)>& reference = {}) {
  require(duration > 0.0, "demo duration must be positive");
  require(base_rate > 0.0, "base rate must be positive");
  const double dt = 1.0 / base_rate;
  const auto samples = static_cast<std::size_t>(std::llround(duration * base_rate));
  TorqueDemo demo;
  demo.base_rate = base_rate;
  demo.goal = std::move(goal);
  demo.trajectory.sample_rate = base_rate;
  demo.trajectory.records.reserve(samples);
  State s = std::move(initial);
  for (std::size_t k = 0; k < samples; ++k) {
    s.t = static_cast<double>(k) * dt;
    const Vector tau = controller(s);
    if ((tau.array().abs() > plant.torque_limit.array()).any()) demo.torque_limit_exceeded = true;
    const Vector ref = reference ? reference(s.t) : s.q;
    demo.trajectory.records.push_back({s.t, s.q, s.q_dot, ref, tau, std::nullopt});
    if (plant.gravity_enabled) demo.gravity.push_back(gravity_torque(plant, s.q));
    s = step(plant, s, tau, dt);
  }
  demo.final_state = s;
  return demo;
}

// Quintic reach between two configurations drawn uniformly in [-range, range]
// per joint, tracked by the computed-torque controller.
inline std::shared_ptr<const TorqueDemo> random_reach_demo(const PlantParams& plant, std::uint64_t seed,
                                                           double move_time = 1.5, double duration = 2.5,
                                                           double base_rate = 500.0, double range = 1.0) {
  require(move_time > 0.0 && duration >= move_time, "demo must last at least the move time");
  const auto n = static_cast<Eigen::Index>(plant.dof());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-range, range);
  Vector q0(n), qf(n);
  for (Eigen::Index i = 0; i < n; ++i) q0[i] = u(rng);
  for (Eigen::Index i = 0; i < n; ++i) qf[i] = u(rng);
  const QuinticReference ref{q0, qf, move_time};
  return std::make_shared<const TorqueDemo>(make_demo(plant, computed_torque_tracker(plant, ref, 1.0 / base_rate),
                                                      State{q0, Vector::Zero(n), 0.0}, duration, base_rate,
                                                      TaskGoal{qf, 0.05}, [ref](double t) { return ref.position(t); }));
}

// q_des = q + Kp^-1 (tau + Kd q_dot), per sample at the base rate. With
// gravity compensation the recorded gravity torque is removed from tau, since
// the replaying controller adds it back.
inline RetargetedDemo tpr_joint(std::shared_ptr<const TorqueDemo> demo, const GainConfig& gains) {
  require(demo != nullptr, "demo is required");
  require(gains.dof() == demo->dof() && gains.kd.size() == gains.kp.size(),
          "gain dimension must match the demo joint count");
  require((gains.kp.array() > 0.0).all(), "Kp must be positive to be inverted");
  require((gains.kd.array() >= 0.0).all(), "Kd must be non-negative");
  RetargetedDemo out;
  out.gains = gains;
  out.command_rate = demo->base_rate;
  out.gravity_subtracted = gains.gravity_comp && !demo->gravity.empty();
  out.t.reserve(demo->size());
  out.q_des.reserve(demo->size());
  for (std::size_t k = 0; k < demo->size(); ++k) {
    const auto& r = demo->trajectory.records[k];
    Vector tau = r.tau;
    if (out.gravity_subtracted) tau -= gains.gravity_comp_scale * demo->gravity[k];
    out.t.push_back(r.t);
    out.q_des.push_back(r.q + ((tau.array() + gains.kd.array() * r.q_dot.array()) / gains.kp.array()).matrix());
  }
  out.source_hash = demo->content_hash();
  out.source = std::move(demo);
  return out;
}

// --- Task-space variant ----------------------------------------------------

// Recorded end-effector channels. Orientation axes are small-angle axis-angle
// error channels and are retargeted like translations.
struct TaskDemo {
  double rate = 500.0;
  std::vector<Vector> x;
  std::vector<Vector> x_dot;
  std::vector<Vector> wrench;
};

struct TaskRetargeted {
  GainConfig gains;
  double rate = 0.0;
  std::vector<Vector> x_des;
};

// x_des = x + Kp'^-1 (F + Kd' x_dot) per axis.
inline TaskRetargeted tpr_task(const TaskDemo& demo, const GainConfig& gains) {
  gains.validate();
  if (demo.wrench.empty() || demo.wrench.size() != demo.x.size())
    throw InvalidArgument("task-space retargeting needs a recorded wrench channel");
  require(demo.x_dot.size() == demo.x.size(), "pose and velocity channels must have equal length");
  TaskRetargeted out{gains, demo.rate, {}};
  out.x_des.reserve(demo.x.size());
  for (std::size_t k = 0; k < demo.x.size(); ++k) {
    require(demo.x[k].size() == gains.kp.size() && demo.wrench[k].size() == gains.kp.size(),
            "task-space gain dimension must match the recorded channels");
    out.x_des.push_back(demo.x[k] +
                        ((demo.wrench[k].array() + gains.kd.array() * demo.x_dot[k].array()) / gains.kp.array())
                            .matrix());
  }
  return out;
}

// --- Replay ----------------------------------------------------------------

struct FidelityReport {
  double mse = 0.0;  // joint-position MSE against the source demo
  bool goal_reached = false;
  double final_error = 0.0;
};

struct ReplayResult {
  Trajectory trajectory;
  FidelityReport report;
  State final_state;
};

// Per-command additive target perturbation, indexed by command tick.
using TargetNoise = std::function<Vector(std::size_t tick)>;

// Holds every `decimation`-th target for `decimation` physics steps at the
// base rate, starting from the demo's initial state.
inline ReplayResult replay(const RetargetedDemo& retargeted, std::size_t decimation, const PlantParams& plant,
                           const TargetNoise& noise = {}) {
  require(decimation >= 1, "decimation must be >= 1");
  require(retargeted.source != nullptr, "retargeted demo has no source");
  const TorqueDemo& demo = *retargeted.source;
  require(retargeted.size() == demo.size() && demo.size() > 0, "retargeted demo does not match its source");
  const auto& first = demo.trajectory.records.front();

  RolloutOptions opt;
  opt.dt = 1.0 / demo.base_rate;
  opt.steps = demo.size();
  opt.hold = decimation;
  const auto policy = [&](const State&, std::size_t tick) -> Vector {
    const Vector& target = retargeted.q_des[tick * decimation];
    return noise ? Vector(target + noise(tick)) : target;
  };
  auto run = rollout(plant, retargeted.gains, State{first.q, first.q_dot, first.t}, policy, opt);

  ReplayResult out;
  double sq = 0.0;
  for (std::size_t k = 0; k < demo.size(); ++k)
    sq += (run.trajectory.records[k].q - demo.trajectory.records[k].q).squaredNorm();
  out.report.mse = sq / static_cast<double>(demo.size() * demo.dof());
  out.report.final_error = (run.final_state.q - demo.goal.target).norm();
  out.report.goal_reached = demo.goal.reached(run.final_state.q);
  out.trajectory = std::move(run.trajectory);
  out.final_state = std::move(run.final_state);
  return out;
}

// --- Files -----------------------------------------------------------------

inline void write_retargeted_csv(std::ostream& out, const RetargetedDemo& r) {
  out << "t";
  for (std::size_t i = 0; i < r.gains.dof(); ++i) out << ",qdes" << i;
  out << '\n';
  for (std::size_t k = 0; k < r.size(); ++k) {
    out << fmt9(r.t[k]);
    for (Eigen::Index i = 0; i < r.q_des[k].size(); ++i) out << ',' << fmt9(r.q_des[k][i]);
    out << '\n';
  }
}

inline nlohmann::json retargeted_metadata(const RetargetedDemo& r) {
  nlohmann::json j;
  j["kp"] = std::vector<double>(r.gains.kp.data(), r.gains.kp.data() + r.gains.kp.size());
  j["kd"] = std::vector<double>(r.gains.kd.data(), r.gains.kd.data() + r.gains.kd.size());
  j["gravity_comp"] = r.gains.gravity_comp;
  j["gravity_subtracted"] = r.gravity_subtracted;
  j["command_rate"] = r.command_rate;
  j["base_rate"] = r.source ? r.source->base_rate : r.command_rate;
  j["source_hash"] = r.source_hash;
  return j;
}

// Writes `<stem>.csv` and the `<stem>.json` sidecar.
inline void write_retargeted(const std::string& stem, const RetargetedDemo& r) {
  std::ofstream csv(stem + ".csv");
  if (!csv) throw std::runtime_error("cannot write " + stem + ".csv");
  write_retargeted_csv(csv, r);
  std::ofstream meta(stem + ".json");
  meta << retargeted_metadata(r).dump(2) << '\n';
}

inline std::string fidelity_csv_header() { return "kp,kd,decimation,mse,goal_reached"; }

inline std::string fidelity_csv_row(const GainConfig& g, std::size_t decimation, const FidelityReport& f) {
  return fmt9(g.kp[0]) + "," + fmt9(g.kd[0]) + "," + std::to_string(decimation) + "," + fmt9(f.mse) + "," +
         (f.goal_reached ? "1" : "0");
}

}  // namespace gainlab

#pragma once

// Closed-loop plant models: a 1-DOF point mass, a decoupled N-joint chain and a
// planar two-link arm. All plants share PlantParams and are advanced with
// step(); torque is held constant across a physics step.

#include <array>
#include <cmath>
#include <limits>
#include <string>

#include "gainlab/common.hpp"

namespace gainlab {

enum class PlantKind { PointMass1D, DecoupledChain, TwoLink };
enum class Integrator { SemiImplicitEuler, RK4 };

// Joints with |q_dot| at or below this are treated as stuck for stiction.
inline constexpr double kStictionVelocity = 1e-4;
inline constexpr double kDefaultTorqueRateLimit = 990.0;

struct PlantParams {
  PlantKind kind = PlantKind::PointMass1D;
  // Mass (point mass, chain) or link inertia about the centre of mass (two-link).
  Vector inertia = Vector::Ones(1);
  Vector armature = Vector::Zero(1);
  Vector static_friction = Vector::Zero(1);
  Vector dynamic_friction_ratio = Vector::Zero(1);
  Vector viscous_friction = Vector::Zero(1);
  // Passive joint spring/damper to q = 0, e.g. a mechanical return spring.
  Vector passive_stiffness = Vector::Zero(1);
  Vector passive_damping = Vector::Zero(1);
  bool gravity_enabled = false;
  double gravity = 9.81;
  // Chain only: g_i(q) = gravity_load_i * sin(q_i).
  Vector gravity_load = Vector::Zero(1);
  // Two-link only.
  std::array<double, 2> link_lengths{1.0, 1.0};
  std::array<double, 2> link_masses{1.0, 1.0};
  Vector torque_limit = Vector::Constant(1, std::numeric_limits<double>::infinity());
  double torque_rate_limit = kDefaultTorqueRateLimit;

  std::size_t dof() const { return static_cast<std::size_t>(inertia.size()); }
  bool decoupled() const { return kind != PlantKind::TwoLink; }

  void validate() const {
    const auto n = inertia.size();
    require(n >= 1, "plant needs at least one joint");
    if (kind == PlantKind::PointMass1D) require(n == 1, "point mass plant has exactly one joint");
    if (kind == PlantKind::TwoLink) require(n == 2, "two-link plant has exactly two joints");
    for (const Vector* v : {&armature, &static_friction, &dynamic_friction_ratio, &viscous_friction,
                            &passive_stiffness, &passive_damping, &gravity_load, &torque_limit})
      require(v->size() == n, "plant parameter vectors must match the joint count");
    require((inertia.array() > 0.0).all(), "inertia must be positive");
    require((armature.array() >= 0.0).all(), "armature must be non-negative");
    require((static_friction.array() >= 0.0).all(), "static friction must be non-negative");
    require((viscous_friction.array() >= 0.0).all(), "viscous friction must be non-negative");
    require((dynamic_friction_ratio.array() >= 0.0).all() &&
                (dynamic_friction_ratio.array() <= 1.0).all(),
            "dynamic friction ratio must lie in [0, 1]");
    require((passive_stiffness.array() >= 0.0).all() && (passive_damping.array() >= 0.0).all(),
            "passive spring and damper must be non-negative");
    require((torque_limit.array() > 0.0).all(), "torque limit must be positive");
    require(torque_rate_limit > 0.0, "torque rate limit must be positive");
    if (kind == PlantKind::TwoLink)
      require(link_lengths[0] > 0 && link_lengths[1] > 0 && link_masses[0] > 0 && link_masses[1] > 0,
              "link lengths and masses must be positive");
  }

  static PlantParams point_mass(double mass) {
    PlantParams p;
    p.inertia = Vector::Constant(1, mass);
    return p;
  }

  static PlantParams chain(std::size_t joints, double inertia) {
    PlantParams p;
    p.kind = PlantKind::DecoupledChain;
    p.resize(joints);
    p.inertia.setConstant(inertia);
    return p;
  }

  static PlantParams two_link(std::array<double, 2> lengths, std::array<double, 2> masses,
                              bool gravity_on) {
    PlantParams p;
    p.kind = PlantKind::TwoLink;
    p.resize(2);
    p.link_lengths = lengths;
    p.link_masses = masses;
    // Uniform rods about their centre.
    for (int i = 0; i < 2; ++i) p.inertia[i] = masses[i] * lengths[i] * lengths[i] / 12.0;
    p.gravity_enabled = gravity_on;
    return p;
  }

  // Resizes every per-joint vector, keeping defaults for new entries.
  void resize(std::size_t joints) {
    const auto n = static_cast<Eigen::Index>(joints);
    inertia = Vector::Ones(n);
    armature = Vector::Zero(n);
    static_friction = Vector::Zero(n);
    dynamic_friction_ratio = Vector::Zero(n);
    viscous_friction = Vector::Zero(n);
    passive_stiffness = Vector::Zero(n);
    passive_damping = Vector::Zero(n);
    gravity_load = Vector::Zero(n);
    torque_limit = Vector::Constant(n, std::numeric_limits<double>::infinity());
  }
};

struct State {
  Vector q;
  Vector q_dot;
  double t = 0.0;

  static State rest(std::size_t joints) {
    const auto n = static_cast<Eigen::Index>(joints);
    return {Vector::Zero(n), Vector::Zero(n), 0.0};
  }
};

// --- Rigid-body terms ------------------------------------------------------

inline Matrix mass_matrix(const PlantParams& plant, const Vector& q) {
  const auto n = static_cast<Eigen::Index>(plant.dof());
  Matrix m = Matrix::Zero(n, n);
  if (plant.kind != PlantKind::TwoLink) {
    m.diagonal() = plant.inertia + plant.armature;
    return m;
  }
  const double l1 = plant.link_lengths[0];
  const double lc1 = 0.5 * l1;
  const double lc2 = 0.5 * plant.link_lengths[1];
  const double m1 = plant.link_masses[0];
  const double m2 = plant.link_masses[1];
  const double i1 = plant.inertia[0];
  const double i2 = plant.inertia[1];
  const double c2 = std::cos(q[1]);
  m(0, 0) = i1 + i2 + m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2);
  m(0, 1) = i2 + m2 * (lc2 * lc2 + l1 * lc2 * c2);
  m(1, 0) = m(0, 1);
  m(1, 1) = i2 + m2 * lc2 * lc2;
  m.diagonal() += plant.armature;
  return m;
}

// C(q, q_dot) from the Christoffel symbols of M(q); zero for decoupled plants.
inline Matrix coriolis_matrix(const PlantParams& plant, const Vector& q, const Vector& q_dot) {
  const auto n = static_cast<Eigen::Index>(plant.dof());
  Matrix c = Matrix::Zero(n, n);
  if (plant.kind != PlantKind::TwoLink) return c;
  const double h = -plant.link_masses[1] * plant.link_lengths[0] * 0.5 * plant.link_lengths[1] *
                   std::sin(q[1]);
  c(0, 0) = h * q_dot[1];
  c(0, 1) = h * (q_dot[0] + q_dot[1]);
  c(1, 0) = -h * q_dot[0];
  return c;
}

// g(q). Two-link angles are measured from the horizontal with gravity along -y.
inline Vector gravity_torque(const PlantParams& plant, const Vector& q) {
  const auto n = static_cast<Eigen::Index>(plant.dof());
  Vector g = Vector::Zero(n);
  if (!plant.gravity_enabled) return g;
  if (plant.kind != PlantKind::TwoLink) {
    g = plant.gravity_load.array() * q.array().sin();
    return g;
  }
  const double l1 = plant.link_lengths[0];
  const double lc1 = 0.5 * l1;
  const double lc2 = 0.5 * plant.link_lengths[1];
  const double m1 = plant.link_masses[0];
  const double m2 = plant.link_masses[1];
  const double c12 = std::cos(q[0] + q[1]);
  g[0] = (m1 * lc1 + m2 * l1) * plant.gravity * std::cos(q[0]) + m2 * lc2 * plant.gravity * c12;
  g[1] = m2 * lc2 * plant.gravity * c12;
  return g;
}

inline Vector passive_torque(const PlantParams& plant, const Vector& q, const Vector& q_dot) {
  return -(plant.passive_stiffness.array() * q.array() + plant.passive_damping.array() * q_dot.array())
              .matrix();
}

// Moving joints see Coulomb (ratio * static) plus viscous friction. Stuck joints
// cancel the net torque up to the static limit.
inline Vector friction_torque(const PlantParams& plant, const Vector& q_dot, const Vector& tau_net) {
  const auto n = q_dot.size();
  Vector tau_f(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = q_dot[i];
    if (std::abs(v) > kStictionVelocity) {
      const double coulomb = plant.dynamic_friction_ratio[i] * plant.static_friction[i];
      tau_f[i] = -std::copysign(coulomb, v) - plant.viscous_friction[i] * v;
    } else {
      tau_f[i] = -std::clamp(tau_net[i], -plant.static_friction[i], plant.static_friction[i]);
    }
  }
  return tau_f;
}

inline double kinetic_energy(const PlantParams& plant, const State& s) {
  return 0.5 * s.q_dot.dot(mass_matrix(plant, s.q) * s.q_dot);
}

namespace detail {

struct Evaluation {
  Vector q_ddot;
  Vector coulomb_accel;  // contribution of dry friction to q_ddot
  std::vector<bool> held;
};

inline Vector solve_inertia(const PlantParams& plant, const Matrix& m, const Vector& rhs) {
  if (plant.decoupled()) {
    const Vector d = m.diagonal();
    if (!(d.array() > 0.0).all()) throw InvalidArgument("non-positive effective inertia");
    return (rhs.array() / d.array()).matrix();
  }
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw InvalidArgument("non-positive effective inertia");
  return llt.solve(rhs);
}

inline Evaluation evaluate(const PlantParams& plant, const Vector& q, const Vector& q_dot,
                           const Vector& tau, const Vector& f_ext) {
  const Matrix m = mass_matrix(plant, q);
  Vector tau_net = tau + f_ext + passive_torque(plant, q, q_dot) - gravity_torque(plant, q);
  if (plant.kind == PlantKind::TwoLink) tau_net -= coriolis_matrix(plant, q, q_dot) * q_dot;
  const Vector tau_f = friction_torque(plant, q_dot, tau_net);

  Evaluation e;
  e.q_ddot = solve_inertia(plant, m, tau_net + tau_f);
  e.held.resize(static_cast<std::size_t>(q.size()));
  Vector dry = Vector::Zero(q.size());
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    const bool stuck = std::abs(q_dot[i]) <= kStictionVelocity;
    e.held[static_cast<std::size_t>(i)] =
        stuck && plant.static_friction[i] > 0.0 && std::abs(tau_net[i]) <= plant.static_friction[i];
    if (!stuck) dry[i] = tau_f[i] + plant.viscous_friction[i] * q_dot[i];
  }
  e.coulomb_accel = solve_inertia(plant, m, dry);
  return e;
}

inline void check_dims(const PlantParams& plant, const Vector& v, const char* what) {
  if (static_cast<std::size_t>(v.size()) != plant.dof())
    throw InvalidArgument(std::string(what) + " dimension does not match the plant joint count");
}

}  // namespace detail

// Solves M(q) q_ddot + C(q, q_dot) q_dot + g(q) = tau + tau_ext + friction + passive.
inline Vector forward_dynamics(const PlantParams& plant, const State& state, const Vector& tau,
                               const Vector& f_ext) {
  detail::check_dims(plant, tau, "tau");
  detail::check_dims(plant, f_ext, "f_ext");
  detail::check_dims(plant, state.q, "q");
  detail::check_dims(plant, state.q_dot, "q_dot");
  return detail::evaluate(plant, state.q, state.q_dot, tau, f_ext).q_ddot;
}

inline Vector forward_dynamics(const PlantParams& plant, const State& state, const Vector& tau) {
  return forward_dynamics(plant, state, tau, Vector::Zero(tau.size()));
}

// Advances one physics step with tau (and f_ext) held over the step.
//
// Semi-implicit Euler updates q_dot first and integrates q with the new
// velocity. Dry friction may stop a joint inside a step but never reverse it,
// and joints held by stiction leave the step at rest.
inline State step(const PlantParams& plant, const State& state, const Vector& tau, double dt,
                  Integrator integrator, const Vector& f_ext) {
  require(dt > 0.0, "dt must be positive");
  detail::check_dims(plant, tau, "tau");
  detail::check_dims(plant, f_ext, "f_ext");
  State next;
  next.t = state.t + dt;

  if (integrator == Integrator::SemiImplicitEuler) {
    const auto e = detail::evaluate(plant, state.q, state.q_dot, tau, f_ext);
    next.q_dot = state.q_dot + dt * e.q_ddot;
    for (Eigen::Index i = 0; i < next.q_dot.size(); ++i) {
      const double v0 = state.q_dot[i];
      if (e.held[static_cast<std::size_t>(i)]) {
        next.q_dot[i] = 0.0;
      } else if (std::abs(v0) > kStictionVelocity && next.q_dot[i] * v0 < 0.0) {
        const double without_dry = v0 + dt * (e.q_ddot[i] - e.coulomb_accel[i]);
        if (without_dry * v0 >= 0.0) next.q_dot[i] = 0.0;
      }
    }
    next.q = state.q + dt * next.q_dot;
  } else {
    auto accel = [&](const Vector& q, const Vector& v) {
      return detail::evaluate(plant, q, v, tau, f_ext).q_ddot;
    };
    const Vector& q0 = state.q;
    const Vector& v0 = state.q_dot;
    const Vector a1 = accel(q0, v0);
    const Vector q2 = q0 + 0.5 * dt * v0, v2 = v0 + 0.5 * dt * a1;
    const Vector a2 = accel(q2, v2);
    const Vector q3 = q0 + 0.5 * dt * v2, v3 = v0 + 0.5 * dt * a2;
    const Vector a3 = accel(q3, v3);
    const Vector q4 = q0 + dt * v3, v4 = v0 + dt * a3;
    const Vector a4 = accel(q4, v4);
    next.q = q0 + (dt / 6.0) * (v0 + 2.0 * v2 + 2.0 * v3 + v4);
    next.q_dot = v0 + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
  }

  if (!all_finite(next.q) || !all_finite(next.q_dot))
    throw SimulationError("non-finite state", static_cast<std::size_t>(std::llround(state.t / dt)));
  return next;
}

inline State step(const PlantParams& plant, const State& state, const Vector& tau, double dt,
                  Integrator integrator = Integrator::SemiImplicitEuler) {
  return step(plant, state, tau, dt, integrator, Vector::Zero(tau.size()));
}

}  // namespace gainlab

#pragma once

// Action mappings, reward utilities and the feasibility-first shaping
// objective, with a black-box search over mapping hyperparameters.

#include <array>
#include <ostream>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "gainlab/cmaes.hpp"
#include "gainlab/control.hpp"
#include "gainlab/dynamics.hpp"
#include "gainlab/trajectory.hpp"

namespace gainlab {

struct ActionMapping {
  Vector alpha = Vector::Ones(1);  // one scale per joint group
  int beta = 0;
  int gamma = 0;
  std::vector<std::size_t> groups;  // joint -> alpha index; empty: per joint, or shared if alpha has one entry

  void validate() const {
    require(alpha.size() >= 1 && (alpha.array() >= 0.0).all() && alpha.allFinite(), "alpha must be finite and >= 0");
    require((beta == 0 || beta == 1) && (gamma == 0 || gamma == 1), "beta and gamma are binary");
    for (auto g : groups) require(g < static_cast<std::size_t>(alpha.size()), "group index out of range");
  }

  double alpha_for(std::size_t joint) const {
    if (!groups.empty()) return alpha[static_cast<Eigen::Index>(groups.at(joint))];
    return alpha.size() == 1 ? alpha[0] : alpha[static_cast<Eigen::Index>(joint)];
  }
};

// x_des = alpha u + gamma beta x + gamma (1 - beta) x_des_prev
inline Vector map_action(const ActionMapping& h, const Vector& u, const Vector& x, const Vector& x_des_prev) {
  h.validate();
  require(u.size() == x.size() && x.size() == x_des_prev.size(), "action, state and previous target must match");
  require(!h.groups.empty() ? h.groups.size() == static_cast<std::size_t>(u.size())
                            : (h.alpha.size() == 1 || h.alpha.size() == u.size()),
          "alpha groups do not cover the action");
  Vector out(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    out[i] = h.alpha_for(static_cast<std::size_t>(i)) * u[i] + h.gamma * h.beta * x[i] +
             h.gamma * (1 - h.beta) * x_des_prev[i];
  }
  return out;
}

inline double reward_sharp(const Vector& q, const Vector& g, double lambda) {
  require(lambda > 0.0, "lambda must be positive");
  require(q.size() == g.size(), "state and goal must match");
  // 1 - tanh(z) written as 2 / (1 + e^{2z}) so it does not round to 0.
  return 2.0 / (1.0 + std::exp(2.0 * (q - g).squaredNorm() / lambda));
}

inline double reward_soft(const Vector& q, const Vector& g, double lambda_large, const Vector& delta_a,
                          double alpha_pen) {
  require(alpha_pen >= 0.0, "action-change penalty must be >= 0");
  return reward_sharp(q, g, lambda_large) - alpha_pen * delta_a.squaredNorm();
}

// Position, velocity, torque, torque rate.
enum ConstraintKind { kPosition = 0, kVelocity, kTorque, kTorqueRate, kConstraintCount };
using ConstraintRates = std::array<double, kConstraintCount>;

struct ConstraintSpec {
  ConstraintRates allowed{0.0, 0.0, 0.0, 0.2};

  void validate() const {
    for (double v : allowed) require(v >= 0.0 && v <= 1.0, "allowed violation rates must lie in [0, 1]");
  }
};

inline bool feasible(const ConstraintRates& violations, const ConstraintSpec& spec) {
  for (std::size_t c = 0; c < kConstraintCount; ++c)
    if (violations[c] > spec.allowed[c]) return false;
  return true;
}

// Feasible: 1 + success. Infeasible: success times prod_c max(0, 1 - excess_c).
inline double constrained_objective(double success_rate, const ConstraintRates& violations,
                                    const ConstraintSpec& spec = {}) {
  spec.validate();
  require(success_rate >= 0.0 && success_rate <= 1.0, "success rate must lie in [0, 1]");
  for (double v : violations) require(v >= 0.0 && v <= 1.0, "violation rates must lie in [0, 1]");
  if (feasible(violations, spec)) return 1.0 + success_rate;
  double j = success_rate;
  for (std::size_t c = 0; c < kConstraintCount; ++c)
    if (violations[c] > spec.allowed[c]) j *= std::max(0.0, 1.0 - (violations[c] - spec.allowed[c]));
  // An infeasible input with a tiny excess could otherwise round up to 1.
  return std::min(j, std::nextafter(1.0, 0.0));
}

// --- Search ----------------------------------------------------------------

struct ShapingEvaluation {
  double J = -std::numeric_limits<double>::infinity();
  double success = 0.0;
  ConstraintRates violations{0.0, 0.0, 0.0, 0.0};
};

using ShapingObjective = std::function<ShapingEvaluation(const ActionMapping&)>;

struct LedgerEntry {
  std::size_t trial = 0;
  ActionMapping mapping;
  ShapingEvaluation eval;
  bool failed = false;
};

struct ShapingResult {
  ActionMapping best;
  double objective = -std::numeric_limits<double>::infinity();
  std::size_t best_trial = 0;
  std::vector<LedgerEntry> ledger;
};

enum class SearchStrategy { Random, Cmaes };

inline SearchStrategy parse_strategy(const std::string& s) {
  if (s == "random") return SearchStrategy::Random;
  if (s == "cmaes") return SearchStrategy::Cmaes;
  throw InvalidArgument("unknown search strategy: " + s);
}

struct SearchSpace {
  std::size_t alpha_groups = 1;
  double alpha_min = 1e-3;
  double alpha_max = 10.0;
  std::vector<std::size_t> groups;  // joint -> group, copied into every candidate
  // (beta, gamma) branches to enumerate.
  std::vector<std::pair<int, int>> branches{{0, 0}, {1, 0}, {0, 1}, {1, 1}};

  void validate() const {
    require(alpha_groups >= 1, "need at least one alpha group");
    require(alpha_min > 0.0 && alpha_max > alpha_min, "alpha range must satisfy 0 < min < max");
    require(!branches.empty(), "need at least one (beta, gamma) branch");
  }
};

namespace detail {

inline LedgerEntry evaluate_candidate(const ShapingObjective& objective, ActionMapping h, std::size_t trial) {
  LedgerEntry e{trial, std::move(h), {}, false};
  try {
    e.eval = objective(e.mapping);
    if (std::isnan(e.eval.J)) throw std::runtime_error("objective returned NaN");
  } catch (const std::exception&) {
    e.eval = ShapingEvaluation{};
    e.failed = true;
  }
  return e;
}

}  // namespace detail

// Enumerates the (beta, gamma) branches and searches log alpha within each,
// with the budget split evenly. Ties go to the lowest trial index.
inline ShapingResult shape_search(const ShapingObjective& objective, const SearchSpace& space, std::size_t budget,
                                  SearchStrategy strategy, std::uint64_t seed, std::size_t workers = 0) {
  require(budget >= 1, "budget must be >= 1");
  space.validate();
  const auto groups = static_cast<Eigen::Index>(space.alpha_groups);
  const double lo = std::log(space.alpha_min), hi = std::log(space.alpha_max);
  const std::size_t nb = space.branches.size();
  auto make = [&](const Vector& log_alpha, std::size_t branch) {
    ActionMapping h;
    h.alpha = log_alpha.array().exp().matrix();
    h.beta = space.branches[branch].first;
    h.gamma = space.branches[branch].second;
    h.groups = space.groups;
    return h;
  };

  ShapingResult out;
  out.ledger.resize(budget);
  if (strategy == SearchStrategy::Random) {
    parallel_for(
        budget,
        [&](std::size_t i) {
          std::mt19937_64 rng(derive_seed(seed, i));
          std::uniform_real_distribution<double> u(lo, hi);
          Vector la(groups);
          for (Eigen::Index g = 0; g < groups; ++g) la[g] = u(rng);
          out.ledger[i] = detail::evaluate_candidate(objective, make(la, i % nb), i);
        },
        workers);
  } else {
    std::size_t next = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t share = budget / nb + (b < budget % nb ? 1 : 0);
      std::size_t used = 0;
      for (std::uint64_t restart = 0; used < share; ++restart) {
        Bounds box{{}, Vector::Constant(groups, lo), Vector::Constant(groups, hi)};
        CmaesConfig cfg;
        cfg.sigma0 = 0.3;
        cfg.max_iterations = std::numeric_limits<std::size_t>::max();
        cfg.max_evaluations = share - used;
        cfg.seed = derive_seed(derive_seed(seed, b), restart);
        cfg.workers = workers;
        std::vector<LedgerEntry> entries(share - used);
        const auto recording = [&](const Vector& log_alpha, std::size_t k) {
          entries[k] = detail::evaluate_candidate(objective, make(log_alpha, b), 0);
          return -entries[k].eval.J;
        };
        const auto fit = cmaes_minimize(recording, box, cfg);
        entries.resize(fit.evaluations);
        for (auto& e : entries) {
          e.trial = next;
          out.ledger[next++] = std::move(e);
        }
        used += entries.size();
      }
    }
  }
  for (std::size_t i = 0; i < budget; ++i) {
    if (out.ledger[i].eval.J > out.objective || i == 0) {
      out.objective = out.ledger[i].eval.J;
      out.best = out.ledger[i].mapping;
      out.best_trial = i;
    }
  }
  return out;
}

// trial,alpha1,alpha2,beta,gamma,J,success,viol_pos,viol_vel,viol_tau,viol_taurate
inline void write_shaping_ledger(std::ostream& out, const ShapingResult& r) {
  out << "trial,alpha1,alpha2,beta,gamma,J,success,viol_pos,viol_vel,viol_tau,viol_taurate\n";
  for (const auto& e : r.ledger) {
    const auto& a = e.mapping.alpha;
    out << e.trial << ',' << fmt9(a[0]) << ',' << (a.size() > 1 ? fmt9(a[1]) : "") << ',' << e.mapping.beta << ','
        << e.mapping.gamma << ',' << fmt9(e.eval.J) << ',' << fmt9(e.eval.success);
    for (double v : e.eval.violations) out << ',' << fmt9(v);
    out << '\n';
  }
}

// --- Toy closed-loop task --------------------------------------------------

// One joint driven by the scripted policy u = g - x through an action
// mapping at the control rate, PD at the physics rate.
struct ToyShapingTask {
  PlantParams plant = PlantParams::point_mass(1.0);
  GainConfig gains = GainConfig::uniform(1, 64.0, 8.0);
  double position_limit = 1.5;
  double velocity_limit = 3.0;
  double torque_limit = 60.0;
  double torque_rate_limit = kDefaultTorqueRateLimit;
  double control_rate = 50.0;
  double physics_rate = 500.0;
  double duration = 4.0;
  double goal_tolerance = 0.05;
  double start_range = 0.5;  // start and goal drawn uniformly in [-r, r]
  std::size_t episodes = 100;
  std::uint64_t seed = 0;
  ConstraintSpec constraints;

  ShapingEvaluation evaluate(const ActionMapping& h) const {
    h.validate();
    const double dt = 1.0 / physics_rate;
    const auto hold = static_cast<std::size_t>(std::llround(physics_rate / control_rate));
    require(hold >= 1, "control rate must not exceed the physics rate");
    const auto steps = static_cast<std::size_t>(std::llround(duration * physics_rate));
    PlantParams p = plant;
    p.torque_limit = Vector::Constant(1, torque_limit);
    p.torque_rate_limit = torque_rate_limit;

    std::size_t reached = 0, total_steps = 0;
    ConstraintRates counts{0.0, 0.0, 0.0, 0.0};
    for (std::size_t ep = 0; ep < episodes; ++ep) {
      std::mt19937_64 rng(derive_seed(seed, ep));
      std::uniform_real_distribution<double> u(-start_range, start_range);
      const double x0 = u(rng), goal = u(rng);
      Vector x_des = Vector::Constant(1, x0);
      const TargetPolicy policy = [&](const State& s, std::size_t) {
        x_des = map_action(h, Vector::Constant(1, goal) - s.q, s.q, x_des);
        return x_des;
      };
      RolloutOptions opt;
      opt.dt = dt;
      opt.steps = steps;
      opt.hold = hold;
      opt.record_every = steps;
      opt.apply_limits = true;
      Vector prev = Vector::Zero(1);
      bool first = true;
      opt.on_torque = [&](const State& s, const Vector& commanded, const Vector&) {
        if (std::abs(s.q[0]) > position_limit) counts[kPosition] += 1;
        if (std::abs(s.q_dot[0]) > velocity_limit) counts[kVelocity] += 1;
        if (std::abs(commanded[0]) > torque_limit) counts[kTorque] += 1;
        if (!first && std::abs(commanded[0] - prev[0]) / dt > torque_rate_limit) counts[kTorqueRate] += 1;
        prev = commanded;
        first = false;
      };
      const auto run = rollout(p, gains, State{Vector::Constant(1, x0), Vector::Zero(1), 0.0}, policy, opt);
      if (std::abs(run.final_state.q[0] - goal) <= goal_tolerance) ++reached;
      total_steps += steps;
    }
    ShapingEvaluation e;
    e.success = static_cast<double>(reached) / static_cast<double>(episodes);
    for (std::size_t c = 0; c < kConstraintCount; ++c) e.violations[c] = counts[c] / static_cast<double>(total_steps);
    e.J = constrained_objective(e.success, e.violations, constraints);
    return e;
  }
};

}  // namespace gainlab

// End-to-end acceptance run: one PASS/FAIL line per criterion.

#include <chrono>
#include <cstdio>
#include <random>
#include <string>

#include "gainlab/noise.hpp"
#include "gainlab/retarget.hpp"
#include "gainlab/shaping.hpp"
#include "gainlab/stats.hpp"
#include "gainlab/sysid.hpp"
#include "oracles.hpp"

using namespace gainlab;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

int report(int id, const char* name, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("[%s] %d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
  return o.pass ? 0 : 1;
}

std::string num(double v) { return fmt9(v); }

PlantParams desk_arm() {
  auto plant = PlantParams::two_link({0.5, 0.4}, {2.0, 1.0}, true);
  plant.armature << 0.3, 0.3;
  return plant;
}

const std::pair<double, double> kCorners[] = {{16.0, 2.0}, {16.0, 128.0}, {1024.0, 2.0}, {1024.0, 128.0}};

Outcome variance_theorem() {
  Outcome o;
  double worst_rel = 0.0, worst_pair = 0.0;
  for (double kp : {2.0, 8.0, 32.0})
    for (double kd : {1.0, 4.0, 16.0}) {
      PerturbationResult by_mass[2];
      int slot = 0;
      for (double m : {1.0, 10.0}) {
        const auto g = GainConfig::uniform(1, kp, kd);
        const auto setup = perturbation_setup(kp, kd, m);
        const auto noise = NoiseSpec::continuous(1.0, derive_seed(2024, static_cast<std::uint64_t>(kp * 1000 + kd * 10 + m)));
        const auto r = simulate_perturbation(g, m, noise, setup.dt, setup.horizon, 200);
        const double analytic = predict_variance(g, 1.0).var_pos[0];
        worst_rel = std::max(worst_rel, std::abs(r.variance - analytic) / analytic);
        by_mass[slot++] = r;
      }
      const double se = std::hypot(by_mass[0].std_error, by_mass[1].std_error);
      worst_pair = std::max(worst_pair, std::abs(by_mass[0].variance - by_mass[1].variance) / se);
    }
  o.pass = worst_rel < 0.05 && worst_pair <= 3.0;
  o.detail = "worst relative error " + num(worst_rel) + " (< 0.05), worst mass-pair gap " + num(worst_pair) + " SE (<= 3)";
  return o;
}

Outcome crandall_identity() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> logu(-3.0, 3.0);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double kp = std::pow(10.0, logu(rng)), kd = std::pow(10.0, logu(rng)), m = std::pow(10.0, logu(rng));
    const double sigma = std::pow(10.0, logu(rng) / 3.0);
    const double wn = std::sqrt(kp / m), zeta = kd / (2.0 * std::sqrt(kp * m));
    const double via = crandall_oracle(wn, zeta, std::sqrt(std::pow(wn, 4) * sigma * sigma));
    const double direct = predict_variance(GainConfig::uniform(1, kp, kd), sigma).var_pos[0];
    worst = std::max(worst, std::abs(via - direct) / direct);
  }
  return {worst < 1e-12, "worst relative difference " + num(worst) + " over 100 draws (< 1e-12)"};
}

Outcome tpr_fidelity() {
  Outcome o;
  const auto chain = PlantParams::chain(3, 1.2);
  Vector q0(3), qf(3);
  q0 << 0.0, 0.5, -0.3;
  qf << 0.8, -0.4, 0.2;
  const QuinticReference ref{q0, qf, 1.0};
  const auto chain_demo = std::make_shared<const TorqueDemo>(make_demo(
      chain, computed_torque_tracker(chain, ref, 1.0 / 500), State{q0, Vector::Zero(3), 0.0}, 1.6, 500.0, TaskGoal{qf, 0.05}));
  double chain_worst = 0.0;
  for (const auto& [kp, kd] : kCorners)
    chain_worst = std::max(chain_worst, replay(tpr_joint(chain_demo, GainConfig::uniform(3, kp, kd)), 1, chain).report.mse);

  const auto arm = desk_arm();
  std::vector<std::shared_ptr<const TorqueDemo>> demos;
  for (std::uint64_t s = 0; s < 20; ++s) demos.push_back(random_reach_demo(arm, 500 + s));
  double arm_worst = 0.0, worst_goal = 1.0;
  std::string worst_where;
  for (const auto& [kp, kd] : kCorners) {
    const auto g = GainConfig::uniform(2, kp, kd, true);
    for (std::size_t dec : {1u, 10u, 25u}) {
      double reached = 0.0;
      for (const auto& d : demos) {
        const auto r = replay(tpr_joint(d, g), dec, arm);
        if (r.report.mse > arm_worst) {
          arm_worst = r.report.mse;
          worst_where = "(" + num(kp) + "," + num(kd) + ") x" + std::to_string(dec);
        }
        reached += r.report.goal_reached ? 1.0 : 0.0;
      }
      worst_goal = std::min(worst_goal, reached / static_cast<double>(demos.size()));
    }
  }
  o.pass = chain_worst < 1e-6 && arm_worst < 1e-3 && worst_goal >= 0.9;
  o.detail = "linear plant base-rate MSE max " + num(chain_worst) + " (< 1e-6); arm MSE max " + num(arm_worst) + " at " +
             worst_where + " (< 1e-3), goal-reach min " + num(worst_goal) + " (>= 0.9) over 4 corners x {1,10,25} x 20 demos";
  return o;
}

Outcome attenuation_ordering() {
  const auto arm = desk_arm();
  const auto demo = random_reach_demo(arm, 77);
  const auto noise = NoiseSpec::held(0.02, 50.0, 4242);
  const auto co = noisy_openloop_replay(tpr_joint(demo, GainConfig::uniform(2, 16.0, 128.0, true)), arm, noise, 10);
  const auto su = noisy_openloop_replay(tpr_joint(demo, GainConfig::uniform(2, 1024.0, 2.0, true)), arm, noise, 10);
  std::size_t ordered = 0;
  double worst_ratio = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    if (co.trial_rms[i] < su.trial_rms[i]) ++ordered;
    worst_ratio = std::max(worst_ratio, co.trial_rms[i] / su.trial_rms[i]);
  }
  return {ordered == 10, std::to_string(ordered) + "/10 replays with CO RMS < SU RMS (CO mean " + num(co.rms_deviation) +
                             ", SU mean " + num(su.rms_deviation) + ", worst CO/SU " + num(worst_ratio) + ")"};
}

Outcome sysid_self_id() {
  const auto bounds = default_sysid_bounds();
  const auto gains = GainConfig::uniform(3, 128.0, 16.0);
  double worst = 0.0;
  bool monotone = true;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto truth = PlantParams::chain(3, 1.0);
    GainConfig g = gains;
    std::mt19937_64 rng(1000 + trial);
    for (std::size_t j = 0; j < 3; ++j) {
      Vector psi = extract_sysid_params(truth, g, j, false);
      for (Eigen::Index i = 0; i < psi.size(); ++i) {
        std::uniform_real_distribution<double> u(bounds.lower[i + 2], bounds.upper[i + 2]);
        psi[i] = u(rng);
      }
      apply_sysid_params(psi, j, false, truth, g);
    }
    const Vector q0 = Vector::Zero(3);
    const auto reference = excite(truth, gains, q0);
    CmaesConfig cfg;
    cfg.seed = trial;
    cfg.max_iterations = 200;
    cfg.sigma0 = 3.0;
    const auto fit = identify(reference, PlantParams::chain(3, 1.0), gains, bounds, cfg, {});
    worst = std::max(worst, trajectory_error(reference, excite(fit.plant, fit.gains, q0)));
    for (const auto& j : fit.joints)
      for (std::size_t k = 1; k < j.history.size(); ++k) monotone = monotone && j.history[k] <= j.history[k - 1];
  }
  return {worst < 1e-6 && monotone,
          "worst re-simulated trajectory_error " + num(worst) + " (< 1e-6), histories non-increasing: " + (monotone ? "yes" : "no")};
}

std::vector<SweepOutcome> synthetic_grid(const std::function<double(Regime)>& p, long trials, std::uint64_t seed) {
  const auto grid = GainGrid::default_grid();
  std::mt19937_64 rng(seed);
  std::vector<SweepOutcome> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto c = grid.cell(i);
    SweepOutcome r;
    r.kp = c.kp;
    r.kd = c.kd;
    r.trials = trials;
    r.region = classify_regime(GainConfig::uniform(1, c.kp, c.kd), 1.0, grid.stiffness_split()).label();
    r.successes = std::binomial_distribution<long>(trials, p(r.region))(rng);
    rows.push_back(r);
  }
  return rows;
}

Outcome statistics() {
  std::vector<std::string> failed;
  double barnard_worst = 0.0;
  for (int n1 = 1; n1 <= 8; ++n1)
    for (int n2 = 1; n2 <= 8; ++n2) {
      const auto ref = oracle::barnard_greater_all(n1, n2, 4001);
      for (int a = 0; a <= n1; ++a)
        for (int c = 0; c <= n2; ++c)
          barnard_worst = std::max(barnard_worst, std::abs(barnard_exact(a, n1 - a, c, n2 - c, Side::Greater).p - ref[a][c]));
    }
  if (!(barnard_worst < 1e-3)) failed.push_back("barnard");
  const double mw = mannwhitney_u({1, 2, 3}, {4, 5, 6}, Side::Less).p;
  if (std::abs(mw - 0.05) > 1e-12) failed.push_back("mann-whitney");
  if (std::abs(bonferroni(0.05, 6) - 0.05 / 6) > 1e-15 || std::abs(bonferroni(0.05, 3) - 0.05 / 3) > 1e-15)
    failed.push_back("bonferroni");

  const auto grid = GainGrid::default_grid();
  std::mt19937_64 rng(31);
  std::vector<SweepOutcome> logit_rows, ols_rows;
  std::normal_distribution<double> eps(0.0, 0.01);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto c = grid.cell(i);
    const double eta = -0.2 * std::log2(c.kp) + 0.3 * std::log2(c.kd);
    SweepOutcome r{c.kp, c.kd, 0, 10000, std::nullopt, Regime::CO};
    r.successes = std::binomial_distribution<long>(10000, 1.0 / (1.0 + std::exp(-eta)))(rng);
    logit_rows.push_back(r);
    for (int k = 0; k < 10000; ++k)
      ols_rows.push_back({c.kp, c.kd, 0, 0, std::exp(-3.0 + 0.4 * std::log2(c.kp) + 0.25 * std::log2(c.kd) + eps(rng)), Regime::CO});
  }
  const auto lf = logistic_fit(logit_rows);
  const double logit_err = std::max({std::abs(lf.beta[0]), std::abs(lf.beta[1] + 0.2), std::abs(lf.beta[2] - 0.3)});
  const auto of = ols_log_fit(ols_rows);
  const double ols_err = std::max({std::abs(of.beta[0] + 3.0), std::abs(of.beta[1] - 0.4), std::abs(of.beta[2] - 0.25)});
  if (!(logit_err <= 0.02)) failed.push_back("logistic");
  if (!(ols_err <= 0.02)) failed.push_back("ols");

  const auto success_rows = synthetic_grid([](Regime r) { return r == Regime::CO ? 0.851 : 0.390; }, 100, 7);
  const auto sr = region_test(success_rows, Regime::CO, Metric::Success, 0.05, 6, Side::Greater);
  if (!sr.reject) failed.push_back("region success");
  auto error_rows = synthetic_grid([](Regime) { return 0.5; }, 10, 8);
  std::lognormal_distribution<double> spread(0.0, 0.3);
  for (auto& r : error_rows) r.scalar_error = (r.region == Regime::SO ? 0.043 : 0.010) * spread(rng);
  const auto er = region_test(error_rows, Regime::SO, Metric::Error, 0.05, 3, Side::Greater);
  if (!er.reject) failed.push_back("region error");

  std::string detail = "barnard max dev " + num(barnard_worst) + ", MW p " + num(mw) + ", logistic max dev " +
                       num(logit_err) + ", OLS max dev " + num(ols_err) + ", success p " + num(sr.p) + " vs " +
                       num(sr.alpha_adj) + ", error p " + num(er.p) + " vs " + num(er.alpha_adj);
  for (const auto& f : failed) detail += "; failed " + f;
  return {failed.empty(), detail};
}

Outcome objective_ranking() {
  const ConstraintSpec spec;
  double min_feasible = 3.0, max_infeasible = -1.0;
  std::size_t feasible_n = 0, infeasible_n = 0;
  bool bounds_ok = true;
  const std::vector<double> rates{0.0, 0.001, 0.01, 0.1, 0.19, 0.2, 0.21, 0.5, 1.0};
  for (int s = 0; s <= 20; ++s) {
    const double success = s / 20.0;
    for (double p : rates)
      for (double v : rates)
        for (double t : rates)
          for (double tr : rates) {
            const ConstraintRates viol{p, v, t, tr};
            const double j = constrained_objective(success, viol, spec);
            if (feasible(viol, spec)) {
              ++feasible_n;
              bounds_ok = bounds_ok && j >= 1.0 && j <= 2.0;
              min_feasible = std::min(min_feasible, j);
            } else {
              ++infeasible_n;
              bounds_ok = bounds_ok && j >= 0.0 && j < 1.0;
              max_infeasible = std::max(max_infeasible, j);
            }
          }
  }
  return {bounds_ok && min_feasible > max_infeasible,
          std::to_string(feasible_n) + " feasible (min J " + num(min_feasible) + "), " + std::to_string(infeasible_n) +
              " infeasible (max J " + num(max_infeasible) + ")"};
}

Trajectory velocity_trace(double tail_std, double freq, double phase, double offset) {
  Trajectory t;
  t.sample_rate = 50.0;
  for (int k = 0; k < 200; ++k) {
    const double time = k / 50.0;
    // Sinusoid of amplitude sqrt(2) * std over a whole number of periods.
    const double v = offset + std::sqrt(2.0) * tail_std * std::sin(2.0 * M_PI * freq * time + phase);
    t.records.push_back({time, Vector::Zero(1), Vector::Constant(1, v), Vector::Zero(1), Vector::Zero(1), std::nullopt});
  }
  return t;
}

Outcome jitter_classification() {
  std::size_t errors = 0, cases = 0;
  for (double freq : {1.0, 2.5, 5.0, 10.0})
    for (double phase : {0.0, 0.7, 2.1})
      for (double offset : {0.0, 0.3, -1.2}) {
        errors += jitter_detect(velocity_trace(0.001, freq, phase, offset)).jitter ? 1 : 0;
        errors += jitter_detect(velocity_trace(0.675, freq, phase, offset)).jitter ? 0 : 1;
        cases += 2;
      }
  return {errors == 0, std::to_string(errors) + " misclassified of " + std::to_string(cases) + " traces"};
}

Outcome shaping_existence() {
  std::string detail;
  bool pass = true;
  for (const auto& [kp, kd] : kCorners) {
    ToyShapingTask task;
    task.gains = GainConfig::uniform(1, kp, kd);
    task.seed = 11;
    const auto r = shape_search([&task](const ActionMapping& h) { return task.evaluate(h); }, SearchSpace{}, 80,
                                SearchStrategy::Cmaes, 1);
    const auto& e = r.ledger[r.best_trial].eval;
    const bool ok = feasible(e.violations, task.constraints) && e.success >= 0.99;
    pass = pass && ok;
    if (!detail.empty()) detail += ", ";
    detail += "(" + num(kp) + "," + num(kd) + ") success " + num(e.success) + (ok ? "" : " NOT feasible/>=0.99");
  }
  return {pass, detail};
}

}  // namespace

int main() {
  int failures = 0;
  failures += report(1, "variance attenuation vs Monte Carlo", variance_theorem);
  failures += report(2, "Crandall consistency", crandall_identity);
  failures += report(3, "TPR replay fidelity", tpr_fidelity);
  failures += report(4, "error-attenuation ordering", attenuation_ordering);
  failures += report(5, "sysid self-identification", sysid_self_id);
  failures += report(6, "statistics oracles", statistics);
  failures += report(7, "constrained-objective ranking", objective_ranking);
  failures += report(8, "jitter detector", jitter_classification);
  failures += report(9, "desk-scale shaping existence", shaping_existence);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

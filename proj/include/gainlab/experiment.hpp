#pragma once

// Config-driven gain-grid experiments. Cells run on a worker pool, results are
// gathered by cell index and every file is written afterwards by one thread.

#include <filesystem>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "gainlab/config.hpp"
#include "gainlab/noise.hpp"
#include "gainlab/retarget.hpp"
#include "gainlab/shaping.hpp"
#include "gainlab/stats.hpp"
#include "gainlab/sysid.hpp"

namespace gainlab {

enum class ExperimentKind {
  TprSweep,
  VarianceCheck,
  NoisyReplay,
  SysidSweep,
  ShapeSearch,
  StatsReport,
  ComplianceProbe,
  JitterScan
};

inline const std::vector<std::pair<std::string, ExperimentKind>>& experiment_kinds() {
  static const std::vector<std::pair<std::string, ExperimentKind>> kinds{
      {"tpr-sweep", ExperimentKind::TprSweep},         {"variance-check", ExperimentKind::VarianceCheck},
      {"noisy-replay", ExperimentKind::NoisyReplay},   {"sysid-sweep", ExperimentKind::SysidSweep},
      {"shape-search", ExperimentKind::ShapeSearch},   {"stats-report", ExperimentKind::StatsReport},
      {"compliance-probe", ExperimentKind::ComplianceProbe}, {"jitter-scan", ExperimentKind::JitterScan}};
  return kinds;
}

inline std::string to_string(ExperimentKind k) {
  for (const auto& [name, kind] : experiment_kinds())
    if (kind == k) return name;
  return "?";
}

// --- Kind-specific parameters ----------------------------------------------------

struct DemoParams {
  std::size_t demos = 1;
  double base_rate = 500.0;
  double duration = 2.5;
  double move_time = 1.5;
  double range = 1.0;
  bool gravity_comp = false;

  void read(SectionReader& r) {
    demos = r.count("demos", demos, 1);
    base_rate = r.positive("base_rate", base_rate);
    duration = r.positive("duration", duration);
    move_time = r.positive("move_time", move_time);
    range = r.positive("range", range);
    gravity_comp = r.flag("gravity_comp", gravity_comp);
    if (duration < move_time) r.error("duration", "must be >= move_time");
  }
};

struct TprSweepParams {
  DemoParams demo;
  std::vector<std::size_t> decimations{1, 10, 25, 50};
};

struct VarianceParams {
  double sigma = 1.0;
  NoiseMode mode = NoiseMode::ContinuousLimit;
  double hold_rate = 50.0;
  std::size_t trials = 200;
  double dt = 0.0;       // 0: chosen per cell
  double horizon = 0.0;  // 0: chosen per cell
};

struct NoisyReplayParams {
  DemoParams demo;
  double sigma = 0.02;
  double hold_rate = 50.0;
  std::size_t trials = 10;
};

struct SysidSweepParams {
  std::size_t iterations = 200;
  double sigma0 = 3.0;
  std::size_t population = 0;
  std::string bounds_path;
  Bounds bounds = default_sysid_bounds();
  bool fit_gains = false;
  ExciteOptions excite;
  std::vector<double> q0;
};

struct ShapeSearchParams {
  std::size_t budget = 40;
  SearchStrategy strategy = SearchStrategy::Cmaes;
  std::size_t episodes = 100;
  double control_rate = 50.0;
  double physics_rate = 500.0;
  double duration = 4.0;
  std::size_t alpha_groups = 1;
};

struct StatsReportParams {
  std::string input;
  Metric metric = Metric::Success;
  Regime region = Regime::CO;
  Side side = Side::Greater;
  double alpha = 0.05;
  std::size_t comparisons = 1;
};

struct ComplianceParams {
  double force = 1.0;
  double settle_time = 60.0;
  double k_pol = 0.0;
  double dt = 1e-3;
};

struct JitterParams {
  double policy_rate = 50.0;
  double physics_rate = 500.0;
  double duration = 4.0;
  double step = 0.5;
  double sigma = 0.0;
  double window = 2.0;
  double threshold = 0.04;
};

using KindParams = std::variant<TprSweepParams, VarianceParams, NoisyReplayParams, SysidSweepParams,
                                ShapeSearchParams, StatsReportParams, ComplianceParams, JitterParams>;

struct Experiment {
  ExperimentKind kind = ExperimentKind::VarianceCheck;
  PlantParams plant;
  GainGrid grid;
  KindParams params;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::size_t workers = 0;
  std::string config_text;

  bool stochastic() const { return kind != ExperimentKind::StatsReport && kind != ExperimentKind::ComplianceProbe; }
  std::uint64_t root_seed() const { return seed.value_or(0); }
};

namespace detail {

inline bool divides(double rate, double base) {
  const double ratio = base / rate;
  return std::abs(ratio - std::round(ratio)) < 1e-9 * ratio && std::round(ratio) >= 1.0;
}

inline KindParams read_params(ExperimentKind kind, const Ptree& root, const PlantParams& plant, const GainGrid& grid,
                              std::vector<Finding>& findings) {
  SectionReader r(root, to_string(kind), findings);
  KindParams out;
  switch (kind) {
    case ExperimentKind::TprSweep: {
      TprSweepParams p;
      p.demo.read(r);
      const auto dec = r.list("decimations", {1, 10, 25, 50});
      p.decimations.clear();
      for (double d : dec) {
        if (d < 1.0 || d != std::floor(d)) {
          r.error("decimations", "entries must be integers >= 1");
          break;
        }
        p.decimations.push_back(static_cast<std::size_t>(d));
      }
      if (p.decimations.empty()) r.error("decimations", "must be non-empty");
      out = p;
      break;
    }
    case ExperimentKind::VarianceCheck: {
      VarianceParams p;
      p.sigma = r.non_negative("sigma", p.sigma);
      const auto mode = r.text("mode", "continuous");
      if (mode == "held") p.mode = NoiseMode::Held;
      else if (mode != "continuous") r.error("mode", "must be continuous or held");
      p.hold_rate = r.positive("hold_rate", p.hold_rate);
      p.trials = r.count("trials", p.trials, 1);
      p.dt = r.non_negative("dt", 0.0);
      p.horizon = r.non_negative("horizon", 0.0);
      if (plant.kind != PlantKind::PointMass1D) r.error("plant", "variance-check needs a point-mass plant");
      const double m = plant.inertia[0] + plant.armature[0];
      if (p.dt > 0.0) {
        for (double kp : grid.kp) {
          const double wn_dt = std::sqrt(kp / m) * p.dt;
          if (wn_dt >= 0.1) {
            r.error("dt", "resolution: omega_n * dt = " + fmt9(wn_dt) + " >= 0.1 at kp = " + fmt9(kp));
            break;
          }
        }
        if (p.mode == NoiseMode::Held && !divides(p.hold_rate, 1.0 / p.dt))
          r.error("hold_rate", "hold interval must be a whole number of steps");
      }
      out = p;
      break;
    }
    case ExperimentKind::NoisyReplay: {
      NoisyReplayParams p;
      p.demo.read(r);
      p.sigma = r.non_negative("sigma", p.sigma);
      p.hold_rate = r.positive("hold_rate", p.hold_rate);
      p.trials = r.count("trials", p.trials, 1);
      if (p.hold_rate > 0.0 && !divides(p.hold_rate, p.demo.base_rate))
        r.error("hold_rate", "must divide base_rate");
      out = p;
      break;
    }
    case ExperimentKind::SysidSweep: {
      SysidSweepParams p;
      p.iterations = r.count("iterations", p.iterations, 1);
      p.sigma0 = r.positive("sigma0", p.sigma0);
      p.population = r.count("population", 0);
      if (p.population != 0 && p.population < 4) r.error("population", "must be 0 or >= 4");
      p.bounds_path = r.text("bounds", "");
      if (!p.bounds_path.empty()) {
        try {
          p.bounds = read_sysid_bounds(p.bounds_path);
        } catch (const std::exception& e) {
          r.error("bounds", e.what());
        }
      }
      p.fit_gains = r.flag("fit_gains", false);
      p.excite.amplitude = r.non_negative("amplitude", p.excite.amplitude);
      p.excite.duration = r.positive("duration", p.excite.duration);
      p.excite.log_rate = r.positive("log_rate", p.excite.log_rate);
      p.excite.physics_rate = r.positive("physics_rate", p.excite.physics_rate);
      p.q0 = r.list("q0", std::vector<double>(plant.dof(), 0.0));
      if (p.q0.size() == 1 && plant.dof() > 1) p.q0.assign(plant.dof(), p.q0[0]);
      if (p.q0.size() != plant.dof()) r.error("q0", "needs one value per joint");
      out = p;
      break;
    }
    case ExperimentKind::ShapeSearch: {
      ShapeSearchParams p;
      p.budget = r.count("budget", p.budget, 1);
      try {
        p.strategy = parse_strategy(r.text("strategy", "cmaes"));
      } catch (const InvalidArgument& e) {
        r.error("strategy", e.what());
      }
      p.episodes = r.count("episodes", p.episodes, 1);
      p.control_rate = r.positive("control_rate", p.control_rate);
      p.physics_rate = r.positive("physics_rate", p.physics_rate);
      p.duration = r.positive("duration", p.duration);
      p.alpha_groups = r.count("alpha_groups", 1, 1);
      if (p.alpha_groups > 2) r.error("alpha_groups", "must be 1 or 2");
      if (plant.dof() != 1) r.error("plant", "shape-search needs a single-joint plant");
      if (!divides(p.control_rate, p.physics_rate)) r.error("control_rate", "must divide physics_rate");
      out = p;
      break;
    }
    case ExperimentKind::StatsReport: {
      StatsReportParams p;
      p.input = r.text("input", "");
      if (p.input.empty()) r.error("input", "sweep CSV path is required");
      const auto metric = r.text("metric", "success");
      if (metric == "error") p.metric = Metric::Error;
      else if (metric != "success") r.error("metric", "must be success or error");
      try {
        p.region = parse_regime(r.text("region", "CO"));
      } catch (const InvalidArgument& e) {
        r.error("region", e.what());
      }
      try {
        p.side = parse_side(r.text("side", "greater"));
      } catch (const InvalidArgument& e) {
        r.error("side", e.what());
      }
      p.alpha = r.number("alpha", p.alpha);
      if (!(p.alpha > 0.0 && p.alpha < 1.0)) r.error("alpha", "must lie in (0, 1)");
      p.comparisons = r.count("comparisons", 1, 1);
      out = p;
      break;
    }
    case ExperimentKind::ComplianceProbe: {
      ComplianceParams p;
      p.force = r.number("force", p.force);
      if (p.force == 0.0) r.error("force", "must be non-zero");
      p.settle_time = r.positive("settle_time", p.settle_time);
      p.k_pol = r.non_negative("k_pol", p.k_pol);
      p.dt = r.positive("dt", p.dt);
      const double m = (plant.inertia + plant.armature).minCoeff();
      const double wn_dt = std::sqrt(grid.kp.empty() ? 0.0 : grid.kp.back() * (1.0 + p.k_pol) / m) * p.dt;
      if (wn_dt >= 0.1) r.warning("dt", "resolution: omega_n * dt = " + fmt9(wn_dt) + " >= 0.1 at the stiffest cell");
      out = p;
      break;
    }
    case ExperimentKind::JitterScan: {
      JitterParams p;
      p.policy_rate = r.positive("policy_rate", p.policy_rate);
      p.physics_rate = r.positive("physics_rate", p.physics_rate);
      p.duration = r.positive("duration", p.duration);
      p.step = r.number("step", p.step);
      p.sigma = r.non_negative("sigma", p.sigma);
      p.window = r.positive("window", p.window);
      p.threshold = r.positive("threshold", p.threshold);
      if (p.window >= p.duration) r.error("window", "must be shorter than duration");
      if (!divides(p.policy_rate, p.physics_rate)) r.error("policy_rate", "must divide physics_rate");
      out = p;
      break;
    }
  }
  r.reject_unknown();
  return out;
}

}  // namespace detail

// Schema and cross-field checks. Never throws for bad content; unreadable files
// are reported as findings too.
inline std::vector<Finding> validate(const RawConfig& raw, Experiment* built = nullptr) {
  std::vector<Finding> findings;
  Experiment ex;
  ex.config_text = raw.text;
  static const std::set<std::string> known_sections{"experiment", "plant", "grid"};
  SectionReader head(raw.tree, "experiment", findings);
  if (!head.present()) findings.push_back({Finding::Severity::Error, "experiment", "missing [experiment] section"});
  const auto kind_name = head.text("kind", "");
  bool kind_ok = false;
  for (const auto& [name, kind] : experiment_kinds())
    if (name == kind_name) ex.kind = kind, kind_ok = true;
  if (head.present() && !kind_ok) head.error("kind", "unknown experiment kind '" + kind_name + "'");
  if (head.has("seed")) ex.seed = head.seed("seed", 0);
  ex.out_dir = head.text("out", "");
  ex.workers = head.count("workers", 0);
  head.reject_unknown();

  for (const auto& [section, body] : raw.tree) {
    if (body.empty() && !body.data().empty())
      findings.push_back({Finding::Severity::Error, section, "key outside any section"});
    else if (!known_sections.count(section) && (!kind_ok || section != to_string(ex.kind)))
      findings.push_back({Finding::Severity::Error, section, "unknown section"});
  }

  ex.plant = read_plant(raw.tree, findings);
  ex.grid = read_grid(raw.tree, findings);
  if (kind_ok && !has_errors(findings)) ex.params = detail::read_params(ex.kind, raw.tree, ex.plant, ex.grid, findings);
  if (built) *built = std::move(ex);
  return findings;
}

// --- Outputs ---------------------------------------------------------------------

struct CellMetric {
  std::string name;
  double value;
};

struct CellOutput {
  std::vector<std::string> rows;
  std::vector<CellMetric> metrics;
  std::vector<std::pair<std::string, std::string>> files;  // relative path, content
};

struct RunResult {
  int exit_code = 0;
  std::size_t cells = 0;
  std::size_t failures = 0;
  std::vector<std::string> files;  // relative paths in write order
  std::string manifest_path;
  std::vector<Finding> findings;
};

namespace detail {

inline std::string cell_tag(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu", index);
  return buf;
}

inline std::vector<std::shared_ptr<const TorqueDemo>> build_demos(const PlantParams& plant, const DemoParams& p,
                                                                  std::uint64_t seed) {
  std::vector<std::shared_ptr<const TorqueDemo>> demos;
  for (std::size_t d = 0; d < p.demos; ++d)
    demos.push_back(random_reach_demo(plant, derive_seed(seed, d), p.move_time, p.duration, p.base_rate, p.range));
  return demos;
}

inline GainConfig cell_gains(const Experiment& ex, std::size_t index, bool gravity_comp = false) {
  return ex.grid.config(index, ex.plant.dof(), gravity_comp);
}

struct CellRunner {
  std::string header;
  std::function<CellOutput(std::size_t)> run;
};

inline CellRunner tpr_sweep(const Experiment& ex, const TprSweepParams& p) {
  const auto demos = build_demos(ex.plant, p.demo, ex.root_seed());
  return {fidelity_csv_header(), [&ex, p, demos](std::size_t i) {
            const auto g = cell_gains(ex, i, p.demo.gravity_comp);
            CellOutput out;
            for (std::size_t dec : p.decimations) {
              double mse = 0.0, goals = 0.0;
              for (const auto& demo : demos) {
                const auto r = replay(tpr_joint(demo, g), dec, ex.plant);
                mse += r.report.mse;
                goals += r.report.goal_reached ? 1.0 : 0.0;
              }
              mse /= static_cast<double>(demos.size());
              goals /= static_cast<double>(demos.size());
              out.rows.push_back(fmt9(g.kp[0]) + "," + fmt9(g.kd[0]) + "," + std::to_string(dec) + "," + fmt9(mse) +
                                 "," + fmt9(goals));
              out.metrics.push_back({"mse_x" + std::to_string(dec), mse});
              out.metrics.push_back({"goal_x" + std::to_string(dec), goals});
            }
            return out;
          }};
}

inline CellRunner variance_check(const Experiment& ex, const VarianceParams& p) {
  return {noise_csv_header(), [&ex, p](std::size_t i) {
            const auto g = cell_gains(ex, i);
            const double m = ex.plant.inertia[0] + ex.plant.armature[0];
            auto setup = perturbation_setup(g.kp[0], g.kd[0], m);
            if (p.dt > 0.0) setup.dt = p.dt;
            if (p.horizon > 0.0) setup.horizon = p.horizon;
            NoiseSpec noise = p.mode == NoiseMode::Held ? NoiseSpec::held(p.sigma, p.hold_rate, derive_seed(ex.root_seed(), i))
                                                        : NoiseSpec::continuous(p.sigma, derive_seed(ex.root_seed(), i));
            if (p.mode == NoiseMode::Held && p.dt == 0.0) {
              const double period = 1.0 / p.hold_rate;
              setup.dt = period / std::ceil(period / setup.dt);
            }
            const auto r = simulate_perturbation(g, m, noise, setup.dt, setup.horizon, p.trials, 1);
            const double analytic = predict_variance(g, p.sigma).var_pos[0];
            CellOutput out;
            out.rows.push_back(noise_csv_row(g, m, noise, r));
            out.metrics = {{"empirical_var", r.variance}, {"analytic_var", analytic}, {"ratio", r.variance / analytic}};
            return out;
          }};
}

inline CellRunner noisy_replay(const Experiment& ex, const NoisyReplayParams& p) {
  const auto demos = build_demos(ex.plant, p.demo, ex.root_seed());
  return {"kp,kd,sigma,hold_rate,goal_rate,clean_goal,rms_deviation", [&ex, p, demos](std::size_t i) {
            const auto g = cell_gains(ex, i, p.demo.gravity_comp);
            double goal = 0.0, clean = 0.0, rms = 0.0;
            for (std::size_t d = 0; d < demos.size(); ++d) {
              const auto noise = NoiseSpec::held(p.sigma, p.hold_rate, derive_seed(derive_seed(ex.root_seed(), i), d));
              const auto r = noisy_openloop_replay(tpr_joint(demos[d], g), ex.plant, noise, p.trials, 1);
              goal += r.goal_rate, clean += r.clean_goal, rms += r.rms_deviation;
            }
            const double n = static_cast<double>(demos.size());
            CellOutput out;
            out.rows.push_back(fmt9(g.kp[0]) + "," + fmt9(g.kd[0]) + "," + fmt9(p.sigma) + "," + fmt9(p.hold_rate) + "," +
                               fmt9(goal / n) + "," + fmt9(clean / n) + "," + fmt9(rms / n));
            out.metrics = {{"goal_rate", goal / n}, {"rms_deviation", rms / n}};
            return out;
          }};
}

inline CellRunner sysid_sweep(const Experiment& ex, const SysidSweepParams& p) {
  return {sysid_csv_header(ex.plant, p.fit_gains), [&ex, p](std::size_t i) {
            const auto g = cell_gains(ex, i);
            const Vector q0 = Eigen::Map<const Vector>(p.q0.data(), static_cast<Eigen::Index>(p.q0.size()));
            const auto reference = excite(ex.plant, g, q0, p.excite);
            CmaesConfig cfg;
            cfg.max_iterations = p.iterations;
            cfg.sigma0 = p.sigma0;
            cfg.population = p.population;
            cfg.seed = derive_seed(ex.root_seed(), i);
            SysidOptions opt;
            opt.excite = p.excite;
            opt.fit_gains = p.fit_gains;
            opt.workers = 1;
            const auto fit = identify(reference, ex.plant, g, p.bounds, cfg, opt);
            CellOutput out;
            out.rows.push_back(sysid_csv_row(g, fit, p.fit_gains));
            out.metrics = {{"final_loss", fit.loss}};
            std::ostringstream history;
            write_sysid_history(history, fit);
            out.files.push_back({"cells/sysid_history_" + cell_tag(i) + ".csv", history.str()});
            return out;
          }};
}

inline CellRunner shape_search_cells(const Experiment& ex, const ShapeSearchParams& p) {
  return {"kp,kd,J,success,best_trial,alpha1,alpha2,beta,gamma", [&ex, p](std::size_t i) {
            ToyShapingTask task;
            task.plant = ex.plant;
            task.gains = cell_gains(ex, i);
            task.episodes = p.episodes;
            task.control_rate = p.control_rate;
            task.physics_rate = p.physics_rate;
            task.duration = p.duration;
            task.seed = derive_seed(ex.root_seed(), 2 * i);
            SearchSpace space;
            space.alpha_groups = p.alpha_groups;
            const auto res = shape_search([&task](const ActionMapping& h) { return task.evaluate(h); }, space, p.budget,
                                          p.strategy, derive_seed(ex.root_seed(), 2 * i + 1), 1);
            const auto& best = res.best;
            const auto& eval = res.ledger[res.best_trial].eval;
            CellOutput out;
            out.rows.push_back(fmt9(task.gains.kp[0]) + "," + fmt9(task.gains.kd[0]) + "," + fmt9(res.objective) + "," +
                               fmt9(eval.success) + "," + std::to_string(res.best_trial) + "," + fmt9(best.alpha[0]) +
                               "," + (best.alpha.size() > 1 ? fmt9(best.alpha[1]) : "") + "," + fmt9(best.beta) + "," +
                               fmt9(best.gamma));
            out.metrics = {{"J", res.objective}, {"success", eval.success}};
            std::ostringstream ledger;
            write_shaping_ledger(ledger, res);
            out.files.push_back({"cells/shaping_ledger_" + cell_tag(i) + ".csv", ledger.str()});
            return out;
          }};
}

inline CellRunner compliance_probe(const Experiment& ex, const ComplianceParams& p) {
  return {"kp,kd,k_eff,k_expected", [&ex, p](std::size_t i) {
            const auto g = cell_gains(ex, i);
            const auto n = static_cast<Eigen::Index>(ex.plant.dof());
            const Vector q0 = Vector::Zero(n);
            Vector force = Vector::Zero(n);
            force[0] = p.force;
            ProbeOptions opt;
            opt.dt = p.dt;
            const double k = effective_stiffness(ex.plant, g, q0, proportional_policy(q0, p.k_pol), force, p.settle_time, opt);
            const double expected = g.kp[0] * (1.0 + p.k_pol);
            CellOutput out;
            out.rows.push_back(fmt9(g.kp[0]) + "," + fmt9(g.kd[0]) + "," + fmt9(k) + "," + fmt9(expected));
            out.metrics = {{"k_eff", k}};
            return out;
          }};
}

inline CellRunner jitter_scan(const Experiment& ex, const JitterParams& p) {
  return {"kp,kd,max_std,jitter", [&ex, p](std::size_t i) {
            const auto g = cell_gains(ex, i);
            const auto n = static_cast<Eigen::Index>(ex.plant.dof());
            std::mt19937_64 rng(derive_seed(ex.root_seed(), i));
            std::normal_distribution<double> normal(0.0, 1.0);
            const TargetPolicy policy = [&](const State&, std::size_t) {
              Vector target = Vector::Constant(n, p.step);
              if (p.sigma > 0.0)
                for (Eigen::Index j = 0; j < n; ++j) target[j] += p.sigma * normal(rng);
              return target;
            };
            RolloutOptions opt;
            opt.dt = 1.0 / p.physics_rate;
            opt.steps = static_cast<std::size_t>(std::llround(p.duration * p.physics_rate));
            opt.hold = static_cast<std::size_t>(std::llround(p.physics_rate / p.policy_rate));
            opt.apply_limits = true;
            const auto run = rollout(ex.plant, g, State::rest(ex.plant.dof()), policy, opt);
            const auto j = jitter_detect(run.trajectory, p.window, p.threshold);
            CellOutput out;
            out.rows.push_back(fmt9(g.kp[0]) + "," + fmt9(g.kd[0]) + "," + fmt9(j.max_std) + "," + (j.jitter ? "1" : "0"));
            out.metrics = {{"max_std", j.max_std}, {"jitter", j.jitter ? 1.0 : 0.0}};
            return out;
          }};
}

inline std::string wald_row(const std::string& test, double beta, double se, double alpha_adj) {
  StatsReport r;
  r.test = test;
  r.region = "all";
  r.statistic = se > 0.0 ? beta / se : 0.0;
  r.p = std::min(1.0, 2.0 * normal_sf(std::abs(r.statistic)));
  r.alpha_adj = alpha_adj;
  r.reject = r.p < alpha_adj;
  return stats_csv_row(r);
}

inline std::vector<std::pair<std::string, std::string>> stats_report(const StatsReportParams& p) {
  const auto rows = read_sweep_csv(p.input);
  const auto rep = region_test(rows, p.region, p.metric, p.alpha, p.comparisons, p.side);
  std::ostringstream csv, text;
  csv << stats_csv_header() << '\n' << stats_csv_row(rep) << '\n';
  text << "cells: " << rows.size() << "\n";
  text << rep.test << " (" << to_string(p.side) << ", region " << rep.region << " vs rest): statistic "
       << fmt9(rep.statistic) << ", p " << fmt9(rep.p) << ", alpha_adj " << fmt9(rep.alpha_adj) << ", "
       << (rep.reject ? "reject H0" : "retain H0") << "\n";
  const bool success = p.metric == Metric::Success;
  std::optional<RegressionFit> fit;
  try {
    fit = success ? logistic_fit(rows) : ols_log_fit(rows);
  } catch (const InvalidArgument& e) {
    text << (success ? "logistic" : "ols") << " regression skipped: " << e.what() << "\n";
  }
  if (fit) {
    const std::string name = success ? "logistic" : "ols";
    csv << wald_row(name + "_kp", fit->beta[1], fit->se[1], rep.alpha_adj) << '\n';
    csv << wald_row(name + "_kd", fit->beta[2], fit->se[2], rep.alpha_adj) << '\n';
    text << name << " on (1, log2 Kp, log2 Kd):\n";
    const char* labels[] = {"intercept", "log2_kp", "log2_kd"};
    for (int k = 0; k < 3; ++k) text << "  " << labels[k] << " " << fmt9(fit->beta[k]) << " (se " << fmt9(fit->se[k]) << ")\n";
    for (const auto& w : fit->warnings) text << "  warning: " << w << "\n";
  }
  return {{"report.csv", csv.str()}, {"summary.txt", text.str()}};
}

inline CellRunner cell_runner(const Experiment& ex) {
  return std::visit(
      [&ex](const auto& p) -> CellRunner {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, TprSweepParams>) return tpr_sweep(ex, p);
        else if constexpr (std::is_same_v<P, VarianceParams>) return variance_check(ex, p);
        else if constexpr (std::is_same_v<P, NoisyReplayParams>) return noisy_replay(ex, p);
        else if constexpr (std::is_same_v<P, SysidSweepParams>) return sysid_sweep(ex, p);
        else if constexpr (std::is_same_v<P, ShapeSearchParams>) return shape_search_cells(ex, p);
        else if constexpr (std::is_same_v<P, ComplianceParams>) return compliance_probe(ex, p);
        else if constexpr (std::is_same_v<P, JitterParams>) return jitter_scan(ex, p);
        else throw InvalidArgument("experiment kind has no per-cell runner");
      },
      ex.params);
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace detail

// Runs a validated experiment and writes its artifacts. Exit code 0 on
// success, 1 on validation errors, 2 when any cell or file operation fails.
inline RunResult run_experiment(const RawConfig& raw, std::optional<std::uint64_t> seed_override = {},
                                const std::string& out_override = "", std::optional<std::size_t> workers_override = {}) {
  RunResult result;
  Experiment ex;
  result.findings = validate(raw, &ex);
  if (seed_override) ex.seed = seed_override;
  if (!out_override.empty()) ex.out_dir = out_override;
  if (workers_override) ex.workers = *workers_override;
  if (ex.out_dir.empty()) result.findings.push_back({Finding::Severity::Error, "experiment.out", "output directory is required"});
  if (!has_errors(result.findings) && ex.stochastic() && !ex.seed)
    result.findings.push_back({Finding::Severity::Error, "experiment.seed", "root seed is required for stochastic runs"});
  if (has_errors(result.findings)) {
    result.exit_code = 1;
    return result;
  }

  std::vector<std::pair<std::string, std::string>> files;
  std::vector<std::string> failures;
  try {
    if (ex.kind == ExperimentKind::StatsReport) {
      files = detail::stats_report(std::get<StatsReportParams>(ex.params));
    } else {
      const auto runner = detail::cell_runner(ex);
      const std::size_t n = ex.grid.size();
      result.cells = n;
      std::vector<std::optional<CellOutput>> outputs(n);
      std::vector<std::string> errors(n);
      parallel_for(
          n,
          [&](std::size_t i) {
            try {
              outputs[i] = runner.run(i);
            } catch (const std::exception& e) {
              errors[i] = e.what();
            }
          },
          ex.workers);

      std::string results = runner.header + "\n";
      std::vector<std::string> metric_order;
      std::map<std::string, std::string> heatmaps;
      for (std::size_t i = 0; i < n; ++i) {
        const auto cell = ex.grid.cell(i);
        if (!outputs[i]) {
          failures.push_back(std::to_string(i) + "," + fmt9(cell.kp) + "," + fmt9(cell.kd) + "," + errors[i]);
          continue;
        }
        for (const auto& row : outputs[i]->rows) results += row + "\n";
        for (const auto& m : outputs[i]->metrics) {
          if (!heatmaps.count(m.name)) {
            metric_order.push_back(m.name);
            heatmaps[m.name] = "kp,kd,value\n";
          }
          heatmaps[m.name] += fmt9(cell.kp) + "," + fmt9(cell.kd) + "," + fmt9(m.value) + "\n";
        }
        for (auto& f : outputs[i]->files) files.push_back(std::move(f));
      }
      files.insert(files.begin(), {"results.csv", results});
      for (const auto& name : metric_order) files.push_back({"heatmap_" + name + ".csv", heatmaps[name]});
    }
  } catch (const std::exception& e) {
    failures.push_back("-,,," + std::string(e.what()));
  }
  if (!failures.empty()) {
    std::string ledger = "cell,kp,kd,error\n";
    for (auto f : failures) {
      std::replace(f.begin(), f.end(), '\n', ' ');
      ledger += f + "\n";
    }
    files.push_back({"failures.csv", ledger});
  }
  result.failures = failures.size();

  const std::filesystem::path root(ex.out_dir);
  nlohmann::json manifest;
  manifest["kind"] = to_string(ex.kind);
  manifest["seed"] = ex.seed ? nlohmann::json(*ex.seed) : nlohmann::json(nullptr);
  manifest["config"] = ex.config_text;
  manifest["config_sha256"] = sha256_hex(ex.config_text);
  manifest["cells"] = result.cells;
  manifest["failures"] = result.failures;
  manifest["files"] = nlohmann::json::array();
  try {
    for (const auto& [rel, content] : files) {
      detail::write_text(root / rel, content);
      manifest["files"].push_back({{"path", rel}, {"sha256", sha256_hex(content)}, {"bytes", content.size()}});
      result.files.push_back(rel);
    }
    result.manifest_path = (root / "manifest.json").string();
    detail::write_text(root / "manifest.json", manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    result.findings.push_back({Finding::Severity::Error, "experiment.out", e.what()});
    result.exit_code = 2;
    return result;
  }
  result.exit_code = failures.empty() ? 0 : 2;
  return result;
}

}  // namespace gainlab

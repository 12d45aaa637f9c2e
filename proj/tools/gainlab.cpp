// gainlab command-line runner.

#include <CLI11.hpp>

#include <iostream>

#include "gainlab/experiment.hpp"

namespace {

using gainlab::Ptree;

struct Common {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* app, Common& c, bool with_out = true) {
  app->add_option("--seed", c.seed, "Root seed");
  if (with_out) app->add_option("--out", c.out, "Output directory");
  app->add_option("--workers", c.workers, "Worker threads (default: GAINLAB_WORKERS or all cores)")->check(CLI::PositiveNumber);
}

void print_findings(const std::vector<gainlab::Finding>& findings) {
  for (const auto& f : findings) std::cerr << f.str() << '\n';
}

int finish(const gainlab::RunResult& r) {
  print_findings(r.findings);
  if (r.exit_code == 1) return 1;
  for (const auto& f : r.files) std::cout << f << '\n';
  if (!r.manifest_path.empty()) std::cout << "manifest: " << r.manifest_path << '\n';
  if (r.failures) std::cerr << r.failures << " cell(s) failed; see failures.csv\n";
  return r.exit_code;
}

Ptree experiment_section(const std::string& kind) {
  Ptree t;
  t.put("experiment.kind", kind);
  return t;
}

// Copies every key of `section` from a file into the tree.
void merge_section(Ptree& tree, const std::string& path, const std::string& section) {
  const auto raw = gainlab::load_config(path);
  const auto child = raw.tree.get_child_optional(section);
  if (!child) throw gainlab::ConfigError(section, path + " has no [" + section + "] section");
  tree.put_child(section, *child);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gain-regime experiments for PD-controlled joints"};
  app.require_subcommand(1);

  Common common;
  std::string config_path;

  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("--config", config_path, "Experiment config (INI)")->required();
  add_common(run, common);

  auto* val = app.add_subcommand("validate", "Check a config file and list findings");
  val->add_option("--config", config_path, "Experiment config (INI)")->required();

  std::string grid_path, bounds_path, plant_path;
  std::size_t iters = 200;
  double sigma0 = 3.0;
  auto* sysid = app.add_subcommand("sysid", "Identify plant parameters at every gain cell");
  sysid->add_option("--grid", grid_path, "File with a [grid] section")->required();
  sysid->add_option("--bounds", bounds_path, "Parameter bounds CSV (name,lower,upper)");
  sysid->add_option("--plant", plant_path, "File with a [plant] section (default: unit point mass)");
  sysid->add_option("--iters", iters, "CMA-ES iterations")->check(CLI::PositiveNumber);
  sysid->add_option("--sigma0", sigma0, "Initial CMA-ES step size");
  add_common(sysid, common);

  std::string gains;
  std::size_t budget = 40;
  std::string strategy = "cmaes";
  auto* shape = app.add_subcommand("shape", "Search action mappings for one gain cell");
  shape->add_option("--gains", gains, "Gain cell as kp,kd")->required();
  shape->add_option("--budget", budget, "Evaluation budget")->check(CLI::PositiveNumber);
  shape->add_option("--strategy", strategy, "random or cmaes");
  add_common(shape, common);

  std::string input, metric = "success", region = "CO", side = "greater";
  double alpha = 0.05;
  std::size_t comparisons = 1;
  auto* stats = app.add_subcommand("stats", "Test a region of a sweep CSV against the rest");
  stats->add_option("--input", input, "Sweep CSV (kp,kd,successes,trials,scalar_error,region)")->required();
  stats->add_option("--metric", metric, "success or error");
  stats->add_option("--region", region, "CO, SO, CU or SU");
  stats->add_option("--side", side, "greater or less");
  stats->add_option("--alpha", alpha, "Family-wise alpha");
  stats->add_option("--comparisons", comparisons, "Bonferroni comparison count");
  add_common(stats, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*val) {
      const auto findings = gainlab::validate(gainlab::load_config(config_path));
      print_findings(findings);
      if (findings.empty()) std::cout << "ok\n";
      return gainlab::has_errors(findings) ? 1 : 0;
    }
    if (*run) return finish(gainlab::run_experiment(gainlab::load_config(config_path), common.seed, common.out, common.workers));

    Ptree tree;
    if (*sysid) {
      tree = experiment_section("sysid-sweep");
      merge_section(tree, grid_path, "grid");
      if (!plant_path.empty()) merge_section(tree, plant_path, "plant");
      tree.put("sysid-sweep.iterations", iters);
      tree.put("sysid-sweep.sigma0", sigma0);
      if (!bounds_path.empty()) tree.put("sysid-sweep.bounds", bounds_path);
    } else if (*shape) {
      const auto parts = gainlab::split(gains, ',');
      if (parts.size() != 2) throw gainlab::ConfigError("gains", "expected kp,kd");
      tree = experiment_section("shape-search");
      tree.put("grid.kp", parts[0]);
      tree.put("grid.kd", parts[1]);
      tree.put("shape-search.budget", budget);
      tree.put("shape-search.strategy", strategy);
    } else if (*stats) {
      tree = experiment_section("stats-report");
      tree.put("stats-report.input", input);
      tree.put("stats-report.metric", metric);
      tree.put("stats-report.region", region);
      tree.put("stats-report.side", side);
      tree.put("stats-report.alpha", alpha);
      tree.put("stats-report.comparisons", comparisons);
    }
    return finish(gainlab::run_experiment(gainlab::config_from_tree(tree), common.seed, common.out, common.workers));
  } catch (const gainlab::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

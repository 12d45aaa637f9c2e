#include <gtest/gtest.h>

#include <filesystem>

#include "gainlab/experiment.hpp"

using namespace gainlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("gainlab_experiment_test_" + name);
  fs::remove_all(p);
  return p;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

bool mentions(const std::vector<Finding>& findings, const std::string& key, const std::string& text = "") {
  return std::any_of(findings.begin(), findings.end(), [&](const Finding& f) {
    return f.key == key && f.message.find(text) != std::string::npos;
  });
}

const char* kVariance = R"([experiment]
kind = variance-check
seed = 7

[plant]
kind = point-mass
inertia = 1.0

[grid]
kp = 16, 64, 256
kd = 4, 16, 64

[variance-check]
sigma = 1.0
trials = 20
)";

}  // namespace

TEST(Config, PlantSectionRoundTrip) {
  std::vector<Finding> findings;
  const auto raw = parse_config_text(R"([plant]
kind = chain
joints = 3
inertia = 1.0, 2.0, 3.0
armature = 0.1
viscous = 0.2
static_friction = 0.05
friction_ratio = 0.5
torque_limit = 40
)");
  const auto p = read_plant(raw.tree, findings);
  EXPECT_TRUE(findings.empty());
  EXPECT_EQ(p.kind, PlantKind::DecoupledChain);
  ASSERT_EQ(p.dof(), 3u);
  EXPECT_DOUBLE_EQ(p.inertia[2], 3.0);
  EXPECT_DOUBLE_EQ(p.armature[1], 0.1);
  EXPECT_DOUBLE_EQ(p.dynamic_friction_ratio[0], 0.5);
  EXPECT_DOUBLE_EQ(p.torque_limit[2], 40.0);
  EXPECT_DOUBLE_EQ(p.passive_stiffness[0], 0.0);
}

TEST(Config, TwoLinkInertiaFollowsLinks) {
  std::vector<Finding> findings;
  const auto p = read_plant(parse_config_text("[plant]\nkind = two-link\nlink_lengths = 0.5, 0.4\nlink_masses = 2, 1\n").tree,
                            findings);
  EXPECT_TRUE(findings.empty());
  const auto ref = PlantParams::two_link({0.5, 0.4}, {2.0, 1.0}, false);
  EXPECT_DOUBLE_EQ(p.inertia[0], ref.inertia[0]);
  EXPECT_DOUBLE_EQ(p.inertia[1], ref.inertia[1]);
}

TEST(Config, GridOrderAndDefaults) {
  std::vector<Finding> findings;
  const auto g = read_grid(parse_config_text("[grid]\nkp = 16, 32\nkd = 2, 4, 8\n").tree, findings);
  EXPECT_TRUE(findings.empty());
  EXPECT_EQ(g.size(), 6u);
  EXPECT_DOUBLE_EQ(g.cell(1).kp, 32.0);
  EXPECT_DOUBLE_EQ(g.cell(2).kd, 4.0);
  EXPECT_EQ(read_grid(Ptree{}, findings).size(), 49u);
}

TEST(Validate, ValidConfigHasNoFindings) { EXPECT_TRUE(validate(parse_config_text(kVariance)).empty()); }

TEST(Validate, EmptyGrid) {
  const auto f = validate(parse_config_text("[experiment]\nkind = variance-check\n[grid]\nkp =\nkd = 2\n"));
  EXPECT_TRUE(mentions(f, "grid", "grid must be non-empty"));
}

TEST(Validate, CoarseStepIsAResolutionFinding) {
  std::string text = kVariance;
  text += "dt = 0.01\n";
  const auto f = validate(parse_config_text(text));
  // omega_n = 16 at Kp = 256, so omega_n dt = 0.16.
  EXPECT_TRUE(mentions(f, "variance-check.dt", "resolution"));
  EXPECT_TRUE(has_errors(f));
  text = kVariance;
  text += "dt = 0.005\n";
  EXPECT_TRUE(validate(parse_config_text(text)).empty());
}

TEST(Validate, NamesOffendingKeys) {
  EXPECT_TRUE(mentions(validate(parse_config_text("[experiment]\nkind = warp-drive\n")), "experiment.kind"));
  EXPECT_TRUE(mentions(validate(parse_config_text("[experiment]\nkind = tpr-sweep\n[tpr-sweep]\ndemoz = 2\n")),
                       "tpr-sweep.demoz", "unknown key"));
  EXPECT_TRUE(mentions(validate(parse_config_text("[experiment]\nkind = tpr-sweep\n[tpr-sweep]\ndecimations = 1, 2.5\n")),
                       "tpr-sweep.decimations"));
  EXPECT_TRUE(mentions(validate(parse_config_text("[experiment]\nkind = noisy-replay\n[noisy-replay]\nhold_rate = 70\n")),
                       "noisy-replay.hold_rate"));
  EXPECT_TRUE(mentions(validate(parse_config_text("[experiment]\nkind = shape-search\n[plant]\nkind = chain\njoints = 2\n")),
                       "shape-search.plant"));
  EXPECT_TRUE(mentions(validate(parse_config_text("[experiment]\nkind = jitter-scan\n[plant]\ninertia = -1\n")), "plant"));
  EXPECT_TRUE(mentions(validate(parse_config_text("[experiment]\nkind = jitter-scan\n[extras]\nx = 1\n")), "extras"));
  EXPECT_TRUE(mentions(validate(parse_config_text("[experiment]\nkind = stats-report\n")), "stats-report.input"));
  EXPECT_THROW(parse_config_text("[experiment\nkind = x\n"), ConfigError);
}

TEST(Run, VarianceCheckWritesNineRowsAndHeatmaps) {
  const auto out = scratch("variance");
  const auto r = run_experiment(parse_config_text(kVariance), {}, out.string());
  ASSERT_EQ(r.exit_code, 0);
  const auto results = read_file((out / "results.csv").string());
  EXPECT_EQ(line_count(results), 10u);
  EXPECT_EQ(results.substr(0, results.find('\n')), "kp,kd,mass,sigma,mode,empirical_var,stderr,analytic_var");
  const auto heat = read_file((out / "heatmap_analytic_var.csv").string());
  EXPECT_EQ(heat.substr(0, heat.find('\n')), "kp,kd,value");
  EXPECT_NE(heat.find("\n64,4,8\n"), std::string::npos);  // Kp / (2 Kd) with sigma = 1
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST(Run, ManifestListsEveryFileWithItsHash) {
  const auto out = scratch("manifest");
  const auto r = run_experiment(parse_config_text(kVariance), {}, out.string());
  ASSERT_EQ(r.exit_code, 0);
  const auto m = nlohmann::json::parse(read_file((out / "manifest.json").string()));
  EXPECT_EQ(m["seed"], 7);
  EXPECT_EQ(m["config"], kVariance);
  std::size_t listed = 0;
  for (const auto& f : m["files"]) {
    EXPECT_EQ(f["sha256"], sha256_file((out / f["path"].get<std::string>()).string()));
    ++listed;
  }
  std::size_t on_disk = 0;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") ++on_disk;
  EXPECT_EQ(listed, on_disk);
}

TEST(Run, DeterministicAcrossWorkerCounts) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  ASSERT_EQ(run_experiment(parse_config_text(kVariance), {}, a.string(), 1).exit_code, 0);
  ASSERT_EQ(run_experiment(parse_config_text(kVariance), {}, b.string(), 4).exit_code, 0);
  EXPECT_EQ(read_file((a / "manifest.json").string()), read_file((b / "manifest.json").string()));
  EXPECT_EQ(read_file((a / "results.csv").string()), read_file((b / "results.csv").string()));
}

TEST(Run, SeedChangesStochasticOutput) {
  const auto a = scratch("seed_a"), b = scratch("seed_b");
  ASSERT_EQ(run_experiment(parse_config_text(kVariance), 1, a.string()).exit_code, 0);
  ASSERT_EQ(run_experiment(parse_config_text(kVariance), 2, b.string()).exit_code, 0);
  EXPECT_NE(read_file((a / "results.csv").string()), read_file((b / "results.csv").string()));
}

TEST(Run, ValidationFailureExitsOneWithoutWriting) {
  const auto out = scratch("invalid");
  std::string text = kVariance;
  text += "dt = 0.05\n";
  const auto r = run_experiment(parse_config_text(text), {}, out.string());
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_FALSE(fs::exists(out));
  const auto no_seed = run_experiment(parse_config_text("[experiment]\nkind = jitter-scan\n"), {}, out.string());
  EXPECT_EQ(no_seed.exit_code, 1);
  EXPECT_TRUE(mentions(no_seed.findings, "experiment.seed"));
}

TEST(Run, PartialFailureWritesLedger) {
  const auto out = scratch("partial");
  // Soft, lightly damped cells cannot settle within 2 s; stiff, damped ones can.
  const auto r = run_experiment(parse_config_text(R"([experiment]
kind = compliance-probe
[grid]
kp = 1, 400
kd = 0.2, 40
[compliance-probe]
settle_time = 2
)"),
                                {}, out.string());
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_GT(r.failures, 0u);
  EXPECT_LT(r.failures, 4u);
  const auto ledger = read_file((out / "failures.csv").string());
  EXPECT_EQ(ledger.substr(0, ledger.find('\n')), "cell,kp,kd,error");
  EXPECT_EQ(line_count(read_file((out / "results.csv").string())), 1u + 4u - r.failures);
}

TEST(Run, TprSweepProtocolShape) {
  const auto out = scratch("tpr");
  const auto r = run_experiment(parse_config_text(R"([experiment]
kind = tpr-sweep
seed = 1
[plant]
kind = chain
joints = 2
[grid]
kp = 64, 256
kd = 8
)"),
                                {}, out.string());
  ASSERT_EQ(r.exit_code, 0);
  const auto results = read_file((out / "results.csv").string());
  EXPECT_EQ(results.substr(0, results.find('\n')), "kp,kd,decimation,mse,goal_reached");
  EXPECT_EQ(line_count(results), 1u + 2u * 4u);
  for (const char* d : {"1", "10", "25", "50"}) EXPECT_TRUE(fs::exists(out / ("heatmap_mse_x" + std::string(d) + ".csv")));
}

TEST(Run, StatsReportFromSweepCsv) {
  const auto out = scratch("stats");
  fs::create_directories(out);
  std::ofstream(out / "sweep.csv") << "kp,kd,successes,trials,scalar_error,region\n"
                                      "16,8,90,100,,CO\n32,16,85,100,,CO\n64,32,88,100,,CO\n"
                                      "1024,2,30,100,,SU\n512,4,35,100,,SU\n256,128,40,100,,SO\n";
  Ptree t;
  t.put("experiment.kind", "stats-report");
  t.put("stats-report.input", (out / "sweep.csv").string());
  t.put("stats-report.comparisons", 6);
  const auto r = run_experiment(config_from_tree(t), {}, (out / "report").string());
  ASSERT_EQ(r.exit_code, 0);
  const auto report = read_file((out / "report" / "report.csv").string());
  EXPECT_EQ(report.substr(0, report.find('\n')), "test,region,statistic,p,alpha_adj,reject");
  EXPECT_NE(report.find("\nbarnard,CO,"), std::string::npos);
  EXPECT_NE(read_file((out / "report" / "summary.txt").string()).find("reject H0"), std::string::npos);
}

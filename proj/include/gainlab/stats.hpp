#pragma once

// Hypothesis tests and regressions over gain-sweep outcome tables.

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gainlab/control.hpp"
#include "gainlab/trajectory.hpp"

namespace gainlab {

enum class Side { Greater, Less };

inline std::string to_string(Side s) { return s == Side::Greater ? "greater" : "less"; }

inline Side parse_side(const std::string& s) {
  if (s == "greater") return Side::Greater;
  if (s == "less") return Side::Less;
  throw InvalidArgument("side must be greater or less: " + s);
}

struct SweepOutcome {
  double kp = 0.0;
  double kd = 0.0;
  long successes = 0;
  long trials = 0;
  std::optional<double> scalar_error;
  Regime region = Regime::CO;

  void validate() const {
    require(kp > 0.0 && kd > 0.0, "gains must be positive");
    require(trials >= 0 && successes >= 0 && successes <= trials, "need 0 <= successes <= trials");
    require(!scalar_error || *scalar_error >= 0.0, "scalar error must be >= 0");
  }
};

// --- Normal helpers ----------------------------------------------------------

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

// --- Bonferroni --------------------------------------------------------------

inline double bonferroni(double alpha, std::size_t m) {
  require(m >= 1, "need at least one comparison");
  require(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
  return alpha / static_cast<double>(m);
}

// --- Barnard's exact test ------------------------------------------------------

// Score statistic for x1/n1 against x2/n2 with pooled variance; zero when the
// pooled proportion is 0 or 1.
inline double pooled_score(long x1, long n1, long x2, long n2) {
  const double p = static_cast<double>(x1 + x2) / static_cast<double>(n1 + n2);
  if (p <= 0.0 || p >= 1.0) return 0.0;
  const double se = std::sqrt(p * (1.0 - p) * (1.0 / static_cast<double>(n1) + 1.0 / static_cast<double>(n2)));
  return (static_cast<double>(x1) / static_cast<double>(n1) - static_cast<double>(x2) / static_cast<double>(n2)) / se;
}

namespace detail {

inline std::vector<double> binomial_pmf_all(long n, double pi) {
  std::vector<double> out(static_cast<std::size_t>(n + 1), 0.0);
  if (pi <= 0.0) {
    out[0] = 1.0;
    return out;
  }
  if (pi >= 1.0) {
    out.back() = 1.0;
    return out;
  }
  const double lp = std::log(pi), lq = std::log1p(-pi), lgn = std::lgamma(static_cast<double>(n) + 1.0);
  for (long k = 0; k <= n; ++k) {
    const double kd = static_cast<double>(k);
    out[static_cast<std::size_t>(k)] = std::exp(lgn - std::lgamma(kd + 1.0) - std::lgamma(static_cast<double>(n - k) + 1.0) +
                                                kd * lp + static_cast<double>(n - k) * lq);
  }
  return out;
}

// Tables at least as extreme as the observed one, stored per x1 as runs of x2.
struct TailRegion {
  long n1, n2;
  std::vector<std::vector<std::pair<long, long>>> runs;  // inclusive [lo, hi]

  double probability(double pi) const {
    const auto p1 = binomial_pmf_all(n1, pi);
    const auto p2 = binomial_pmf_all(n2, pi);
    std::vector<double> cum(p2.size() + 1, 0.0);
    for (std::size_t i = 0; i < p2.size(); ++i) cum[i + 1] = cum[i] + p2[i];
    double total = 0.0;
    for (long x1 = 0; x1 <= n1; ++x1) {
      double inner = 0.0;
      for (const auto& [lo, hi] : runs[static_cast<std::size_t>(x1)])
        inner += cum[static_cast<std::size_t>(hi + 1)] - cum[static_cast<std::size_t>(lo)];
      total += p1[static_cast<std::size_t>(x1)] * inner;
    }
    return std::min(1.0, total);
  }
};

inline TailRegion tail_region(long x1o, long n1, long x2o, long n2, Side side) {
  const double sign = side == Side::Greater ? 1.0 : -1.0;
  const double observed = sign * pooled_score(x1o, n1, x2o, n2);
  TailRegion r{n1, n2, std::vector<std::vector<std::pair<long, long>>>(static_cast<std::size_t>(n1 + 1))};
  for (long x1 = 0; x1 <= n1; ++x1) {
    auto& runs = r.runs[static_cast<std::size_t>(x1)];
    long start = -1;
    for (long x2 = 0; x2 <= n2 + 1; ++x2) {
      const bool in = x2 <= n2 && sign * pooled_score(x1, n1, x2, n2) >= observed - 1e-9;
      if (in && start < 0) start = x2;
      if (!in && start >= 0) {
        runs.emplace_back(start, x2 - 1);
        start = -1;
      }
    }
  }
  return r;
}

}  // namespace detail

struct BarnardResult {
  double statistic = 0.0;
  double p = 1.0;
  double nuisance = 0.0;  // maximizing pi
};

// Table [[a, b], [c, d]]: group 1 has a successes and b failures, group 2 has
// c successes and d failures. Greater tests p1 > p2. The p-value is maximized
// over the nuisance proportion on a 2001-point grid followed by golden-section
// refinement around the best grid point.
inline BarnardResult barnard_exact(long a, long b, long c, long d, Side side) {
  require(a >= 0 && b >= 0 && c >= 0 && d >= 0, "counts must be non-negative");
  const long n1 = a + b, n2 = c + d;
  require(n1 > 0 && n2 > 0, "both groups need at least one trial");
  const auto region = detail::tail_region(a, n1, c, n2, side);
  BarnardResult out;
  out.statistic = pooled_score(a, n1, c, n2);
  const int grid = 2001;
  int best = 0;
  out.p = -1.0;
  for (int i = 0; i < grid; ++i) {
    const double pi = static_cast<double>(i) / (grid - 1);
    const double p = region.probability(pi);
    if (p > out.p) {
      out.p = p;
      out.nuisance = pi;
      best = i;
    }
  }
  double lo = std::max(0.0, (best - 1.0) / (grid - 1)), hi = std::min(1.0, (best + 1.0) / (grid - 1));
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
  double f1 = region.probability(x1), f2 = region.probability(x2);
  for (int it = 0; it < 60; ++it) {
    if (f1 < f2) {
      lo = x1, x1 = x2, f1 = f2;
      x2 = lo + phi * (hi - lo);
      f2 = region.probability(x2);
    } else {
      hi = x2, x2 = x1, f2 = f1;
      x1 = hi - phi * (hi - lo);
      f1 = region.probability(x1);
    }
  }
  const double refined = std::max(f1, f2);
  if (refined > out.p) {
    out.p = refined;
    out.nuisance = f1 > f2 ? x1 : x2;
  }
  out.p = std::clamp(out.p, 0.0, 1.0);
  return out;
}

// --- Mann-Whitney U ------------------------------------------------------------

enum class MwMethod { Auto, Exact, Normal };

struct MannWhitneyResult {
  double u = 0.0;  // U of the first sample
  double p = 1.0;
  bool exact = false;
};

namespace detail {

// counts[u] = number of rank assignments with U = u, for sizes m and n.
inline std::vector<double> mann_whitney_counts(std::size_t m, std::size_t n) {
  std::vector<std::vector<std::vector<double>>> f(m + 1, std::vector<std::vector<double>>(n + 1));
  for (std::size_t i = 0; i <= m; ++i)
    for (std::size_t j = 0; j <= n; ++j) {
      auto& cur = f[i][j];
      cur.assign(i * j + 1, 0.0);
      if (i == 0 || j == 0) {
        cur[0] = 1.0;
        continue;
      }
      // The largest observation is either from the first sample (adds j) or the second.
      const auto& a = f[i - 1][j];
      const auto& b = f[i][j - 1];
      for (std::size_t u = 0; u < a.size(); ++u) cur[u + j] += a[u];
      for (std::size_t u = 0; u < b.size(); ++u) cur[u] += b[u];
    }
  return f[m][n];
}

}  // namespace detail

// Greater tests whether x tends to exceed y.
inline MannWhitneyResult mannwhitney_u(const std::vector<double>& x, const std::vector<double>& y, Side side,
                                       MwMethod method = MwMethod::Auto) {
  require(!x.empty() && !y.empty(), "both samples must be non-empty");
  const std::size_t n1 = x.size(), n2 = y.size(), n = n1 + n2;
  std::vector<std::pair<double, int>> all;
  all.reserve(n);
  for (double v : x) all.push_back({v, 0});
  for (double v : y) all.push_back({v, 1});
  std::sort(all.begin(), all.end());
  double rank_sum = 0.0, tie_term = 0.0;
  bool ties = false;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && all[j].first == all[i].first) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    const double t = static_cast<double>(j - i);
    if (t > 1) ties = true;
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second == 0) rank_sum += mid;
    i = j;
  }
  MannWhitneyResult out;
  out.u = rank_sum - static_cast<double>(n1) * (static_cast<double>(n1) + 1.0) / 2.0;

  const bool exact = method == MwMethod::Exact || (method == MwMethod::Auto && n1 * n2 <= 400 && !ties);
  if (exact) {
    require(!ties, "exact Mann-Whitney needs untied data");
    const auto counts = detail::mann_whitney_counts(n1, n2);
    double total = 0.0, tail = 0.0;
    const auto uo = static_cast<std::size_t>(std::llround(out.u));
    for (std::size_t u = 0; u < counts.size(); ++u) {
      total += counts[u];
      if (side == Side::Less ? u <= uo : u >= uo) tail += counts[u];
    }
    out.p = tail / total;
    out.exact = true;
    return out;
  }
  const double mu = static_cast<double>(n1 * n2) / 2.0;
  const double nd = static_cast<double>(n);
  const double var = static_cast<double>(n1 * n2) / 12.0 * ((nd + 1.0) - tie_term / (nd * (nd - 1.0)));
  if (var <= 0.0) {
    out.p = 1.0;
    return out;
  }
  const double sd = std::sqrt(var);
  out.p = side == Side::Less ? normal_cdf((out.u + 0.5 - mu) / sd) : normal_sf((out.u - 0.5 - mu) / sd);
  out.p = std::clamp(out.p, 0.0, 1.0);
  return out;
}

// --- Regressions ---------------------------------------------------------------

struct RegressionFit {
  Vector beta;  // intercept, log2 Kp, log2 Kd
  Vector se;
  std::size_t iterations = 0;
  bool converged = true;
  bool separated = false;
  std::vector<std::string> warnings;
};

namespace detail {

inline Matrix gain_design(const std::vector<SweepOutcome>& rows) {
  Matrix x(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = 1.0;
    x(r, 1) = std::log2(rows[i].kp);
    x(r, 2) = std::log2(rows[i].kd);
  }
  return x;
}

}  // namespace detail

// Binomial logistic regression of successes/trials on (1, log2 Kp, log2 Kd) by
// iteratively reweighted least squares.
inline RegressionFit logistic_fit(const std::vector<SweepOutcome>& rows) {
  require(!rows.empty(), "no outcomes");
  std::vector<std::pair<double, double>> cells;
  for (const auto& r : rows) {
    r.validate();
    require(r.trials > 0, "every cell needs trials");
    cells.push_back({r.kp, r.kd});
  }
  std::sort(cells.begin(), cells.end());
  require(std::unique(cells.begin(), cells.end()) - cells.begin() >= 3, "need at least three distinct gain cells");
  const Matrix x = detail::gain_design(rows);
  require(Eigen::ColPivHouseholderQR<Matrix>(x).rank() == 3, "design matrix is rank deficient");
  const auto n = x.rows();
  Vector y(n), m(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    y[i] = static_cast<double>(rows[static_cast<std::size_t>(i)].successes);
    m[i] = static_cast<double>(rows[static_cast<std::size_t>(i)].trials);
  }

  RegressionFit fit;
  fit.beta = Vector::Zero(3);
  fit.converged = false;
  Matrix info(3, 3);
  for (std::size_t it = 0; it < 100; ++it) {
    const Vector eta = x * fit.beta;
    const Vector mu = (1.0 / (1.0 + (-eta.array()).exp())).matrix();
    const Vector w = (m.array() * mu.array() * (1.0 - mu.array())).cwiseMax(1e-300).matrix();
    info = x.transpose() * w.asDiagonal() * x;
    const Vector score = x.transpose() * (y - (m.array() * mu.array()).matrix());
    const Vector step = info.ldlt().solve(score);
    fit.beta += step;
    fit.iterations = it + 1;
    if (!step.allFinite()) break;
    if (step.cwiseAbs().maxCoeff() < 1e-10) {
      fit.converged = true;
      break;
    }
  }
  const Vector eta = x * fit.beta;
  const Vector mu = (1.0 / (1.0 + (-eta.array()).exp())).matrix();
  const Vector w = (m.array() * mu.array() * (1.0 - mu.array())).matrix();
  info = x.transpose() * w.asDiagonal() * x;
  fit.se = info.inverse().diagonal().cwiseAbs().cwiseSqrt();
  fit.separated = !fit.converged || !fit.beta.allFinite() || fit.beta.cwiseAbs().maxCoeff() > 50.0 ||
                  (mu.array() * (1.0 - mu.array()) < 1e-12).any();
  if (fit.separated) fit.warnings.push_back("perfect or quasi-perfect separation; coefficients are not reliable");
  return fit;
}

// OLS of log(error) on (1, log2 Kp, log2 Kd).
inline RegressionFit ols_log_fit(const std::vector<SweepOutcome>& rows) {
  require(rows.size() > 3, "need more rows than coefficients");
  for (const auto& r : rows) {
    r.validate();
    require(r.scalar_error && *r.scalar_error > 0.0, "every row needs a positive scalar error");
  }
  const Matrix x = detail::gain_design(rows);
  const Eigen::ColPivHouseholderQR<Matrix> qr(x);
  require(qr.rank() == 3, "design matrix is rank deficient");
  // Regressing log e - log e_0 keeps a constant response exactly flat.
  const double y0 = std::log(*rows.front().scalar_error);
  Vector y(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) y[i] = std::log(*rows[static_cast<std::size_t>(i)].scalar_error) - y0;
  RegressionFit fit;
  fit.beta = qr.solve(y);
  const double rss = (y - x * fit.beta).squaredNorm();
  fit.beta[0] += y0;
  const double sigma2 = rss / static_cast<double>(x.rows() - 3);
  fit.se = (sigma2 * (x.transpose() * x).inverse().diagonal()).cwiseSqrt();
  fit.iterations = 1;
  return fit;
}

// --- Region tests ----------------------------------------------------------------

enum class Metric { Success, Error };

struct StatsReport {
  std::string test;
  std::string region;
  double statistic = 0.0;
  double p = 1.0;
  double alpha_adj = 0.05;
  bool reject = false;
};

// Region cells against the rest of the grid. Success uses Barnard on the pooled
// 2x2 table; error uses Mann-Whitney on per-cell errors.
inline StatsReport region_test(const std::vector<SweepOutcome>& rows, Regime region, Metric metric, double alpha,
                               std::size_t m, Side side) {
  std::vector<const SweepOutcome*> in, out;
  for (const auto& r : rows) {
    r.validate();
    (r.region == region ? in : out).push_back(&r);
  }
  require(!in.empty() && !out.empty(), "region and complement must both be non-empty");
  StatsReport rep;
  rep.region = to_string(region);
  rep.alpha_adj = bonferroni(alpha, m);
  if (metric == Metric::Success) {
    long a = 0, b = 0, c = 0, d = 0;
    for (const auto* r : in) a += r->successes, b += r->trials - r->successes;
    for (const auto* r : out) c += r->successes, d += r->trials - r->successes;
    const auto res = barnard_exact(a, b, c, d, side);
    rep.test = "barnard";
    rep.statistic = res.statistic;
    rep.p = res.p;
  } else {
    std::vector<double> x, y;
    for (const auto* r : in) {
      require(r->scalar_error.has_value(), "error metric needs scalar_error in every row");
      x.push_back(*r->scalar_error);
    }
    for (const auto* r : out) {
      require(r->scalar_error.has_value(), "error metric needs scalar_error in every row");
      y.push_back(*r->scalar_error);
    }
    const auto res = mannwhitney_u(x, y, side);
    rep.test = "mannwhitney";
    rep.statistic = res.u;
    rep.p = res.p;
  }
  rep.reject = rep.p < rep.alpha_adj;
  return rep;
}

// --- Files ---------------------------------------------------------------------

// kp,kd,successes,trials,scalar_error,region (scalar_error may be empty).
inline std::vector<SweepOutcome> read_sweep_csv(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "sweep file is empty");
  require(line == "kp,kd,successes,trials,scalar_error,region", "unexpected sweep header: " + line);
  std::vector<SweepOutcome> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    require(f.size() == 6, "sweep rows need six fields");
    SweepOutcome r;
    r.kp = std::stod(f[0]);
    r.kd = std::stod(f[1]);
    r.successes = std::stol(f[2]);
    r.trials = std::stol(f[3]);
    if (!f[4].empty()) r.scalar_error = std::stod(f[4]);
    r.region = parse_regime(f[5]);
    r.validate();
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<SweepOutcome> read_sweep_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read " + path);
  return read_sweep_csv(in);
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepOutcome>& rows) {
  out << "kp,kd,successes,trials,scalar_error,region\n";
  for (const auto& r : rows)
    out << fmt9(r.kp) << ',' << fmt9(r.kd) << ',' << r.successes << ',' << r.trials << ','
        << (r.scalar_error ? fmt9(*r.scalar_error) : "") << ',' << to_string(r.region) << '\n';
}

inline std::string stats_csv_header() { return "test,region,statistic,p,alpha_adj,reject"; }

inline std::string stats_csv_row(const StatsReport& r) {
  return r.test + "," + r.region + "," + fmt9(r.statistic) + "," + fmt9(r.p) + "," + fmt9(r.alpha_adj) + "," +
         (r.reject ? "1" : "0");
}

}  // namespace gainlab

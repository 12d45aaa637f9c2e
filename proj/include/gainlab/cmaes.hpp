#pragma once

// (mu/mu_w, lambda) CMA-ES over a box. The search runs in the unit cube; each
// sample is clamped into the cube before evaluation and the squared clamping
// distance is added to its loss.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gainlab/common.hpp"

namespace gainlab {

struct Bounds {
  std::vector<std::string> names;
  Vector lower;
  Vector upper;

  std::size_t size() const { return static_cast<std::size_t>(lower.size()); }

  void validate() const {
    require(lower.size() == upper.size() && lower.size() > 0, "bounds must be non-empty with matching sizes");
    require(names.empty() || names.size() == size(), "one name per bound");
    require(lower.allFinite() && upper.allFinite(), "bounds must be finite");
    require((lower.array() < upper.array()).all(), "every lower bound must be below its upper bound");
  }

  Vector to_box(const Vector& unit) const { return lower + ((upper - lower).array() * unit.array()).matrix(); }
  Vector to_unit(const Vector& x) const { return ((x - lower).array() / (upper - lower).array()).matrix(); }
  bool contains(const Vector& x) const { return (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all(); }
};

struct CmaesConfig {
  std::size_t population = 0;  // 0: 4 + floor(3 ln n)
  double sigma0 = 3.0;         // in unit-cube coordinates
  std::size_t max_iterations = 200;
  std::size_t max_evaluations = 0;  // 0: unlimited
  std::uint64_t seed = 0;
  double penalty = 1.0;
  double tol_x = 1e-13;
  std::optional<Vector> initial;  // starting mean in bound coordinates; box centre otherwise
  std::size_t workers = 1;

  void validate(std::size_t n) const {
    require(population == 0 || population >= 4, "population must be >= 4");
    require(sigma0 > 0.0, "sigma0 must be positive");
    require(max_iterations >= 1, "iterations must be >= 1");
    require(!initial || static_cast<std::size_t>(initial->size()) == n, "initial point has the wrong dimension");
  }

  static std::size_t default_population(std::size_t n) {
    return 4 + static_cast<std::size_t>(std::floor(3.0 * std::log(static_cast<double>(n))));
  }
};

struct FitResult {
  Vector best;  // bound coordinates
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<double> history;  // best-so-far after each generation
  std::size_t evaluations = 0;
  std::size_t iterations = 0;
  bool aborted = false;
  std::string stop_reason;
};

using Objective = std::function<double(const Vector&)>;
// Also receives the running evaluation number, which is fixed by sample order.
using IndexedObjective = std::function<double(const Vector&, std::size_t)>;

inline FitResult cmaes_minimize(const IndexedObjective& objective, const Bounds& bounds, const CmaesConfig& cfg) {
  bounds.validate();
  const std::size_t n = bounds.size();
  cfg.validate(n);
  const auto ni = static_cast<Eigen::Index>(n);
  const double nd = static_cast<double>(n);
  const std::size_t lambda = cfg.population ? cfg.population : CmaesConfig::default_population(n);
  const std::size_t mu = lambda / 2;

  Vector w(static_cast<Eigen::Index>(mu));
  for (std::size_t i = 0; i < mu; ++i)
    w[static_cast<Eigen::Index>(i)] = std::log((static_cast<double>(lambda) + 1.0) / 2.0) - std::log(i + 1.0);
  w /= w.sum();
  const double mueff = 1.0 / w.squaredNorm();
  const double cc = (4.0 + mueff / nd) / (nd + 4.0 + 2.0 * mueff / nd);
  const double cs = (mueff + 2.0) / (nd + mueff + 5.0);
  const double c1 = 2.0 / ((nd + 1.3) * (nd + 1.3) + mueff);
  const double cmu = std::min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nd + 2.0) * (nd + 2.0) + mueff));
  const double damps = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (nd + 1.0)) - 1.0) + cs;
  const double chi_n = std::sqrt(nd) * (1.0 - 1.0 / (4.0 * nd) + 1.0 / (21.0 * nd * nd));

  Vector mean = cfg.initial ? bounds.to_unit(*cfg.initial) : Vector::Constant(ni, 0.5);
  double sigma = cfg.sigma0;
  Matrix c = Matrix::Identity(ni, ni), b = Matrix::Identity(ni, ni);
  Vector d = Vector::Ones(ni), pc = Vector::Zero(ni), ps = Vector::Zero(ni);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  FitResult out;
  std::vector<Vector> xs(lambda), ys(lambda);
  std::vector<double> losses(lambda);
  std::vector<std::size_t> order(lambda);

  for (std::size_t gen = 0; gen < cfg.max_iterations; ++gen) {
    std::size_t count = lambda;
    if (cfg.max_evaluations) {
      if (out.evaluations >= cfg.max_evaluations) {
        out.stop_reason = "max_evaluations";
        break;
      }
      count = std::min(lambda, cfg.max_evaluations - out.evaluations);
    }
    for (std::size_t k = 0; k < lambda; ++k) {
      Vector z(ni);
      for (Eigen::Index i = 0; i < ni; ++i) z[i] = normal(rng);
      ys[k] = b * d.asDiagonal() * z;
      xs[k] = mean + sigma * ys[k];
    }
    parallel_for(
        count,
        [&](std::size_t k) {
          const Vector clamped = xs[k].cwiseMax(0.0).cwiseMin(1.0);
          const double f = objective(bounds.to_box(clamped), out.evaluations + k);
          losses[k] = f + cfg.penalty * (xs[k] - clamped).squaredNorm();
        },
        cfg.workers);
    out.evaluations += count;
    ++out.iterations;

    bool any_number = false;
    for (std::size_t k = 0; k < count; ++k) {
      if (std::isnan(losses[k])) {
        losses[k] = std::numeric_limits<double>::infinity();
      } else {
        any_number = true;
      }
    }
    if (!any_number) {
      out.aborted = true;
      out.stop_reason = "all evaluations in a generation were NaN";
      break;
    }

    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count),
                     [&](std::size_t a, std::size_t b2) { return losses[a] < losses[b2]; });
    if (losses[order[0]] < out.best_loss) {
      out.best_loss = losses[order[0]];
      out.best = bounds.to_box(xs[order[0]].cwiseMax(0.0).cwiseMin(1.0));
    }
    out.history.push_back(out.best_loss);
    if (count < lambda) {
      out.stop_reason = "max_evaluations";
      break;
    }

    const Vector old = mean;
    Vector yw = Vector::Zero(ni);
    for (std::size_t i = 0; i < mu; ++i) yw += w[static_cast<Eigen::Index>(i)] * ys[order[i]];
    mean = old + sigma * yw;

    const Vector c_inv_half_yw = b * (b.transpose() * yw).cwiseQuotient(d);
    ps = (1.0 - cs) * ps + std::sqrt(cs * (2.0 - cs) * mueff) * c_inv_half_yw;
    const double ps_norm = ps.norm() / std::sqrt(1.0 - std::pow(1.0 - cs, 2.0 * (gen + 1.0)));
    const bool hsig = ps_norm / chi_n < 1.4 + 2.0 / (nd + 1.0);
    pc = (1.0 - cc) * pc + (hsig ? std::sqrt(cc * (2.0 - cc) * mueff) : 0.0) * yw;

    Matrix rank_mu = Matrix::Zero(ni, ni);
    for (std::size_t i = 0; i < mu; ++i)
      rank_mu += w[static_cast<Eigen::Index>(i)] * ys[order[i]] * ys[order[i]].transpose();
    c = (1.0 - c1 - cmu) * c + c1 * (pc * pc.transpose() + (hsig ? 0.0 : cc * (2.0 - cc)) * c) + cmu * rank_mu;
    sigma *= std::exp((cs / damps) * (ps.norm() / chi_n - 1.0));

    c = 0.5 * (c + c.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(c);
    d = eig.eigenvalues().cwiseMax(1e-300).cwiseSqrt();
    b = eig.eigenvectors();

    if (!std::isfinite(sigma) || sigma * d.maxCoeff() < cfg.tol_x) {
      out.stop_reason = "tol_x";
      break;
    }
    if (d.maxCoeff() > 1e7 * d.minCoeff()) {
      out.stop_reason = "condition";
      break;
    }
  }
  if (out.stop_reason.empty()) out.stop_reason = "max_iterations";
  if (out.best.size() == 0) out.best = bounds.to_box(mean.cwiseMax(0.0).cwiseMin(1.0));
  return out;
}

inline FitResult cmaes_minimize(const Objective& objective, const Bounds& bounds, const CmaesConfig& cfg) {
  return cmaes_minimize([&](const Vector& x, std::size_t) { return objective(x); }, bounds, cfg);
}

}  // namespace gainlab

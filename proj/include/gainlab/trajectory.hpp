#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gainlab/common.hpp"

namespace gainlab {

struct TrajectoryRecord {
  double t = 0.0;
  Vector q;
  Vector q_dot;
  Vector q_des;
  Vector tau;
  std::optional<Vector> f_ext;
};

// Uniformly sampled rollout log.
struct Trajectory {
  double sample_rate = 0.0;  // Hz
  std::vector<TrajectoryRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::size_t dof() const {
    return records.empty() ? 0 : static_cast<std::size_t>(records.front().q.size());
  }
  double duration() const { return sample_rate > 0 ? static_cast<double>(size()) / sample_rate : 0.0; }

  // One joint-major matrix per channel: column k is sample k.
  Matrix positions() const { return stack(&TrajectoryRecord::q); }
  Matrix velocities() const { return stack(&TrajectoryRecord::q_dot); }
  Matrix targets() const { return stack(&TrajectoryRecord::q_des); }
  Matrix torques() const { return stack(&TrajectoryRecord::tau); }

  void validate() const {
    require(sample_rate > 0.0, "trajectory sample rate must be positive");
    const double dt = 1.0 / sample_rate;
    const auto n = dof();
    for (std::size_t k = 0; k < records.size(); ++k) {
      const auto& r = records[k];
      require(static_cast<std::size_t>(r.q.size()) == n && static_cast<std::size_t>(r.q_dot.size()) == n &&
                  static_cast<std::size_t>(r.q_des.size()) == n &&
                  static_cast<std::size_t>(r.tau.size()) == n,
              "trajectory records must share one joint count");
      if (k > 0) {
        const double gap = r.t - records[k - 1].t;
        require(gap > 0.0, "trajectory time must be strictly increasing");
        require(std::abs(gap - dt) <= 1e-6 * dt + 1e-9, "trajectory samples must be uniformly spaced");
      }
    }
  }

 private:
  Matrix stack(Vector TrajectoryRecord::*member) const {
    Matrix m(static_cast<Eigen::Index>(dof()), static_cast<Eigen::Index>(size()));
    for (std::size_t k = 0; k < size(); ++k) m.col(static_cast<Eigen::Index>(k)) = records[k].*member;
    return m;
  }
};

// Formats with 9 significant digits, the precision of every CSV emitted here.
inline std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<std::string> split(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string trajectory_csv_header(std::size_t n, bool with_ext) {
  std::string h = "t";
  for (const char* prefix : {"q", "qd", "qdes", "tau"})
    for (std::size_t i = 0; i < n; ++i) h += "," + std::string(prefix) + std::to_string(i);
  if (with_ext)
    for (std::size_t i = 0; i < n; ++i) h += ",fext" + std::to_string(i);
  return h;
}

inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  const auto n = traj.dof();
  const bool with_ext = !traj.empty() && traj.records.front().f_ext.has_value();
  out << trajectory_csv_header(n, with_ext) << '\n';
  for (const auto& r : traj.records) {
    out << fmt9(r.t);
    for (const Vector* v : {&r.q, &r.q_dot, &r.q_des, &r.tau})
      for (Eigen::Index i = 0; i < v->size(); ++i) out << ',' << fmt9((*v)[i]);
    if (with_ext)
      for (Eigen::Index i = 0; i < r.f_ext->size(); ++i) out << ',' << fmt9((*r.f_ext)[i]);
    out << '\n';
  }
}

inline void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_trajectory_csv(out, traj);
}

// Reads a trajectory CSV. The sample rate is taken from the first time step
// unless given explicitly.
inline Trajectory read_trajectory_csv(std::istream& in, double sample_rate = 0.0) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("empty trajectory CSV");
  const auto header = split(line);
  require(!header.empty() && header.front() == "t", "trajectory CSV must start with column t");
  std::size_t n = 0;
  while (n + 1 < header.size() && header[n + 1] == "q" + std::to_string(n)) ++n;
  require(n > 0, "trajectory CSV has no joint columns");
  const bool with_ext = header.size() == 1 + 5 * n;
  require(header.size() == 1 + 4 * n || with_ext, "unexpected trajectory CSV column count");
  require(header == split(trajectory_csv_header(n, with_ext)), "unexpected trajectory CSV header");

  Trajectory traj;
  const auto dim = static_cast<Eigen::Index>(n);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    require(cells.size() == header.size(), "trajectory CSV row has the wrong number of fields");
    TrajectoryRecord r;
    r.t = std::stod(cells[0]);
    std::size_t c = 1;
    for (Vector* v : {&r.q, &r.q_dot, &r.q_des, &r.tau}) {
      v->resize(dim);
      for (Eigen::Index i = 0; i < dim; ++i) (*v)[i] = std::stod(cells[c++]);
    }
    if (with_ext) {
      Vector f(dim);
      for (Eigen::Index i = 0; i < dim; ++i) f[i] = std::stod(cells[c++]);
      r.f_ext = f;
    }
    traj.records.push_back(std::move(r));
  }
  if (sample_rate > 0.0) {
    traj.sample_rate = sample_rate;
  } else {
    require(traj.size() >= 2, "cannot infer the sample rate from fewer than two rows");
    traj.sample_rate = 1.0 / (traj.records[1].t - traj.records[0].t);
  }
  traj.validate();
  return traj;
}

inline Trajectory read_trajectory_csv(const std::string& path, double sample_rate = 0.0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return read_trajectory_csv(in, sample_rate);
}

}  // namespace gainlab

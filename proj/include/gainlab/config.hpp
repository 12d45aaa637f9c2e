#pragma once

// INI-style experiment configuration: parsing, typed section access and
// validation findings.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gainlab/control.hpp"
#include "gainlab/dynamics.hpp"
#include "gainlab/hash.hpp"
#include "gainlab/trajectory.hpp"

namespace gainlab {

using Ptree = boost::property_tree::ptree;

struct Finding {
  enum class Severity { Error, Warning };
  Severity severity = Severity::Error;
  std::string key;  // section.key
  std::string message;

  bool is_error() const { return severity == Severity::Error; }
  std::string str() const { return std::string(is_error() ? "error" : "warning") + ": " + key + ": " + message; }
};

inline bool has_errors(const std::vector<Finding>& findings) {
  return std::any_of(findings.begin(), findings.end(), [](const Finding& f) { return f.is_error(); });
}

// Names the offending key.
class ConfigError : public InvalidArgument {
 public:
  ConfigError(const std::string& key, const std::string& message)
      : InvalidArgument(key + ": " + message), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct RawConfig {
  Ptree tree;
  std::string text;  // echoed into the manifest
};

inline RawConfig parse_config_text(const std::string& text) {
  RawConfig raw;
  raw.text = text;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, raw.tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config", e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  return raw;
}

inline RawConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot read " + path);
  return parse_config_text(read_file(path));
}

inline RawConfig config_from_tree(const Ptree& tree) {
  std::ostringstream out;
  boost::property_tree::write_ini(out, tree);
  return {tree, out.str()};
}

// Reads typed values from one section, recording a finding for every missing
// or malformed value and for keys nobody asked for.
class SectionReader {
 public:
  SectionReader(const Ptree& root, std::string section, std::vector<Finding>& findings)
      : section_(std::move(section)), findings_(findings) {
    if (const auto child = root.get_child_optional(section_)) node_ = &*child;
  }

  bool present() const { return node_ != nullptr; }
  bool has(const std::string& key) const { return node_ && node_->get_child_optional(key); }

  std::string text(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    return trim(node_->get<std::string>(key));
  }

  double number(const std::string& key, double fallback) {
    const auto s = text(key, "");
    if (s.empty()) return fallback;
    double v = fallback;
    if (!parse_double(s, v)) error(key, "not a number: '" + s + "'");
    return v;
  }

  double positive(const std::string& key, double fallback) {
    const double v = number(key, fallback);
    if (!(v > 0.0)) error(key, "must be positive");
    return v;
  }

  double non_negative(const std::string& key, double fallback) {
    const double v = number(key, fallback);
    if (!(v >= 0.0)) error(key, "must be >= 0");
    return v;
  }

  std::size_t count(const std::string& key, std::size_t fallback, std::size_t minimum = 0) {
    const double v = number(key, static_cast<double>(fallback));
    if (v != std::floor(v) || v < static_cast<double>(minimum)) {
      error(key, "must be an integer >= " + std::to_string(minimum));
      return fallback;
    }
    return static_cast<std::size_t>(v);
  }

  std::uint64_t seed(const std::string& key, std::uint64_t fallback) {
    const auto s = text(key, "");
    if (s.empty()) return fallback;
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(s, &pos);
      if (pos == s.size()) return v;
    } catch (const std::exception&) {
    }
    error(key, "not an unsigned integer: '" + s + "'");
    return fallback;
  }

  bool flag(const std::string& key, bool fallback) {
    const auto s = text(key, "");
    if (s.empty()) return fallback;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    error(key, "not a boolean: '" + s + "'");
    return fallback;
  }

  std::vector<double> list(const std::string& key, const std::vector<double>& fallback) {
    const auto s = text(key, "");
    if (s.empty()) return fallback;
    std::vector<double> out;
    for (const auto& item : split(s, ',')) {
      double v = 0.0;
      if (!parse_double(trim(item), v)) {
        error(key, "not a list of numbers: '" + s + "'");
        return fallback;
      }
      out.push_back(v);
    }
    return out;
  }

  // Scalar broadcasts to every joint; a list must have one entry per joint.
  Vector per_joint(const std::string& key, std::size_t joints, double fallback) {
    const auto v = list(key, {fallback});
    if (v.size() == 1) return Vector::Constant(static_cast<Eigen::Index>(joints), v[0]);
    if (v.size() != joints) {
      error(key, "needs 1 or " + std::to_string(joints) + " values");
      return Vector::Constant(static_cast<Eigen::Index>(joints), fallback);
    }
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  }

  void error(const std::string& key, const std::string& message) {
    findings_.push_back({Finding::Severity::Error, section_ + "." + key, message});
  }
  void warning(const std::string& key, const std::string& message) {
    findings_.push_back({Finding::Severity::Warning, section_ + "." + key, message});
  }

  void reject_unknown() {
    if (!node_) return;
    for (const auto& [key, value] : *node_)
      if (!used_.count(key)) error(key, "unknown key");
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  static bool parse_double(const std::string& s, double& out) {
    try {
      std::size_t pos = 0;
      out = std::stod(s, &pos);
      return pos == s.size();
    } catch (const std::exception&) {
      return false;
    }
  }

  const Ptree* node_ = nullptr;
  std::string section_;
  std::vector<Finding>& findings_;
  std::set<std::string> used_;
};

// --- Plant -------------------------------------------------------------------

inline PlantKind parse_plant_kind(const std::string& s) {
  if (s == "point-mass") return PlantKind::PointMass1D;
  if (s == "chain") return PlantKind::DecoupledChain;
  if (s == "two-link") return PlantKind::TwoLink;
  throw InvalidArgument("unknown plant kind '" + s + "'");
}

// [plant] section. Missing section: unit point mass.
inline PlantParams read_plant(const Ptree& root, std::vector<Finding>& findings, const std::string& section = "plant") {
  SectionReader r(root, section, findings);
  PlantParams p;
  const auto kind_name = r.text("kind", "point-mass");
  try {
    p.kind = parse_plant_kind(kind_name);
  } catch (const InvalidArgument&) {
    r.error("kind", "must be point-mass, chain or two-link");
  }
  std::size_t joints = p.kind == PlantKind::TwoLink ? 2 : 1;
  if (p.kind == PlantKind::DecoupledChain) joints = r.count("joints", 1, 1);
  else if (r.has("joints") && r.count("joints", joints, 1) != joints) r.error("joints", "fixed by the plant kind");
  p.resize(joints);

  if (p.kind == PlantKind::TwoLink) {
    const auto lengths = r.list("link_lengths", {1.0, 1.0});
    const auto masses = r.list("link_masses", {1.0, 1.0});
    if (lengths.size() != 2) r.error("link_lengths", "needs two values");
    if (masses.size() != 2) r.error("link_masses", "needs two values");
    if (lengths.size() == 2 && masses.size() == 2) {
      const auto base = PlantParams::two_link({lengths[0], lengths[1]}, {masses[0], masses[1]}, false);
      p.link_lengths = base.link_lengths;
      p.link_masses = base.link_masses;
      p.inertia = base.inertia;
    }
  }
  if (r.has("inertia") || p.kind != PlantKind::TwoLink) p.inertia = r.per_joint("inertia", joints, 1.0);
  p.armature = r.per_joint("armature", joints, 0.0);
  p.static_friction = r.per_joint("static_friction", joints, 0.0);
  p.dynamic_friction_ratio = r.per_joint("friction_ratio", joints, 0.0);
  p.viscous_friction = r.per_joint("viscous", joints, 0.0);
  p.passive_stiffness = r.per_joint("passive_stiffness", joints, 0.0);
  p.passive_damping = r.per_joint("passive_damping", joints, 0.0);
  p.gravity_enabled = r.flag("gravity", false);
  p.gravity = r.number("gravity_accel", 9.81);
  p.gravity_load = r.per_joint("gravity_load", joints, 0.0);
  p.torque_limit = r.per_joint("torque_limit", joints, std::numeric_limits<double>::infinity());
  p.torque_rate_limit = r.number("torque_rate_limit", kDefaultTorqueRateLimit);
  r.reject_unknown();
  if (r.present()) {
    try {
      p.validate();
    } catch (const InvalidArgument& e) {
      findings.push_back({Finding::Severity::Error, section, e.what()});
    }
  }
  return p;
}

inline PlantParams load_plant(const std::string& path) {
  std::vector<Finding> findings;
  const auto p = read_plant(load_config(path).tree, findings);
  for (const auto& f : findings)
    if (f.is_error()) throw ConfigError(f.key, f.message);
  return p;
}

// --- Gain grid -----------------------------------------------------------------

// [grid] with explicit `kp` and `kd` lists. Missing section: the 7 x 7 default.
inline GainGrid read_grid(const Ptree& root, std::vector<Finding>& findings) {
  SectionReader r(root, "grid", findings);
  if (!r.present()) return GainGrid::default_grid();
  GainGrid g{r.list("kp", {}), r.list("kd", {})};
  r.reject_unknown();
  if (g.kp.empty() || g.kd.empty()) {
    findings.push_back({Finding::Severity::Error, "grid", "grid must be non-empty"});
    return g;
  }
  try {
    g.validate();
  } catch (const InvalidArgument& e) {
    findings.push_back({Finding::Severity::Error, "grid", e.what()});
  }
  return g;
}

inline GainGrid load_grid(const std::string& path) {
  std::vector<Finding> findings;
  const auto raw = load_config(path);
  if (!raw.tree.get_child_optional("grid")) throw ConfigError("grid", "file has no [grid] section");
  const auto g = read_grid(raw.tree, findings);
  for (const auto& f : findings)
    if (f.is_error()) throw ConfigError(f.key, f.message);
  return g;
}

}  // namespace gainlab

#pragma once

/// Small helpers for reading YAML documents with line-precise diagnostics.

#include "armsafe/errors.hpp"
#include "armsafe/se3.hpp"

#include <yaml-cpp/yaml.h>

#include <string>
#include <vector>

namespace armsafe::yaml {

/// "<file>:<line>: <field>: <message>" (line is 1-based when known).
inline std::string where(const std::string& file, const YAML::Node& node, const std::string& field) {
  std::string s = file;
  if (node.IsDefined() && node.Mark().line >= 0) s += ":" + std::to_string(node.Mark().line + 1);
  return s + ": " + field;
}

class Reader {
 public:
  explicit Reader(std::string file) : file_(std::move(file)) {}

  const std::string& file() const { return file_; }

  [[noreturn]] void fail(const YAML::Node& node, const std::string& field,
                         const std::string& msg) const {
    throw ConfigError(where(file_, node, field) + ": " + msg);
  }

  YAML::Node require(const YAML::Node& parent, const std::string& key,
                     const std::string& field) const {
    if (!parent.IsMap()) fail(parent, field, "expected a mapping");
    const YAML::Node n = parent[key];
    if (!n.IsDefined() || n.IsNull()) fail(parent, field, "missing required field");
    return n;
  }

  double number(const YAML::Node& n, const std::string& field) const {
    if (!n.IsScalar()) fail(n, field, "expected a number");
    try {
      return n.as<double>();
    } catch (const YAML::Exception&) {
      fail(n, field, "expected a number, got '" + n.Scalar() + "'");
    }
  }

  int integer(const YAML::Node& n, const std::string& field) const {
    if (!n.IsScalar()) fail(n, field, "expected an integer");
    try {
      return n.as<int>();
    } catch (const YAML::Exception&) {
      fail(n, field, "expected an integer, got '" + n.Scalar() + "'");
    }
  }

  bool boolean(const YAML::Node& n, const std::string& field) const {
    if (!n.IsScalar()) fail(n, field, "expected true or false");
    try {
      return n.as<bool>();
    } catch (const YAML::Exception&) {
      fail(n, field, "expected true or false, got '" + n.Scalar() + "'");
    }
  }

  std::string string(const YAML::Node& n, const std::string& field) const {
    if (!n.IsScalar()) fail(n, field, "expected a string");
    return n.Scalar();
  }

  VecX vector(const YAML::Node& n, const std::string& field, int size = -1) const {
    if (!n.IsSequence()) fail(n, field, "expected a list of numbers");
    if (size >= 0 && static_cast<int>(n.size()) != size)
      fail(n, field, "expected " + std::to_string(size) + " entries, got " + std::to_string(n.size()));
    VecX v(n.size());
    for (std::size_t i = 0; i < n.size(); ++i)
      v(static_cast<Eigen::Index>(i)) = number(n[i], field + "[" + std::to_string(i) + "]");
    return v;
  }

  Vec3 vec3(const YAML::Node& n, const std::string& field) const { return vector(n, field, 3); }

  /// A scalar broadcast to `size` entries, or a list of exactly `size` numbers.
  VecX weights(const YAML::Node& n, const std::string& field, int size) const {
    if (n.IsScalar()) return VecX::Constant(size, number(n, field));
    return vector(n, field, size);
  }

  /// {xyz: [..], rpy: [..]}; both optional.
  Pose pose(const YAML::Node& n, const std::string& field) const {
    if (!n.IsMap()) fail(n, field, "expected a mapping with xyz and rpy");
    Vec3 xyz = Vec3::Zero(), rpy = Vec3::Zero();
    if (n["xyz"]) xyz = vec3(n["xyz"], field + ".xyz");
    if (n["rpy"]) rpy = vec3(n["rpy"], field + ".rpy");
    for (auto it = n.begin(); it != n.end(); ++it) {
      const std::string key = it->first.Scalar();
      if (key != "xyz" && key != "rpy") fail(it->first, field + "." + key, "unknown field");
    }
    return Pose::from_xyz_rpy(xyz, rpy);
  }

  void only(const YAML::Node& n, const std::string& field,
            const std::vector<std::string>& allowed) const {
    if (!n.IsMap()) fail(n, field, "expected a mapping");
    for (auto it = n.begin(); it != n.end(); ++it) {
      const std::string key = it->first.Scalar();
      bool ok = false;
      for (const auto& a : allowed) ok = ok || a == key;
      if (!ok) fail(it->first, field.empty() ? key : field + "." + key, "unknown field");
    }
  }

 private:
  std::string file_;
};

/// Parses a file or throws ConfigError naming it.
inline YAML::Node load_file(const std::string& path) {
  try {
    return YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw ConfigError(path + ": cannot open file");
  } catch (const YAML::ParserException& e) {
    throw ConfigError(path + ":" + std::to_string(e.mark.line + 1) + ": parse error: " + e.msg);
  }
}

}  // namespace armsafe::yaml

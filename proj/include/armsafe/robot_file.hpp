#pragma once

/// Robot description files (YAML).
///
///   name: planar2r
///   gravity: [0, -9.81, 0]
///   ee: {xyz: [1, 0, 0]}                 # last link frame -> end-effector
///   joints:
///     - name: j1
///       origin: {xyz: [0, 0, 0], rpy: [0, 0, 0]}   # parent frame -> joint frame
///       axis: [0, 0, 1]
///       limits: {position: [-3, 3], velocity: 2, acceleration: 10}
///       link:
///         mass: 1.0
///         com: [1, 0, 0]
///         inertia: [ixx, iyy, izz, ixy, ixz, iyz]   # about the COM
///         collision:
///           - {name: upper, capsule: {radius: 0.05, a: [0, 0, 0], b: [1, 0, 0]}}
///           - {sphere: {radius: 0.05, center: [1, 0, 0]}}
///
/// Limits default to unbounded; inertia defaults to zero (point mass).

#include "armsafe/model.hpp"
#include "armsafe/yaml_util.hpp"

#include <filesystem>
#include <string>

namespace armsafe {

inline Primitive parse_primitive(const yaml::Reader& rd, const YAML::Node& n,
                                 const std::string& field) {
  if (n["sphere"]) {
    const YAML::Node s = n["sphere"];
    rd.only(s, field + ".sphere", {"radius", "center"});
    const double r = rd.number(rd.require(s, "radius", field + ".sphere.radius"), field + ".sphere.radius");
    const Vec3 c = s["center"] ? rd.vec3(s["center"], field + ".sphere.center") : Vec3::Zero();
    try {
      return Primitive::sphere(r, c);
    } catch (const GeometryError& e) {
      rd.fail(s, field + ".sphere", e.what());
    }
  }
  if (n["capsule"]) {
    const YAML::Node s = n["capsule"];
    rd.only(s, field + ".capsule", {"radius", "a", "b"});
    const double r = rd.number(rd.require(s, "radius", field + ".capsule.radius"), field + ".capsule.radius");
    const Vec3 a = rd.vec3(rd.require(s, "a", field + ".capsule.a"), field + ".capsule.a");
    const Vec3 b = rd.vec3(rd.require(s, "b", field + ".capsule.b"), field + ".capsule.b");
    try {
      return Primitive::capsule(r, a, b);
    } catch (const GeometryError& e) {
      rd.fail(s, field + ".capsule", e.what());
    }
  }
  rd.fail(n, field, "expected a sphere or capsule");
}

inline RobotModel parse_robot(const YAML::Node& root, const std::string& file) {
  yaml::Reader rd(file);
  rd.only(root, "", {"name", "gravity", "ee", "joints"});
  const std::string name = root["name"] ? rd.string(root["name"], "name") : "robot";
  const Vec3 gravity = root["gravity"] ? rd.vec3(root["gravity"], "gravity") : Vec3(0, 0, -9.81);
  const Pose ee = root["ee"] ? rd.pose(root["ee"], "ee") : Pose();

  const YAML::Node js = rd.require(root, "joints", "joints");
  if (!js.IsSequence() || js.size() == 0) rd.fail(js, "joints", "expected a non-empty list");

  std::vector<Joint> joints;
  std::vector<LinkInertia> links;
  std::vector<CollisionBody> bodies;
  for (std::size_t i = 0; i < js.size(); ++i) {
    const std::string f = "joints[" + std::to_string(i) + "]";
    const YAML::Node j = js[i];
    rd.only(j, f, {"name", "origin", "axis", "limits", "link"});
    Joint joint;
    joint.name = j["name"] ? rd.string(j["name"], f + ".name") : "joint" + std::to_string(i + 1);
    if (j["origin"]) joint.origin = rd.pose(j["origin"], f + ".origin");
    if (j["axis"]) {
      joint.axis = rd.vec3(j["axis"], f + ".axis");
      if (std::abs(joint.axis.norm() - 1.0) > 1e-9) rd.fail(j["axis"], f + ".axis", "must be a unit vector");
    }
    if (j["limits"]) {
      const YAML::Node l = j["limits"];
      rd.only(l, f + ".limits", {"position", "velocity", "acceleration"});
      if (l["position"]) {
        const VecX p = rd.vector(l["position"], f + ".limits.position", 2);
        if (p(0) > p(1)) rd.fail(l["position"], f + ".limits.position", "lower bound exceeds upper bound");
        joint.limits.position_min = p(0);
        joint.limits.position_max = p(1);
      }
      if (l["velocity"]) joint.limits.velocity = rd.number(l["velocity"], f + ".limits.velocity");
      if (l["acceleration"])
        joint.limits.acceleration = rd.number(l["acceleration"], f + ".limits.acceleration");
      if (!(joint.limits.velocity > 0.0)) rd.fail(l, f + ".limits.velocity", "must be positive");
      if (!(joint.limits.acceleration > 0.0)) rd.fail(l, f + ".limits.acceleration", "must be positive");
    }

    const YAML::Node ln = rd.require(j, "link", f + ".link");
    rd.only(ln, f + ".link", {"mass", "com", "inertia", "collision"});
    LinkInertia link;
    link.mass = rd.number(rd.require(ln, "mass", f + ".link.mass"), f + ".link.mass");
    if (!(link.mass > 0.0)) rd.fail(ln["mass"], f + ".link.mass", "must be positive");
    if (ln["com"]) link.com = rd.vec3(ln["com"], f + ".link.com");
    if (ln["inertia"]) {
      const VecX I = rd.vector(ln["inertia"], f + ".link.inertia", 6);
      link.inertia << I(0), I(3), I(4),
                      I(3), I(1), I(5),
                      I(4), I(5), I(2);
      Eigen::SelfAdjointEigenSolver<Mat3> eig(link.inertia, Eigen::EigenvaluesOnly);
      if (eig.eigenvalues().minCoeff() < -1e-12)
        rd.fail(ln["inertia"], f + ".link.inertia", "not positive semidefinite");
    }
    if (ln["collision"]) {
      const YAML::Node cs = ln["collision"];
      if (!cs.IsSequence()) rd.fail(cs, f + ".link.collision", "expected a list");
      for (std::size_t c = 0; c < cs.size(); ++c) {
        const std::string cf = f + ".link.collision[" + std::to_string(c) + "]";
        rd.only(cs[c], cf, {"name", "sphere", "capsule"});
        CollisionBody body;
        body.link = static_cast<int>(i);
        body.shape = parse_primitive(rd, cs[c], cf);
        body.name = cs[c]["name"] ? rd.string(cs[c]["name"], cf + ".name")
                                  : joint.name + "_" + std::to_string(c);
        bodies.push_back(body);
      }
    }
    joints.push_back(joint);
    links.push_back(link);
  }
  try {
    return RobotModel(name, joints, links, ee, bodies, gravity);
  } catch (const ModelError& e) {
    throw ConfigError(file + ": " + e.what());
  }
}

inline RobotModel load_robot(const std::string& path) {
  return parse_robot(yaml::load_file(path), path);
}

/// Directory with the bundled models and scenarios.
inline std::filesystem::path data_dir() {
#ifdef ARMSAFE_DATA_DIR
  return ARMSAFE_DATA_DIR;
#else
  return "data";
#endif
}

/// Loads a bundled model by name ("panda", "planar2r", ...).
inline RobotModel bundled_robot(const std::string& name) {
  return load_robot((data_dir() / "models" / (name + ".yaml")).string());
}

}  // namespace armsafe

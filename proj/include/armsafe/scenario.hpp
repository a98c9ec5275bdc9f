#pragma once

/// Scenario files: robot, obstacles, reference, scripted contacts and the
/// planner/controller configuration of one closed-loop run.
///
///   name: overhead_sphere
///   robot: panda                  # bundled model name, or a path relative to this file
///   duration: 10                  # s
///   control_rate: 1000            # Hz
///   planner_rate: 20              # Hz, must divide control_rate
///   obstacle_rate: 30             # Hz, zero-order hold of obstacle poses
///   planner_latency: 0            # s, a new plan takes effect this long after its solve
///   seed: 0                       # measurement noise seed (noise off unless noise > 0)
///   noise: 0                      # std of additive joint position noise, rad
///   gravity: [0, 0, -9.81]        # optional override of the model's gravity
///   initial: {q: [...], qd: [...]}
///   reference:
///     mode: step                  # step: hold each waypoint; linear: interpolate
///     relative: false             # true: xyz is an offset from the initial EE
///                                 # position, rpy a rotation applied in world axes
///     waypoints:
///       - {t: 0, xyz: [0.4, 0, 0.5], rpy: [3.14159, 0, 0]}
///   obstacles:
///     - name: ball
///       sphere: {radius: 0.1}     # or capsule: {radius, a, b}, box: {half_extents}
///       pose: {xyz: [...], rpy: [...]}
///       track:                    # optional time-stamped poses, piecewise linear
///         - {t: 0, xyz: [...], rpy: [...]}
///   contact_events:
///     - {start: 6, end: 8, link: 3, force: [0, 20, 0], point: [0, 0, 0]}
///   planner: {N: 50, dt: 0.05, Q_ee: 1, Q_rep: 0.01, shooting: multiple, ...}
///                                 # posture_weight (default 1) pulls the plan to the
///                                 # pre-contact configuration while returning
///   controller: {tau_th: 3, k: 0.2, Kp1: 200, ..., enabled: true}
///
/// Links are numbered from 0 at the base. Weights accept a scalar (broadcast)
/// or one entry per joint. Times within every list must be nondecreasing.

#include "armsafe/controller.hpp"
#include "armsafe/geometry.hpp"
#include "armsafe/planner.hpp"
#include "armsafe/robot_file.hpp"
#include "armsafe/yaml_util.hpp"

#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace armsafe {

/// Time-stamped poses; constant before the first and after the last entry.
struct PoseTrack {
  std::vector<double> t;
  std::vector<Pose> poses;
  bool linear = true;  // false: hold each pose until the next time stamp

  bool empty() const { return poses.empty(); }

  /// Index of the entry in effect at time s (last entry with t <= s, or 0).
  std::size_t index_at(double s) const {
    std::size_t i = 0;
    while (i + 1 < t.size() && t[i + 1] <= s) ++i;
    return i;
  }

  Pose at(double s) const {
    if (poses.empty()) return Pose();
    const std::size_t i = index_at(s);
    if (!linear || i + 1 >= poses.size() || s <= t[i]) return poses[i];
    const double span = t[i + 1] - t[i];
    return span > 0.0 ? interpolate(poses[i], poses[i + 1], (s - t[i]) / span) : poses[i + 1];
  }
};

struct ObstacleSpec {
  std::string name;
  std::vector<Primitive> parts;  // in the obstacle frame
  Pose pose;                     // used when the track is empty
  PoseTrack track;

  Obstacle at(double s) const {
    const Pose T = track.empty() ? pose : track.at(s);
    Obstacle o{name, {}};
    for (const auto& p : parts) o.parts.push_back(p.transformed(T));
    return o;
  }
};

struct ContactEvent {
  double start = 0.0, end = 0.0;
  int link = 0;
  Vec3 force = Vec3::Zero();  // world frame, N
  Vec3 point = Vec3::Zero();  // link frame, m
};

struct Scenario {
  std::string name;
  std::string file;
  std::string robot_ref;
  std::shared_ptr<const RobotModel> robot;
  double duration = 1.0;
  int control_rate = 1000;
  int planner_rate = 20;
  double obstacle_rate = 30.0;
  double planner_latency = 0.0;
  unsigned seed = 0;
  double noise = 0.0;
  VecX q0, qd0;
  PoseTrack reference;
  std::vector<ObstacleSpec> obstacles;
  std::vector<ContactEvent> contacts;
  MpcConfig planner;
  ControllerConfig controller;
  bool controller_enabled = true;

  double control_dt() const { return 1.0 / control_rate; }
  int planner_divisor() const { return control_rate / planner_rate; }

  /// World obstacles as reported by perception at time t (zero-order hold at obstacle_rate).
  std::vector<Obstacle> obstacles_at(double t) const {
    const double ts = obstacle_rate > 0.0 ? std::floor(t * obstacle_rate + 1e-9) / obstacle_rate : t;
    std::vector<Obstacle> out;
    out.reserve(obstacles.size());
    for (const auto& o : obstacles) out.push_back(o.at(ts));
    return out;
  }

  /// Exact obstacle poses at time t, for measuring true clearance.
  std::vector<Obstacle> true_obstacles_at(double t) const {
    std::vector<Obstacle> out;
    for (const auto& o : obstacles) out.push_back(o.at(t));
    return out;
  }
};

namespace detail {

inline double nondecreasing_time(const yaml::Reader& rd, const YAML::Node& n, const std::string& field,
                                 double prev) {
  const double t = rd.number(n, field);
  if (!std::isfinite(t)) rd.fail(n, field, "must be finite");
  if (t < prev) rd.fail(n, field, "times must be nondecreasing (" + std::to_string(t) + " after " +
                                      std::to_string(prev) + ")");
  return t;
}

inline Primitive local_shape_or_box(const yaml::Reader& rd, const YAML::Node& n,
                                    const std::string& field, std::vector<Primitive>& out) {
  if (n["box"]) {
    const YAML::Node b = n["box"];
    rd.only(b, field + ".box", {"half_extents"});
    const Vec3 h = rd.vec3(rd.require(b, "half_extents", field + ".box.half_extents"),
                           field + ".box.half_extents");
    try {
      for (const auto& p : box_to_capsules(h)) out.push_back(p);
    } catch (const GeometryError& e) {
      rd.fail(b, field + ".box", e.what());
    }
    return out.front();
  }
  out.push_back(parse_primitive(rd, n, field));
  return out.back();
}

inline PoseTrack parse_track(const yaml::Reader& rd, const YAML::Node& list, const std::string& field,
                             bool linear) {
  if (!list.IsSequence() || list.size() == 0) rd.fail(list, field, "expected a non-empty list");
  PoseTrack track;
  track.linear = linear;
  double prev = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string f = field + "[" + std::to_string(i) + "]";
    const YAML::Node w = list[i];
    rd.only(w, f, {"t", "xyz", "rpy"});
    prev = nondecreasing_time(rd, rd.require(w, "t", f + ".t"), f + ".t", prev);
    Vec3 xyz = Vec3::Zero(), rpy = Vec3::Zero();
    if (w["xyz"]) xyz = rd.vec3(w["xyz"], f + ".xyz");
    if (w["rpy"]) rpy = rd.vec3(w["rpy"], f + ".rpy");
    track.t.push_back(prev);
    track.poses.push_back(Pose::from_xyz_rpy(xyz, rpy));
  }
  return track;
}

inline void parse_planner(const yaml::Reader& rd, const YAML::Node& n, int dof, MpcConfig& c) {
  const std::string s = "planner";
  rd.only(n, s, {"N", "dt", "Q_ee", "Q_ee_f", "S", "Q_rep", "Q_s", "Q_s_f", "R", "posture_weight",
                 "d_th1", "d_th2", "k_rep", "alpha", "relaxation", "activation_radius",
                 "constraint_margin", "witness_damping", "shooting", "kkt_tol", "defect_tol",
                 "max_iters", "fallback_budget"});
  auto num = [&](const char* key, double& v) {
    if (n[key]) v = rd.number(n[key], s + "." + key);
  };
  auto six = [&](const char* key, Vec6& v) {
    if (n[key]) v = rd.weights(n[key], s + "." + key, 6);
  };
  auto joints = [&](const char* key, VecX& v) {
    if (n[key]) v = rd.weights(n[key], s + "." + key, dof);
  };
  if (n["N"]) c.N = rd.integer(n["N"], s + ".N");
  num("dt", c.dt);
  six("Q_ee", c.Q_ee);
  six("Q_ee_f", c.Q_ee_f);
  six("S", c.S);
  joints("Q_rep", c.Q_rep);
  joints("Q_s", c.Q_s);
  joints("Q_s_f", c.Q_s_f);
  joints("R", c.R);
  num("posture_weight", c.posture_weight);
  num("d_th1", c.d_th1);
  num("d_th2", c.d_th2);
  num("k_rep", c.k_rep);
  num("alpha", c.alpha);
  if (n["relaxation"]) c.relaxation = rd.boolean(n["relaxation"], s + ".relaxation");
  num("activation_radius", c.activation_radius);
  num("constraint_margin", c.constraint_margin);
  num("witness_damping", c.witness_damping);
  if (n["shooting"]) {
    const std::string v = rd.string(n["shooting"], s + ".shooting");
    if (v == "multiple") {
      c.shooting = Shooting::multiple;
    } else if (v == "single") {
      c.shooting = Shooting::single;
    } else {
      rd.fail(n["shooting"], s + ".shooting", "expected 'multiple' or 'single', got '" + v + "'");
    }
  }
  num("kkt_tol", c.kkt_tol);
  num("defect_tol", c.defect_tol);
  if (n["max_iters"]) c.max_iters = rd.integer(n["max_iters"], s + ".max_iters");
  if (n["fallback_budget"]) c.fallback_budget = rd.integer(n["fallback_budget"], s + ".fallback_budget");
  try {
    c.validate(dof);
  } catch (const ConfigError& e) {
    rd.fail(n, s, e.what());
  }
}

inline void parse_controller(const yaml::Reader& rd, const YAML::Node& n, int dof,
                             ControllerConfig& c, bool& enabled) {
  const std::string s = "controller";
  rd.only(n, s, {"enabled", "Kp1", "Kd1", "Kp2", "Kd2", "Kp3", "Kd3", "k", "tau_th",
                 "release_fraction", "release_dwell", "resume_tol", "resume_dwell", "k_f",
                 "null_damping", "null_bias_compensation", "contact_damping", "feedforward"});
  auto num = [&](const char* key, double& v) {
    if (n[key]) v = rd.number(n[key], s + "." + key);
  };
  auto joints = [&](const char* key, VecX& v) {
    if (n[key]) v = rd.weights(n[key], s + "." + key, dof);
  };
  if (n["enabled"]) enabled = rd.boolean(n["enabled"], s + ".enabled");
  joints("Kp1", c.gains.Kp1);
  joints("Kd1", c.gains.Kd1);
  joints("Kp2", c.gains.Kp2);
  joints("Kd2", c.gains.Kd2);
  if (n["Kp3"]) c.gains.Kp3 = rd.weights(n["Kp3"], s + ".Kp3", 6);
  if (n["Kd3"]) c.gains.Kd3 = rd.weights(n["Kd3"], s + ".Kd3", 6);
  num("k", c.k);
  num("tau_th", c.tau_th);
  num("release_fraction", c.release_fraction);
  num("release_dwell", c.release_dwell);
  num("resume_tol", c.resume_tol);
  num("resume_dwell", c.resume_dwell);
  num("k_f", c.k_f);
  num("null_damping", c.null_damping);
  if (n["null_bias_compensation"])
    c.null_bias_compensation = rd.boolean(n["null_bias_compensation"], s + ".null_bias_compensation");
  num("contact_damping", c.contact_damping);
  if (n["feedforward"]) c.feedforward = rd.boolean(n["feedforward"], s + ".feedforward");
  try {
    c.validate(dof);
  } catch (const ConfigError& e) {
    rd.fail(n, s, e.what());
  }
}

/// Walks "a.b.c" into nested maps, creating them as needed.
inline void set_path(YAML::Node node, const std::vector<std::string>& keys, std::size_t i,
                     const YAML::Node& value, const std::string& text) {
  if (!node.IsMap() && node.IsDefined() && !node.IsNull())
    throw ConfigError("override '" + text + "': '" + keys[i - 1] + "' is not a section");
  if (i + 1 == keys.size()) {
    node[keys[i]] = value;
    return;
  }
  YAML::Node child = node[keys[i]];
  if (!child.IsDefined() || child.IsNull()) {
    node[keys[i]] = YAML::Node(YAML::NodeType::Map);
    child = node[keys[i]];
  }
  set_path(child, keys, i + 1, value, text);
}

}  // namespace detail

/// Applies `section.key=value` (value parsed as YAML, so lists work) to a document.
inline void apply_override(YAML::Node& root, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + text + "': expected section.key=value");
  const std::string path = text.substr(0, eq), raw = text.substr(eq + 1);
  std::vector<std::string> keys;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    keys.push_back(path.substr(start, dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (const auto& k : keys)
    if (k.empty()) throw ConfigError("override '" + text + "': empty key");
  YAML::Node value;
  try {
    value = YAML::Load(raw);
  } catch (const YAML::Exception& e) {
    throw ConfigError("override '" + text + "': cannot parse value: " + e.msg);
  }
  detail::set_path(root, keys, 0, value, text);
}

inline Scenario parse_scenario(const YAML::Node& root, const std::string& file) {
  yaml::Reader rd(file);
  rd.only(root, "", {"name", "robot", "duration", "control_rate", "planner_rate", "obstacle_rate",
                     "planner_latency", "seed", "noise", "gravity", "initial", "reference",
                     "obstacles", "contact_events", "planner", "controller"});
  Scenario sc;
  sc.file = file;
  sc.name = root["name"] ? rd.string(root["name"], "name")
                         : std::filesystem::path(file).stem().string();

  sc.robot_ref = rd.string(rd.require(root, "robot", "robot"), "robot");
  {
    const std::filesystem::path rel = std::filesystem::path(file).parent_path() / sc.robot_ref;
    const bool is_path = sc.robot_ref.find('/') != std::string::npos ||
                         (sc.robot_ref.size() > 5 && sc.robot_ref.substr(sc.robot_ref.size() - 5) == ".yaml");
    try {
      RobotModel m = is_path ? load_robot(rel.string()) : bundled_robot(sc.robot_ref);
      if (root["gravity"]) m = m.with_gravity(rd.vec3(root["gravity"], "gravity"));
      sc.robot = std::make_shared<const RobotModel>(std::move(m));
    } catch (const ConfigError& e) {
      rd.fail(root["robot"], "robot", e.what());
    }
  }
  const RobotModel& model = *sc.robot;
  const int n = model.dof();

  sc.duration = rd.number(rd.require(root, "duration", "duration"), "duration");
  if (!(sc.duration > 0.0) || !std::isfinite(sc.duration)) rd.fail(root["duration"], "duration", "must be positive");
  if (root["control_rate"]) sc.control_rate = rd.integer(root["control_rate"], "control_rate");
  if (root["planner_rate"]) sc.planner_rate = rd.integer(root["planner_rate"], "planner_rate");
  if (sc.control_rate <= 0) rd.fail(root["control_rate"], "control_rate", "must be positive");
  if (sc.planner_rate <= 0 || sc.control_rate % sc.planner_rate != 0)
    rd.fail(root["planner_rate"], "planner_rate", "must be positive and divide control_rate");
  if (root["obstacle_rate"]) sc.obstacle_rate = rd.number(root["obstacle_rate"], "obstacle_rate");
  if (sc.obstacle_rate < 0.0) rd.fail(root["obstacle_rate"], "obstacle_rate", "must be >= 0");
  if (root["planner_latency"]) sc.planner_latency = rd.number(root["planner_latency"], "planner_latency");
  if (sc.planner_latency < 0.0) rd.fail(root["planner_latency"], "planner_latency", "must be >= 0");
  if (root["seed"]) sc.seed = static_cast<unsigned>(rd.integer(root["seed"], "seed"));
  if (root["noise"]) sc.noise = rd.number(root["noise"], "noise");
  if (sc.noise < 0.0) rd.fail(root["noise"], "noise", "must be >= 0");

  const YAML::Node init = rd.require(root, "initial", "initial");
  rd.only(init, "initial", {"q", "qd"});
  sc.q0 = rd.vector(rd.require(init, "q", "initial.q"), "initial.q", n);
  sc.qd0 = init["qd"] ? rd.vector(init["qd"], "initial.qd", n) : VecX::Zero(n);
  if ((sc.q0.array() < model.position_min().array()).any() ||
      (sc.q0.array() > model.position_max().array()).any())
    rd.fail(init["q"], "initial.q", "outside the joint limits");

  // Reference.
  const Pose T0 = ee_pose(model, sc.q0);
  if (root["reference"]) {
    const YAML::Node ref = root["reference"];
    rd.only(ref, "reference", {"mode", "relative", "waypoints"});
    bool linear = false;
    if (ref["mode"]) {
      const std::string m = rd.string(ref["mode"], "reference.mode");
      if (m != "step" && m != "linear")
        rd.fail(ref["mode"], "reference.mode", "expected 'step' or 'linear', got '" + m + "'");
      linear = m == "linear";
    }
    const bool relative = ref["relative"] && rd.boolean(ref["relative"], "reference.relative");
    sc.reference = detail::parse_track(rd, rd.require(ref, "waypoints", "reference.waypoints"),
                                       "reference.waypoints", linear);
    if (relative)
      for (auto& p : sc.reference.poses) p = Pose(p.rotation * T0.rotation, T0.translation + p.translation);
  } else {
    sc.reference.t = {0.0};
    sc.reference.poses = {T0};
    sc.reference.linear = false;
  }

  if (root["obstacles"]) {
    const YAML::Node obs = root["obstacles"];
    if (!obs.IsSequence()) rd.fail(obs, "obstacles", "expected a list");
    for (std::size_t i = 0; i < obs.size(); ++i) {
      const std::string f = "obstacles[" + std::to_string(i) + "]";
      const YAML::Node o = obs[i];
      rd.only(o, f, {"name", "sphere", "capsule", "box", "pose", "track"});
      ObstacleSpec spec;
      spec.name = o["name"] ? rd.string(o["name"], f + ".name") : "obstacle" + std::to_string(i);
      detail::local_shape_or_box(rd, o, f, spec.parts);
      if (o["pose"]) spec.pose = rd.pose(o["pose"], f + ".pose");
      if (o["track"]) spec.track = detail::parse_track(rd, o["track"], f + ".track", true);
      sc.obstacles.push_back(std::move(spec));
    }
  }

  if (root["contact_events"]) {
    const YAML::Node ev = root["contact_events"];
    if (!ev.IsSequence()) rd.fail(ev, "contact_events", "expected a list");
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ev.size(); ++i) {
      const std::string f = "contact_events[" + std::to_string(i) + "]";
      const YAML::Node e = ev[i];
      rd.only(e, f, {"start", "end", "link", "force", "point"});
      ContactEvent c;
      c.start = prev = detail::nondecreasing_time(rd, rd.require(e, "start", f + ".start"), f + ".start", prev);
      c.end = rd.number(rd.require(e, "end", f + ".end"), f + ".end");
      if (!(c.end > c.start)) rd.fail(e["end"], f + ".end", "must be after start");
      c.link = rd.integer(rd.require(e, "link", f + ".link"), f + ".link");
      if (c.link < 0 || c.link >= n)
        rd.fail(e["link"], f + ".link", "must be in [0, " + std::to_string(n - 1) + "]");
      c.force = rd.vec3(rd.require(e, "force", f + ".force"), f + ".force");
      if (e["point"]) c.point = rd.vec3(e["point"], f + ".point");
      sc.contacts.push_back(c);
    }
  }

  sc.planner = MpcConfig::defaults(n);
  sc.planner.posture_weight = 1.0;  // only acts while returning to the pre-contact posture
  if (root["planner"]) detail::parse_planner(rd, root["planner"], n, sc.planner);
  sc.controller = ControllerConfig::defaults(n);
  if (root["controller"])
    detail::parse_controller(rd, root["controller"], n, sc.controller, sc.controller_enabled);
  return sc;
}

/// Loads a scenario file, applying `section.key=value` overrides first.
inline Scenario load_scenario(const std::string& path, const std::vector<std::string>& overrides = {}) {
  YAML::Node root = yaml::load_file(path);
  for (const auto& o : overrides) apply_override(root, o);
  return parse_scenario(root, path);
}

/// Bundled scenario by file stem ("overhead_sphere", "cabinet", ...).
inline Scenario bundled_scenario(const std::string& name, const std::vector<std::string>& overrides = {}) {
  return load_scenario((data_dir() / "scenarios" / (name + ".yaml")).string(), overrides);
}

}  // namespace armsafe

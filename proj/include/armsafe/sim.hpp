#pragma once

/// Deterministic closed-loop simulation: RK4 plant at the control rate, the
/// receding-horizon planner every control_rate/planner_rate ticks, scripted
/// obstacle motion and contact forces, CSV logs and a run report.
///
/// Plans only change on planner ticks (or planner_latency later). Between them
/// the controller samples the active plan at the current time. The planner's
/// target follows the mode: the scenario reference while tracking or in
/// contact, the pre-contact configuration while returning.
///
/// CSV files (comma separated, one header row, numbers printed with %.10g):
///   log.csv        t, mode, q_0..q_{n-1}, qd_*, q_des_*, tau_*, tau_ext_*, r_*,
///                  contact_link, min_distance, ee_pos_err, ee_rot_err
///                  (mode: 0 TRACKING, 1 CONTACT_SAFE, 2 RETURNING, 3 RESUME_CHECK)
///   distances.csv  t, link_0..link_{n-1}   (closest obstacle per link, inf if none)
///   ee.csv         t, x, y, z, ref_x, ref_y, ref_z, pos_err, rot_err
///   planner.csv    t, status, iterations, kkt_residual, max_defect,
///                  min_predicted_distance, measured_distance, lambda, fallback, cost
/// Solve times are kept out of the CSVs so that re-runs are byte-identical.

#include "armsafe/scenario.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace armsafe {

class SimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// FNV-1a over the geometry of a scenario: robot, obstacles, reference,
/// duration and initial state. Planner and controller settings are excluded so
/// that variants of one scene compare.
inline std::string scenario_fingerprint(const Scenario& sc) {
  std::ostringstream s;
  s.precision(17);
  auto vec = [&](const auto& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) s << v(i) << ',';
  };
  auto pose = [&](const Pose& p) {
    vec(p.translation);
    vec(Eigen::Map<const Eigen::Matrix<double, 9, 1>>(p.rotation.data()));
  };
  const RobotModel& m = *sc.robot;
  s << m.name() << '|' << m.dof() << '|';
  vec(m.gravity());
  for (const auto& j : m.joints()) {
    pose(j.origin);
    vec(j.axis);
  }
  for (const auto& b : m.collision_bodies()) {
    s << b.link << ':' << b.shape.radius << ',';
    vec(b.shape.a);
    vec(b.shape.b);
  }
  pose(m.ee_frame());
  s << '|' << sc.duration << '|';
  vec(sc.q0);
  vec(sc.qd0);
  s << '|' << sc.reference.linear;
  for (std::size_t i = 0; i < sc.reference.poses.size(); ++i) {
    s << sc.reference.t[i] << ',';
    pose(sc.reference.poses[i]);
  }
  for (const auto& o : sc.obstacles) {
    s << '|' << o.name;
    for (const auto& p : o.parts) {
      s << p.radius << ',';
      vec(p.a);
      vec(p.b);
    }
    pose(o.pose);
    for (std::size_t i = 0; i < o.track.poses.size(); ++i) {
      s << o.track.t[i] << ',';
      pose(o.track.poses[i]);
    }
  }
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s.str()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Everything known about the plant and controller at one control tick.
struct TickRecord {
  double t = 0.0;
  Mode mode = Mode::tracking;
  VecX q, qd, q_des, tau, tau_ext, r_hat;
  int contact_link = -1;
  double min_distance = std::numeric_limits<double>::infinity();
  std::vector<double> link_distance;  // per link
  Pose ee, ee_ref;
  double pos_err = 0.0, rot_err = 0.0;
};

struct ModeChange {
  double t;
  Mode mode;
};

/// Closest approach of the end effector to one reference waypoint, searched
/// from halfway after the previous waypoint to halfway before the next.
struct WaypointError {
  double t = 0.0;                // waypoint time
  double t_start = 0.0, t_end = 0.0;
  double t_min = 0.0;            // when the minimum occurred
  double pose_error = std::numeric_limits<double>::infinity();  // min |T ⊖ T_wp| in the window
  double pos_error = std::numeric_limits<double>::infinity();   // at that instant, m
  double rot_error = std::numeric_limits<double>::infinity();   // at that instant, rad
};

struct Detection {
  double start = 0.0;
  int scripted_link = -1;
  bool detected = false;
  double latency = std::numeric_limits<double>::quiet_NaN();
  int identified_link = -1;  // when contact was declared
  int settled_link = -1;     // after re-identification, when the episode left CONTACT_SAFE
};

struct SolverStats {
  int solves = 0;
  int fallbacks = 0;
  double mean_ms = 0.0, max_ms = 0.0;
  double mean_iterations = 0.0;
  int max_iterations = 0;
  double min_predicted_distance = std::numeric_limits<double>::infinity();
};

struct RunReport {
  std::string scenario;
  std::string fingerprint;
  double duration = 0.0;      // simulated time reached
  double wall_seconds = 0.0;  // not deterministic
  bool aborted = false;
  std::string abort_message;
  std::vector<double> min_clearance;  // per link, inf when no obstacle
  double rms_pos_error = 0.0, rms_rot_error = 0.0;
  std::vector<WaypointError> waypoints;
  std::vector<Detection> detections;
  std::vector<ModeChange> timeline;
  int contact_episodes = 0;
  SolverStats solver;
  MpcConfig planner;
  ControllerConfig controller;
  std::string log_dir;

  double overall_min_clearance() const {
    double d = std::numeric_limits<double>::infinity();
    for (double v : min_clearance) d = std::min(d, v);
    return d;
  }
  /// Link with the smallest clearance over the run, -1 without obstacles.
  int nearest_link() const {
    int best = -1;
    for (std::size_t i = 0; i < min_clearance.size(); ++i)
      if (std::isfinite(min_clearance[i]) && (best < 0 || min_clearance[i] < min_clearance[best]))
        best = static_cast<int>(i);
    return best;
  }
};

struct RunOutput {
  RunReport report;
  std::string log_csv, distances_csv, ee_csv, planner_csv;
};

struct SimOptions {
  bool keep_logs = true;                            // build the CSV strings
  std::function<void(const TickRecord&)> observer;  // called after every tick
  std::optional<double> stop_at;                    // end before the scenario duration
};

namespace detail {

inline void csv_row(std::string& out, const std::vector<double>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_number(v[i]);
  }
  out += '\n';
}

inline std::string indexed_header(const std::string& prefix, int n) {
  std::string s;
  for (int i = 0; i < n; ++i) s += "," + prefix + std::to_string(i);
  return s;
}

}  // namespace detail

/// Runs a scenario to completion or planner abort.
inline RunOutput run(const Scenario& sc, const SimOptions& opt = {}) {
  const auto wall0 = std::chrono::steady_clock::now();
  const RobotModel& model = *sc.robot;
  const int n = model.dof();
  const double dt = sc.control_dt();
  const int divisor = sc.planner_divisor();
  const double t_end = opt.stop_at ? std::min(*opt.stop_at, sc.duration) : sc.duration;
  const long ticks = std::lround(t_end / dt);

  RunOutput out;
  RunReport& rep = out.report;
  rep.scenario = sc.name;
  rep.fingerprint = scenario_fingerprint(sc);
  rep.planner = sc.planner;
  rep.controller = sc.controller;
  rep.min_clearance.assign(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < sc.reference.t.size(); ++i) {
    const auto& ts = sc.reference.t;
    WaypointError w;
    w.t = ts[i];
    w.t_start = i > 0 ? 0.5 * (ts[i - 1] + ts[i]) : 0.0;
    w.t_end = i + 1 < ts.size() ? 0.5 * (ts[i] + ts[i + 1]) : sc.duration + dt;
    rep.waypoints.push_back(w);
  }
  for (const auto& e : sc.contacts) rep.detections.push_back({e.start, e.link});
  int active_detection = -1;  // detection whose episode is in CONTACT_SAFE
  rep.timeline.push_back({0.0, Mode::tracking});

  if (opt.keep_logs) {
    out.log_csv = "t,mode" + detail::indexed_header("q_", n) + detail::indexed_header("qd_", n) +
                  detail::indexed_header("q_des_", n) + detail::indexed_header("tau_", n) +
                  detail::indexed_header("tau_ext_", n) + detail::indexed_header("r_", n) +
                  ",contact_link,min_distance,ee_pos_err,ee_rot_err\n";
    out.distances_csv = "t" + detail::indexed_header("link_", n) + "\n";
    out.ee_csv = "t,x,y,z,ref_x,ref_y,ref_z,pos_err,rot_err\n";
    out.planner_csv =
        "t,status,iterations,kkt_residual,max_defect,min_predicted_distance,measured_distance,"
        "lambda,fallback,cost\n";
  }

  VecX q = sc.q0, qd = sc.qd0;
  Planner planner(model, sc.planner);
  ControllerState cs = make_controller_state(model, sc.controller);

  struct ActivePlan {
    MpcSolution sol;
    double t_solve;    // time of the measurement the plan starts from
    double t_active;   // time it takes effect
  };
  std::optional<ActivePlan> plan;
  std::deque<ActivePlan> pending;

  std::mt19937_64 rng(sc.seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  double sum_pos2 = 0.0, sum_rot2 = 0.0, sum_ms = 0.0, sum_iters = 0.0;
  long samples = 0;
  VecX tau = VecX::Zero(n);

  auto link_distances = [&](const KinematicState& ks, double t, std::vector<double>& per_link) {
    per_link.assign(n, std::numeric_limits<double>::infinity());
    if (sc.obstacles.empty()) return std::numeric_limits<double>::infinity();
    double dmin = std::numeric_limits<double>::infinity();
    for (const auto& r : closest_pair_per_link(model, ks, sc.true_obstacles_at(t))) {
      per_link[r.link] = std::min(per_link[r.link], r.distance);
      dmin = std::min(dmin, r.distance);
    }
    return dmin;
  };

  for (long i = 0; i <= ticks; ++i) {
    const double t = i * dt;
    if (!q.allFinite() || !qd.allFinite()) {
      rep.aborted = true;
      rep.abort_message = "state diverged at t = " + format_number(t);
      break;
    }
    VecX q_meas = q;
    if (sc.noise > 0.0)
      for (int j = 0; j < n; ++j) q_meas(j) += sc.noise * noise(rng);

    // Planner.
    const bool enabled = sc.controller_enabled;
    if (enabled && i % divisor == 0 && i < ticks) {
      PlannerInput in;
      in.x0.resize(2 * n);
      in.x0 << q_meas, qd;
      in.obstacles = sc.obstacles_at(t);
      if (cs.mode == Mode::returning || cs.mode == Mode::resume_check) {
        in.T_ref = ee_pose(model, cs.q_pre_contact);
        in.posture = cs.q_pre_contact;
      } else {
        in.T_ref = sc.reference.at(t);
      }
      Planner::Step step;
      try {
        step = planner.plan_step(in);
      } catch (const PlannerAbort& e) {
        rep.aborted = true;
        rep.abort_message = e.what();
        rep.duration = t;
        break;
      }
      const MpcSolution& s = step.solution;
      ++rep.solver.solves;
      rep.solver.fallbacks += step.fallback;
      sum_ms += s.solve_ms;
      sum_iters += s.iterations;
      rep.solver.max_ms = std::max(rep.solver.max_ms, s.solve_ms);
      rep.solver.max_iterations = std::max(rep.solver.max_iterations, s.iterations);
      if (!step.fallback)
        rep.solver.min_predicted_distance = std::min(rep.solver.min_predicted_distance, s.min_predicted_distance);
      if (opt.keep_logs) {
        out.planner_csv += format_number(t) + "," + to_string(s.status);
        out.planner_csv += "," + std::to_string(s.iterations);
        for (double v : {s.kkt_residual, s.max_defect, s.min_predicted_distance, s.measured_min_distance,
                         s.lambda})
          out.planner_csv += "," + format_number(v);
        out.planner_csv += std::string(",") + (step.fallback ? "1" : "0") + "," + format_number(s.cost) + "\n";
      }
      // A fallback plan is the previous one shifted a node; keep its timing.
      const double t_solve = step.fallback && plan ? plan->t_solve + sc.planner.dt : t;
      pending.push_back({s, t_solve, t + sc.planner_latency});
    }
    while (!pending.empty() && pending.front().t_active <= t + 1e-12) {
      plan = pending.front();
      pending.pop_front();
    }

    // Controller.
    ControlInput ci;
    ci.t = t;
    ci.dt = dt;
    ci.q = q_meas;
    ci.qd = qd;
    if (plan) {
      const PlanSample ps = sample_plan(plan->sol, t - plan->t_solve, sc.planner.dt);
      ci.q_des = ps.q;
      ci.qd_des = ps.qd;
      ci.qdd_des = ps.qdd;
    } else {
      ci.q_des = sc.q0;
      ci.qd_des = VecX::Zero(n);
      ci.qdd_des = VecX::Zero(n);
    }
    ControlOutput co;
    if (enabled) {
      co = mode_step(cs, sc.controller, model, ci);
      tau = co.tau;
      if (active_detection >= 0 && co.mode == Mode::contact_safe)
        rep.detections[active_detection].settled_link = co.contact_link;
      if (co.mode_changed && co.mode != Mode::contact_safe) active_detection = -1;
      if (co.mode_changed) {
        rep.timeline.push_back({t, co.mode});
        if (co.mode == Mode::contact_safe)
          for (std::size_t e = 0; e < sc.contacts.size(); ++e) {
            Detection& d = rep.detections[e];
            if (!d.detected && t >= sc.contacts[e].start && t <= sc.contacts[e].end + 0.5) {
              d.detected = true;
              d.latency = t - sc.contacts[e].start;
              d.identified_link = d.settled_link = co.contact_link;
              active_detection = static_cast<int>(e);
              break;
            }
          }
      }
    } else {
      co.mode = Mode::tracking;
      co.tau = VecX::Zero(n);
      co.r_hat = VecX::Zero(n);
      tau.setZero();
    }

    // External forces, held over the tick.
    auto external = [&](const VecX& qq) {
      VecX te = VecX::Zero(n);
      bool any = false;
      for (const auto& e : sc.contacts)
        if (t >= e.start - 1e-12 && t < e.end - 1e-12) any = true;
      if (!any) return te;
      const auto ks = kinematic_state(model, qq);
      for (const auto& e : sc.contacts) {
        if (!(t >= e.start - 1e-12 && t < e.end - 1e-12)) continue;
        const Vec3 p = ks.frames[e.link] * e.point;
        te += detail::point_jacobian(ks, n, e.link, p).bottomRows<3>().transpose() * e.force;
      }
      return te;
    };
    const VecX tau_ext = external(q);

    // Measurements of the true state.
    const auto ks = kinematic_state(model, q);
    TickRecord rec;
    rec.t = t;
    rec.mode = co.mode;
    rec.q = q;
    rec.qd = qd;
    rec.q_des = ci.q_des;
    rec.tau = tau;
    rec.tau_ext = tau_ext;
    rec.r_hat = co.r_hat;
    rec.contact_link = co.contact_link;
    rec.min_distance = link_distances(ks, t, rec.link_distance);
    rec.ee = ks.ee();
    rec.ee_ref = sc.reference.at(t);
    rec.pos_err = (rec.ee.translation - rec.ee_ref.translation).norm();
    rec.rot_err = so3_log(rec.ee.rotation.transpose() * rec.ee_ref.rotation).norm();
    for (int j = 0; j < n; ++j) rep.min_clearance[j] = std::min(rep.min_clearance[j], rec.link_distance[j]);
    sum_pos2 += rec.pos_err * rec.pos_err;
    sum_rot2 += rec.rot_err * rec.rot_err;
    ++samples;
    for (std::size_t w = 0; w < rep.waypoints.size(); ++w) {
      WaypointError& wp = rep.waypoints[w];
      if (t < wp.t_start || t >= wp.t_end) continue;
      const Pose& target = sc.reference.poses[w];
      const double e = pose_difference(rec.ee, target).vector().norm();
      if (e < wp.pose_error) {
        wp.pose_error = e;
        wp.t_min = t;
        wp.pos_error = (rec.ee.translation - target.translation).norm();
        wp.rot_error = so3_log(rec.ee.rotation.transpose() * target.rotation).norm();
      }
    }
    if (opt.keep_logs) {
      std::vector<double> row{t, static_cast<double>(static_cast<int>(co.mode))};
      for (const VecX* v : std::initializer_list<const VecX*>{&q, &qd, &ci.q_des, &tau, &tau_ext, &co.r_hat})
        row.insert(row.end(), v->data(), v->data() + v->size());
      row.insert(row.end(), {static_cast<double>(co.contact_link), rec.min_distance, rec.pos_err, rec.rot_err});
      detail::csv_row(out.log_csv, row);
      row.assign(1, t);
      row.insert(row.end(), rec.link_distance.begin(), rec.link_distance.end());
      detail::csv_row(out.distances_csv, row);
      detail::csv_row(out.ee_csv, {t, rec.ee.translation.x(), rec.ee.translation.y(), rec.ee.translation.z(),
                                   rec.ee_ref.translation.x(), rec.ee_ref.translation.y(),
                                   rec.ee_ref.translation.z(), rec.pos_err, rec.rot_err});
    }
    if (opt.observer) opt.observer(rec);
    rep.duration = t;
    if (i == ticks) break;

    // Plant step.
    auto f = [&](const VecX& qq, const VecX& vv) { return forward_dynamics(model, qq, vv, tau, tau_ext); };
    const VecX k1v = f(q, qd), k1q = qd;
    const VecX k2q = qd + 0.5 * dt * k1v, k2v = f(q + 0.5 * dt * k1q, k2q);
    const VecX k3q = qd + 0.5 * dt * k2v, k3v = f(q + 0.5 * dt * k2q, k3q);
    const VecX k4q = qd + dt * k3v, k4v = f(q + dt * k3q, k4q);
    q += dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
    qd += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
  }

  if (samples > 0) {
    rep.rms_pos_error = std::sqrt(sum_pos2 / samples);
    rep.rms_rot_error = std::sqrt(sum_rot2 / samples);
  }
  if (rep.solver.solves > 0) {
    rep.solver.mean_ms = sum_ms / rep.solver.solves;
    rep.solver.mean_iterations = sum_iters / rep.solver.solves;
  }
  rep.contact_episodes = cs.contact_episodes;
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string report_text(const RunReport& r) {
  YAML::Emitter e;
  e.SetDoublePrecision(10);
  auto list = [&](const auto& v) {
    e << YAML::Flow << YAML::BeginSeq;
    for (Eigen::Index i = 0; i < v.size(); ++i) e << v(i);
    e << YAML::EndSeq;
  };
  auto number = [&](double v) {
    if (std::isfinite(v)) {
      e << v;
    } else if (std::isnan(v)) {
      e << ".nan";
    } else {
      e << (v > 0 ? ".inf" : "-.inf");
    }
  };
  e << YAML::BeginMap;
  e << YAML::Key << "scenario" << YAML::Value << r.scenario;
  e << YAML::Key << "fingerprint" << YAML::Value << r.fingerprint;
  e << YAML::Key << "simulated_time" << YAML::Value << r.duration;
  e << YAML::Key << "wall_seconds" << YAML::Value << r.wall_seconds;
  e << YAML::Key << "aborted" << YAML::Value << r.aborted;
  if (r.aborted) e << YAML::Key << "abort_message" << YAML::Value << r.abort_message;
  e << YAML::Key << "min_clearance" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double v : r.min_clearance) number(v);
  e << YAML::EndSeq;
  e << YAML::Key << "nearest_link" << YAML::Value << r.nearest_link();
  e << YAML::Key << "rms_pos_error" << YAML::Value << r.rms_pos_error;
  e << YAML::Key << "rms_rot_error" << YAML::Value << r.rms_rot_error;
  e << YAML::Key << "waypoints" << YAML::Value << YAML::BeginSeq;
  for (const auto& w : r.waypoints) {
    e << YAML::Flow << YAML::BeginMap << YAML::Key << "t" << YAML::Value << w.t;
    e << YAML::Key << "t_min" << YAML::Value << w.t_min;
    e << YAML::Key << "pose_error" << YAML::Value;
    number(w.pose_error);
    e << YAML::Key << "pos_error" << YAML::Value;
    number(w.pos_error);
    e << YAML::Key << "rot_error" << YAML::Value;
    number(w.rot_error);
    e << YAML::EndMap;
  }
  e << YAML::EndSeq;
  e << YAML::Key << "detections" << YAML::Value << YAML::BeginSeq;
  for (const auto& d : r.detections) {
    e << YAML::Flow << YAML::BeginMap << YAML::Key << "start" << YAML::Value << d.start;
    e << YAML::Key << "link" << YAML::Value << d.scripted_link;
    e << YAML::Key << "detected" << YAML::Value << d.detected;
    e << YAML::Key << "latency" << YAML::Value;
    number(d.latency);
    e << YAML::Key << "identified_link" << YAML::Value << d.identified_link;
    e << YAML::Key << "settled_link" << YAML::Value << d.settled_link << YAML::EndMap;
  }
  e << YAML::EndSeq;
  e << YAML::Key << "contact_episodes" << YAML::Value << r.contact_episodes;
  e << YAML::Key << "timeline" << YAML::Value << YAML::BeginSeq;
  for (const auto& m : r.timeline)
    e << YAML::Flow << YAML::BeginMap << YAML::Key << "t" << YAML::Value << m.t << YAML::Key << "mode"
      << YAML::Value << to_string(m.mode) << YAML::EndMap;
  e << YAML::EndSeq;
  e << YAML::Key << "solver" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "solves" << YAML::Value << r.solver.solves;
  e << YAML::Key << "fallbacks" << YAML::Value << r.solver.fallbacks;
  e << YAML::Key << "mean_ms" << YAML::Value << r.solver.mean_ms;
  e << YAML::Key << "max_ms" << YAML::Value << r.solver.max_ms;
  e << YAML::Key << "mean_iterations" << YAML::Value << r.solver.mean_iterations;
  e << YAML::Key << "max_iterations" << YAML::Value << r.solver.max_iterations;
  e << YAML::Key << "min_predicted_distance" << YAML::Value;
  number(r.solver.min_predicted_distance);
  e << YAML::EndMap;
  const MpcConfig& p = r.planner;
  e << YAML::Key << "planner" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "N" << YAML::Value << p.N << YAML::Key << "dt" << YAML::Value << p.dt;
  e << YAML::Key << "shooting" << YAML::Value << to_string(p.shooting);
  e << YAML::Key << "relaxation" << YAML::Value << p.relaxation;
  e << YAML::Key << "Q_ee" << YAML::Value;
  list(p.Q_ee);
  e << YAML::Key << "Q_rep" << YAML::Value;
  list(p.Q_rep);
  e << YAML::Key << "Q_s" << YAML::Value;
  list(p.Q_s);
  e << YAML::Key << "d_th1" << YAML::Value << p.d_th1 << YAML::Key << "d_th2" << YAML::Value << p.d_th2;
  e << YAML::Key << "k_rep" << YAML::Value << p.k_rep << YAML::Key << "alpha" << YAML::Value << p.alpha;
  e << YAML::Key << "posture_weight" << YAML::Value << p.posture_weight;
  e << YAML::EndMap;
  const ControllerConfig& c = r.controller;
  e << YAML::Key << "controller" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "k" << YAML::Value << c.k << YAML::Key << "tau_th" << YAML::Value << c.tau_th;
  e << YAML::Key << "k_f" << YAML::Value << c.k_f << YAML::Key << "null_damping" << YAML::Value
    << c.null_damping;
  e << YAML::Key << "Kp1" << YAML::Value;
  list(c.gains.Kp1);
  e << YAML::Key << "Kd1" << YAML::Value;
  list(c.gains.Kd1);
  e << YAML::EndMap;
  if (!r.log_dir.empty()) e << YAML::Key << "log_dir" << YAML::Value << r.log_dir;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

/// Writes report.txt, log.csv, distances.csv, ee.csv and planner.csv.
inline void write_outputs(RunOutput& out, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw SimError("cannot create output directory " + dir.string() + ": " + ec.message());
  out.report.log_dir = dir.string();
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw SimError("cannot write " + (dir / name).string());
    f << text;
  };
  put("log.csv", out.log_csv);
  put("distances.csv", out.distances_csv);
  put("ee.csv", out.ee_csv);
  put("planner.csv", out.planner_csv);
  put("report.txt", report_text(out.report));
}

/// b - a for every compared metric.
struct RunDelta {
  std::vector<double> waypoint_pose_error;
  std::vector<double> waypoint_pos_error;
  std::vector<double> min_clearance;  // per link
  double rms_pos_error = 0.0, rms_rot_error = 0.0;
  double mean_solve_ms = 0.0, max_solve_ms = 0.0, mean_iterations = 0.0;
};

/// Throws SimError unless both reports come from the same scene.
inline RunDelta compare_runs(const RunReport& a, const RunReport& b) {
  if (a.fingerprint != b.fingerprint)
    throw SimError("cannot compare runs of different scenes ('" + a.scenario + "' " + a.fingerprint +
                   " vs '" + b.scenario + "' " + b.fingerprint + ")");
  RunDelta d;
  // NaN where either side is infinite (no obstacle, or a waypoint never reached).
  auto diff = [](double x, double y) {
    return std::isfinite(x) && std::isfinite(y) ? y - x : std::numeric_limits<double>::quiet_NaN();
  };
  for (std::size_t i = 0; i < a.waypoints.size(); ++i) {
    d.waypoint_pose_error.push_back(diff(a.waypoints[i].pose_error, b.waypoints[i].pose_error));
    d.waypoint_pos_error.push_back(diff(a.waypoints[i].pos_error, b.waypoints[i].pos_error));
  }
  for (std::size_t i = 0; i < a.min_clearance.size(); ++i)
    d.min_clearance.push_back(diff(a.min_clearance[i], b.min_clearance[i]));
  d.rms_pos_error = b.rms_pos_error - a.rms_pos_error;
  d.rms_rot_error = b.rms_rot_error - a.rms_rot_error;
  d.mean_solve_ms = b.solver.mean_ms - a.solver.mean_ms;
  d.max_solve_ms = b.solver.max_ms - a.solver.max_ms;
  d.mean_iterations = b.solver.mean_iterations - a.solver.mean_iterations;
  return d;
}

/// metric,index,a,b,delta rows.
inline std::string compare_csv(const RunReport& a, const RunReport& b, const RunDelta& d) {
  std::string s = "metric,index,a,b,delta\n";
  auto row = [&](const std::string& m, int i, double x, double y, double dv) {
    s += m + "," + std::to_string(i) + "," + format_number(x) + "," + format_number(y) + "," +
         format_number(dv) + "\n";
  };
  for (std::size_t i = 0; i < d.waypoint_pose_error.size(); ++i) {
    row("waypoint_pose_error", int(i), a.waypoints[i].pose_error, b.waypoints[i].pose_error,
        d.waypoint_pose_error[i]);
    row("waypoint_pos_error", int(i), a.waypoints[i].pos_error, b.waypoints[i].pos_error,
        d.waypoint_pos_error[i]);
  }
  for (std::size_t i = 0; i < d.min_clearance.size(); ++i)
    row("min_clearance", int(i), a.min_clearance[i], b.min_clearance[i], d.min_clearance[i]);
  row("rms_pos_error", 0, a.rms_pos_error, b.rms_pos_error, d.rms_pos_error);
  row("rms_rot_error", 0, a.rms_rot_error, b.rms_rot_error, d.rms_rot_error);
  row("mean_solve_ms", 0, a.solver.mean_ms, b.solver.mean_ms, d.mean_solve_ms);
  row("max_solve_ms", 0, a.solver.max_ms, b.solver.max_ms, d.max_solve_ms);
  row("mean_iterations", 0, a.solver.mean_iterations, b.solver.mean_iterations, d.mean_iterations);
  return s;
}

// ---------------------------------------------------------------------------
// Shooting benchmark

struct BenchRow {
  Shooting method = Shooting::multiple;
  int N = 0;
  double mean_ms = 0.0, p95_ms = 0.0;
  double mean_iterations = 0.0;
  long total_iterations = 0;
  int solves = 0;
};

/// Planner-only closed loop: the state follows each plan exactly for one
/// planner period. Runs every method and horizon on the scenario.
inline std::vector<BenchRow> bench(const Scenario& sc, const std::vector<int>& horizons,
                                   const std::vector<Shooting>& methods = {Shooting::multiple,
                                                                           Shooting::single}) {
  const RobotModel& model = *sc.robot;
  const int n = model.dof();
  const double period = 1.0 / sc.planner_rate;
  const int steps = std::max(1, static_cast<int>(std::lround(sc.duration * sc.planner_rate)));
  std::vector<BenchRow> rows;
  for (Shooting m : methods)
    for (int N : horizons) {
      MpcConfig cfg = sc.planner;
      cfg.N = N;
      cfg.shooting = m;
      Planner planner(model, cfg);
      VecX x(2 * n);
      x << sc.q0, sc.qd0;
      std::vector<double> ms;
      BenchRow row;
      row.method = m;
      row.N = N;
      for (int k = 0; k < steps; ++k) {
        const double t = k * period;
        PlannerInput in;
        in.x0 = x;
        in.T_ref = sc.reference.at(t);
        in.obstacles = sc.obstacles_at(t);
        Planner::Step step;
        try {
          step = planner.plan_step(in);
        } catch (const PlannerAbort& e) {
          throw SimError(std::string("bench: ") + e.what());
        }
        ms.push_back(step.solution.solve_ms);
        row.total_iterations += step.solution.iterations;
        const PlanSample ps = sample_plan(step.solution, period, cfg.dt);
        x << ps.q, ps.qd;
      }
      row.solves = steps;
      double sum = 0.0;
      for (double v : ms) sum += v;
      row.mean_ms = sum / ms.size();
      std::sort(ms.begin(), ms.end());
      row.p95_ms = ms[std::min(ms.size() - 1, static_cast<std::size_t>(std::ceil(0.95 * ms.size())) - 1)];
      row.mean_iterations = static_cast<double>(row.total_iterations) / steps;
      rows.push_back(row);
    }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string s = "method,N,mean_ms,p95_ms,iterations\n";
  for (const auto& r : rows)
    s += std::string(to_string(r.method)) + "," + std::to_string(r.N) + "," + format_number(r.mean_ms) + "," +
         format_number(r.p95_ms) + "," + format_number(r.mean_iterations) + "\n";
  return s;
}

}  // namespace armsafe

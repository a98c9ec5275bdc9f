// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include "armsafe/sim.hpp"
#include "armsafe/validate.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>

using namespace armsafe;

namespace {

int failures = 0;

void report(int id, const char* title, bool pass, const std::string& detail) {
  std::printf("[%s] %d %s: %s\n", pass ? "PASS" : "FAIL", id, title, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

SimOptions no_logs() {
  SimOptions o;
  o.keep_logs = false;
  return o;
}

// Every per-link clearance stays beyond 0.02 m on the overhead sphere.
void clearance() {
  const Scenario sc = bundled_scenario("overhead_sphere");
  const auto t0 = std::chrono::steady_clock::now();
  const RunReport rep = run(sc, no_logs()).report;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double d = rep.overall_min_clearance();
  const bool pass = !rep.aborted && d >= 0.02 - 1e-4 && secs < 60.0;
  report(1, "clearance", pass,
         fmt("min clearance %.5f m (link %d, limit 0.0199), runtime %.1f s (limit 60)%s", d, rep.nearest_link(),
             secs, rep.aborted ? ", aborted" : ""));
}

// Proposed planner against the baseline (no relaxation, no repulsion) on the cabinet.
void superiority() {
  const Scenario prop = bundled_scenario("cabinet");
  const Scenario base = bundled_scenario("cabinet", {"planner.relaxation=false", "planner.Q_rep=0"});
  const RunReport a = run(prop, no_logs()).report, b = run(base, no_logs()).report;
  bool pass = !a.aborted && !b.aborted && a.waypoints.size() == 3;
  std::string detail = "pose error proposed/baseline:";
  for (std::size_t i = 0; i < a.waypoints.size(); ++i) {
    const double ea = a.waypoints[i].pose_error, eb = b.waypoints[i].pose_error;
    pass = pass && ea < eb;
    detail += fmt(" %.4f/%.4f", ea, eb);
  }
  // Nearest link over both runs.
  int link = a.nearest_link();
  if (b.nearest_link() >= 0 && (link < 0 || b.min_clearance[b.nearest_link()] < a.min_clearance[link]))
    link = b.nearest_link();
  if (link < 0) {
    pass = false;
    detail += "; no obstacle clearance";
  } else {
    pass = pass && a.min_clearance[link] > b.min_clearance[link];
    detail += fmt("; clearance on link %d %.4f/%.4f m", link, a.min_clearance[link], b.min_clearance[link]);
  }
  report(2, "task-oriented avoidance beats baseline", pass, detail);
}

// Multiple shooting solves faster than single shooting at N = 50.
void shooting() {
  const Scenario sc = bundled_scenario("bench", {"planner.dt=0.05"});
  bool pass = true;
  std::string detail = "mean ms multiple/single:";
  for (int rep = 0; rep < 3; ++rep) {
    const auto rows = bench(sc, {50});
    const double ms = rows[0].mean_ms, ss = rows[1].mean_ms;
    pass = pass && rows[0].method == Shooting::multiple && ms < ss;
    detail += fmt(" %.2f/%.2f", ms, ss);
  }
  report(3, "multiple shooting faster at N=50", pass, detail);
}

// Randomized pushes on a holding arm. The force direction is uniform, the
// magnitude is set so the largest joint torque it causes is uniform in
// [5, 20] N m. Pushes whose torque on the pushed link's own joint stays
// under the threshold cannot be attributed to that link by any joint-torque
// observer and are redrawn. The link counts as identified when the controller
// settles on it during the episode; the first guess is printed as well.
void detection() {
  const Scenario base = bundled_scenario("two_push", {"duration=2.5"});
  const RobotModel& m = *base.robot;
  const auto ks = kinematic_state(m, base.q0);
  const double tau_th = base.controller.tau_th;
  std::mt19937 rng(2024);
  std::uniform_int_distribution<int> pick_link(2, m.dof() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0), peak(5.0, 20.0);
  std::normal_distribution<double> gauss;

  int ok = 0, redrawn = 0;
  double worst = 0.0;
  std::string detail;
  for (int trial = 0; trial < 10;) {
    const int link = pick_link(rng);
    std::vector<const CollisionBody*> bodies;
    for (const auto& b : m.collision_bodies())
      if (b.link == link) bodies.push_back(&b);
    if (bodies.empty()) continue;
    const Primitive& seg = bodies[std::min<std::size_t>(bodies.size() - 1, unit(rng) * bodies.size())]->shape;
    const Vec3 p_link = seg.a + unit(rng) * (seg.b - seg.a);
    const Vec3 dir = Vec3(gauss(rng), gauss(rng), gauss(rng)).normalized();
    const Vec3 p_world = ks.frames[link] * p_link;
    const VecX tau_unit = point_jacobian(m, base.q0, link, p_world).bottomRows<3>().transpose() * dir;
    const double scale = peak(rng) / tau_unit.cwiseAbs().maxCoeff();
    if (std::abs(tau_unit(link)) * scale < tau_th) {
      ++redrawn;
      continue;
    }
    Scenario sc = base;
    sc.contacts = {{1.0, 1.5, link, scale * dir, p_link}};
    const RunReport rep = run(sc, no_logs()).report;
    const Detection& d = rep.detections.at(0);
    const bool hit = !rep.aborted && d.detected && d.latency <= 0.05 + 1e-9 && d.settled_link == link;
    ok += hit;
    if (d.detected) worst = std::max(worst, d.latency);
    detail += fmt(" [link %d peak %.1f own %.1f: %s %.0f ms id %d->%d]", link,
                  (scale * tau_unit).cwiseAbs().maxCoeff(), std::abs(scale * tau_unit(link)),
                  d.detected ? "det" : "miss", 1e3 * d.latency, d.identified_link, d.settled_link);
    ++trial;
  }
  report(4, "push detection within 50 ms", ok == 10,
         fmt("%d/10 detected in time with the right link, worst latency %.0f ms, %d redrawn;", ok, 1e3 * worst,
             redrawn) +
             detail);
}

// Straight-line tracking while the forearm is pushed for 2 s.
void task_consistency() {
  const Scenario sc = bundled_scenario("line_push");
  const ContactEvent& ev = sc.contacts.at(0);
  const Vec3 n = ev.force.normalized();
  Vec3 p0 = Vec3::Zero();
  double sq = 0.0, disp = 0.0, err_after = NAN;
  int count = 0;
  Mode mode_after = Mode::contact_safe;
  SimOptions o = no_logs();
  o.observer = [&](const TickRecord& r) {
    const Vec3 p = kinematic_state(*sc.robot, r.q).frames[ev.link] * ev.point;
    if (r.t <= ev.start) p0 = p;
    if (r.t > ev.start && r.t <= ev.end) {
      sq += r.pos_err * r.pos_err;
      ++count;
    }
    if (r.t > ev.start) disp = std::max(disp, (p - p0).dot(n));
    if (std::abs(r.t - (ev.end + 3.0)) < 5e-4) {
      err_after = r.pos_err;
      mode_after = r.mode;
    }
  };
  const RunReport rep = run(sc, o).report;
  const double rms = std::sqrt(sq / std::max(count, 1));
  const bool pass = !rep.aborted && rms < 0.02 && disp >= 0.05 && mode_after == Mode::tracking && err_after < 0.005;
  report(5, "task kept under contact", pass,
         fmt("EE RMS during push %.2f mm (limit 20), pushed point moved %.1f cm (min 5), 3 s after release mode %s "
             "error %.2f mm (limit 5)",
             1e3 * rms, 1e2 * disp, to_string(mode_after), 1e3 * err_after));
}

// Estimator accuracy on a 2 N m step and silence during aggressive tracking.
void estimator() {
  // Step torque on one joint of the Panda held by computed torque.
  const Scenario hold = bundled_scenario("two_push");
  const RobotModel& m = *hold.robot;
  const int nq = m.dof();
  const double dt = 1e-3;
  const GainSet gains = hold.controller.gains;
  UsdeState obs;
  obs.k = hold.controller.k;
  VecX q = hold.q0, qd = VecX::Zero(nq), tau = VecX::Zero(nq), r;
  VecX tau_ext = VecX::Zero(nq);
  for (int step = 0; step <= 2000; ++step) {
    tau_ext(3) = step * dt >= 1.0 ? 2.0 : 0.0;
    r = usde_update(obs, m, q, qd, tau, dt);
    if (step == 2000) break;
    tau = tracking_torque(m, q, qd, hold.q0, VecX::Zero(nq), gains);
    auto f = [&](const VecX& qq, const VecX& vv) { return forward_dynamics(m, qq, vv, tau, tau_ext); };
    const VecX k1v = f(q, qd), k1q = qd;
    const VecX k2q = qd + 0.5 * dt * k1v, k2v = f(q + 0.5 * dt * k1q, k2q);
    const VecX k3q = qd + 0.5 * dt * k2v, k3v = f(q + 0.5 * dt * k2q, k3q);
    const VecX k4q = qd + dt * k3v, k4v = f(q + dt * k3q, k4q);
    q += dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q);
    qd += dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
  }
  const double rel = (r - tau_ext).norm() / tau_ext.norm();

  // Aggressive obstacle-free tracking: no contact may be declared.
  const Scenario agg = bundled_scenario("aggressive");
  double peak = 0.0;
  SimOptions o = no_logs();
  o.observer = [&](const TickRecord& rec) { peak = std::max(peak, rec.r_hat.cwiseAbs().maxCoeff()); };
  const RunReport rep = run(agg, o).report;
  const bool quiet = !rep.aborted && rep.contact_episodes == 0 && rep.timeline.size() == 1;
  report(6, "estimator fidelity", rel < 0.02 && quiet,
         fmt("relative error 1 s after a 2 N m step %.2f%% (limit 2%%); %.0f s aggressive tracking: %d contact "
             "episodes, peak |r| %.2f N m (threshold %.1f)",
             1e2 * rel, rep.duration, rep.contact_episodes, peak, agg.controller.tau_th));
}

void properties() {
  // 1000 random configurations per model.
  ValidateOptions opt;
  opt.samples = 1000;
  const ValidationReport v = validate(opt);
  // Byte-identical reruns with sensor noise.
  const Scenario sc = bundled_scenario("overhead_sphere", {"duration=1", "noise=0.0005", "seed=3"});
  const RunOutput a = run(sc), b = run(sc);
  const bool same = a.log_csv == b.log_csv && a.planner_csv == b.planner_csv && a.distances_csv == b.distances_csv;
  std::string detail;
  for (const auto& s : v.suites) detail += fmt(" %s %d/%d;", s.name.c_str(), s.passed, s.passed + s.failed);
  detail += same ? " reruns identical" : " reruns differ";
  report(7, "numerical properties", v.ok() && same, detail);
}

}  // namespace

int main() {
  clearance();
  superiority();
  shooting();
  detection();
  task_consistency();
  estimator();
  properties();
  std::printf("%d of 7 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

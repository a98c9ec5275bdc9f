#include "armsafe/sim.hpp"
#include "armsafe/validate.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace armsafe;

namespace {

SimOptions quiet() {
  SimOptions o;
  o.keep_logs = false;
  return o;
}

}  // namespace

TEST(Sim, ZeroGravityWithoutTorqueStaysAtRest) {
  const Scenario sc = bundled_scenario("zero_gravity");
  ASSERT_FALSE(sc.controller_enabled);
  double drift = 0.0, speed = 0.0, torque = 0.0;
  SimOptions o = quiet();
  o.observer = [&](const TickRecord& r) {
    drift = std::max(drift, (r.q - sc.q0).cwiseAbs().maxCoeff());
    speed = std::max(speed, r.qd.cwiseAbs().maxCoeff());
    torque = std::max(torque, r.tau.cwiseAbs().maxCoeff());
  };
  const RunReport rep = run(sc, o).report;
  EXPECT_FALSE(rep.aborted);
  EXPECT_EQ(rep.solver.solves, 0);
  EXPECT_EQ(torque, 0.0);
  EXPECT_LT(drift, 1e-12);
  EXPECT_LT(speed, 1e-12);
}

TEST(Sim, KineticEnergyConservedWithoutControl) {
  const Scenario sc = bundled_scenario(
      "zero_gravity", {"duration=10", "initial.qd=[0.4, -0.3, 0.5, 0.2, -0.6, 0.3, 0.8]"});
  const double E0 = kinetic_energy(*sc.robot, sc.q0, sc.qd0);
  double worst = 0.0;
  SimOptions o = quiet();
  o.observer = [&](const TickRecord& r) {
    worst = std::max(worst, std::abs(kinetic_energy(*sc.robot, r.q, r.qd) - E0));
  };
  const RunReport rep = run(sc, o).report;
  ASSERT_FALSE(rep.aborted);
  EXPECT_NEAR(rep.duration, 10.0, 1e-9);
  EXPECT_LT(worst, 1e-4 * E0) << "E0 " << E0;
}

TEST(Sim, TotalEnergyConservedUnderGravity) {
  const Scenario sc = bundled_scenario("zero_gravity", {"gravity=[0, 0, -9.81]", "duration=3"});
  const RobotModel& m = *sc.robot;
  const double E0 = kinetic_energy(m, sc.q0, sc.qd0) + potential_energy(m, sc.q0);
  double worst = 0.0, peak_ke = 0.0;
  SimOptions o = quiet();
  o.observer = [&](const TickRecord& r) {
    const double ke = kinetic_energy(m, r.q, r.qd);
    peak_ke = std::max(peak_ke, ke);
    worst = std::max(worst, std::abs(ke + potential_energy(m, r.q) - E0));
  };
  run(sc, o);
  ASSERT_GT(peak_ke, 1.0);  // the arm actually falls
  EXPECT_LT(worst, 1e-4 * peak_ke);
}

TEST(Sim, RepeatedRunsAreByteIdentical) {
  const Scenario sc = bundled_scenario("overhead_sphere", {"duration=1.5", "noise=0.0005", "seed=11"});
  const RunOutput a = run(sc), b = run(sc);
  ASSERT_FALSE(a.report.aborted);
  EXPECT_GT(a.log_csv.size(), 1000u);
  EXPECT_EQ(a.log_csv, b.log_csv);
  EXPECT_EQ(a.distances_csv, b.distances_csv);
  EXPECT_EQ(a.ee_csv, b.ee_csv);
  EXPECT_EQ(a.planner_csv, b.planner_csv);

  const Scenario other = bundled_scenario("overhead_sphere", {"duration=1.5", "noise=0.0005", "seed=12"});
  EXPECT_NE(run(other).log_csv, a.log_csv);
}

TEST(Sim, PushTimelineHasTwoEpisodesAtScriptedTimes) {
  const Scenario sc = bundled_scenario("two_push");
  const RunReport rep = run(sc, quiet()).report;
  ASSERT_FALSE(rep.aborted);
  EXPECT_EQ(rep.contact_episodes, 2);
  std::vector<double> entries;
  for (const auto& c : rep.timeline)
    if (c.mode == Mode::contact_safe) entries.push_back(c.t);
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_NEAR(entries[0], 6.0, 0.05);
  EXPECT_NEAR(entries[1], 22.0, 0.05);
  for (const auto& d : rep.detections) {
    EXPECT_TRUE(d.detected);
    EXPECT_EQ(d.identified_link, d.scripted_link);
    EXPECT_EQ(d.settled_link, d.scripted_link);
  }
  // Each episode completes the cycle back to tracking.
  ASSERT_GE(rep.timeline.size(), 9u);
  const Mode cycle[] = {Mode::contact_safe, Mode::returning, Mode::resume_check, Mode::tracking};
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(rep.timeline[1 + k].mode, cycle[k]);
    EXPECT_EQ(rep.timeline[5 + k].mode, cycle[k]);
  }
}

TEST(Sim, ComparingIdenticalRunsGivesZeroDeltas) {
  const Scenario sc = bundled_scenario("overhead_sphere", {"duration=2"});
  const RunReport a = run(sc, quiet()).report, b = run(sc, quiet()).report;
  const RunDelta d = compare_runs(a, b);
  ASSERT_EQ(d.waypoint_pose_error.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    // The last waypoint lies beyond the shortened run and has no error to compare.
    if (std::isfinite(a.waypoints[i].pose_error)) {
      EXPECT_EQ(d.waypoint_pose_error[i], 0.0);
      EXPECT_EQ(d.waypoint_pos_error[i], 0.0);
    } else {
      EXPECT_TRUE(std::isnan(d.waypoint_pose_error[i]));
    }
  }
  for (double v : d.min_clearance) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(d.rms_pos_error, 0.0);
  EXPECT_EQ(d.rms_rot_error, 0.0);
  EXPECT_FALSE(compare_csv(a, b, d).empty());
}

TEST(Sim, PlannerRunsOnlyAtItsRate) {
  const Scenario sc = bundled_scenario("two_push", {"duration=8", "planner_rate=25"});
  const RunOutput out = run(sc);
  ASSERT_FALSE(out.report.aborted);
  // 8 s at 25 Hz, mode changes included: no extra solves.
  EXPECT_EQ(out.report.solver.solves, 200);
  std::istringstream rows(out.planner_csv);
  std::string line;
  std::getline(rows, line);
  int count = 0;
  while (std::getline(rows, line)) {
    const double t = std::stod(line.substr(0, line.find(',')));
    EXPECT_NEAR(t * 25.0, std::round(t * 25.0), 1e-9) << line;
    ++count;
  }
  EXPECT_EQ(count, 200);
}

TEST(Sim, PlannerLatencyDelaysPlans) {
  // The reference jumps at t = 1. A plan solved then only takes effect after
  // the latency, so the delayed run keeps holding still for that long.
  const Scenario fast = bundled_scenario("overhead_sphere", {"duration=1.4"});
  const Scenario slow = bundled_scenario("overhead_sphere", {"duration=1.4", "planner_latency=0.12"});
  std::vector<VecX> qf, qs;
  SimOptions of = quiet(), os = quiet();
  of.observer = [&](const TickRecord& r) { qf.push_back(r.q_des); };
  os.observer = [&](const TickRecord& r) { qs.push_back(r.q_des); };
  run(fast, of);
  run(slow, os);
  ASSERT_EQ(qf.size(), qs.size());
  EXPECT_GT((qf[1100] - qf[1000]).norm(), 1e-4);
  EXPECT_LT((qs[1100] - qs[1000]).norm(), 1e-9);
  EXPECT_GT((qs[1300] - qs[1000]).norm(), 1e-4);
}

TEST(Validate, SuitesPassAndFaultInjectionIsCaught) {
  const ValidationReport good = validate();
  EXPECT_TRUE(good.ok()) << good.text();
  EXPECT_EQ(good.suites.size(), 8u);

  ValidateOptions bad;
  bad.flip_gravity_sign = true;
  const ValidationReport rep = validate(bad);
  EXPECT_FALSE(rep.ok());
  ASSERT_NE(rep.find("gravity"), nullptr);
  EXPECT_FALSE(rep.find("gravity")->ok());
  EXPECT_TRUE(rep.find("jacobian_fd")->ok());
  EXPECT_TRUE(rep.find("mass_spd")->ok());
}

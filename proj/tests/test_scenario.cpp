#include "armsafe/sim.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace armsafe;

namespace {

Scenario from_text(const std::string& text) { return parse_scenario(YAML::Load(text), "inline.yaml"); }

std::string error_of(const std::string& text) {
  try {
    from_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Scenario, MinimalLoads) {
  const Scenario sc = from_text("robot: planar2r\nduration: 1\ninitial: {q: [0.3, 0.5]}\n");
  EXPECT_EQ(sc.robot->dof(), 2);
  EXPECT_DOUBLE_EQ(sc.duration, 1.0);
  EXPECT_EQ(sc.control_rate, 1000);
  EXPECT_EQ(sc.planner_divisor(), 50);
  EXPECT_TRUE(sc.qd0.isZero());
  // Without a reference the initial pose is held.
  const Pose T0 = ee_pose(*sc.robot, sc.q0);
  EXPECT_LT((sc.reference.at(0.7).translation - T0.translation).norm(), 1e-12);
}

TEST(Scenario, OutOfOrderWaypointsNameTheField) {
  const std::string msg = error_of(R"(
robot: planar2r
duration: 3
initial: {q: [0, 0]}
reference:
  waypoints:
    - {t: 0, xyz: [1, 1, 0]}
    - {t: 2, xyz: [1, 0.5, 0]}
    - {t: 1, xyz: [1, 0, 0]}
)");
  EXPECT_NE(msg.find("reference.waypoints[2].t"), std::string::npos) << msg;
  EXPECT_NE(msg.find("nondecreasing"), std::string::npos) << msg;
  EXPECT_NE(msg.find("inline.yaml:"), std::string::npos) << msg;
}

TEST(Scenario, RejectsBadInput) {
  EXPECT_NE(error_of("robot: planar2r\nduration: 1\ninitial: {q: [0, 0, 0]}\n"), "");
  EXPECT_NE(error_of("robot: planar2r\nduration: 1\ninitial: {q: [9, 0]}\n"), "");
  EXPECT_NE(error_of("robot: planar2r\nduration: 1\ninitial: {q: [0, 0]}\nunknown_key: 1\n").find("unknown_key"),
            std::string::npos);
  EXPECT_NE(error_of("robot: planar2r\nduration: 1\ninitial: {q: [0, 0]}\nplanner_rate: 7\n"), "");
  EXPECT_NE(error_of("robot: planar2r\nduration: 1\ninitial: {q: [0, 0]}\n"
                     "contact_events: [{start: 0, end: 1, link: 5, force: [1, 0, 0]}]\n"),
            "");
  EXPECT_NE(error_of("robot: planar2r\nduration: 1\ninitial: {q: [0, 0]}\nplanner: {shooting: sideways}\n"), "");
  EXPECT_NE(error_of("robot: no_such_robot\nduration: 1\ninitial: {q: [0, 0]}\n"), "");
}

TEST(Scenario, BundledCorpusLoads) {
  int count = 0;
  for (const auto& entry : std::filesystem::directory_iterator(data_dir() / "scenarios")) {
    if (entry.path().extension() != ".yaml") continue;
    SCOPED_TRACE(entry.path().string());
    const Scenario sc = load_scenario(entry.path().string());
    EXPECT_FALSE(sc.name.empty());
    EXPECT_GT(sc.duration, 0.0);
    EXPECT_EQ(sc.q0.size(), sc.robot->dof());
    ++count;
  }
  EXPECT_GE(count, 8);
}

TEST(Scenario, OverridesApplyAndRoundTrip) {
  const Scenario sc = bundled_scenario("overhead_sphere", {"planner.N=12", "planner.relaxation=false",
                                                           "planner.Q_rep=0", "duration=2.5"});
  EXPECT_EQ(sc.planner.N, 12);
  EXPECT_FALSE(sc.planner.relaxation);
  EXPECT_TRUE(sc.planner.Q_rep.isZero());
  EXPECT_DOUBLE_EQ(sc.duration, 2.5);

  // Overriding a value with itself changes nothing that identifies the scene.
  const Scenario a = bundled_scenario("overhead_sphere");
  const Scenario b = bundled_scenario("overhead_sphere", {"duration=10"});
  EXPECT_EQ(scenario_fingerprint(a), scenario_fingerprint(b));

  YAML::Node doc = YAML::Load("planner: {N: 5}");
  apply_override(doc, "planner.Q_ee=[1, 1, 1, 0, 0, 0]");
  EXPECT_EQ(doc["planner"]["Q_ee"].size(), 6u);
  EXPECT_EQ(doc["planner"]["N"].as<int>(), 5);
  EXPECT_THROW(apply_override(doc, "planner.N"), ConfigError);
  EXPECT_THROW(apply_override(doc, "planner..N=3"), ConfigError);
}

TEST(Scenario, ObstacleTrackAndHold) {
  const Scenario sc = bundled_scenario("moving_sphere");
  ASSERT_EQ(sc.obstacles.size(), 1u);
  const Vec3 p0 = sc.true_obstacles_at(0.0)[0].parts[0].a;
  const Vec3 p2 = sc.true_obstacles_at(2.0)[0].parts[0].a;
  EXPECT_LT((p0 - Vec3(0.3, 0.5, 0.75)).norm(), 1e-12);
  EXPECT_LT((p2 - Vec3(0.3, 0.2, 0.75)).norm(), 1e-12);
  // Perception holds the pose sampled at 30 Hz.
  const Vec3 held = sc.obstacles_at(2.02)[0].parts[0].a;
  EXPECT_LT((held - sc.true_obstacles_at(2.0)[0].parts[0].a).norm(), 1e-12);
}

TEST(Scenario, MismatchedFingerprintRejected) {
  Scenario a = bundled_scenario("minimal");
  Scenario b = bundled_scenario("minimal", {"initial.q=[0.2, 0.5]"});
  EXPECT_NE(scenario_fingerprint(a), scenario_fingerprint(b));
  SimOptions opt;
  opt.keep_logs = false;
  const RunReport ra = run(a, opt).report;
  const RunReport rb = run(b, opt).report;
  EXPECT_THROW(compare_runs(ra, rb), SimError);
  EXPECT_NO_THROW(compare_runs(ra, ra));
}

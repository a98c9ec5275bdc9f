#include "armsafe/controller.hpp"
#include "armsafe/robot_file.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <random>

using namespace armsafe;

namespace {

/// Minimal plant: RK4 on the forward dynamics with torques held over a tick.
struct Plant {
  const RobotModel& model;
  VecX q, qd;

  void step(const VecX& tau, const VecX& tau_ext, double dt) {
    auto f = [&](const VecX& x, const VecX& v) { return forward_dynamics(model, x, v, tau, tau_ext); };
    const VecX k1q = qd, k1v = f(q, qd);
    const VecX k2q = qd + 0.5 * dt * k1v, k2v = f(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v);
    const VecX k3q = qd + 0.5 * dt * k2v, k3v = f(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v);
    const VecX k4q = qd + dt * k3v, k4v = f(q + dt * k3q, qd + dt * k3v);
    q += dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q);
    qd += dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v);
  }
};

/// Joint torque of a world force applied at a point fixed on a link.
VecX push_torque(const RobotModel& m, const VecX& q, int link, const Vec3& local, const Vec3& force) {
  const auto ks = kinematic_state(m, q);
  const Vec3 p = ks.frames[link] * local;
  return point_jacobian(m, q, link, p).bottomRows<3>().transpose() * force;
}

/// Force of the given magnitude at the distal point of a link, tangential to the
/// motion its own joint produces there; returns the joint torque.
VecX tangential_push(const RobotModel& m, const VecX& q, int link, double magnitude) {
  const auto ks = kinematic_state(m, q);
  const Vec3 p = link_distal_point(ks, link);
  const Vec3 dir = ks.axes[link].cross(p - ks.origin(link)).normalized();
  return point_jacobian(m, q, link, p).bottomRows<3>().transpose() * (magnitude * dir);
}

VecX panda_home() { return (VecX(7) << 0.0, -0.3, 0.0, -2.2, 0.0, 2.0, 0.8).finished(); }

double angle_between(const Vec3& a, const Vec3& b) {
  return std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0));
}

}  // namespace

TEST(Tracking, ZeroErrorIsPureCompensation) {
  const auto m = bundled_robot("panda");
  const VecX q = panda_home(), qd = VecX::LinSpaced(7, -0.5, 0.5);
  const VecX tau = tracking_torque(m, q, qd, q, qd, GainSet::defaults(7));
  EXPECT_LT((tau - bias_torque(m, q, qd)).norm(), 1e-10);
  // At rest with q_des = q only gravity remains.
  EXPECT_LT((tracking_torque(m, q, VecX::Zero(7), q, VecX::Zero(7), GainSet::defaults(7)) -
             gravity_torque(m, q)).norm(), 1e-12);
}

TEST(Tracking, OuterPdOff) {
  const auto m = bundled_robot("panda");
  GainSet g = GainSet::defaults(7);
  g.Kp2.setZero();
  g.Kd2.setZero();
  const VecX q = panda_home(), qd = VecX::Constant(7, 0.1);
  const VecX qdes = q + VecX::Constant(7, 0.05), qddes = VecX::Zero(7);
  const VecX expect = mass_matrix(m, q) * (g.Kp1.cwiseProduct(qdes - q) + g.Kd1.cwiseProduct(qddes - qd)) +
                      bias_torque(m, q, qd);
  EXPECT_LT((tracking_torque(m, q, qd, qdes, qddes, g) - expect).norm(), 1e-10);
  const VecX ff = VecX::Ones(7);
  EXPECT_LT((tracking_torque(m, q, qd, qdes, qddes, g, ff) - expect - mass_matrix(m, q) * ff).norm(), 1e-10);
}

TEST(Tracking, Planar2rStepSettles) {
  const auto m = bundled_robot("planar2r");
  Plant plant{m, VecX::Zero(2), VecX::Zero(2)};
  const VecX target = (VecX(2) << 0.5, -0.3).finished();
  const GainSet g = GainSet::defaults(2);
  for (int i = 0; i < 2000; ++i)
    plant.step(tracking_torque(m, plant.q, plant.qd, target, VecX::Zero(2), g), VecX::Zero(2), 1e-3);
  EXPECT_LT((plant.q - target).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Usde, FirstCallIsZero) {
  const auto m = bundled_robot("panda");
  UsdeState s;
  EXPECT_EQ(usde_update(s, m, panda_home(), VecX::Constant(7, 0.3), VecX::Ones(7), 1e-3).norm(), 0.0);
  EXPECT_THROW(usde_update(s, m, panda_home(), VecX::Zero(7), VecX::Zero(7), 0.0), std::invalid_argument);
}

TEST(Usde, QuietWithoutExternalTorque) {
  const auto m = bundled_robot("planar2r");
  Plant plant{m, (VecX(2) << 0.2, 0.4).finished(), VecX::Zero(2)};
  UsdeState s;
  VecX tau = VecX::Zero(2);
  const double dt = 1e-3;
  double worst = 0.0;
  for (int i = 0; i < 4000; ++i) {
    const double t = i * dt;
    const VecX r = usde_update(s, m, plant.q, plant.qd, tau, dt);
    if (t > 5 * s.k) worst = std::max(worst, r.norm());
    const VecX qdes = (VecX(2) << 0.2 + 0.5 * std::sin(2 * t), 0.4 - 0.4 * std::sin(3 * t)).finished();
    const VecX vdes = (VecX(2) << std::cos(2 * t), -1.2 * std::cos(3 * t)).finished();
    tau = tracking_torque(m, plant.q, plant.qd, qdes, vdes, GainSet::defaults(2));
    plant.step(tau, VecX::Zero(2), dt);
  }
  EXPECT_LT(worst, 0.05);
}

TEST(Usde, StepResponse) {
  const auto m = bundled_robot("planar2r");
  const VecX ext = (VecX(2) << 2.0, 0.0).finished();
  auto run = [&](double k, double horizon, std::vector<double>* trace) {
    Plant plant{m, (VecX(2) << 0.2, 0.4).finished(), VecX::Zero(2)};
    UsdeState s;
    s.k = k;
    VecX tau = VecX::Zero(2), r;
    for (int i = 0; i < int(horizon / 1e-3); ++i) {
      r = usde_update(s, m, plant.q, plant.qd, tau, 1e-3);
      if (trace) trace->push_back(r(0));
      tau = tracking_torque(m, plant.q, plant.qd, (VecX(2) << 0.2, 0.4).finished(), VecX::Zero(2),
                            GainSet::defaults(2));
      plant.step(tau, ext, 1e-3);
    }
    return r;
  };
  const VecX r = run(0.2, 1.0, nullptr);
  EXPECT_LT((r - ext).cwiseAbs().maxCoeff(), 0.02 * 2.0);

  // Time to reach 63 % of the step scales with k.
  auto rise = [&](double k) {
    std::vector<double> tr;
    run(k, 1.0, &tr);
    for (std::size_t i = 0; i < tr.size(); ++i)
      if (tr[i] >= (1 - std::exp(-1.0)) * 2.0) return i * 1e-3;
    return 1.0;
  };
  const double a = rise(0.2), b = rise(0.1);
  EXPECT_NEAR(a, 0.2, 0.01);
  EXPECT_NEAR(b / a, 0.5, 0.05);
}

TEST(Detection, Examples) {
  const auto m = bundled_robot("panda");
  const VecX q = panda_home();
  EXPECT_FALSE(detect_contact(VecX::Constant(7, 0.5), m, q, 3.0));
  VecX r = VecX::Zero(7);
  r(3) = 6.0;
  const auto c4 = detect_contact(r, m, q, 3.0);
  ASSERT_TRUE(c4);
  EXPECT_EQ(c4->link, 3);
  EXPECT_NEAR(c4->n_c.norm(), 1.0, 1e-12);
  r(1) = -8.0;
  r(4) = 4.0;
  EXPECT_EQ(contact_link(r, 3.0), 4);
  EXPECT_EQ(contact_link(VecX::Constant(7, 3.0), 3.0), -1);
}

TEST(Detection, PushedLinkIsIdentified) {
  // Hold posture under the tracking law and push a link tangentially with 30 N.
  const auto m = bundled_robot("panda");
  const VecX q0 = panda_home();
  for (int link : {1, 3}) {
    Plant plant{m, q0, VecX::Zero(7)};
    UsdeState s;
    VecX tau = VecX::Zero(7);
    std::optional<ContactInfo> c;
    for (int i = 0; i < 500 && !c; ++i) {
      const VecX r = usde_update(s, m, plant.q, plant.qd, tau, 1e-3);
      c = detect_contact(r, m, plant.q, 3.0, i * 1e-3);
      tau = tracking_torque(m, plant.q, plant.qd, q0, VecX::Zero(7), GainSet::defaults(7));
      plant.step(tau, tangential_push(m, plant.q, link, 30.0), 1e-3);
    }
    ASSERT_TRUE(c) << link;
    EXPECT_EQ(c->link, link);
  }
}

TEST(ContactDirection, PushAlongMinusY) {
  const auto m = bundled_robot("planar2r");
  const VecX q0 = VecX::Zero(2);  // upper arm along +x, so -y is tangential at the elbow
  Plant plant{m, q0, VecX::Zero(2)};
  UsdeState s;
  VecX tau = VecX::Zero(2), r;
  for (int i = 0; i < 1500; ++i) {
    r = usde_update(s, m, plant.q, plant.qd, tau, 1e-3);
    tau = tracking_torque(m, plant.q, plant.qd, q0, VecX::Zero(2), GainSet::defaults(2));
    plant.step(tau, push_torque(m, plant.q, 0, Vec3(1, 0, 0), Vec3(0, -10, 0)), 1e-3);
  }
  const auto dir = reduced_contact_jacobian(m, plant.q, 0, r);
  EXPECT_LT(angle_between(dir.n_c, Vec3(0, -1, 0)), 5.0 * M_PI / 180.0);
}

TEST(ContactDirection, ReducedJacobianIsVelocityAlongDirection) {
  const auto m = bundled_robot("panda");
  std::mt19937 rng(70);
  std::uniform_real_distribution<double> u(-1, 1);
  const VecX q = panda_home();
  VecX r(7), qd(7);
  for (int i = 0; i < 7; ++i) {
    r(i) = 5 * u(rng);
    qd(i) = u(rng);
  }
  for (int link = 1; link < 7; ++link) {
    const auto dir = reduced_contact_jacobian(m, q, link, r);
    const double h = 1e-6;
    const Vec3 vp = (link_distal_point(kinematic_state(m, q + h * qd), link) -
                     link_distal_point(kinematic_state(m, q - h * qd), link)) / (2 * h);
    EXPECT_NEAR(dir.Jc_tilde.dot(qd), dir.n_c.dot(vp), 1e-7);
  }
}

TEST(ContactDirection, UndefinedDirectionThrows) {
  const auto m = bundled_robot("planar2r");
  // Link 0's distal point does not move with joint 1, so a pure joint-1 estimate has no direction.
  const VecX r = (VecX(2) << 0.0, 5.0).finished();
  EXPECT_THROW(reduced_contact_jacobian(m, VecX::Zero(2), 0, r), ContactDirectionError);
  EXPECT_FALSE(detect_contact((VecX(2) << 0.0, 5.0).finished(), m, VecX::Zero(2), 3.0).has_value() &&
               detect_contact((VecX(2) << 0.0, 5.0).finished(), m, VecX::Zero(2), 3.0)->link == 0);
}

TEST(ContactSafe, AtDesiredStateIsBiasCompensation) {
  const auto m = bundled_robot("panda");
  const VecX q = panda_home(), qd = VecX::LinSpaced(7, -0.2, 0.2);
  const auto td = task_dynamics(m, q, qd);
  const Twist V(Vec6(td.jacobian * qd));
  const VecX tau = contact_safe_torque(m, q, qd, ee_pose(m, q), V, RowVecX::Zero(7), VecX::Zero(7),
                                       GainSet::defaults(7), 0.0);
  EXPECT_LT((tau - td.jacobian.transpose() * td.bias).norm(), 1e-9);
}

TEST(ContactSafe, ReactionTermInNullSpace) {
  const auto m = bundled_robot("panda");
  std::mt19937 rng(71);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int t = 0; t < 50; ++t) {
    VecX q = panda_home(), qd(7), r(7);
    for (int i = 0; i < 7; ++i) {
      q(i) += 0.4 * u(rng);
      qd(i) = u(rng);
      r(i) = 5 * u(rng);
    }
    const auto td = task_dynamics(m, q, qd);
    const Pose T = ee_pose(m, q);
    const Twist V(Vec6(td.jacobian * qd));
    const auto dir = reduced_contact_jacobian(m, q, 3, r);
    const GainSet g = GainSet::defaults(7);
    const VecX with = contact_safe_torque(m, q, qd, T, V, dir.Jc_tilde, r, g, 7.5);
    const VecX without = contact_safe_torque(m, q, qd, T, V, dir.Jc_tilde, r, g, 0.0);
    const VecX reaction = with - without;
    EXPECT_GT(reaction.norm(), 1e-9);
    EXPECT_LT((td.jacobian_pinv.transpose() * reaction).norm(), 1e-8);
    // Quasi-static task acceleration of the reaction is zero in the dynamically
    // consistent sense only; the projector annihilates J-bar^T, checked above.
    EXPECT_LT((null_projector(td.jacobian) * reaction - reaction).norm(), 1e-8);
  }
}

TEST(ContactSafe, NullSpaceRegulationHasNoTaskComponent) {
  const auto m = bundled_robot("panda");
  const VecX q = panda_home(), qd = VecX::LinSpaced(7, -0.3, 0.4);
  const VecX v = null_space_regulation(m, q, qd, 5.0, true);
  EXPECT_LT((pseudo_inverse(ee_body_jacobian(m, q)).transpose() * v).norm(), 1e-8);
}

namespace {

struct ModeRun {
  std::vector<Mode> trace;  // distinct consecutive modes
  std::vector<double> switch_times;
};

/// Hold-posture loop on the 7-DoF model with scripted link-4 pushes; during
/// RETURNING the desired state is the latched pre-contact configuration.
ModeRun run_modes(const std::function<Vec3(double)>& force, double duration,
                  ControllerConfig cfg = ControllerConfig::defaults(7)) {
  const auto m = bundled_robot("panda");
  const VecX q0 = panda_home();
  Plant plant{m, q0, VecX::Zero(7)};
  ControllerState s = make_controller_state(m, cfg);
  ModeRun run;
  run.trace.push_back(Mode::tracking);
  for (int i = 0; i < int(duration / 1e-3); ++i) {
    ControlInput in;
    in.t = i * 1e-3;
    in.q = plant.q;
    in.qd = plant.qd;
    in.q_des = s.mode == Mode::tracking || s.mode == Mode::contact_safe ? q0 : s.q_pre_contact;
    in.qd_des = VecX::Zero(7);
    in.qdd_des = VecX::Zero(7);
    const auto out = mode_step(s, cfg, m, in);
    if (out.mode_changed) {
      run.trace.push_back(out.mode);
      run.switch_times.push_back(in.t);
    }
    plant.step(out.tau, tangential_push(m, plant.q, 3, force(in.t).norm()), 1e-3);
  }
  return run;
}

}  // namespace

TEST(ModeMachine, NoContactStaysTracking) {
  const auto run = run_modes([](double) -> Vec3 { return Vec3::Zero(); }, 2.0);
  EXPECT_EQ(run.trace, std::vector<Mode>{Mode::tracking});
}

TEST(ModeMachine, PushThenReleaseCompletesCycle) {
  const auto run = run_modes([](double t) -> Vec3 { return t > 0.2 && t < 2.2 ? Vec3(0, 25, 0) : Vec3::Zero(); }, 6.0);
  const std::vector<Mode> expect{Mode::tracking, Mode::contact_safe, Mode::returning, Mode::resume_check,
                                 Mode::tracking};
  EXPECT_EQ(run.trace, expect);
}

TEST(ModeMachine, SecondPushDuringReturningReentersContactSafe) {
  // The first release starts RETURNING; a new push shortly after re-enters CONTACT_SAFE.
  ControllerConfig cfg = ControllerConfig::defaults(7);
  cfg.resume_tol = 0.002;
  auto first = run_modes([](double t) -> Vec3 { return t > 0.2 && t < 1.2 ? Vec3(0, 25, 0) : Vec3::Zero(); }, 6.0, cfg);
  ASSERT_GE(first.switch_times.size(), 2u);
  const double back = first.switch_times[1];
  const auto run = run_modes(
      [&](double t) -> Vec3 {
        if (t > 0.2 && t < 1.2) return Vec3(0, 25, 0);
        if (t > back && t < back + 1.0) return Vec3(0, 60, 0);
        return Vec3::Zero();
      },
      6.0, cfg);
  ASSERT_GE(run.trace.size(), 4u);
  EXPECT_EQ(run.trace[2], Mode::returning);
  EXPECT_EQ(run.trace[3], Mode::contact_safe);
  EXPECT_EQ(run.trace.back(), Mode::tracking);
}

TEST(ControllerConfig, Validation) {
  ControllerConfig c = ControllerConfig::defaults(7);
  EXPECT_NO_THROW(c.validate(7));
  EXPECT_THROW(c.validate(2), ConfigError);
  c.k = 0.0;
  EXPECT_THROW(c.validate(7), ConfigError);
  c = ControllerConfig::defaults(7);
  c.gains.Kp3(0) = -1.0;
  EXPECT_THROW(c.validate(7), ConfigError);
}

#include "armsafe/se3.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace armsafe;

namespace {

Mat3 random_rotation(std::mt19937& rng) {
  std::normal_distribution<double> n;
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

}  // namespace

TEST(Se3, TwistIsAngularFirst) {
  const Twist t(Vec3(1, 2, 3), Vec3(4, 5, 6));
  EXPECT_EQ(t.vector()(0), 1);
  EXPECT_EQ(t.vector()(3), 4);
  EXPECT_EQ(t.angular(), Vec3(1, 2, 3));
  EXPECT_EQ(t.linear(), Vec3(4, 5, 6));
  const Wrench w(Vec3(1, 0, 0), Vec3(0, 0, 9));
  EXPECT_EQ(w.vector()(5), 9);
  EXPECT_EQ(w.moment(), Vec3(1, 0, 0));
}

TEST(Se3, LogOfPureTranslation) {
  const Vec6 xi = se3_log(Pose::from_translation(Vec3(0.1, 0, 0)));
  EXPECT_NEAR((xi - (Vec6() << 0, 0, 0, 0.1, 0, 0).finished()).norm(), 0.0, 1e-14);
}

TEST(Se3, LogOfQuarterTurnAboutZ) {
  const Pose T(Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitZ()).toRotationMatrix(), Vec3::Zero());
  const Vec6 xi = se3_log(T);
  EXPECT_NEAR(xi(2), std::numbers::pi / 2, 1e-12);
  EXPECT_NEAR(xi.head<2>().norm() + xi.tail<3>().norm(), 0.0, 1e-12);
}

TEST(Se3, ExpLogRoundTrip) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    Vec6 xi;
    for (int j = 0; j < 6; ++j) xi(j) = 2.5 * u(rng);
    if (xi.head<3>().norm() > 3.0) xi.head<3>() *= 3.0 / xi.head<3>().norm();
    const Vec6 back = se3_log(se3_exp(xi));
    EXPECT_LT((back - xi).norm(), 1e-9) << i;
  }
}

TEST(Se3, LogNearHalfTurn) {
  std::mt19937 rng(2);
  for (int i = 0; i < 50; ++i) {
    Vec3 axis = random_rotation(rng).col(0);
    const double angle = std::numbers::pi - 1e-9 * i;
    const Mat3 R = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
    const Vec3 w = so3_log(R);
    EXPECT_NEAR(w.norm(), angle, 1e-6);
    EXPECT_LT((so3_exp(w) - R).norm(), 1e-6);
  }
}

TEST(Se3, PoseDifferenceIsRightDifference) {
  std::mt19937 rng(3);
  for (int i = 0; i < 20; ++i) {
    const Pose a(random_rotation(rng), Vec3::Random());
    const Pose b(random_rotation(rng), Vec3::Random());
    const Pose back = a * se3_exp(pose_difference(a, b).vector());
    EXPECT_LT((back.rotation - b.rotation).norm(), 1e-9);
    EXPECT_LT((back.translation - b.translation).norm(), 1e-9);
  }
}

TEST(Se3, InverseAndValidity) {
  std::mt19937 rng(4);
  const Pose a(random_rotation(rng), Vec3(1, 2, 3));
  const Pose I = a * a.inverse();
  EXPECT_LT((I.rotation - Mat3::Identity()).norm(), 1e-12);
  EXPECT_LT(I.translation.norm(), 1e-12);
  EXPECT_TRUE(a.is_valid());
  Pose bad = a;
  bad.rotation(0, 0) += 1e-6;
  EXPECT_FALSE(bad.is_valid());
}

TEST(Se3, AdjointMapsBodyToSpatialTwist) {
  std::mt19937 rng(5);
  const Pose T(random_rotation(rng), Vec3(0.3, -0.2, 0.5));
  Vec6 vb;
  vb << 0.1, -0.2, 0.3, 0.4, 0.5, -0.6;
  // Spatial twist via T exp(eps Vb) T^-1 = exp(eps Ad Vb).
  const double eps = 1e-6;
  const Pose moved = T * se3_exp(eps * vb) * T.inverse();
  const Vec6 vs = se3_log(moved) / eps;
  EXPECT_LT((vs - adjoint(T) * vb).norm(), 1e-5);
}

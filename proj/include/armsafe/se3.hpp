#pragma once

/// Rigid transforms, twists and wrenches.
///
/// Six-vectors are stacked angular-first everywhere in this library:
/// a twist is (omega, v) and a wrench is (moment, force).

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace armsafe {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using RowVecX = Eigen::RowVectorXd;

inline Mat3 skew(const Vec3& w) {
  Mat3 S;
  S << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
      -w.y(), w.x(), 0.0;
  return S;
}

/// Spatial velocity, angular part first.
class Twist {
 public:
  Twist() : data_(Vec6::Zero()) {}
  explicit Twist(const Vec6& v) : data_(v) {}
  Twist(const Vec3& angular, const Vec3& linear) {
    data_ << angular, linear;
  }

  Vec3 angular() const { return data_.head<3>(); }
  Vec3 linear() const { return data_.tail<3>(); }
  const Vec6& vector() const { return data_; }

 private:
  Vec6 data_;
};

/// Spatial force, moment first (dual to Twist).
class Wrench {
 public:
  Wrench() : data_(Vec6::Zero()) {}
  explicit Wrench(const Vec6& v) : data_(v) {}
  Wrench(const Vec3& moment, const Vec3& force) {
    data_ << moment, force;
  }

  Vec3 moment() const { return data_.head<3>(); }
  Vec3 force() const { return data_.tail<3>(); }
  const Vec6& vector() const { return data_; }

 private:
  Vec6 data_;
};

inline Mat3 rotation_from_rpy(double roll, double pitch, double yaw) {
  return (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
          Eigen::AngleAxisd(roll, Vec3::UnitX()))
      .toRotationMatrix();
}

/// Element of SE(3).
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Pose() = default;
  Pose(const Mat3& R, const Vec3& p) : rotation(R), translation(p) {}

  static Pose identity() { return {}; }
  static Pose from_translation(const Vec3& p) { return {Mat3::Identity(), p}; }
  static Pose from_xyz_rpy(const Vec3& xyz, const Vec3& rpy) {
    return {rotation_from_rpy(rpy.x(), rpy.y(), rpy.z()), xyz};
  }

  Pose operator*(const Pose& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }
  Vec3 operator*(const Vec3& point) const { return rotation * point + translation; }

  Pose inverse() const {
    const Mat3 Rt = rotation.transpose();
    return {Rt, -(Rt * translation)};
  }

  /// True when the rotation is in SO(3) within `tol`.
  bool is_valid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
  }
};

inline Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Mat3::Identity() + skew(w);
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

/// Rotation vector of R on the principal branch, angle in [0, pi]. At exactly
/// pi the axis sign is chosen so its largest-magnitude component is positive.
inline Vec3 so3_log(const Mat3& R) {
  const double cos_theta = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  const Vec3 vee(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));

  if (theta < 1e-6) {
    // theta / (2 sin theta) ~ 1/2 + theta^2 / 12
    return (0.5 + theta * theta / 12.0) * vee;
  }
  if (std::numbers::pi - theta > 1e-6) {
    return theta / (2.0 * std::sin(theta)) * vee;
  }

  // Near pi: axis from the symmetric part, R + I = 2 a a^T (1 - cos) + ...
  const Mat3 B = 0.5 * (R + Mat3::Identity());
  Eigen::Index col = 0;
  B.diagonal().maxCoeff(&col);
  Vec3 axis = B.col(col) / std::sqrt(std::max(B(col, col), 1e-300));
  axis.normalize();
  // Resolve the sign from the antisymmetric part when it carries information.
  if (vee.dot(axis) < 0.0) axis = -axis;
  if (vee.norm() < 1e-12) {
    Eigen::Index big = 0;
    axis.cwiseAbs().maxCoeff(&big);
    if (axis(big) < 0.0) axis = -axis;
  }
  return theta * axis;
}

/// Left Jacobian of SO(3); maps v to the translation of exp.
inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 W = skew(w);
  if (theta < 1e-6) return Mat3::Identity() + 0.5 * W + W * W / 6.0;
  const double t2 = theta * theta;
  return Mat3::Identity() + (1.0 - std::cos(theta)) / t2 * W +
         (theta - std::sin(theta)) / (t2 * theta) * W * W;
}

inline Mat3 so3_left_jacobian_inverse(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 W = skew(w);
  if (theta < 1e-6) return Mat3::Identity() - 0.5 * W + W * W / 12.0;
  const double half = 0.5 * theta;
  const double coeff = (1.0 - half * std::cos(half) / std::sin(half)) / (theta * theta);
  return Mat3::Identity() - 0.5 * W + coeff * W * W;
}

inline Pose se3_exp(const Vec6& xi) {
  const Vec3 w = xi.head<3>();
  return {so3_exp(w), so3_left_jacobian(w) * xi.tail<3>()};
}

inline Vec6 se3_log(const Pose& T) {
  const Vec3 w = so3_log(T.rotation);
  Vec6 xi;
  xi << w, so3_left_jacobian_inverse(w) * T.translation;
  return xi;
}

/// a ⊖ b = log(a^-1 b): the body-frame twist that carries a onto b in unit time.
inline Twist pose_difference(const Pose& a, const Pose& b) {
  return Twist(se3_log(a.inverse() * b));
}

/// Adjoint of T acting on angular-first twists: V_a = Ad_T V_b.
inline Mat6 adjoint(const Pose& T) {
  Mat6 Ad = Mat6::Zero();
  Ad.topLeftCorner<3, 3>() = T.rotation;
  Ad.bottomRightCorner<3, 3>() = T.rotation;
  Ad.bottomLeftCorner<3, 3>() = skew(T.translation) * T.rotation;
  return Ad;
}

/// Interpolates between two poses; translation linearly, rotation along the geodesic.
inline Pose interpolate(const Pose& a, const Pose& b, double s) {
  const Vec3 w = so3_log(a.rotation.transpose() * b.rotation);
  return {a.rotation * so3_exp(s * w), (1.0 - s) * a.translation + s * b.translation};
}

}  // namespace armsafe

#pragma once

/// Serial-chain kinematics and rigid-body dynamics for revolute manipulators.
///
/// Conventions:
///  - Link i is driven by joint i (zero-based). Its frame is the joint frame
///    after the joint rotation has been applied.
///  - Jacobians are 6 x n with angular rows first. "World-aligned" Jacobians
///    give the angular velocity and the velocity of a reference point, both in
///    world coordinates; the body Jacobian expresses both in the end-effector frame.

#include "armsafe/primitive.hpp"
#include "armsafe/se3.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace armsafe {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RankDeficientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct JointLimits {
  double position_min = -std::numeric_limits<double>::infinity();
  double position_max = std::numeric_limits<double>::infinity();
  double velocity = std::numeric_limits<double>::infinity();
  double acceleration = std::numeric_limits<double>::infinity();
};

struct Joint {
  std::string name;
  Pose origin;                  // parent frame -> joint frame at q = 0
  Vec3 axis = Vec3::UnitZ();    // rotation axis in the joint frame
  JointLimits limits;
};

struct LinkInertia {
  double mass = 1.0;
  Vec3 com = Vec3::Zero();       // in the link frame
  Mat3 inertia = Mat3::Zero();   // about the COM, link-frame axes
};

struct CollisionBody {
  int link = 0;
  Primitive shape;  // expressed in the link frame
  std::string name;
};

class RobotModel {
 public:
  RobotModel(std::string name, std::vector<Joint> joints, std::vector<LinkInertia> links,
             Pose ee_frame, std::vector<CollisionBody> collision_bodies, Vec3 gravity)
      : name_(std::move(name)),
        joints_(std::move(joints)),
        links_(std::move(links)),
        ee_frame_(ee_frame),
        bodies_(std::move(collision_bodies)),
        gravity_(gravity) {
    validate();
  }

  const std::string& name() const { return name_; }
  int dof() const { return static_cast<int>(joints_.size()); }
  const std::vector<Joint>& joints() const { return joints_; }
  const std::vector<LinkInertia>& links() const { return links_; }
  const Pose& ee_frame() const { return ee_frame_; }
  const std::vector<CollisionBody>& collision_bodies() const { return bodies_; }
  const Vec3& gravity() const { return gravity_; }

  VecX position_min() const { return collect([](const JointLimits& l) { return l.position_min; }); }
  VecX position_max() const { return collect([](const JointLimits& l) { return l.position_max; }); }
  VecX velocity_limit() const { return collect([](const JointLimits& l) { return l.velocity; }); }
  VecX acceleration_limit() const {
    return collect([](const JointLimits& l) { return l.acceleration; });
  }

  /// Copy with a different gravity vector.
  RobotModel with_gravity(const Vec3& g) const {
    RobotModel copy = *this;
    copy.gravity_ = g;
    return copy;
  }

  void check_configuration(const VecX& q) const {
    if (q.size() != dof())
      throw ModelError("expected " + std::to_string(dof()) + " joint values, got " +
                       std::to_string(q.size()));
    if (!q.allFinite()) throw ModelError("joint vector has non-finite entries");
  }

 private:
  template <typename F>
  VecX collect(F f) const {
    VecX v(dof());
    for (int i = 0; i < dof(); ++i) v(i) = f(joints_[i].limits);
    return v;
  }

  void validate() const {
    if (joints_.empty()) throw ModelError("model needs at least one joint");
    if (links_.size() != joints_.size())
      throw ModelError("one link per joint is required");
    for (std::size_t i = 0; i < joints_.size(); ++i) {
      const auto& j = joints_[i];
      if (std::abs(j.axis.norm() - 1.0) > 1e-9)
        throw ModelError("joint " + std::to_string(i) + " axis is not a unit vector");
      if (!j.origin.is_valid(1e-9))
        throw ModelError("joint " + std::to_string(i) + " origin rotation is not in SO(3)");
      if (j.limits.position_min > j.limits.position_max)
        throw ModelError("joint " + std::to_string(i) + " position limits are inverted");
      if (!(j.limits.velocity > 0.0) || !(j.limits.acceleration > 0.0))
        throw ModelError("joint " + std::to_string(i) + " rate limits must be positive");

      const auto& l = links_[i];
      if (!(l.mass > 0.0)) throw ModelError("link " + std::to_string(i) + " mass must be positive");
      if ((l.inertia - l.inertia.transpose()).cwiseAbs().maxCoeff() > 1e-12)
        throw ModelError("link " + std::to_string(i) + " inertia is not symmetric");
      Eigen::SelfAdjointEigenSolver<Mat3> eig(l.inertia, Eigen::EigenvaluesOnly);
      if (eig.eigenvalues().minCoeff() < -1e-12)
        throw ModelError("link " + std::to_string(i) + " inertia is not positive semidefinite");
    }
    if (!ee_frame_.is_valid(1e-9)) throw ModelError("end-effector frame is not in SE(3)");
    for (const auto& body : bodies_) {
      if (body.link < 0 || body.link >= dof())
        throw ModelError("collision body '" + body.name + "' refers to link " +
                         std::to_string(body.link));
      body.shape.validate();
    }
    if (!gravity_.allFinite()) throw ModelError("gravity must be finite");
  }

  std::string name_;
  std::vector<Joint> joints_;
  std::vector<LinkInertia> links_;
  Pose ee_frame_;
  std::vector<CollisionBody> bodies_;
  Vec3 gravity_;
};

// ---------------------------------------------------------------------------
// Kinematics

/// World poses of every link frame, joint axes and link COMs at one configuration.
struct KinematicState {
  std::vector<Pose> frames;  // n link frames followed by the end-effector
  std::vector<Vec3> axes;    // world joint axes
  std::vector<Vec3> coms;    // world link COM positions

  const Vec3& origin(int i) const { return frames[i].translation; }
  const Pose& ee() const { return frames.back(); }
};

inline KinematicState kinematic_state(const RobotModel& model, const VecX& q) {
  model.check_configuration(q);
  const int n = model.dof();
  KinematicState ks;
  ks.frames.reserve(n + 1);
  ks.axes.reserve(n);
  ks.coms.reserve(n);
  Pose T;
  for (int i = 0; i < n; ++i) {
    const Joint& j = model.joints()[i];
    T = T * j.origin;
    ks.axes.push_back(T.rotation * j.axis);
    T = T * Pose(Eigen::AngleAxisd(q(i), j.axis).toRotationMatrix(), Vec3::Zero());
    ks.frames.push_back(T);
    ks.coms.push_back(T * model.links()[i].com);
  }
  ks.frames.push_back(T * model.ee_frame());
  return ks;
}

/// Every link frame followed by the end-effector pose.
inline std::vector<Pose> forward_kinematics(const RobotModel& model, const VecX& q) {
  return kinematic_state(model, q).frames;
}

inline Pose ee_pose(const RobotModel& model, const VecX& q) {
  return kinematic_state(model, q).ee();
}

namespace detail {

inline MatX point_jacobian(const KinematicState& ks, int n, int link, const Vec3& p) {
  MatX J = MatX::Zero(6, n);
  for (int j = 0; j <= link; ++j) {
    J.block<3, 1>(0, j) = ks.axes[j];
    J.block<3, 1>(3, j) = ks.axes[j].cross(p - ks.origin(j));
  }
  return J;
}

inline void check_link(const RobotModel& model, int link) {
  if (link < 0 || link >= model.dof())
    throw ModelError("link index " + std::to_string(link) + " is outside the chain");
}

inline MatX ee_body_jacobian(const KinematicState& ks, int n) {
  const Pose& T = ks.ee();
  MatX J = point_jacobian(ks, n, n - 1, T.translation);
  const Mat3 Rt = T.rotation.transpose();
  J.topRows<3>() = Rt * J.topRows<3>();
  J.bottomRows<3>() = Rt * J.bottomRows<3>();
  return J;
}

}  // namespace detail

/// World-aligned 6 x n Jacobian of a point rigidly attached to `link`.
/// Columns of joints downstream of the link are zero.
inline MatX point_jacobian(const RobotModel& model, const VecX& q, int link,
                           const Vec3& world_point) {
  detail::check_link(model, link);
  return detail::point_jacobian(kinematic_state(model, q), model.dof(), link, world_point);
}

/// World-aligned Jacobian at the origin of a link frame.
inline MatX link_jacobian(const RobotModel& model, const VecX& q, int link) {
  detail::check_link(model, link);
  const auto ks = kinematic_state(model, q);
  return detail::point_jacobian(ks, model.dof(), link, ks.origin(link));
}

/// World-aligned end-effector Jacobian.
inline MatX ee_jacobian(const RobotModel& model, const VecX& q) {
  const auto ks = kinematic_state(model, q);
  return detail::point_jacobian(ks, model.dof(), model.dof() - 1, ks.ee().translation);
}

/// End-effector Jacobian in the end-effector frame. Consistent with the
/// right-difference T(q) ⊖ T' = log(T(q)^-1 T'): T(q + dq) ≈ T(q) exp(J_b dq).
inline MatX ee_body_jacobian(const RobotModel& model, const VecX& q) {
  return detail::ee_body_jacobian(kinematic_state(model, q), model.dof());
}

// ---------------------------------------------------------------------------
// Pseudo-inverse and null-space projection

inline constexpr double kRankTolerance = 1e-10;
inline constexpr double kAutoDampingThreshold = 1e-4;
inline constexpr double kAutoDamping = 1e-6;

/// Right pseudo-inverse via SVD. With damping 0 this is J^T (J J^T)^-1 and
/// throws RankDeficientError when J does not have full row rank (smallest
/// singular value below 1e-10). With damping s > 0 it is J^T (J J^T + s^2 I)^-1.
inline MatX pseudo_inverse(const MatX& J, double damping = 0.0) {
  if (!J.allFinite()) throw ModelError("pseudo_inverse: non-finite matrix");
  if (damping < 0.0) throw ModelError("pseudo_inverse: damping must be nonnegative");
  const Eigen::Index m = J.rows();
  if (damping == 0.0 && m > J.cols())
    throw RankDeficientError("pseudo_inverse: more rows than columns");

  Eigen::JacobiSVD<MatX> svd(J, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VecX& s = svd.singularValues();
  VecX inv(s.size());
  if (damping == 0.0) {
    if (s.size() < m || s.minCoeff() < kRankTolerance)
      throw RankDeficientError("pseudo_inverse: matrix is rank deficient");
    inv = s.cwiseInverse();
  } else {
    const double d2 = damping * damping;
    for (Eigen::Index i = 0; i < s.size(); ++i) inv(i) = s(i) / (s(i) * s(i) + d2);
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Undamped when well conditioned; switches to damping 1e-6 once the smallest
/// singular value drops below 1e-4.
inline MatX robust_pseudo_inverse(const MatX& J) {
  const Eigen::Index m = J.rows();
  double smallest = 0.0;
  if (m <= J.cols()) {
    Eigen::JacobiSVD<MatX> svd(J);
    smallest = svd.singularValues().size() < m ? 0.0 : svd.singularValues().minCoeff();
  }
  return pseudo_inverse(J, smallest < kAutoDampingThreshold ? kAutoDamping : 0.0);
}

inline MatX null_projector(const MatX& J, const MatX& J_pinv) {
  return MatX::Identity(J.cols(), J.cols()) - J_pinv * J;
}

/// N = I - J̄J with the undamped pseudo-inverse; throws on rank deficiency.
inline MatX null_projector(const MatX& J) { return null_projector(J, pseudo_inverse(J)); }

/// N = I - J̄J with robust_pseudo_inverse (never throws for finite J).
inline MatX robust_null_projector(const MatX& J) {
  return null_projector(J, robust_pseudo_inverse(J));
}

// ---------------------------------------------------------------------------
// Dynamics

struct DynamicsTerms {
  MatX mass;              // M(q)
  MatX coriolis;          // Christoffel-consistent C(q, qd)
  VecX gravity;           // g(q)
  VecX coriolis_torque;   // C(q, qd) qd from Newton-Euler
};

namespace detail {

inline Mat3 world_inertia(const RobotModel& model, const KinematicState& ks, int i) {
  const Mat3& R = ks.frames[i].rotation;
  return R * model.links()[i].inertia * R.transpose();
}

/// Recursive Newton-Euler in world coordinates; gravity enters as a base acceleration.
inline VecX rnea(const RobotModel& model, const KinematicState& ks, const VecX& qd,
                 const VecX& qdd, const Vec3& gravity) {
  const int n = model.dof();
  std::vector<Vec3> force(n), moment(n), omega(n), omega_dot(n), origin_acc(n);

  Vec3 w = Vec3::Zero(), wd = Vec3::Zero(), a = -gravity, prev_origin = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    const Vec3& o = ks.origin(i);
    const Vec3 r = o - prev_origin;
    a = a + wd.cross(r) + w.cross(w.cross(r));
    const Vec3 zq = ks.axes[i] * qd(i);
    wd = wd + ks.axes[i] * qdd(i) + w.cross(zq);
    w = w + zq;
    omega[i] = w;
    omega_dot[i] = wd;
    origin_acc[i] = a;
    prev_origin = o;

    const Vec3 rc = ks.coms[i] - o;
    const Vec3 ac = a + wd.cross(rc) + w.cross(w.cross(rc));
    const Mat3 I = world_inertia(model, ks, i);
    force[i] = model.links()[i].mass * ac;
    moment[i] = I * wd + w.cross(I * w);
  }

  VecX tau(n);
  Vec3 f_next = Vec3::Zero(), n_next = Vec3::Zero();
  for (int i = n - 1; i >= 0; --i) {
    const Vec3& o = ks.origin(i);
    Vec3 f = force[i] + f_next;
    Vec3 m = moment[i] + (ks.coms[i] - o).cross(force[i]) + n_next;
    if (i + 1 < n) m += (ks.origin(i + 1) - o).cross(f_next);
    tau(i) = ks.axes[i].dot(m);
    f_next = f;
    n_next = m;
  }
  return tau;
}

/// Composite-rigid-body algorithm in world coordinates.
inline MatX crba(const RobotModel& model, const KinematicState& ks) {
  const int n = model.dof();
  MatX M = MatX::Zero(n, n);
  double mass = 0.0;
  Vec3 com = Vec3::Zero();
  Mat3 inertia = Mat3::Zero();  // about `com`
  auto shift = [](const Vec3& r) { return Mat3(r.squaredNorm() * Mat3::Identity() - r * r.transpose()); };

  for (int i = n - 1; i >= 0; --i) {
    const double mi = model.links()[i].mass;
    const Vec3& ci = ks.coms[i];
    const double total = mass + mi;
    const Vec3 c = (mass * com + mi * ci) / total;
    inertia = inertia + mass * shift(com - c) + world_inertia(model, ks, i) + mi * shift(ci - c);
    mass = total;
    com = c;

    const Vec3& z = ks.axes[i];
    const Vec3 f = mass * z.cross(com - ks.origin(i));
    const Vec3 nc = inertia * z;
    for (int j = 0; j <= i; ++j) {
      const Vec3 nj = nc + (com - ks.origin(j)).cross(f);
      M(j, i) = M(i, j) = ks.axes[j].dot(nj);
    }
  }
  return M;
}

/// dM/dq_k for every k, differentiating M = sum_i m Jv^T Jv + Jw^T I Jw analytically.
inline std::vector<MatX> mass_matrix_partials(const RobotModel& model, const KinematicState& ks) {
  const int n = model.dof();
  std::vector<MatX> dM(n, MatX::Zero(n, n));
  for (int i = 0; i < n; ++i) {
    const double m = model.links()[i].mass;
    const Vec3& c = ks.coms[i];
    const Mat3 I = world_inertia(model, ks, i);

    MatX Jv = MatX::Zero(3, n), Jw = MatX::Zero(3, n);
    for (int j = 0; j <= i; ++j) {
      Jw.col(j) = ks.axes[j];
      Jv.col(j) = ks.axes[j].cross(c - ks.origin(j));
    }

    for (int k = 0; k <= i; ++k) {
      const Vec3& zk = ks.axes[k];
      const Vec3& ok = ks.origin(k);
      MatX dJv = MatX::Zero(3, n), dJw = MatX::Zero(3, n);
      for (int j = 0; j <= i; ++j) {
        const Vec3& zj = ks.axes[j];
        const Vec3& oj = ks.origin(j);
        const Vec3 dz = k < j ? Vec3(zk.cross(zj)) : Vec3::Zero();
        const Vec3 dr = k < j ? Vec3(zk.cross(c - oj)) : Vec3(zk.cross(c - ok));
        dJw.col(j) = dz;
        dJv.col(j) = dz.cross(c - oj) + zj.cross(dr);
      }
      const Mat3 S = skew(zk);
      const Mat3 dI = S * I - I * S;
      const MatX JvtdJv = Jv.transpose() * dJv;
      const MatX JwtIdJw = Jw.transpose() * I * dJw;
      dM[k] += m * (JvtdJv + JvtdJv.transpose()) + JwtIdJw + JwtIdJw.transpose() +
               Jw.transpose() * dI * Jw;
    }
  }
  return dM;
}

inline MatX coriolis_matrix(const RobotModel& model, const KinematicState& ks, const VecX& qd) {
  const int n = model.dof();
  const auto dM = mass_matrix_partials(model, ks);
  MatX C = MatX::Zero(n, n);
  for (int k = 0; k < n; ++k) {
    if (qd(k) == 0.0) continue;
    C += 0.5 * qd(k) * dM[k];
  }
  // Remaining Christoffel terms: 0.5 (dM_ik/dq_j - dM_jk/dq_i) qd_k
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += (dM[j](i, k) - dM[i](j, k)) * qd(k);
      C(i, j) += 0.5 * s;
    }
  return C;
}

}  // namespace detail

inline MatX mass_matrix(const RobotModel& model, const VecX& q) {
  return detail::crba(model, kinematic_state(model, q));
}

/// tau = M qdd + C qd + g.
inline VecX inverse_dynamics(const RobotModel& model, const VecX& q, const VecX& qd,
                             const VecX& qdd) {
  model.check_configuration(qd);
  model.check_configuration(qdd);
  return detail::rnea(model, kinematic_state(model, q), qd, qdd, model.gravity());
}

inline VecX gravity_torque(const RobotModel& model, const VecX& q) {
  const VecX zero = VecX::Zero(model.dof());
  return detail::rnea(model, kinematic_state(model, q), zero, zero, model.gravity());
}

/// C(q, qd) qd + g(q).
inline VecX bias_torque(const RobotModel& model, const VecX& q, const VecX& qd) {
  model.check_configuration(qd);
  return detail::rnea(model, kinematic_state(model, q), qd, VecX::Zero(model.dof()),
                      model.gravity());
}

inline std::vector<MatX> mass_matrix_partials(const RobotModel& model, const VecX& q) {
  return detail::mass_matrix_partials(model, kinematic_state(model, q));
}

/// Christoffel-form Coriolis matrix; Mdot - 2C is skew-symmetric.
inline MatX coriolis_matrix(const RobotModel& model, const VecX& q, const VecX& qd) {
  model.check_configuration(qd);
  return detail::coriolis_matrix(model, kinematic_state(model, q), qd);
}

inline DynamicsTerms dynamics_terms(const RobotModel& model, const VecX& q, const VecX& qd) {
  model.check_configuration(qd);
  const auto ks = kinematic_state(model, q);
  const VecX zero = VecX::Zero(model.dof());
  DynamicsTerms t;
  t.mass = detail::crba(model, ks);
  t.gravity = detail::rnea(model, ks, zero, zero, model.gravity());
  t.coriolis_torque = detail::rnea(model, ks, qd, zero, Vec3::Zero());
  t.coriolis = detail::coriolis_matrix(model, ks, qd);
  return t;
}

/// qdd = M^-1 (tau + tau_ext - C qd - g).
inline VecX forward_dynamics(const RobotModel& model, const VecX& q, const VecX& qd,
                             const VecX& tau, const VecX& tau_ext) {
  model.check_configuration(qd);
  model.check_configuration(tau);
  model.check_configuration(tau_ext);
  const auto ks = kinematic_state(model, q);
  const MatX M = detail::crba(model, ks);
  const VecX bias = detail::rnea(model, ks, qd, VecX::Zero(model.dof()), model.gravity());
  return M.llt().solve(tau + tau_ext - bias);
}

inline double kinetic_energy(const RobotModel& model, const VecX& q, const VecX& qd) {
  return 0.5 * qd.dot(mass_matrix(model, q) * qd);
}

/// Gravitational potential, zero at the world origin.
inline double potential_energy(const RobotModel& model, const VecX& q) {
  const auto ks = kinematic_state(model, q);
  double V = 0.0;
  for (int i = 0; i < model.dof(); ++i) V -= model.links()[i].mass * model.gravity().dot(ks.coms[i]);
  return V;
}

// ---------------------------------------------------------------------------
// Task-space dynamics

struct TaskDynamicsTerms {
  MatX inertia;    // Λ = J̄^T M J̄
  VecX bias;       // η = J̄^T (C qd + g) - Λ Jdot qd
  MatX jacobian;   // J used for the projection
  MatX jacobian_pinv;
};

/// Projects joint-space dynamics through a task Jacobian J with known Jdot qd.
inline TaskDynamicsTerms task_space_terms(const MatX& J, const VecX& Jdot_qd, const MatX& M,
                                          const VecX& joint_bias) {
  TaskDynamicsTerms t;
  t.jacobian = J;
  t.jacobian_pinv = robust_pseudo_inverse(J);
  t.inertia = t.jacobian_pinv.transpose() * M * t.jacobian_pinv;
  t.bias = t.jacobian_pinv.transpose() * joint_bias - t.inertia * Jdot_qd;
  return t;
}

/// Jdot qd of the end-effector body Jacobian by central differences along qd (step 1e-6).
inline VecX ee_body_jacobian_rate(const RobotModel& model, const VecX& q, const VecX& qd) {
  constexpr double h = 1e-6;
  const MatX Jp = ee_body_jacobian(model, q + h * qd);
  const MatX Jm = ee_body_jacobian(model, q - h * qd);
  return (Jp - Jm) / (2.0 * h) * qd;
}

/// End-effector task dynamics in the end-effector frame.
inline TaskDynamicsTerms task_dynamics(const RobotModel& model, const VecX& q, const VecX& qd) {
  model.check_configuration(qd);
  const auto ks = kinematic_state(model, q);
  const MatX J = detail::ee_body_jacobian(ks, model.dof());
  const MatX M = detail::crba(model, ks);
  const VecX bias = detail::rnea(model, ks, qd, VecX::Zero(model.dof()), model.gravity());
  return task_space_terms(J, ee_body_jacobian_rate(model, q, qd), M, bias);
}

}  // namespace armsafe

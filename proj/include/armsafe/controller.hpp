#pragma once

/// Torque control at the servo rate: computed-torque tracking, external torque
/// estimation, contact detection and the contact-safe reaction law, tied
/// together by a four-mode strategy.

#include "armsafe/errors.hpp"
#include "armsafe/model.hpp"

#include <optional>
#include <string>

namespace armsafe {

struct GainSet {
  VecX Kp1, Kd1, Kp2, Kd2;  // joint space, diagonal
  Vec6 Kp3, Kd3;            // task space, diagonal

  /// Kp1 = 200, Kd1 = 10, Kp2 = 10, Kd2 = 2, Kp3 = 500, Kd3 = 100.
  static GainSet defaults(int n) {
    return {VecX::Constant(n, 200.0), VecX::Constant(n, 10.0), VecX::Constant(n, 10.0),
            VecX::Constant(n, 2.0),   Vec6::Constant(500.0),   Vec6::Constant(100.0)};
  }

  void validate(int n) const {
    for (const VecX* g : {&Kp1, &Kd1, &Kp2, &Kd2})
      if (g->size() != n || !g->allFinite() || (g->array() < 0.0).any())
        throw ConfigError("controller: joint gains need " + std::to_string(n) +
                          " nonnegative entries");
    if (!Kp3.allFinite() || !Kd3.allFinite() || (Kp3.array() < 0.0).any() ||
        (Kd3.array() < 0.0).any())
      throw ConfigError("controller: task gains must be nonnegative");
  }
};

// ---------------------------------------------------------------------------
// Computed-torque tracking

/// tau_ff = M (qdd_ff + Kp1 e + Kd1 de) + C qd + g,  tau = tau_ff + Kp2 e + Kd2 de,
/// with e = q_des - q. qdd_ff is the planned acceleration (zero when unused).
inline VecX tracking_torque(const RobotModel& model, const VecX& q, const VecX& qd,
                            const VecX& q_des, const VecX& qd_des, const GainSet& gains,
                            const VecX& qdd_ff = VecX()) {
  const int n = model.dof();
  const auto ks = kinematic_state(model, q);
  const MatX M = detail::crba(model, ks);
  const VecX bias = detail::rnea(model, ks, qd, VecX::Zero(n), model.gravity());
  const VecX e = q_des - q, de = qd_des - qd;
  VecX acc = gains.Kp1.cwiseProduct(e) + gains.Kd1.cwiseProduct(de);
  if (qdd_ff.size() == n) acc += qdd_ff;
  return M * acc + bias + gains.Kp2.cwiseProduct(e) + gains.Kd2.cwiseProduct(de);
}

// ---------------------------------------------------------------------------
// External torque estimation

/// Filter memories of the estimator r = (P - P_f)/k + H_f - tau_f with
/// P = M qd and H = -C^T qd + g. Every filter is y_f' = (y - y_f)/k, advanced by
/// one explicit Euler step per call.
struct UsdeState {
  double k = 0.2;
  VecX P_f, H_f, tau_f;
  VecX P_prev, H_prev;
  bool initialized = false;
};

/// Advances the estimator to the current measurement. `tau_cmd` is the torque
/// applied over the interval that just ended. The first call initializes the
/// filters so that the estimate starts at zero.
inline VecX usde_update(UsdeState& s, const RobotModel& model, const VecX& q, const VecX& qd,
                        const VecX& tau_cmd, double dt) {
  if (!(s.k > 0.0)) throw ConfigError("estimator: k must be positive");
  if (!(dt > 0.0)) throw std::invalid_argument("usde_update: dt must be positive");
  const int n = model.dof();
  const auto ks = kinematic_state(model, q);
  const VecX P = detail::crba(model, ks) * qd;
  const VecX g = detail::rnea(model, ks, VecX::Zero(n), VecX::Zero(n), model.gravity());
  const VecX H = -detail::coriolis_matrix(model, ks, qd).transpose() * qd + g;

  if (!s.initialized) {
    s.P_f = P;
    s.H_f = H;
    s.tau_f = H;
    s.initialized = true;
  } else {
    const double a = dt / s.k;
    s.P_f += a * (s.P_prev - s.P_f);
    s.H_f += a * (s.H_prev - s.H_f);
    s.tau_f += a * (tau_cmd - s.tau_f);
  }
  s.P_prev = P;
  s.H_prev = H;
  return (P - s.P_f) / s.k + s.H_f - s.tau_f;
}

// ---------------------------------------------------------------------------
// Contact detection and localization

struct ContactInfo {
  int link = -1;
  VecX r_hat;
  Vec3 n_c = Vec3::UnitX();
  RowVecX Jc_tilde;
  double detected_at = 0.0;
};

class ContactDirectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Highest-index joint whose estimate exceeds the threshold, or -1.
inline int contact_link(const VecX& r_hat, double tau_th) {
  for (Eigen::Index j = r_hat.size() - 1; j >= 0; --j)
    if (std::abs(r_hat(j)) > tau_th) return static_cast<int>(j);
  return -1;
}

/// World point used as the contact location of a link: its distal end, i.e.
/// the next joint origin, or the end-effector for the last link.
inline Vec3 link_distal_point(const KinematicState& ks, int link) {
  return ks.frames[link + 1].translation;
}

/// Linear point Jacobian J_c at the distal end of a link.
inline MatX contact_jacobian(const RobotModel& model, const KinematicState& ks, int link) {
  return detail::point_jacobian(ks, model.dof(), link, link_distal_point(ks, link)).bottomRows<3>();
}

struct ContactDirection {
  Vec3 n_c;
  RowVecX Jc_tilde;
  double force_estimate;  // |pinv(J_c)^T r|
};

/// n_c = pinv(J_c)^T r / |pinv(J_c)^T r| and the reduced Jacobian n_c^T J_c.
/// Throws ContactDirectionError when |pinv(J_c)^T r| <= 1e-6.
inline ContactDirection reduced_contact_jacobian(const RobotModel& model, const VecX& q, int link,
                                                 const VecX& r_hat, double damping = 0.05) {
  if (link < 0 || link >= model.dof()) throw ModelError("contact link outside the chain");
  const auto ks = kinematic_state(model, q);
  const MatX Jc = contact_jacobian(model, ks, link);
  const Vec3 f = pseudo_inverse(Jc, damping).transpose() * r_hat;
  const double norm = f.norm();
  if (!(norm > 1e-6)) throw ContactDirectionError("contact direction undefined");
  ContactDirection out;
  out.n_c = f / norm;
  out.Jc_tilde = out.n_c.transpose() * Jc;
  out.force_estimate = norm;
  return out;
}

/// Contact information when some |r_j| > tau_th; std::nullopt otherwise or when
/// the direction is undefined.
inline std::optional<ContactInfo> detect_contact(const VecX& r_hat, const RobotModel& model,
                                                 const VecX& q, double tau_th, double t = 0.0,
                                                 double damping = 0.05) {
  const int link = contact_link(r_hat, tau_th);
  if (link < 0) return std::nullopt;
  try {
    const auto dir = reduced_contact_jacobian(model, q, link, r_hat, damping);
    return ContactInfo{link, r_hat, dir.n_c, dir.Jc_tilde, t};
  } catch (const ContactDirectionError&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Contact-safe reaction

/// F_ff = Lambda (Kp3 (T ⊖ T_des) + Kd3 (V_des - V)) + eta - pinv(J)^T r,
/// tau = J^T F_ff + N_t Jc_tilde^T f_des. All task quantities use the
/// end-effector body frame.
inline VecX contact_safe_torque(const RobotModel& model, const VecX& q, const VecX& qd,
                                const Pose& T_des, const Twist& V_des, const RowVecX& Jc_tilde,
                                const VecX& r_hat, const GainSet& gains, double f_des) {
  const TaskDynamicsTerms td = task_dynamics(model, q, qd);
  const Pose T = ee_pose(model, q);
  const Vec6 V = td.jacobian * qd;
  const Vec6 E = pose_difference(T, T_des).vector();
  const Vec6 F = td.inertia * (gains.Kp3.cwiseProduct(E) + gains.Kd3.cwiseProduct(V_des.vector() - V)) +
                 td.bias - td.jacobian_pinv.transpose() * r_hat;
  const MatX N_t = null_projector(td.jacobian, td.jacobian_pinv);
  VecX tau = td.jacobian.transpose() * F;
  if (Jc_tilde.size() == model.dof()) tau += N_t * Jc_tilde.transpose() * f_des;
  return tau;
}

/// Null-space regulation added in contact-safe mode: N_t (C qd + g - K_dn qd).
/// Compensates the part of the bias that J^T eta leaves out and damps self-motion.
inline VecX null_space_regulation(const RobotModel& model, const VecX& q, const VecX& qd,
                                  double damping, bool compensate_bias) {
  const int n = model.dof();
  const auto ks = kinematic_state(model, q);
  const MatX N_t = robust_null_projector(detail::ee_body_jacobian(ks, n));
  VecX v = -damping * qd;
  if (compensate_bias) v += detail::rnea(model, ks, qd, VecX::Zero(n), model.gravity());
  return N_t * v;
}

// ---------------------------------------------------------------------------
// Mode strategy

enum class Mode { tracking, contact_safe, returning, resume_check };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::tracking: return "TRACKING";
    case Mode::contact_safe: return "CONTACT_SAFE";
    case Mode::returning: return "RETURNING";
    case Mode::resume_check: return "RESUME_CHECK";
  }
  return "UNKNOWN";
}

struct ControllerConfig {
  GainSet gains;
  double k = 0.2;                 // estimator filter time constant, s
  double tau_th = 3.0;            // detection threshold, N m
  double release_fraction = 0.5;  // leave CONTACT_SAFE once |r|_inf < fraction * tau_th ...
  double release_dwell = 0.1;     // ... for this long, s
  double resume_tol = 0.05;       // |q - q_pre|_inf to finish RETURNING, rad
  double resume_dwell = 0.05;     // time within resume_tol before TRACKING, s
  double k_f = 1.0;               // f_des = k_f |pinv(J_c)^T r|
  double null_damping = 5.0;      // K_dn in contact-safe mode, N m s/rad
  bool null_bias_compensation = true;
  double contact_damping = 0.05;  // damping of pinv(J_c)
  bool feedforward = true;        // add planned acceleration to the tracking law

  static ControllerConfig defaults(int n) {
    ControllerConfig c;
    c.gains = GainSet::defaults(n);
    return c;
  }

  void validate(int n) const {
    gains.validate(n);
    if (!(k > 0.0)) throw ConfigError("controller: k must be positive");
    if (!(tau_th > 0.0)) throw ConfigError("controller: tau_th must be positive");
    if (!(release_fraction > 0.0 && release_fraction <= 1.0))
      throw ConfigError("controller: release_fraction must be in (0, 1]");
    if (release_dwell < 0.0 || resume_dwell < 0.0 || !(resume_tol > 0.0))
      throw ConfigError("controller: invalid mode-machine timing");
    if (k_f < 0.0 || null_damping < 0.0 || contact_damping < 0.0)
      throw ConfigError("controller: k_f, null_damping and contact_damping must be >= 0");
  }
};

struct ControllerState {
  Mode mode = Mode::tracking;
  UsdeState usde;
  std::optional<ContactInfo> contact;
  VecX q_pre_contact;
  VecX tau_prev;  // last command, consumed by the estimator on the next tick
  double release_timer = 0.0;
  double resume_timer = 0.0;
  int contact_episodes = 0;
};

inline ControllerState make_controller_state(const RobotModel& model, const ControllerConfig& cfg) {
  ControllerState s;
  s.usde.k = cfg.k;
  s.q_pre_contact = VecX::Zero(model.dof());
  s.tau_prev = VecX::Zero(model.dof());
  return s;
}

struct ControlInput {
  double t = 0.0;
  double dt = 1e-3;
  VecX q, qd;
  VecX q_des, qd_des, qdd_des;  // latest planner sample
};

struct ControlOutput {
  Mode mode = Mode::tracking;
  bool mode_changed = false;
  VecX tau;
  VecX r_hat;
  int contact_link = -1;
  double f_des = 0.0;
  bool direction_warning = false;  // exceedance without a usable direction
};

/// One control tick: estimate, switch modes, compute torque.
///   TRACKING -> CONTACT_SAFE      on detection (latches q_pre_contact)
///   CONTACT_SAFE -> RETURNING     after |r|_inf < release_fraction tau_th for release_dwell
///   RETURNING -> RESUME_CHECK     when |q - q_pre|_inf < resume_tol
///   RESUME_CHECK -> TRACKING      after resume_dwell within tolerance
///   RESUME_CHECK -> RETURNING     when the tolerance is lost
///   RETURNING, RESUME_CHECK -> CONTACT_SAFE on a new detection
inline ControlOutput mode_step(ControllerState& s, const ControllerConfig& cfg,
                               const RobotModel& model, const ControlInput& in) {
  ControlOutput out;
  const Mode before = s.mode;
  out.r_hat = usde_update(s.usde, model, in.q, in.qd, s.tau_prev, in.dt);
  const int link = contact_link(out.r_hat, cfg.tau_th);

  auto enter_contact = [&]() -> bool {
    try {
      const auto dir = reduced_contact_jacobian(model, in.q, link, out.r_hat, cfg.contact_damping);
      s.contact = ContactInfo{link, out.r_hat, dir.n_c, dir.Jc_tilde, in.t};
      return true;
    } catch (const ContactDirectionError&) {
      out.direction_warning = true;
      return false;
    }
  };

  switch (s.mode) {
    case Mode::tracking:
      if (link >= 0 && enter_contact()) {
        s.q_pre_contact = in.q;
        s.mode = Mode::contact_safe;
        s.release_timer = 0.0;
        ++s.contact_episodes;
      }
      break;
    case Mode::contact_safe: {
      // Follow the estimate: a more distal exceedance re-identifies the link,
      // and the direction is refreshed from the current estimate.
      const int current = s.contact ? s.contact->link : -1;
      const int use = std::max(link, current);
      if (use >= 0) {
        try {
          const auto dir = reduced_contact_jacobian(model, in.q, use, out.r_hat, cfg.contact_damping);
          s.contact->link = use;
          s.contact->r_hat = out.r_hat;
          s.contact->n_c = dir.n_c;
          s.contact->Jc_tilde = dir.Jc_tilde;
        } catch (const ContactDirectionError&) {
        }
      }
      if (out.r_hat.cwiseAbs().maxCoeff() < cfg.release_fraction * cfg.tau_th) {
        s.release_timer += in.dt;
        if (s.release_timer >= cfg.release_dwell - 1e-12) {
          s.mode = Mode::returning;
          s.resume_timer = 0.0;
        }
      } else {
        s.release_timer = 0.0;
      }
      break;
    }
    case Mode::returning:
      if (link >= 0 && enter_contact()) {
        s.mode = Mode::contact_safe;
        s.release_timer = 0.0;
        ++s.contact_episodes;
      } else if ((in.q - s.q_pre_contact).cwiseAbs().maxCoeff() < cfg.resume_tol) {
        s.mode = Mode::resume_check;
        s.resume_timer = 0.0;
      }
      break;
    case Mode::resume_check:
      if (link >= 0 && enter_contact()) {
        s.mode = Mode::contact_safe;
        s.release_timer = 0.0;
        ++s.contact_episodes;
      } else if ((in.q - s.q_pre_contact).cwiseAbs().maxCoeff() >= cfg.resume_tol) {
        s.mode = Mode::returning;
      } else {
        s.resume_timer += in.dt;
        if (s.resume_timer >= cfg.resume_dwell - 1e-12) {
          s.mode = Mode::tracking;
          s.contact.reset();
        }
      }
      break;
  }

  const VecX qdd_ff = cfg.feedforward ? in.qdd_des : VecX();
  if (s.mode == Mode::contact_safe && s.contact) {
    const auto ks = kinematic_state(model, in.q_des);
    const Pose T_des = ks.ee();
    const Twist V_des(Vec6(detail::ee_body_jacobian(ks, model.dof()) * in.qd_des));
    const MatX Jc = contact_jacobian(model, kinematic_state(model, in.q), s.contact->link);
    out.f_des = cfg.k_f * (pseudo_inverse(Jc, cfg.contact_damping).transpose() * out.r_hat).norm();
    out.tau = contact_safe_torque(model, in.q, in.qd, T_des, V_des, s.contact->Jc_tilde, out.r_hat,
                                  cfg.gains, out.f_des) +
              null_space_regulation(model, in.q, in.qd, cfg.null_damping,
                                    cfg.null_bias_compensation);
    out.contact_link = s.contact->link;
  } else {
    out.tau = tracking_torque(model, in.q, in.qd, in.q_des, in.qd_des, cfg.gains, qdd_ff);
    out.contact_link = s.contact ? s.contact->link : -1;
  }
  out.mode = s.mode;
  out.mode_changed = s.mode != before;
  s.tau_prev = out.tau;
  return out;
}

}  // namespace armsafe

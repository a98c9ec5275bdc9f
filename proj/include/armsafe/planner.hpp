#pragma once

/// Receding-horizon trajectory planner with task-oriented obstacle avoidance.
///
/// State x_k = (q_k, qd_k), input u_k = qdd_k, explicit Euler model
///   q_{k+1} = q_k + dt qd_k,  qd_{k+1} = qd_k + dt u_k.
/// The end-effector pose, its body Jacobian and all obstacle distances are
/// frozen at the measurement, which makes every cost quadratic and every
/// constraint affine: each planning step is one convex QP.

#include "armsafe/errors.hpp"
#include "armsafe/geometry.hpp"
#include "armsafe/model.hpp"
#include "armsafe/qp.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace armsafe {

enum class Shooting { multiple, single };

inline const char* to_string(Shooting s) { return s == Shooting::multiple ? "multiple" : "single"; }

struct MpcConfig {
  int N = 50;
  double dt = 0.05;
  Vec6 Q_ee = Vec6::Ones();
  Vec6 Q_ee_f = Vec6::Ones();
  Vec6 S = Vec6::Ones();  // task selection, entries 0 or 1
  VecX Q_rep;             // diagonal weights, one per joint
  VecX Q_s;
  VecX Q_s_f;
  VecX R;
  double posture_weight = 0.0;  // pull towards PlannerInput::posture when set
  double d_th1 = 0.02;
  double d_th2 = 0.1;
  double k_rep = 1.0;
  double alpha = 1.0;
  bool relaxation = true;          // false keeps lambda = 1
  double activation_radius = 0.5;  // pairs farther than this get no distance rows
  double constraint_margin = 0.0;  // added to d_th1 in the hard constraint
  double witness_damping = 0.05;   // damping of the witness-point pseudo-inverse
  Shooting shooting = Shooting::multiple;
  double kkt_tol = 1e-6;
  double defect_tol = 1e-8;
  int max_iters = 2000;
  int fallback_budget = 10;  // consecutive failed solves before aborting

  /// Defaults for an n-joint robot: Q_rep = Q_s = 0.01 I, Q_s_f = 10 I, R = 1e-9 I.
  static MpcConfig defaults(int n) {
    MpcConfig c;
    c.Q_rep = VecX::Constant(n, 0.01);
    c.Q_s = VecX::Constant(n, 0.01);
    c.Q_s_f = VecX::Constant(n, 10.0);
    c.R = VecX::Constant(n, 1e-9);
    return c;
  }

  void validate(int n) const {
    auto fail = [](const std::string& m) { throw ConfigError("planner: " + m); };
    if (N < 1) fail("N must be at least 1");
    if (!(dt > 0.0)) fail("dt must be positive");
    for (const VecX* w : {&Q_rep, &Q_s, &Q_s_f, &R})
      if (w->size() != n) fail("joint weights need " + std::to_string(n) + " entries");
    auto nonneg = [&](const auto& v, const char* name) {
      if (!v.allFinite() || (v.array() < 0.0).any()) fail(std::string(name) + " must be >= 0");
    };
    nonneg(Q_ee, "Q_ee");
    nonneg(Q_ee_f, "Q_ee_f");
    nonneg(Q_rep, "Q_rep");
    nonneg(Q_s, "Q_s");
    nonneg(Q_s_f, "Q_s_f");
    nonneg(R, "R");
    for (int i = 0; i < 6; ++i)
      if (S(i) != 0.0 && S(i) != 1.0) fail("S entries must be 0 or 1");
    if (!(d_th1 > 0.0) || !(d_th2 > d_th1)) fail("need d_th2 > d_th1 > 0");
    if (!(alpha > 0.0)) fail("alpha must be positive");
    if (!(k_rep >= 0.0)) fail("k_rep must be >= 0");
    if (!(posture_weight >= 0.0)) fail("posture_weight must be >= 0");
    if (!(activation_radius > 0.0)) fail("activation_radius must be positive");
    if (!(witness_damping >= 0.0)) fail("witness_damping must be >= 0");
    if (!(kkt_tol > 0.0) || !(defect_tol > 0.0) || max_iters < 1) fail("invalid solver tolerances");
    if (fallback_budget < 0) fail("fallback_budget must be >= 0");
  }
};

struct MpcSolution {
  std::vector<VecX> X;  // N + 1 states (q, qd)
  std::vector<VecX> U;  // N inputs
  double cost = 0.0;
  double max_defect = 0.0;
  double min_predicted_distance = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  QpStatus status = QpStatus::numerical_failure;
  double kkt_residual = std::numeric_limits<double>::infinity();
  double solve_ms = 0.0;
  double lambda = 1.0;  // goal relaxation used
  double measured_min_distance = std::numeric_limits<double>::infinity();
  std::vector<std::tuple<int, int, int, int, int>> active_tags;  // see ConstraintTag
};

struct PlannerInput {
  VecX x0;  // measured (q, qd)
  Pose T_ref;
  std::vector<Obstacle> obstacles;
  std::optional<VecX> posture;              // target configuration for posture_weight
  const MpcSolution* warm_start = nullptr;  // previous solution, if any
};

// ---------------------------------------------------------------------------
// Cost building blocks

/// T_now ⊖ T_ref = log(T_now^-1 T_ref), the body twist towards the reference.
inline Twist reference_twist(const Pose& T_now, const Pose& T_ref) {
  return pose_difference(T_now, T_ref);
}

/// J (q_k - q) with J and q frozen at the measurement.
inline Twist predicted_twist(const MatX& J_now, const VecX& q_k, const VecX& q_now) {
  if (J_now.rows() != 6 || J_now.cols() != q_k.size() || q_k.size() != q_now.size())
    throw std::invalid_argument("predicted_twist: dimension mismatch");
  return Twist(Vec6(J_now * (q_k - q_now)));
}

/// Goal relaxation in (0, 1]: exp(-alpha (d_th2 - d) / (d_th2 - d_th1)) inside
/// the repulsive band and below it, 1 from d_th2 on.
inline double relaxation_factor(double d, const MpcConfig& cfg) {
  if (d >= cfg.d_th2) return 1.0;
  return std::exp(-cfg.alpha * (cfg.d_th2 - d) / (cfg.d_th2 - cfg.d_th1));
}

/// n k_rep (d_th2 - d) for d_th1 <= d < d_th2, zero elsewhere.
inline Vec3 repulsive_velocity(const DistanceResult& r, const MpcConfig& cfg) {
  if (r.distance < cfg.d_th1 || r.distance >= cfg.d_th2) return Vec3::Zero();
  return r.normal * cfg.k_rep * (cfg.d_th2 - r.distance);
}

/// Frozen measurement quantities shared by every node of one planning step.
struct MpcContext {
  int n = 0;
  VecX q, qd;
  bool clamped = false;
  Pose T;
  MatX J;     // end-effector body Jacobian
  MatX N_t;   // null projector of the selected task rows
  Twist V_ref;
  double lambda = 1.0;
  double min_distance = std::numeric_limits<double>::infinity();
  std::vector<DistanceResult> pairs;  // every (body, obstacle) pair, body-major

  struct Repulsion {
    int pair;
    VecX target;  // pinv(J_A) v+
  };
  std::vector<Repulsion> repulsion;

  struct DistanceRow {
    int pair;
    RowVecX gradient;
    double rhs;  // gradient q_k >= rhs
  };
  std::vector<DistanceRow> distance_rows;

  std::optional<VecX> posture;
};

/// Target joint velocity pinv(J_A) (J_A qd + v_rep) for one pair.
inline VecX repulsion_target(const RobotModel& model, const KinematicState& ks, const VecX& qd,
                             const DistanceResult& r, const MpcConfig& cfg) {
  const MatX JA = detail::point_jacobian(ks, model.dof(), r.link, r.p_a).bottomRows<3>();
  const Vec3 v_plus = JA * qd + repulsive_velocity(r, cfg);
  return pseudo_inverse(JA, cfg.witness_damping) * v_plus;
}

inline MatX task_null_projector(const MatX& J, const Vec6& S) {
  std::vector<int> rows;
  for (int i = 0; i < 6; ++i)
    if (S(i) != 0.0) rows.push_back(i);
  if (rows.empty()) return MatX::Identity(J.cols(), J.cols());
  MatX Jt(rows.size(), J.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) Jt.row(i) = J.row(rows[i]);
  return robust_null_projector(Jt);
}

inline MpcContext make_context(const RobotModel& model, const MpcConfig& cfg,
                               const PlannerInput& in) {
  const int n = model.dof();
  if (in.x0.size() != 2 * n) throw std::invalid_argument("planner: x0 must have 2n entries");
  if (!in.x0.allFinite()) throw std::invalid_argument("planner: x0 is not finite");
  MpcContext c;
  c.n = n;
  c.q = in.x0.head(n).cwiseMax(model.position_min()).cwiseMin(model.position_max());
  const VecX vmax = model.velocity_limit();
  c.qd = in.x0.tail(n).cwiseMax(-vmax).cwiseMin(vmax);
  c.clamped = c.q != in.x0.head(n) || c.qd != in.x0.tail(n);

  const auto ks = kinematic_state(model, c.q);
  c.T = ks.ee();
  c.J = detail::ee_body_jacobian(ks, n);
  c.N_t = task_null_projector(c.J, cfg.S);
  c.V_ref = reference_twist(c.T, in.T_ref);
  c.pairs = all_pairs(model, ks, in.obstacles);
  for (const auto& p : c.pairs) c.min_distance = std::min(c.min_distance, p.distance);
  c.lambda = cfg.relaxation ? relaxation_factor(c.min_distance, cfg) : 1.0;
  c.posture = in.posture;
  if (c.posture && c.posture->size() != n)
    throw std::invalid_argument("planner: posture must have n entries");

  const bool repulse = cfg.Q_rep.size() == n && cfg.Q_rep.cwiseAbs().maxCoeff() > 0.0;
  for (std::size_t i = 0; i < c.pairs.size(); ++i) {
    const auto& r = c.pairs[i];
    if (r.degenerate) continue;
    if (repulse && r.distance < cfg.d_th2)
      c.repulsion.push_back({static_cast<int>(i), repulsion_target(model, ks, c.qd, r, cfg)});
    if (r.distance < cfg.activation_radius) {
      const RowVecX g = distance_gradient(model, ks, r);
      c.distance_rows.push_back(
          {static_cast<int>(i), g, cfg.d_th1 + cfg.constraint_margin - r.distance + g.dot(c.q)});
    }
  }
  return c;
}

/// Quadratic cost of one node, 0.5 x' H x + f' x + constant, split by q, qd and u.
struct NodeCost {
  MatX Hq, Hv, Hu;
  VecX fq, fv, fu;
  double constant = 0.0;

  double eval(const VecX& q, const VecX& v, const VecX* u) const {
    double c = 0.5 * q.dot(Hq * q) + fq.dot(q) + 0.5 * v.dot(Hv * v) + fv.dot(v) + constant;
    if (u) c += 0.5 * u->dot(Hu * *u) + fu.dot(*u);
    return c;
  }
};

inline NodeCost node_cost(const MpcContext& c, const MpcConfig& cfg, bool terminal) {
  const int n = c.n;
  NodeCost nc;
  const Vec6 w = c.lambda * cfg.S.cwiseProduct(terminal ? cfg.Q_ee_f : cfg.Q_ee);
  // L_ee = |V_ref - J (q_k - q)|^2_W = |J q_k - b|^2_W with b = V_ref + J q.
  const Vec6 b = c.V_ref.vector() + c.J * c.q;
  const MatX JtW = c.J.transpose() * w.asDiagonal();
  nc.Hq = 2.0 * JtW * c.J;
  nc.fq = -2.0 * JtW * b;
  nc.constant = b.dot(w.asDiagonal() * b);

  const VecX& qs = terminal ? cfg.Q_s_f : cfg.Q_s;
  nc.Hv = 2.0 * MatX(qs.asDiagonal());
  nc.fv = VecX::Zero(n);
  if (!terminal) {
    const MatX NQN = c.N_t.transpose() * cfg.Q_rep.asDiagonal() * c.N_t;
    for (const auto& rep : c.repulsion) {
      nc.Hv += 2.0 * NQN;
      nc.fv -= 2.0 * NQN * rep.target;
      nc.constant += rep.target.dot(NQN * rep.target);
    }
  }
  if (c.posture && cfg.posture_weight > 0.0) {
    nc.Hq.diagonal().array() += 2.0 * cfg.posture_weight;
    nc.fq -= 2.0 * cfg.posture_weight * *c.posture;
    nc.constant += cfg.posture_weight * c.posture->squaredNorm();
  }
  nc.Hu = terminal ? MatX::Zero(n, n) : MatX(2.0 * MatX(cfg.R.asDiagonal()));
  nc.fu = VecX::Zero(n);
  return nc;
}

/// L_rep for one pair: |N_t (qd_k - pinv(J_A) v+)|^2_{Q_rep}; zero outside the repulsive band.
inline double repulsive_cost(const VecX& qd_k, const DistanceResult& r, const RobotModel& model,
                             const VecX& q_now, const VecX& qd_now, const MpcConfig& cfg) {
  if (r.distance >= cfg.d_th2 || r.degenerate) return 0.0;
  const auto ks = kinematic_state(model, q_now);
  const MatX N_t = task_null_projector(detail::ee_body_jacobian(ks, model.dof()), cfg.S);
  const VecX e = N_t * (qd_k - repulsion_target(model, ks, qd_now, r, cfg));
  return e.dot(cfg.Q_rep.asDiagonal() * e);
}

/// L_ee + L_rep + L_s + |u|^2_R (+ posture term when enabled).
inline double stage_cost(const VecX& x_k, const VecX& u_k, const MpcContext& c,
                         const MpcConfig& cfg) {
  return node_cost(c, cfg, false).eval(x_k.head(c.n), x_k.tail(c.n), &u_k);
}

/// L_ee + L_s with terminal weights (+ posture term when enabled).
inline double terminal_cost(const VecX& x_N, const MpcContext& c, const MpcConfig& cfg) {
  return node_cost(c, cfg, true).eval(x_N.head(c.n), x_N.tail(c.n), nullptr);
}

/// g_{k+1} = x_{k+1} - f(x_k, u_k) for k = 0..N-1.
inline std::vector<VecX> shooting_defects(const std::vector<VecX>& X, const std::vector<VecX>& U,
                                          double dt) {
  if (X.size() != U.size() + 1) throw std::invalid_argument("shooting_defects: need |X| = |U| + 1");
  std::vector<VecX> g;
  g.reserve(U.size());
  for (std::size_t k = 0; k < U.size(); ++k) {
    const Eigen::Index n = U[k].size();
    if (X[k].size() != 2 * n || X[k + 1].size() != 2 * n)
      throw std::invalid_argument("shooting_defects: state size must be twice the input size");
    VecX pred(2 * n);
    pred << X[k].head(n) + dt * X[k].tail(n), X[k].tail(n) + dt * U[k];
    g.push_back(X[k + 1] - pred);
  }
  return g;
}

/// Explicit Euler rollout of U from x0.
inline std::vector<VecX> rollout(const VecX& x0, const std::vector<VecX>& U, double dt) {
  std::vector<VecX> X{x0};
  const Eigen::Index n = x0.size() / 2;
  for (const auto& u : U) {
    const VecX& x = X.back();
    VecX next(2 * n);
    next << x.head(n) + dt * x.tail(n), x.tail(n) + dt * u;
    X.push_back(next);
  }
  return X;
}

// ---------------------------------------------------------------------------
// Transcription

/// Identifies an inequality across planning steps so active sets can be shifted.
/// (kind, node, joint or pair-body, pair-obstacle, side)
using ConstraintTag = std::tuple<int, int, int, int, int>;
enum TagKind { tag_q = 0, tag_qd = 1, tag_u = 2, tag_distance = 3, tag_none = 4 };

struct MpcProblem {
  MpcConfig cfg;
  MpcContext context;
  Shooting shooting = Shooting::multiple;
  int n = 0;
  int N = 0;
  VecX x0;
  NodeCost stage, terminal;
  VecX q_min, q_max, v_max, a_max;
  std::vector<VecX> guess_X, guess_U;  // shifted warm start or constant x0 / zero inputs
  std::vector<ConstraintTag> warm_tags;

  int decision_count() const {
    return shooting == Shooting::multiple ? (N + 1) * 2 * n + N * n : N * n;
  }
  int equality_count() const { return shooting == Shooting::multiple ? (N + 1) * 2 * n : 0; }
  int distance_row_count() const {
    return static_cast<int>(context.distance_rows.size()) * std::max(N - 1, 0);
  }
};

inline MpcProblem transcribe(const PlannerInput& in, const MpcConfig& cfg, const RobotModel& model) {
  cfg.validate(model.dof());
  MpcProblem p;
  p.cfg = cfg;
  p.shooting = cfg.shooting;
  p.n = model.dof();
  p.N = cfg.N;
  p.context = make_context(model, cfg, in);
  p.x0.resize(2 * p.n);
  p.x0 << p.context.q, p.context.qd;
  p.stage = node_cost(p.context, cfg, false);
  p.terminal = node_cost(p.context, cfg, true);
  p.q_min = model.position_min();
  p.q_max = model.position_max();
  p.v_max = model.velocity_limit();
  p.a_max = model.acceleration_limit();

  const MpcSolution* ws = in.warm_start;
  if (ws && static_cast<int>(ws->U.size()) == p.N && static_cast<int>(ws->X.size()) == p.N + 1) {
    for (int k = 0; k <= p.N; ++k) p.guess_X.push_back(ws->X[std::min(k + 1, p.N)]);
    for (int k = 0; k < p.N; ++k) p.guess_U.push_back(ws->U[std::min(k + 1, p.N - 1)]);
    for (const auto& t : ws->active_tags) {
      auto shifted = t;
      std::get<1>(shifted) -= 1;
      if (std::get<1>(shifted) >= 0) p.warm_tags.push_back(shifted);
    }
  } else {
    p.guess_X.assign(p.N + 1, p.x0);
    p.guess_U.assign(p.N, VecX::Zero(p.n));
  }
  return p;
}

namespace detail {

struct BuiltQp {
  std::vector<ConstraintTag> tags;  // one per inequality id
};

inline ConstraintTag bound_tag(int kind, int node, int joint, bool upper) {
  return {kind, node, joint, -1, upper ? 1 : 0};
}

/// Multiple shooting: z = [x_0 .. x_N, u_0 .. u_{N-1}], sparse KKT.
inline SparseQp build_multiple_shooting(const MpcProblem& p, BuiltQp& meta) {
  const int n = p.n, N = p.N, nx = 2 * n;
  const int nz = p.decision_count();
  auto iq = [&](int k) { return k * nx; };
  auto iv = [&](int k) { return k * nx + n; };
  auto iu = [&](int k) { return (N + 1) * nx + k * n; };
  const double inf = std::numeric_limits<double>::infinity();

  SparseQp qp;
  qp.f = VecX::Zero(nz);
  std::vector<Eigen::Triplet<double>> h;
  auto add_block = [&](int off, const MatX& B) {
    for (int i = 0; i < B.rows(); ++i)
      for (int j = 0; j < B.cols(); ++j)
        if (B(i, j) != 0.0) h.emplace_back(off + i, off + j, B(i, j));
  };
  for (int k = 0; k <= N; ++k) {
    const NodeCost& c = k < N ? p.stage : p.terminal;
    add_block(iq(k), c.Hq);
    add_block(iv(k), c.Hv);
    qp.f.segment(iq(k), n) = c.fq;
    qp.f.segment(iv(k), n) = c.fv;
    if (k < N) {
      add_block(iu(k), c.Hu);
      qp.f.segment(iu(k), n) = c.fu;
    }
  }
  qp.H.resize(nz, nz);
  qp.H.setFromTriplets(h.begin(), h.end());

  // Equalities: pin x_0, then one defect block per interval.
  std::vector<Eigen::Triplet<double>> a;
  const int me = p.equality_count();
  qp.b_eq = VecX::Zero(me);
  for (int i = 0; i < nx; ++i) a.emplace_back(i, i, 1.0);
  qp.b_eq.head(nx) = p.x0;
  for (int k = 0; k < N; ++k) {
    const int r = nx + k * nx;
    for (int i = 0; i < n; ++i) {
      a.emplace_back(r + i, iq(k + 1) + i, 1.0);
      a.emplace_back(r + i, iq(k) + i, -1.0);
      a.emplace_back(r + i, iv(k) + i, -p.cfg.dt);
      a.emplace_back(r + n + i, iv(k + 1) + i, 1.0);
      a.emplace_back(r + n + i, iv(k) + i, -1.0);
      a.emplace_back(r + n + i, iu(k) + i, -p.cfg.dt);
    }
  }
  qp.A_eq.resize(me, nz);
  qp.A_eq.setFromTriplets(a.begin(), a.end());

  // Linearized distance rows on nodes 2..N (node 1 is fixed by x_0).
  const auto& rows = p.context.distance_rows;
  std::vector<Eigen::Triplet<double>> d;
  qp.b_in = VecX::Zero(p.distance_row_count());
  int r = 0;
  for (const auto& row : rows) {
    const auto& pair = p.context.pairs[row.pair];
    for (int k = 2; k <= N; ++k, ++r) {
      for (int i = 0; i < n; ++i)
        if (row.gradient(i) != 0.0) d.emplace_back(r, iq(k) + i, row.gradient(i));
      qp.b_in(r) = row.rhs;
      meta.tags.push_back({tag_distance, k, pair.body, pair.obstacle, 0});
    }
  }
  qp.A_in.resize(r, nz);
  qp.A_in.setFromTriplets(d.begin(), d.end());

  qp.lower = VecX::Constant(nz, -inf);
  qp.upper = VecX::Constant(nz, inf);
  for (int k = 0; k <= N; ++k)
    for (int i = 0; i < n; ++i) {
      if (k >= 2) {
        qp.lower(iq(k) + i) = p.q_min(i);
        qp.upper(iq(k) + i) = p.q_max(i);
      }
      if (k >= 1) {
        qp.lower(iv(k) + i) = -p.v_max(i);
        qp.upper(iv(k) + i) = p.v_max(i);
      }
      if (k < N) {
        qp.lower(iu(k) + i) = -p.a_max(i);
        qp.upper(iu(k) + i) = p.a_max(i);
      }
    }
  for (int z = 0; z < nz; ++z) {
    int kind, node, joint;
    if (z < (N + 1) * nx) {
      node = z / nx;
      const int off = z % nx;
      kind = off < n ? tag_q : tag_qd;
      joint = off % n;
    } else {
      kind = tag_u;
      node = (z - (N + 1) * nx) / n;
      joint = (z - (N + 1) * nx) % n;
    }
    meta.tags.push_back(bound_tag(kind, node, joint, false));
    meta.tags.push_back(bound_tag(kind, node, joint, true));
  }
  return qp;
}

/// Single shooting: states eliminated, z = [u_0 .. u_{N-1}], dense condensed QP.
/// q_k = q_0 + k dt qd_0 + sum_{j <= k-2} phi_k(j) u_j with phi_k(j) = dt^2 (k-1-j),
/// qd_k = qd_0 + sum_{j <= k-1} dt u_j.
inline DenseQp build_single_shooting(const MpcProblem& p, BuiltQp& meta) {
  const int n = p.n, N = p.N, nz = N * n;
  const double dt = p.cfg.dt;
  const VecX q0 = p.x0.head(n), v0 = p.x0.tail(n);
  auto phi = [&](int k, int j) { return j <= k - 2 ? dt * dt * (k - 1 - j) : 0.0; };
  auto psi = [&](int k, int j) { return j <= k - 1 ? dt : 0.0; };

  DenseQp qp;
  qp.H = MatX::Zero(nz, nz);
  qp.f = VecX::Zero(nz);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j <= i; ++j) {
      // Scalar weights of the stage (k < N) and terminal (k = N) blocks.
      double pq_s = 0.0, pv_s = 0.0;
      for (int k = i + 1; k < N; ++k) {
        pq_s += phi(k, i) * phi(k, j);
        pv_s += psi(k, i) * psi(k, j);
      }
      const double pq_t = phi(N, i) * phi(N, j), pv_t = psi(N, i) * psi(N, j);
      MatX B = pq_s * p.stage.Hq + pv_s * p.stage.Hv + pq_t * p.terminal.Hq + pv_t * p.terminal.Hv;
      if (i == j) B += p.stage.Hu;
      qp.H.block(i * n, j * n, n, n) = B;
      if (i != j) qp.H.block(j * n, i * n, n, n) = B.transpose();
    }
  }
  for (int k = 1; k <= N; ++k) {
    const NodeCost& c = k < N ? p.stage : p.terminal;
    const VecX gq = c.Hq * (q0 + k * dt * v0) + c.fq;
    const VecX gv = c.Hv * v0 + c.fv;
    for (int j = 0; j < k; ++j) qp.f.segment(j * n, n) += phi(k, j) * gq + psi(k, j) * gv;
  }
  for (int j = 0; j < N; ++j) qp.f.segment(j * n, n) += p.stage.fu;

  const auto& rows = p.context.distance_rows;
  const int m_state = 2 * n * (N - 1) + 2 * n * N;
  const int m = m_state + p.distance_row_count();
  qp.A_in = MatX::Zero(m, nz);
  qp.b_in = VecX::Zero(m);
  int r = 0;
  for (int k = 1; k <= N; ++k) {
    const VecX a_k = q0 + k * dt * v0;
    for (int i = 0; i < n; ++i) {
      if (k >= 2) {
        for (int j = 0; j <= k - 2; ++j) {
          qp.A_in(r, j * n + i) = phi(k, j);
          qp.A_in(r + 1, j * n + i) = -phi(k, j);
        }
        qp.b_in(r) = p.q_min(i) - a_k(i);
        qp.b_in(r + 1) = -(p.q_max(i) - a_k(i));
        meta.tags.push_back(bound_tag(tag_q, k, i, false));
        meta.tags.push_back(bound_tag(tag_q, k, i, true));
        r += 2;
      }
      for (int j = 0; j <= k - 1; ++j) {
        qp.A_in(r, j * n + i) = dt;
        qp.A_in(r + 1, j * n + i) = -dt;
      }
      qp.b_in(r) = -p.v_max(i) - v0(i);
      qp.b_in(r + 1) = -(p.v_max(i) - v0(i));
      meta.tags.push_back(bound_tag(tag_qd, k, i, false));
      meta.tags.push_back(bound_tag(tag_qd, k, i, true));
      r += 2;
    }
  }
  for (const auto& row : rows) {
    const auto& pair = p.context.pairs[row.pair];
    for (int k = 2; k <= N; ++k, ++r) {
      for (int j = 0; j <= k - 2; ++j) qp.A_in.block(r, j * n, 1, n) = phi(k, j) * row.gradient;
      qp.b_in(r) = row.rhs - row.gradient.dot(q0 + k * dt * v0);
      meta.tags.push_back({tag_distance, k, pair.body, pair.obstacle, 0});
    }
  }

  qp.A_eq.resize(0, nz);
  qp.b_eq.resize(0);
  qp.lower.resize(nz);
  qp.upper.resize(nz);
  for (int k = 0; k < N; ++k)
    for (int i = 0; i < n; ++i) {
      qp.lower(k * n + i) = -p.a_max(i);
      qp.upper(k * n + i) = p.a_max(i);
      meta.tags.push_back(bound_tag(tag_u, k, i, false));
      meta.tags.push_back(bound_tag(tag_u, k, i, true));
    }
  return qp;
}

template <typename Matrix>
std::vector<int> warm_ids(const MpcProblem& p, const BuiltQp& meta) {
  std::vector<int> ids;
  if (p.warm_tags.empty()) return ids;
  std::map<ConstraintTag, int> index;
  for (std::size_t i = 0; i < meta.tags.size(); ++i) index.emplace(meta.tags[i], static_cast<int>(i));
  for (const auto& t : p.warm_tags) {
    auto it = index.find(t);
    if (it != index.end()) ids.push_back(it->second);
  }
  return ids;
}

}  // namespace detail

/// The transcribed QP for inspection (counts, convexity checks).
inline SparseQp multiple_shooting_qp(const MpcProblem& p) {
  detail::BuiltQp meta;
  return detail::build_multiple_shooting(p, meta);
}

inline DenseQp single_shooting_qp(const MpcProblem& p) {
  detail::BuiltQp meta;
  return detail::build_single_shooting(p, meta);
}

/// Solves one planning step. The problem is a convex QP, so a single QP solve
/// is the whole SQP; `iterations` counts active-set changes.
inline MpcSolution solve(const MpcProblem& p,
                         std::optional<std::chrono::steady_clock::time_point> deadline = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  QpOptions opt;
  opt.max_iterations = p.cfg.max_iters;
  opt.deadline = deadline;

  detail::BuiltQp meta;
  QpResult qr;
  MpcSolution s;
  const int n = p.n, N = p.N;
  if (p.shooting == Shooting::multiple) {
    const SparseQp qp = detail::build_multiple_shooting(p, meta);
    qr = solve_qp(qp, opt, detail::warm_ids<SparseMat>(p, meta));
    if (qr.z.size() == qp.variables()) {
      for (int k = 0; k <= N; ++k) s.X.push_back(qr.z.segment(k * 2 * n, 2 * n));
      for (int k = 0; k < N; ++k) s.U.push_back(qr.z.segment((N + 1) * 2 * n + k * n, n));
    }
  } else {
    const DenseQp qp = detail::build_single_shooting(p, meta);
    qr = solve_qp(qp, opt, detail::warm_ids<MatX>(p, meta));
    if (qr.z.size() == qp.variables()) {
      for (int k = 0; k < N; ++k) s.U.push_back(qr.z.segment(k * n, n));
      s.X = rollout(p.x0, s.U, p.cfg.dt);
    }
  }
  s.status = qr.status;
  s.iterations = qr.iterations;
  s.kkt_residual = qr.kkt_residual;
  s.lambda = p.context.lambda;
  s.measured_min_distance = p.context.min_distance;
  for (int id : qr.active) s.active_tags.push_back(meta.tags[id]);

  if (s.X.empty()) {
    s.X.assign(N + 1, p.x0);
    s.U.assign(N, VecX::Zero(n));
  }
  s.max_defect = 0.0;
  for (const auto& g : shooting_defects(s.X, s.U, p.cfg.dt))
    s.max_defect = std::max(s.max_defect, g.cwiseAbs().maxCoeff());
  s.cost = 0.0;
  for (int k = 0; k < N; ++k) s.cost += p.stage.eval(s.X[k].head(n), s.X[k].tail(n), &s.U[k]);
  s.cost += p.terminal.eval(s.X[N].head(n), s.X[N].tail(n), nullptr);
  for (const auto& row : p.context.distance_rows) {
    const double d0 = p.context.pairs[row.pair].distance;
    for (int k = 2; k <= N; ++k)
      s.min_predicted_distance = std::min(
          s.min_predicted_distance, d0 + row.gradient.dot(s.X[k].head(n) - p.context.q));
  }
  s.converged = s.status == QpStatus::optimal && s.kkt_residual <= p.cfg.kkt_tol &&
                s.max_defect <= p.cfg.defect_tol;
  s.solve_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

/// Drops the first node; the last node is duplicated with zero input.
inline MpcSolution shift_solution(const MpcSolution& s) {
  MpcSolution out = s;
  if (s.U.empty()) return out;
  out.X.erase(out.X.begin());
  VecX last = out.X.back();
  const Eigen::Index n = last.size() / 2;
  last.tail(n).setZero();
  out.X.push_back(last);
  out.U.erase(out.U.begin());
  out.U.push_back(VecX::Zero(n));
  for (auto& t : out.active_tags) std::get<1>(t) -= 1;
  return out;
}

/// Desired (q, qd, qdd) at time tau into a plan, integrating the piecewise
/// constant inputs exactly from X[0]. Beyond the horizon the final velocity is
/// held at zero acceleration.
struct PlanSample {
  VecX q, qd, qdd;
};

inline PlanSample sample_plan(const MpcSolution& s, double tau, double dt) {
  const Eigen::Index n = s.X.front().size() / 2;
  VecX q = s.X.front().head(n), v = s.X.front().tail(n);
  double t = std::max(tau, 0.0);
  for (const auto& u : s.U) {
    const double h = std::min(t, dt);
    if (t <= dt) return {q + h * v + 0.5 * h * h * u, v + h * u, u};
    q += dt * v + 0.5 * dt * dt * u;
    v += dt * u;
    t -= dt;
  }
  return {q + t * v, v, VecX::Zero(n)};
}

class PlannerAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stateful receding-horizon planner with warm start and fallback.
class Planner {
 public:
  struct Step {
    VecX q_des, qd_des;    // X*[1] of the plan in use
    MpcSolution solution;  // plan in use (fresh or shifted previous)
    bool fallback = false;
  };

  Planner(const RobotModel& model, MpcConfig cfg) : model_(&model), cfg_(std::move(cfg)) {
    cfg_.validate(model.dof());
  }

  const MpcConfig& config() const { return cfg_; }
  void set_config(MpcConfig cfg) {
    cfg.validate(model_->dof());
    cfg_ = std::move(cfg);
    last_.reset();
  }
  const std::optional<MpcSolution>& last_solution() const { return last_; }
  int consecutive_fallbacks() const { return fallbacks_; }
  void reset() {
    last_.reset();
    fallbacks_ = 0;
  }

  /// Solves from the measurement and returns X*[1]. On solver failure the
  /// previous plan is shifted by one node and its X[1] (the old X*[2]) is
  /// returned; more than fallback_budget consecutive failures throw PlannerAbort.
  Step plan_step(PlannerInput in,
                 std::optional<std::chrono::steady_clock::time_point> deadline = {}) {
    in.warm_start = last_ ? &*last_ : nullptr;
    const MpcProblem problem = transcribe(in, cfg_, *model_);
    MpcSolution sol = solve(problem, deadline);
    Step step;
    if (sol.status == QpStatus::optimal) {
      fallbacks_ = 0;
      last_ = sol;
    } else {
      ++fallbacks_;
      if (fallbacks_ > cfg_.fallback_budget)
        throw PlannerAbort(std::string("planner failed ") + std::to_string(fallbacks_) +
                           " consecutive times (last status " + to_string(sol.status) + ")");
      if (last_) {
        MpcSolution shifted = shift_solution(*last_);
        shifted.status = sol.status;
        shifted.iterations = sol.iterations;
        shifted.solve_ms = sol.solve_ms;
        shifted.converged = false;
        last_ = shifted;
      } else {
        MpcSolution hold;
        VecX x = problem.x0;
        x.tail(problem.n).setZero();
        hold.X.assign(problem.N + 1, x);
        hold.U.assign(problem.N, VecX::Zero(problem.n));
        hold.status = sol.status;
        hold.iterations = sol.iterations;
        hold.solve_ms = sol.solve_ms;
        last_ = hold;
      }
      step.fallback = true;
    }
    step.solution = *last_;
    const int n = model_->dof();
    const VecX& x1 = last_->X[std::min<std::size_t>(1, last_->X.size() - 1)];
    step.q_des = x1.head(n);
    step.qd_des = x1.tail(n);
    return step;
  }

 private:
  const RobotModel* model_;
  MpcConfig cfg_;
  std::optional<MpcSolution> last_;
  int fallbacks_ = 0;
};

}  // namespace armsafe

#pragma once

/// Self-checks of the model, geometry and solver against independent oracles
/// (finite differences, closed forms, dense reference solves) on the bundled
/// robots. Used by `armsafe validate` and the test suite.

#include "armsafe/geometry.hpp"
#include "armsafe/model.hpp"
#include "armsafe/planner.hpp"
#include "armsafe/qp.hpp"
#include "armsafe/robot_file.hpp"

#include <cstdio>
#include <random>
#include <string>
#include <vector>

namespace armsafe {

struct ValidateOptions {
  std::vector<std::string> models = {"planar2r", "planar3r", "panda"};
  int samples = 10;  // random configurations per model and suite
  unsigned long long seed = 7;
  bool flip_gravity_sign = false;  // fault injection: the gravity suite must fail
};

struct SuiteResult {
  std::string name;
  int passed = 0;
  int failed = 0;
  std::vector<std::string> failures;  // first few, for diagnostics

  bool ok() const { return failed == 0 && passed > 0; }

  void check(bool good, const std::string& what) {
    if (good) {
      ++passed;
      return;
    }
    ++failed;
    if (failures.size() < 5) failures.push_back(what);
  }
};

struct ValidationReport {
  std::vector<SuiteResult> suites;

  bool ok() const {
    for (const auto& s : suites)
      if (!s.ok()) return false;
    return !suites.empty();
  }

  const SuiteResult* find(const std::string& name) const {
    for (const auto& s : suites)
      if (s.name == name) return &s;
    return nullptr;
  }

  std::string text() const {
    std::string out;
    char line[160];
    for (const auto& s : suites) {
      std::snprintf(line, sizeof line, "%-20s %s  %d passed, %d failed\n", s.name.c_str(),
                    s.ok() ? "ok  " : "FAIL", s.passed, s.failed);
      out += line;
      for (const auto& f : s.failures) out += "    " + f + "\n";
    }
    return out;
  }
};

namespace detail {

inline VecX random_configuration(const RobotModel& model, std::mt19937_64& rng) {
  VecX q(model.dof());
  for (int i = 0; i < model.dof(); ++i) {
    const auto& l = model.joints()[i].limits;
    const double lo = std::isfinite(l.position_min) ? l.position_min : -3.0;
    const double hi = std::isfinite(l.position_max) ? l.position_max : 3.0;
    // Stay off the limits so central differences never leave the range.
    const double m = 0.05 * (hi - lo);
    q(i) = std::uniform_real_distribution<double>(lo + m, hi - m)(rng);
  }
  return q;
}

inline VecX random_vector(int n, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  VecX v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

inline double rel_err(const MatX& a, const MatX& b) {
  return (a - b).cwiseAbs().maxCoeff() / (1.0 + b.cwiseAbs().maxCoeff());
}

inline std::string tag(const RobotModel& m, int sample, const std::string& what, double err) {
  char buf[64];
  std::snprintf(buf, sizeof buf, " err %.3g", err);
  return m.name() + " #" + std::to_string(sample) + " " + what + buf;
}

inline void jacobian_suite(SuiteResult& s, const RobotModel& m, const VecX& q, int k) {
  constexpr double h = 1e-6;
  const int n = m.dof();
  const Pose T = ee_pose(m, q);
  const MatX Jb = ee_body_jacobian(m, q);
  MatX Jfd(6, n);
  for (int i = 0; i < n; ++i) {
    VecX dq = VecX::Zero(n);
    dq(i) = h;
    const Vec6 plus = se3_log(T.inverse() * ee_pose(m, q + dq));
    const Vec6 minus = se3_log(T.inverse() * ee_pose(m, q - dq));
    Jfd.col(i) = (plus - minus) / (2.0 * h);
  }
  const double e1 = rel_err(Jb, Jfd);
  s.check(e1 < 1e-6, tag(m, k, "ee body jacobian", e1));

  const auto ks = kinematic_state(m, q);
  for (int link = 0; link < n; ++link) {
    const Vec3 local(0.05, -0.02, 0.03);
    const Vec3 p = ks.frames[link] * local;
    const MatX Jp = point_jacobian(m, q, link, p).bottomRows<3>();
    MatX fd(3, n);
    for (int i = 0; i < n; ++i) {
      VecX dq = VecX::Zero(n);
      dq(i) = h;
      fd.col(i) = (kinematic_state(m, q + dq).frames[link] * local -
                   kinematic_state(m, q - dq).frames[link] * local) / (2.0 * h);
    }
    const double e2 = rel_err(Jp, fd);
    s.check(e2 < 1e-6, tag(m, k, "point jacobian link " + std::to_string(link), e2));
  }
}

inline void mass_suite(SuiteResult& s, const RobotModel& m, const VecX& q, int k) {
  const int n = m.dof();
  const MatX M = mass_matrix(m, q);
  const double asym = (M - M.transpose()).cwiseAbs().maxCoeff();
  s.check(asym < 1e-12 * (1.0 + M.cwiseAbs().maxCoeff()), tag(m, k, "mass matrix symmetry", asym));
  Eigen::SelfAdjointEigenSolver<MatX> eig(M);
  const double lmin = eig.eigenvalues().minCoeff();
  s.check(lmin > 0.0, tag(m, k, "mass matrix min eigenvalue", lmin));

  // Columns from Newton-Euler with unit accelerations and gravity off.
  const RobotModel free = m.with_gravity(Vec3::Zero());
  MatX Mr(n, n);
  for (int i = 0; i < n; ++i) Mr.col(i) = inverse_dynamics(free, q, VecX::Zero(n), VecX::Unit(n, i));
  const double e = rel_err(M, Mr);
  s.check(e < 1e-10, tag(m, k, "CRBA vs Newton-Euler", e));
}

/// Closed-form gravity of the planar two-link arm with unit tip masses and
/// unit lengths, gravity g along -y.
inline Eigen::Vector2d planar2r_gravity(const VecX& q, double g) {
  return Eigen::Vector2d(g * (2.0 * std::cos(q(0)) + std::cos(q(0) + q(1))), g * std::cos(q(0) + q(1)));
}

inline void gravity_suite(SuiteResult& s, const RobotModel& m, const VecX& q, int k, bool flip) {
  constexpr double h = 1e-6;
  const int n = m.dof();
  VecX g = gravity_torque(m, q);
  if (flip) g = -g;
  VecX fd(n);
  for (int i = 0; i < n; ++i) {
    VecX dq = VecX::Zero(n);
    dq(i) = h;
    fd(i) = (potential_energy(m, q + dq) - potential_energy(m, q - dq)) / (2.0 * h);
  }
  const double e = rel_err(g, fd);
  s.check(e < 1e-6, tag(m, k, "gravity vs potential gradient", e));

  if (m.name() == "planar2r") {
    const VecX ref = planar2r_gravity(q, -m.gravity().y());
    const double ea = rel_err(g, ref);
    s.check(ea < 1e-12, tag(m, k, "gravity closed form", ea));
  }
}

inline void skew_suite(SuiteResult& s, const RobotModel& m, const VecX& q, const VecX& qd, int k) {
  constexpr double h = 1e-6;
  const int n = m.dof();
  const auto dM = mass_matrix_partials(m, q);
  MatX Mdot = MatX::Zero(n, n);
  for (int i = 0; i < n; ++i) Mdot += dM[i] * qd(i);
  const MatX Mdot_fd = (mass_matrix(m, q + h * qd) - mass_matrix(m, q - h * qd)) / (2.0 * h);
  const double e1 = rel_err(Mdot, Mdot_fd);
  s.check(e1 < 1e-6, tag(m, k, "Mdot vs finite difference", e1));

  const MatX C = coriolis_matrix(m, q, qd);
  const MatX S = Mdot - 2.0 * C;
  const double e2 = (S + S.transpose()).cwiseAbs().maxCoeff() / (1.0 + Mdot.cwiseAbs().maxCoeff());
  s.check(e2 < 1e-10, tag(m, k, "Mdot - 2C skew", e2));

  const RobotModel free = m.with_gravity(Vec3::Zero());
  const VecX Cqd = inverse_dynamics(free, q, qd, VecX::Zero(n));
  const double e3 = rel_err(C * qd, Cqd);
  s.check(e3 < 1e-10, tag(m, k, "C qd vs Newton-Euler", e3));
}

inline void distance_suite(SuiteResult& s, const RobotModel& m, const VecX& q, int k,
                           std::mt19937_64& rng) {
  constexpr double h = 1e-7;
  const int n = m.dof();
  const auto ks = kinematic_state(m, q);
  const auto shapes = world_collision_shapes(m, ks);
  for (std::size_t b = 0; b < shapes.size(); ++b) {
    // A sphere placed off the body so the pair is separated and well conditioned.
    const Primitive& body = shapes[b];
    const Vec3 mid = 0.5 * (body.a + body.b);
    Vec3 dir = random_vector(3, 1.0, rng);
    dir.normalize();
    Obstacle ob{"probe", {Primitive::sphere(0.05, mid + dir * (body.radius + 0.15))}};
    DistanceResult r = min_distance(body, ob);
    r.link = m.collision_bodies()[b].link;
    if (r.degenerate) continue;
    const RowVecX grad = distance_gradient(m, ks, r);
    RowVecX fd(n);
    for (int i = 0; i < n; ++i) {
      VecX dq = VecX::Zero(n);
      dq(i) = h;
      const double dp = min_distance(world_collision_shapes(m, kinematic_state(m, q + dq))[b], ob).distance;
      const double dm = min_distance(world_collision_shapes(m, kinematic_state(m, q - dq))[b], ob).distance;
      fd(i) = (dp - dm) / (2.0 * h);
    }
    const double e = rel_err(grad, fd);
    s.check(e < 1e-5, tag(m, k, "distance gradient body " + std::to_string(b), e));
  }
}

inline void null_suite(SuiteResult& s, const RobotModel& m, const VecX& q, int k) {
  const int n = m.dof();
  const MatX J = ee_body_jacobian(m, q);
  const Vec6 selections[] = {Vec6::Ones(), (Vec6() << 0, 0, 0, 1, 1, 1).finished(),
                             (Vec6() << 1, 1, 0, 1, 1, 1).finished()};
  for (const Vec6& S : selections) {
    int rows = 0;
    for (int i = 0; i < 6; ++i) rows += S(i) != 0.0;
    if (rows > n) continue;  // the task exhausts the joints; nothing to project
    const MatX N = task_null_projector(J, S);
    MatX Js(rows, n);
    for (int i = 0, r = 0; i < 6; ++i)
      if (S(i) != 0.0) Js.row(r++) = J.row(i);
    // Skip near-singular samples: the robust projector damps them on purpose.
    Eigen::JacobiSVD<MatX> svd(Js);
    if (svd.singularValues().minCoeff() < 1e-3) continue;
    const double e1 = (Js * N).cwiseAbs().maxCoeff();
    const double e2 = (N * N - N).cwiseAbs().maxCoeff();
    const double e3 = (N - N.transpose()).cwiseAbs().maxCoeff();
    s.check(e1 < 1e-8, tag(m, k, "J N_t = 0", e1));
    s.check(e2 < 1e-8, tag(m, k, "N_t idempotent", e2));
    s.check(e3 < 1e-10, tag(m, k, "N_t symmetric", e3));
    s.check(std::abs(N.trace() - (n - rows)) < 1e-8, tag(m, k, "N_t rank", N.trace()));
  }
}

/// Equality-constrained least squares against a dense KKT reference, plus a
/// box-constrained projection with a known answer, on both QP back ends.
inline void qp_suite(SuiteResult& s, int k, std::mt19937_64& rng) {
  const int nz = 6 + k % 5, me = 2, rows = nz + 3;
  const MatX A = MatX(random_vector(rows * nz, 1.0, rng).reshaped(rows, nz));
  const VecX b = random_vector(rows, 1.0, rng);
  const MatX C = MatX(random_vector(me * nz, 1.0, rng).reshaped(me, nz));
  const VecX d = random_vector(me, 1.0, rng);

  MatX K = MatX::Zero(nz + me, nz + me);
  K.topLeftCorner(nz, nz) = A.transpose() * A;
  K.topRightCorner(nz, me) = C.transpose();
  K.bottomLeftCorner(me, nz) = C;
  VecX rhs(nz + me);
  rhs << A.transpose() * b, d;
  const VecX ref = K.partialPivLu().solve(rhs).head(nz);

  DenseQp dq;
  dq.H = A.transpose() * A;
  dq.f = -A.transpose() * b;
  dq.A_eq = C;
  dq.b_eq = d;
  dq.A_in = MatX(0, nz);
  dq.b_in = VecX(0);
  dq.lower = VecX::Constant(nz, -1e6);  // far away, inactive
  dq.upper = VecX::Constant(nz, 1e6);
  const QpResult rd = solve_qp(dq);
  const double ed = rd.status == QpStatus::optimal ? rel_err(rd.z, ref) : INFINITY;
  s.check(ed < 1e-8, "dense least squares #" + std::to_string(k) + " err " + std::to_string(ed));

  SparseQp sq;
  sq.H = dq.H.sparseView();
  sq.f = dq.f;
  sq.A_eq = dq.A_eq.sparseView();
  sq.b_eq = d;
  sq.A_in = SparseMat(0, nz);
  sq.b_in = VecX(0);
  sq.lower = dq.lower;
  sq.upper = dq.upper;
  const QpResult rs = solve_qp(sq);
  const double es = rs.status == QpStatus::optimal ? rel_err(rs.z, ref) : INFINITY;
  s.check(es < 1e-8, "sparse least squares #" + std::to_string(k) + " err " + std::to_string(es));

  // min |z - c|^2 on a box: the answer is the clamp.
  const VecX c = random_vector(nz, 2.0, rng);
  DenseQp bq;
  bq.H = MatX::Identity(nz, nz);
  bq.f = -c;
  bq.A_eq = MatX(0, nz);
  bq.b_eq = VecX(0);
  bq.A_in = MatX(0, nz);
  bq.b_in = VecX(0);
  bq.lower = VecX::Constant(nz, -1.0);
  bq.upper = VecX::Constant(nz, 1.0);
  const QpResult rb = solve_qp(bq);
  const VecX clamp = c.cwiseMax(-1.0).cwiseMin(1.0);
  const double eb = rb.status == QpStatus::optimal ? rel_err(rb.z, clamp) : INFINITY;
  s.check(eb < 1e-10, "box projection #" + std::to_string(k) + " err " + std::to_string(eb));
}

/// A multiple-shooting plan must satisfy its own dynamics and match the
/// single-shooting plan of the same problem.
inline void defect_suite(SuiteResult& s, const RobotModel& m, const VecX& q, int k,
                         std::mt19937_64& rng) {
  const int n = m.dof();
  MpcConfig cfg = MpcConfig::defaults(n);
  cfg.N = 10;
  PlannerInput in;
  in.x0.resize(2 * n);
  in.x0 << q, VecX::Zero(n);
  const Pose T = ee_pose(m, q);
  in.T_ref = Pose(T.rotation, T.translation + Vec3(random_vector(3, 0.05, rng)));
  const MpcProblem p = transcribe(in, cfg, m);
  const MpcSolution ms = solve(p);
  if (ms.status != QpStatus::optimal) {
    s.check(false, tag(m, k, std::string("plan status ") + to_string(ms.status), 0.0));
    return;
  }
  s.check(ms.max_defect < cfg.defect_tol, tag(m, k, "max defect", ms.max_defect));
  const auto X = rollout(ms.X.front(), ms.U, cfg.dt);
  double e = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) e = std::max(e, (X[i] - ms.X[i]).cwiseAbs().maxCoeff());
  s.check(e < 1e-8, tag(m, k, "rollout vs plan", e));
  double g = 0.0;
  for (const auto& v : shooting_defects(X, ms.U, cfg.dt)) g = std::max(g, v.cwiseAbs().maxCoeff());
  s.check(g < 1e-12, tag(m, k, "rollout defects", g));

  MpcProblem ps = p;
  ps.shooting = Shooting::single;
  const MpcSolution ss = solve(ps);
  double du = INFINITY;
  if (ss.status == QpStatus::optimal) {
    du = 0.0;
    for (std::size_t i = 0; i < ss.U.size(); ++i)
      du = std::max(du, (ss.U[i] - ms.U[i]).cwiseAbs().maxCoeff() / (1.0 + ms.U[i].cwiseAbs().maxCoeff()));
  }
  s.check(du < 1e-5, tag(m, k, "single vs multiple shooting inputs", du));
}

}  // namespace detail

inline ValidationReport validate(const ValidateOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  std::vector<RobotModel> models;
  for (const auto& name : opt.models) models.push_back(bundled_robot(name));

  ValidationReport rep;
  auto suite = [](const char* name) {
    SuiteResult s;
    s.name = name;
    return s;
  };
  SuiteResult jac = suite("jacobian_fd"), mass = suite("mass_spd"), grav = suite("gravity"),
              skew = suite("coriolis_skew"), dist = suite("distance_gradient"),
              null = suite("null_projector"), qp = suite("qp_least_squares"),
              def = suite("shooting_defects");
  for (const auto& m : models) {
    for (int k = 0; k < opt.samples; ++k) {
      const VecX q = detail::random_configuration(m, rng);
      const VecX qd = detail::random_vector(m.dof(), 1.0, rng);
      detail::jacobian_suite(jac, m, q, k);
      detail::mass_suite(mass, m, q, k);
      detail::gravity_suite(grav, m, q, k, opt.flip_gravity_sign);
      detail::skew_suite(skew, m, q, qd, k);
      detail::distance_suite(dist, m, q, k, rng);
      detail::null_suite(null, m, q, k);
      if (k < 3) detail::defect_suite(def, m, q, k, rng);
    }
  }
  for (int k = 0; k < opt.samples; ++k) detail::qp_suite(qp, k, rng);
  rep.suites = {jac, mass, grav, skew, dist, null, qp, def};
  return rep;
}

}  // namespace armsafe

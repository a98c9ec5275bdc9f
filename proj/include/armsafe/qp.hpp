#pragma once

/// Convex quadratic programming with a dual active-set method.
///
///   minimize    0.5 z^T H z + f^T z
///   subject to  A_eq z  = b_eq
///               A_in z >= b_in
///               lower <= z <= upper
///
/// The solver follows Goldfarb and Idnani: start from the equality-constrained
/// minimizer and repeatedly add the most violated inequality, dropping active
/// constraints whose multipliers would turn negative. H only needs to be
/// positive definite on the null space of A_eq. Each working-set system is
/// solved through one factorization of the base KKT matrix [H A_eq^T; A_eq 0]
/// plus a small dense Schur complement for the active inequalities, so the
/// base factorization can exploit sparsity (multiple shooting) or be a dense
/// Cholesky (condensed problems).

#include "armsafe/se3.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

namespace armsafe {

using SparseMat = Eigen::SparseMatrix<double>;
using SparseRowMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

template <typename Matrix>
struct QpProblem {
  Matrix H;
  VecX f;
  Matrix A_eq;
  VecX b_eq;
  Matrix A_in;
  VecX b_in;
  VecX lower;  // -inf for no bound
  VecX upper;  // +inf for no bound

  int variables() const { return static_cast<int>(f.size()); }
  /// Inequalities are numbered: general rows first, then for each variable i
  /// its lower bound (rows + 2i) and upper bound (rows + 2i + 1).
  int inequality_count() const { return static_cast<int>(A_in.rows()) + 2 * variables(); }
};

using DenseQp = QpProblem<MatX>;
using SparseQp = QpProblem<SparseMat>;

enum class QpStatus { optimal, infeasible, max_iterations, deadline, numerical_failure };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::infeasible: return "infeasible";
    case QpStatus::max_iterations: return "max_iterations";
    case QpStatus::deadline: return "deadline";
    case QpStatus::numerical_failure: return "numerical_failure";
  }
  return "unknown";
}

struct QpOptions {
  int max_iterations = 2000;
  double feasibility_tol = 1e-9;
  double dependency_tol = 1e-11;
  std::optional<std::chrono::steady_clock::time_point> deadline;
};

struct QpResult {
  QpStatus status = QpStatus::numerical_failure;
  VecX z;
  VecX eq_multipliers;
  std::vector<int> active;     // inequality ids, see QpProblem::inequality_count
  VecX active_multipliers;     // >= 0 at optimality
  int iterations = 0;
  double objective = 0.0;
  double kkt_residual = std::numeric_limits<double>::infinity();
  double max_violation = std::numeric_limits<double>::infinity();
};

namespace detail {

template <typename Matrix>
class KktFactor;

/// Dense base KKT: Cholesky of H without equalities, LU of the full KKT otherwise.
template <>
class KktFactor<MatX> {
 public:
  bool factor(const MatX& H, const MatX& A_eq) {
    nz_ = H.rows();
    me_ = A_eq.rows();
    if (me_ == 0) {
      llt_.compute(H);
      return llt_.info() == Eigen::Success;
    }
    MatX K = MatX::Zero(nz_ + me_, nz_ + me_);
    K.topLeftCorner(nz_, nz_) = H;
    K.topRightCorner(nz_, me_) = A_eq.transpose();
    K.bottomLeftCorner(me_, nz_) = A_eq;
    lu_.compute(K);
    return std::isfinite(lu_.rcond()) && lu_.rcond() > 1e-16;
  }

  VecX solve(const VecX& rhs) const { return me_ == 0 ? VecX(llt_.solve(rhs)) : VecX(lu_.solve(rhs)); }
  MatX solve(const MatX& rhs) const { return me_ == 0 ? MatX(llt_.solve(rhs)) : MatX(lu_.solve(rhs)); }

 private:
  Eigen::Index nz_ = 0, me_ = 0;
  Eigen::LLT<MatX> llt_;
  Eigen::PartialPivLU<MatX> lu_;
};

/// Sparse base KKT. The matrix is regularized to the quasi-definite
/// [H + eps I, A^T; A, -eps I], which admits an LDL^T factorization under any
/// symmetric ordering, and solves are refined against the exact matrix.
template <>
class KktFactor<SparseMat> {
 public:
  static constexpr double eps = 1e-9;

  bool factor(const SparseMat& H, const SparseMat& A_eq) {
    const Eigen::Index nz = H.rows(), me = A_eq.rows();
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(H.nonZeros() + 2 * A_eq.nonZeros() + nz + me);
    for (int k = 0; k < H.outerSize(); ++k)
      for (SparseMat::InnerIterator it(H, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
    for (int k = 0; k < A_eq.outerSize(); ++k)
      for (SparseMat::InnerIterator it(A_eq, k); it; ++it) {
        t.emplace_back(nz + it.row(), it.col(), it.value());
        t.emplace_back(it.col(), nz + it.row(), it.value());
      }
    K_.resize(nz + me, nz + me);
    K_.setFromTriplets(t.begin(), t.end());
    for (Eigen::Index i = 0; i < nz + me; ++i) t.emplace_back(i, i, i < nz ? eps : -eps);
    SparseMat R(nz + me, nz + me);
    R.setFromTriplets(t.begin(), t.end());
    R.makeCompressed();
    // The ordering only depends on the sparsity pattern, which repeats between
    // planning steps, so the last symbolic analysis is kept per thread. A
    // cached solver still owned by a live factor is never refactored.
    thread_local std::shared_ptr<Symbolic> cached;
    if (!cached || cached.use_count() > 1) cached = std::make_shared<Symbolic>();
    if (!cached->matches(R)) {
      cached->ldlt.analyzePattern(R);
      cached->outer.assign(R.outerIndexPtr(), R.outerIndexPtr() + R.outerSize() + 1);
      cached->inner.assign(R.innerIndexPtr(), R.innerIndexPtr() + R.nonZeros());
    }
    sym_ = cached;
    sym_->ldlt.factorize(R);
    if (sym_->ldlt.info() != Eigen::Success) return false;
    // Reject factorizations that refinement cannot rescue.
    const VecX probe = VecX::Ones(nz + me);
    const VecX x = solve(VecX(K_ * probe));
    return x.allFinite() && (x - probe).cwiseAbs().maxCoeff() < 1e-6;
  }

  VecX solve(const VecX& rhs) const {
    VecX x = sym_->ldlt.solve(rhs);
    x += sym_->ldlt.solve(rhs - K_ * x);
    return x;
  }

  MatX solve(const MatX& rhs) const {
    MatX x = sym_->ldlt.solve(rhs);
    x += sym_->ldlt.solve(rhs - K_ * x);
    return x;
  }

 private:
  using Ldlt = Eigen::SimplicialLDLT<SparseMat, Eigen::Lower, Eigen::AMDOrdering<int>>;

  struct Symbolic {
    std::vector<int> outer, inner;
    Ldlt ldlt;

    bool matches(const SparseMat& R) const {
      return static_cast<Eigen::Index>(outer.size()) == R.outerSize() + 1 &&
             std::equal(outer.begin(), outer.end(), R.outerIndexPtr()) &&
             static_cast<Eigen::Index>(inner.size()) == R.nonZeros() &&
             std::equal(inner.begin(), inner.end(), R.innerIndexPtr());
    }
  };

  SparseMat K_;
  std::shared_ptr<Symbolic> sym_;
};

/// Row access to the general inequality matrix.
template <typename Matrix>
class Rows;

template <>
class Rows<MatX> {
 public:
  explicit Rows(const MatX& A) : A_(A) {}
  double dot(Eigen::Index j, const Eigen::Ref<const VecX>& v) const { return A_.row(j).dot(v); }
  void scatter(Eigen::Index j, Eigen::Ref<VecX> out) const { out = A_.row(j).transpose(); }
  double norm(Eigen::Index j) const { return A_.row(j).norm(); }
  VecX times(const VecX& z) const { return A_ * z; }

 private:
  const MatX& A_;
};

template <>
class Rows<SparseMat> {
 public:
  explicit Rows(const SparseMat& A) : A_(A) {}
  double dot(Eigen::Index j, const Eigen::Ref<const VecX>& v) const {
    double s = 0.0;
    for (SparseRowMat::InnerIterator it(A_, j); it; ++it) s += it.value() * v(it.col());
    return s;
  }
  void scatter(Eigen::Index j, Eigen::Ref<VecX> out) const {
    out.setZero();
    for (SparseRowMat::InnerIterator it(A_, j); it; ++it) out(it.col()) = it.value();
  }
  double norm(Eigen::Index j) const { return A_.row(j).norm(); }
  VecX times(const VecX& z) const { return A_ * z; }

 private:
  SparseRowMat A_;
};

template <typename Matrix>
class DualActiveSet {
 public:
  DualActiveSet(const QpProblem<Matrix>& qp, const QpOptions& opt)
      : qp_(qp), opt_(opt), rows_(qp.A_in), nz_(qp.variables()), me_(qp.b_eq.size()),
        mi_(qp.b_in.size()) {
    row_norm_.resize(mi_);
    for (Eigen::Index j = 0; j < mi_; ++j) row_norm_(j) = std::max(rows_.norm(j), 1e-300);
  }

  QpResult run(const std::vector<int>& warm_active) {
    QpResult res;
    if (!kkt_.factor(qp_.H, qp_.A_eq)) {
      res.status = QpStatus::numerical_failure;
      return res;
    }
    VecX rhs(nz_ + me_);
    rhs << -qp_.f, qp_.b_eq;
    base_ = kkt_.solve(rhs);
    if (!base_.allFinite()) {
      res.status = QpStatus::numerical_failure;
      return res;
    }

    warm_start(warm_active);
    QpStatus status = main_loop();
    if (status == QpStatus::optimal) {
      // Re-solve the final working set directly and make sure nothing drifted.
      for (int round = 0; round < 5; ++round) {
        polish();
        if (most_violated() < 0) break;
        status = main_loop();
        if (status != QpStatus::optimal) break;
      }
    }
    return finish(status);
  }

 private:
  // --- constraint access -------------------------------------------------

  bool exists(int j) const {
    if (j < 0) return false;
    if (j < mi_) return true;
    const int i = (j - static_cast<int>(mi_)) / 2;
    if (i >= nz_) return false;
    const bool is_lower = ((j - mi_) % 2) == 0;
    return is_lower ? std::isfinite(qp_.lower(i)) : std::isfinite(qp_.upper(i));
  }

  double dot(int j, const Eigen::Ref<const VecX>& v) const {
    if (j < mi_) return rows_.dot(j, v);
    const int i = (j - static_cast<int>(mi_)) / 2;
    return ((j - mi_) % 2) == 0 ? v(i) : -v(i);
  }

  double bound(int j) const {
    if (j < mi_) return qp_.b_in(j);
    const int i = (j - static_cast<int>(mi_)) / 2;
    return ((j - mi_) % 2) == 0 ? qp_.lower(i) : -qp_.upper(i);
  }

  double norm(int j) const { return j < mi_ ? row_norm_(j) : 1.0; }

  /// Writes [a_j; 0] into a zeroed KKT-sized vector.
  void scatter(int j, Eigen::Ref<VecX> rhs) const {
    if (j < mi_) {
      rows_.scatter(j, rhs.head(nz_));
    } else {
      const int i = (j - static_cast<int>(mi_)) / 2;
      rhs(i) = ((j - mi_) % 2) == 0 ? 1.0 : -1.0;
    }
  }

  VecX column(int j) const {
    VecX rhs = VecX::Zero(nz_ + me_);
    scatter(j, rhs);
    return kkt_.solve(rhs);
  }

  /// Index of the most violated inequality (scaled by row norm), or -1.
  int most_violated() const {
    const VecX z = x_.head(nz_);
    double worst = -opt_.feasibility_tol;
    int best = -1;
    if (mi_ > 0) {
      const VecX s = rows_.times(z) - qp_.b_in;
      for (Eigen::Index j = 0; j < mi_; ++j) {
        const double v = s(j) / row_norm_(j);
        if (v < worst && !in_working_set(static_cast<int>(j))) {
          worst = v;
          best = static_cast<int>(j);
        }
      }
    }
    for (Eigen::Index i = 0; i < nz_; ++i) {
      const int jl = static_cast<int>(mi_ + 2 * i), ju = jl + 1;
      const double vl = z(i) - qp_.lower(i), vu = qp_.upper(i) - z(i);
      if (vl < worst && !in_working_set(jl)) {
        worst = vl;
        best = jl;
      }
      if (vu < worst && !in_working_set(ju)) {
        worst = vu;
        best = ju;
      }
    }
    return best;
  }

  bool in_working_set(int j) const {
    return std::find(W_.begin(), W_.end(), j) != W_.end();
  }

  // --- working-set algebra -----------------------------------------------

  /// B_W g for a base-KKT solution g.
  VecX project(const VecX& g) const {
    VecX v(W_.size());
    for (std::size_t a = 0; a < W_.size(); ++a) v(a) = dot(W_[a], g.head(nz_));
    return v;
  }

  VecX solve_schur(const VecX& r) const {
    VecX y = r;
    const Eigen::Index m = static_cast<Eigen::Index>(W_.size());
    if (m == 0) return y;
    const auto L = chol_.topLeftCorner(m, m).template triangularView<Eigen::Lower>();
    L.solveInPlace(y);
    L.transpose().solveInPlace(y);
    return y;
  }

  /// Appends constraint j with base solution g. Returns false if j is dependent.
  bool append(int j, const VecX& g, const VecX& p) {
    const Eigen::Index m = static_cast<Eigen::Index>(W_.size());
    const double pnn = dot(j, g.head(nz_));
    VecX l = p;
    if (m > 0) chol_.topLeftCorner(m, m).template triangularView<Eigen::Lower>().solveInPlace(l);
    const double d2 = pnn - l.squaredNorm();
    if (!(d2 > opt_.dependency_tol * std::max(pnn, 1e-300)) || !(pnn > 0.0)) return false;

    grow(m + 1);
    chol_.row(m).head(m) = l.transpose();
    chol_(m, m) = std::sqrt(d2);
    P_.row(m).head(m) = p.transpose();
    P_.col(m).head(m) = p;
    P_(m, m) = pnn;
    G_.conservativeResize(nz_ + me_, m + 1);
    G_.col(m) = g;
    W_.push_back(j);
    return true;
  }

  void grow(Eigen::Index size) {
    if (chol_.rows() >= size) return;
    const Eigen::Index cap = std::max<Eigen::Index>(size, 2 * chol_.rows() + 8);
    MatX c = MatX::Zero(cap, cap), p = MatX::Zero(cap, cap);
    c.topLeftCorner(chol_.rows(), chol_.cols()) = chol_;
    p.topLeftCorner(P_.rows(), P_.cols()) = P_;
    chol_.swap(c);
    P_.swap(p);
  }

  void remove(std::size_t a) {
    const Eigen::Index m = static_cast<Eigen::Index>(W_.size());
    const Eigen::Index idx = static_cast<Eigen::Index>(a);
    // Delete row and column idx of P, column idx of G, entry idx of lambda.
    for (Eigen::Index r = idx; r + 1 < m; ++r) P_.row(r).head(m) = P_.row(r + 1).head(m);
    for (Eigen::Index c = idx; c + 1 < m; ++c) P_.col(c).head(m - 1) = P_.col(c + 1).head(m - 1);
    for (Eigen::Index c = idx; c + 1 < m; ++c) G_.col(c) = G_.col(c + 1);
    G_.conservativeResize(nz_ + me_, m - 1);
    for (Eigen::Index r = idx; r + 1 < m; ++r) lambda_(r) = lambda_(r + 1);
    lambda_.conservativeResize(m - 1);
    W_.erase(W_.begin() + static_cast<std::ptrdiff_t>(a));
    refactor();
  }

  void refactor() {
    const Eigen::Index m = static_cast<Eigen::Index>(W_.size());
    if (m == 0) return;
    Eigen::LLT<MatX> llt(P_.topLeftCorner(m, m));
    chol_.topLeftCorner(m, m) = llt.matrixL();
  }

  /// Solves the equality-constrained problem on the working set.
  void solve_working_set() {
    VecX d(W_.size());
    for (std::size_t a = 0; a < W_.size(); ++a) d(a) = bound(W_[a]) - dot(W_[a], base_.head(nz_));
    lambda_ = solve_schur(d);
    x_ = base_;
    if (!W_.empty()) x_ += G_ * lambda_;
  }

  void warm_start(std::vector<int> ids) {
    x_ = base_;
    lambda_.resize(0);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    ids.erase(std::remove_if(ids.begin(), ids.end(), [&](int j) { return !exists(j); }), ids.end());
    // One multi-column solve for the whole guess.
    MatX rhs = MatX::Zero(nz_ + me_, static_cast<Eigen::Index>(ids.size()));
    for (std::size_t c = 0; c < ids.size(); ++c) scatter(ids[c], rhs.col(static_cast<Eigen::Index>(c)));
    const MatX cols = ids.empty() ? MatX() : kkt_.solve(rhs);
    for (std::size_t c = 0; c < ids.size(); ++c) {
      const VecX g = cols.col(static_cast<Eigen::Index>(c));
      append(ids[c], g, project(g));
    }
    solve_working_set();
    // Drop constraints with negative multipliers until dual feasible.
    while (!W_.empty()) {
      Eigen::Index worst = 0;
      if (lambda_.minCoeff(&worst) >= 0.0) break;
      remove(static_cast<std::size_t>(worst));
      solve_working_set();
    }
  }

  bool out_of_time() const {
    return opt_.deadline && std::chrono::steady_clock::now() > *opt_.deadline;
  }

  QpStatus main_loop() {
    while (true) {
      const int p = most_violated();
      if (p < 0) return QpStatus::optimal;
      const VecX g = column(p);
      const double curvature0 = dot(p, g.head(nz_));
      double lambda_p = 0.0;

      while (true) {
        if (iterations_ >= opt_.max_iterations) return QpStatus::max_iterations;
        if (out_of_time()) return QpStatus::deadline;
        ++iterations_;

        const VecX v = project(g);
        const VecX dlambda = -solve_schur(v);
        VecX dx = g;
        if (!W_.empty()) dx += G_ * dlambda;
        const double curvature = dot(p, dx.head(nz_));
        const double slack = dot(p, x_.head(nz_)) - bound(p);

        const double inf = std::numeric_limits<double>::infinity();
        const bool full_step_defined =
            curvature > opt_.dependency_tol * std::max(curvature0, 1e-300) && curvature0 > 0.0;
        const double t1 = full_step_defined ? -slack / curvature : inf;
        double t2 = inf;
        std::size_t drop = 0;
        for (std::size_t a = 0; a < W_.size(); ++a) {
          if (dlambda(a) < 0.0) {
            const double t = -lambda_(a) / dlambda(a);
            if (t < t2) {
              t2 = t;
              drop = a;
            }
          }
        }
        if (t1 == inf && t2 == inf) return QpStatus::infeasible;

        const double t = std::max(0.0, std::min(t1, t2));
        if (full_step_defined) x_ += t * dx;
        if (!W_.empty()) lambda_ += t * dlambda;
        lambda_p += t;

        if (t2 < t1) {
          lambda_(drop) = 0.0;
          remove(drop);
          continue;
        }
        if (!append(p, g, v)) return QpStatus::numerical_failure;
        lambda_.conservativeResize(static_cast<Eigen::Index>(W_.size()));
        lambda_(lambda_.size() - 1) = lambda_p;
        break;
      }
    }
  }

  void polish() {
    for (int round = 0; round < static_cast<int>(W_.size()) + 1; ++round) {
      solve_working_set();
      if (W_.empty()) return;
      Eigen::Index worst = 0;
      if (lambda_.minCoeff(&worst) >= -opt_.feasibility_tol) return;
      remove(static_cast<std::size_t>(worst));
    }
  }

  QpResult finish(QpStatus status) {
    QpResult res;
    res.status = status;
    res.iterations = iterations_;
    res.z = x_.head(nz_);
    res.eq_multipliers = -x_.tail(me_);
    res.active = W_;
    res.active_multipliers = lambda_;
    res.objective = 0.5 * res.z.dot(qp_.H * res.z) + qp_.f.dot(res.z);

    VecX grad = qp_.H * res.z + qp_.f;
    if (me_ > 0) grad -= qp_.A_eq.transpose() * res.eq_multipliers;
    for (std::size_t a = 0; a < W_.size(); ++a) {
      const int j = W_[a];
      if (j < mi_) {
        VecX c(nz_);
        rows_.scatter(j, c);
        grad -= lambda_(a) * c;
      } else {
        const int i = (j - static_cast<int>(mi_)) / 2;
        grad(i) -= lambda_(a) * (((j - mi_) % 2) == 0 ? 1.0 : -1.0);
      }
    }
    double viol = 0.0;
    if (me_ > 0) viol = (qp_.A_eq * res.z - qp_.b_eq).cwiseAbs().maxCoeff();
    if (mi_ > 0) {
      const VecX s = (rows_.times(res.z) - qp_.b_in).cwiseQuotient(row_norm_);
      viol = std::max(viol, -std::min(0.0, s.minCoeff()));
    }
    for (Eigen::Index i = 0; i < nz_; ++i) {
      viol = std::max(viol, qp_.lower(i) - res.z(i));
      viol = std::max(viol, res.z(i) - qp_.upper(i));
    }
    res.max_violation = viol;
    const double dual = lambda_.size() > 0 ? std::max(0.0, -lambda_.minCoeff()) : 0.0;
    const double scale = 1.0 + qp_.f.cwiseAbs().maxCoeff();
    res.kkt_residual = std::max({grad.cwiseAbs().maxCoeff() / scale, viol, dual});
    return res;
  }

  const QpProblem<Matrix>& qp_;
  QpOptions opt_;
  Rows<Matrix> rows_;
  Eigen::Index nz_, me_, mi_;
  VecX row_norm_;
  KktFactor<Matrix> kkt_;
  VecX base_;               // base KKT solution without inequalities
  VecX x_;                  // current (z, -nu)
  std::vector<int> W_;      // working set
  VecX lambda_;             // multipliers of W_
  MatX G_;                  // K0^-1 [c_j; 0] for j in W_
  MatX P_;                  // B_W K0^-1 B_W^T (capacity-padded)
  MatX chol_;               // Cholesky factor of P_ (capacity-padded)
  int iterations_ = 0;
};

}  // namespace detail

/// Solves a convex QP; `warm_active` seeds the working set (ids that no longer
/// exist or are redundant are skipped). Deterministic for identical inputs.
template <typename Matrix>
QpResult solve_qp(const QpProblem<Matrix>& qp, const QpOptions& options = {},
                  const std::vector<int>& warm_active = {}) {
  const Eigen::Index n = qp.f.size();
  if (qp.H.rows() != n || qp.H.cols() != n || qp.lower.size() != n || qp.upper.size() != n ||
      qp.A_eq.rows() != qp.b_eq.size() || qp.A_in.rows() != qp.b_in.size() ||
      (qp.A_eq.rows() > 0 && qp.A_eq.cols() != n) || (qp.A_in.rows() > 0 && qp.A_in.cols() != n))
    throw std::invalid_argument("solve_qp: inconsistent problem dimensions");
  if ((qp.lower.array() > qp.upper.array()).any()) {
    QpResult res;
    res.status = QpStatus::infeasible;
    res.z = VecX::Zero(n);
    return res;
  }
  detail::DualActiveSet<Matrix> solver(qp, options);
  return solver.run(warm_active);
}

}  // namespace armsafe

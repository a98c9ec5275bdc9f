#pragma once

/// Distance queries between robot collision bodies and obstacles.
///
/// Sign convention: `distance` is the signed clearance, negative when the
/// shapes overlap. `normal` is the unit direction from the obstacle towards the
/// robot along which the clearance grows; when separated it equals
/// (p_a - p_b) / |p_a - p_b|. Witness points are p_a = c_a - r_a n on the
/// robot body and p_b = c_b + r_b n on the obstacle, where c_a, c_b are the
/// closest points of the two core segments. Under overlap they are the
/// deepest points along n.

#include "armsafe/model.hpp"
#include "armsafe/primitive.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

namespace armsafe {

struct DistanceResult {
  double distance = std::numeric_limits<double>::infinity();
  Vec3 p_a = Vec3::Zero();
  Vec3 p_b = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  int link = -1;       // robot link carrying p_a
  int body = -1;       // collision body index in the model
  int obstacle = -1;   // obstacle index in the query list
  bool degenerate = false;  // core segments intersect; normal is a fallback
  bool global_min = false;
};

/// An obstacle is a union of world-frame primitives (a decomposed box has several).
struct Obstacle {
  std::string name;
  std::vector<Primitive> parts;
};

namespace detail {

/// Closest points between segments [p1, q1] and [p2, q2] (either may be a point).
inline void closest_points_segments(const Vec3& p1, const Vec3& q1, const Vec3& p2,
                                    const Vec3& q2, Vec3& c1, Vec3& c2) {
  constexpr double eps = 1e-18;
  const Vec3 d1 = q1 - p1, d2 = q2 - p2, r = p1 - p2;
  const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  double s = 0.0, t = 0.0;
  if (a <= eps && e <= eps) {
    c1 = p1;
    c2 = p2;
    return;
  }
  if (a <= eps) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= eps) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      s = denom > eps * a * e ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  c1 = p1 + s * d1;
  c2 = p2 + t * d2;
}

/// Unit vector perpendicular to the segment directions when possible, else +z.
inline Vec3 fallback_normal(const Primitive& a, const Primitive& b) {
  const Vec3 da = a.b - a.a, db = b.b - b.a;
  Vec3 n = da.cross(db);
  if (n.norm() > 1e-9) return n.normalized();
  const Vec3& d = da.norm() > 1e-12 ? da : db;
  if (d.norm() > 1e-12) {
    n = d.cross(Vec3::UnitZ());
    if (n.norm() < 1e-9) n = d.cross(Vec3::UnitX());
    return n.normalized();
  }
  return Vec3::UnitZ();
}

}  // namespace detail

/// Signed distance between two world-posed primitives; `a` plays the robot role.
inline DistanceResult min_distance(const Primitive& a, const Primitive& b) {
  Vec3 ca, cb;
  detail::closest_points_segments(a.a, a.b, b.a, b.b, ca, cb);
  DistanceResult r;
  const Vec3 diff = ca - cb;
  const double core = diff.norm();
  if (core > 1e-12) {
    r.normal = diff / core;
  } else {
    r.normal = detail::fallback_normal(a, b);
    r.degenerate = true;
  }
  r.distance = core - a.radius - b.radius;
  r.p_a = ca - a.radius * r.normal;
  r.p_b = cb + b.radius * r.normal;
  return r;
}

/// Minimum over the parts of an obstacle; ties keep the lowest part index.
inline DistanceResult min_distance(const Primitive& a, const Obstacle& obstacle) {
  DistanceResult best;
  for (const auto& part : obstacle.parts) {
    const DistanceResult r = min_distance(a, part);
    if (r.distance < best.distance) best = r;
  }
  return best;
}

/// d(distance)/dq = n^T J_a with J_a the linear point Jacobian of p_a on its
/// link. Obstacles are frozen at query time, so their Jacobian term is zero.
inline RowVecX distance_gradient(const RobotModel& model, const KinematicState& ks,
                                 const DistanceResult& r) {
  if (r.degenerate) throw GeometryError("distance gradient undefined: degenerate normal");
  if (r.link < 0 || r.link >= model.dof()) throw GeometryError("distance result has no link");
  const MatX J = detail::point_jacobian(ks, model.dof(), r.link, r.p_a);
  return r.normal.transpose() * J.bottomRows<3>();
}

inline RowVecX distance_gradient(const RobotModel& model, const VecX& q, const DistanceResult& r) {
  return distance_gradient(model, kinematic_state(model, q), r);
}

/// First-order prediction d(q) + grad (q_k - q).
inline double linearized_distance(const DistanceResult& r, const RowVecX& gradient,
                                  const VecX& q, const VecX& q_k) {
  if (q.size() != q_k.size() || gradient.size() != q.size())
    throw GeometryError("linearized_distance: dimension mismatch");
  return r.distance + gradient.dot(q_k - q);
}

/// World-frame collision primitive of every body at one configuration.
inline std::vector<Primitive> world_collision_shapes(const RobotModel& model,
                                                     const KinematicState& ks) {
  std::vector<Primitive> shapes;
  shapes.reserve(model.collision_bodies().size());
  for (const auto& body : model.collision_bodies())
    shapes.push_back(body.shape.transformed(ks.frames[body.link]));
  return shapes;
}

/// Every (collision body, obstacle) pair, ordered body-major.
inline std::vector<DistanceResult> all_pairs(const RobotModel& model, const KinematicState& ks,
                                             const std::vector<Obstacle>& obstacles) {
  std::vector<DistanceResult> out;
  if (obstacles.empty()) return out;
  const auto shapes = world_collision_shapes(model, ks);
  out.reserve(shapes.size() * obstacles.size());
  for (std::size_t i = 0; i < shapes.size(); ++i)
    for (std::size_t j = 0; j < obstacles.size(); ++j) {
      DistanceResult r = min_distance(shapes[i], obstacles[j]);
      r.link = model.collision_bodies()[i].link;
      r.body = static_cast<int>(i);
      r.obstacle = static_cast<int>(j);
      out.push_back(r);
    }
  return out;
}

namespace detail {

inline bool closer(const DistanceResult& a, const DistanceResult& b) {
  if (a.distance != b.distance) return a.distance < b.distance;
  if (a.link != b.link) return a.link < b.link;
  if (a.obstacle != b.obstacle) return a.obstacle < b.obstacle;
  return a.body < b.body;
}

}  // namespace detail

/// One result per collision body (closest obstacle), in body order. The overall
/// closest entry has `global_min` set; ties go to the lowest (link, obstacle).
inline std::vector<DistanceResult> closest_pair_per_link(const RobotModel& model,
                                                         const KinematicState& ks,
                                                         const std::vector<Obstacle>& obstacles) {
  std::vector<DistanceResult> out;
  if (obstacles.empty()) return out;
  const auto pairs = all_pairs(model, ks, obstacles);
  const std::size_t m = obstacles.size();
  for (std::size_t i = 0; i < pairs.size(); i += m) {
    DistanceResult best = pairs[i];
    for (std::size_t j = 1; j < m; ++j)
      if (detail::closer(pairs[i + j], best)) best = pairs[i + j];
    out.push_back(best);
  }
  auto it = std::min_element(out.begin(), out.end(), detail::closer);
  if (it != out.end()) it->global_min = true;
  return out;
}

inline std::vector<DistanceResult> closest_pair_per_link(const RobotModel& model, const VecX& q,
                                                         const std::vector<Obstacle>& obstacles) {
  return closest_pair_per_link(model, kinematic_state(model, q), obstacles);
}

}  // namespace armsafe

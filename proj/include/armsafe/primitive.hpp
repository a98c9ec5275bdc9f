#pragma once

#include "armsafe/se3.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace armsafe {

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sphere or capsule, both stored as a swept sphere: the set of points within
/// `radius` of the segment [a, b]. A sphere has a == b.
struct Primitive {
  enum class Kind { sphere, capsule };

  Kind kind = Kind::sphere;
  double radius = 0.0;
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();

  static Primitive sphere(double radius, const Vec3& center = Vec3::Zero()) {
    Primitive p{Kind::sphere, radius, center, center};
    p.validate();
    return p;
  }

  static Primitive capsule(double radius, const Vec3& a, const Vec3& b) {
    Primitive p{Kind::capsule, radius, a, b};
    p.validate();
    return p;
  }

  void validate() const {
    if (!(radius > 0.0) || !std::isfinite(radius))
      throw GeometryError("primitive radius must be positive");
    if (!a.allFinite() || !b.allFinite()) throw GeometryError("primitive points must be finite");
    if (kind == Kind::capsule && (a - b).norm() <= 1e-12)
      throw GeometryError("capsule endpoints must be distinct");
  }

  Primitive transformed(const Pose& T) const {
    Primitive p = *this;
    p.a = T * a;
    p.b = T * b;
    return p;
  }
};

/// Covers a box with parallel capsules running the full length of its
/// longest axis, with core segments spaced at most the thinnest half extent h
/// apart across the middle axis. The radius sqrt(h^2 + (s/2)^2), s being the
/// spacing, makes the union contain the whole box; it overhangs the faces by
/// at most that radius, so clearances to the set are conservative.
inline std::vector<Primitive> box_to_capsules(const Vec3& half_extents) {
  if ((half_extents.array() <= 0.0).any())
    throw GeometryError("box half extents must be positive");

  int axes[3] = {0, 1, 2};
  std::sort(axes, axes + 3, [&](int i, int j) {
    return half_extents(i) < half_extents(j) || (half_extents(i) == half_extents(j) && i < j);
  });
  const int thin = axes[0], mid = axes[1], longest = axes[2];
  const double h = half_extents(thin);
  const double run = half_extents(longest);
  const double span = half_extents(mid);
  const int count = static_cast<int>(std::ceil(2.0 * span / h)) + 1;
  const double spacing = 2.0 * span / (count - 1);
  const double r = std::sqrt(h * h + 0.25 * spacing * spacing);

  std::vector<Primitive> parts;
  parts.reserve(count);
  for (int i = 0; i < count; ++i) {
    Vec3 a = Vec3::Zero(), b = Vec3::Zero();
    a(mid) = b(mid) = -span + spacing * i;
    a(longest) = -run;
    b(longest) = run;
    parts.push_back(Primitive::capsule(r, a, b));
  }
  return parts;
}

}  // namespace armsafe

#pragma once

#include <algorithm>
#include <cmath>

namespace tailsafe {

// Planar pose. theta is kept in (-pi, pi].
struct PoseSE2 {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
};

inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  if (a > M_PI) a -= 2.0 * M_PI;
  return a;
}

inline bool pose_finite(const PoseSE2& p) {
  return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.theta);
}

inline double pose_dist(const PoseSE2& a, const PoseSE2& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

inline double angle_dist(double a, double b) { return std::abs(wrap_angle(a - b)); }

// Compose: pose of `child` expressed in `parent`'s frame, mapped to world.
inline PoseSE2 compose(const PoseSE2& parent, const PoseSE2& child) {
  const double c = std::cos(parent.theta), s = std::sin(parent.theta);
  return PoseSE2{parent.x + c * child.x - s * child.y,
                 parent.y + s * child.x + c * child.y,
                 wrap_angle(parent.theta + child.theta)};
}

// End-effector delta command. Raw units (meters / radians / grip fraction).
struct ActionDelta {
  double dx = 0.0;
  double dy = 0.0;
  double dtheta = 0.0;
  double dgrip = 0.0;
};

// Per-step command box. Actions are clipped componentwise to +-limit.
struct ActionBox {
  double dx = 0.02;
  double dy = 0.02;
  double dtheta = 0.1;
  double dgrip = 0.25;

  ActionDelta clip(const ActionDelta& a) const {
    auto c = [](double v, double lim) { return std::clamp(v, -lim, lim); };
    return ActionDelta{c(a.dx, dx), c(a.dy, dy), c(a.dtheta, dtheta), c(a.dgrip, dgrip)};
  }
};

}  // namespace tailsafe

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tailsafe/geometry.hpp"

using namespace tailsafe;

TEST_CASE("wrap_angle maps into (-pi, pi]") {
  CHECK(wrap_angle(0.0) == doctest::Approx(0.0));
  CHECK(wrap_angle(M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(-M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(3.0 * M_PI) == doctest::Approx(M_PI));
  CHECK(wrap_angle(2.0 * M_PI + 0.25) == doctest::Approx(0.25));
  CHECK(wrap_angle(-2.0 * M_PI - 0.25) == doctest::Approx(-0.25));
  for (double a = -20.0; a < 20.0; a += 0.37) {
    const double w = wrap_angle(a);
    CHECK(w > -M_PI);
    CHECK(w <= M_PI + 1e-15);
    CHECK(std::abs(std::sin(w) - std::sin(a)) < 1e-12);
    CHECK(std::abs(std::cos(w) - std::cos(a)) < 1e-12);
  }
}

TEST_CASE("angle_dist is symmetric and respects wrap") {
  CHECK(angle_dist(0.1, -0.1) == doctest::Approx(0.2));
  CHECK(angle_dist(M_PI - 0.05, -M_PI + 0.05) == doctest::Approx(0.1));
  CHECK(angle_dist(1.0, 1.0) == doctest::Approx(0.0));
  CHECK(angle_dist(2.0, -2.0) == doctest::Approx(2.0 * M_PI - 4.0));
}

TEST_CASE("pose helpers") {
  PoseSE2 a{1.0, 2.0, 0.5}, b{4.0, 6.0, -0.5};
  CHECK(pose_dist(a, b) == doctest::Approx(5.0));
  CHECK(pose_finite(a));
  CHECK_FALSE(pose_finite(PoseSE2{std::nan(""), 0.0, 0.0}));
  CHECK_FALSE(pose_finite(PoseSE2{0.0, std::numeric_limits<double>::infinity(), 0.0}));
}

TEST_CASE("compose applies the parent rotation to the child offset") {
  // Parent facing +y: a child at (1, 0) lands at parent + (0, 1).
  PoseSE2 parent{2.0, 3.0, M_PI / 2.0};
  PoseSE2 child{1.0, 0.0, 0.25};
  PoseSE2 w = compose(parent, child);
  CHECK(w.x == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(w.y == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(w.theta == doctest::Approx(M_PI / 2.0 + 0.25));

  // Identity parent is a no-op.
  PoseSE2 id{};
  PoseSE2 same = compose(id, child);
  CHECK(same.x == doctest::Approx(child.x));
  CHECK(same.y == doctest::Approx(child.y));
  CHECK(same.theta == doctest::Approx(child.theta));
}

TEST_CASE("action box clips componentwise") {
  ActionBox box;
  ActionDelta a{0.05, -0.05, 0.5, -0.9};
  ActionDelta c = box.clip(a);
  CHECK(c.dx == doctest::Approx(0.02));
  CHECK(c.dy == doctest::Approx(-0.02));
  CHECK(c.dtheta == doctest::Approx(0.1));
  CHECK(c.dgrip == doctest::Approx(-0.25));

  ActionDelta inside{0.01, -0.005, 0.03, 0.2};
  ActionDelta ci = box.clip(inside);
  CHECK(ci.dx == doctest::Approx(inside.dx));
  CHECK(ci.dy == doctest::Approx(inside.dy));
  CHECK(ci.dtheta == doctest::Approx(inside.dtheta));
  CHECK(ci.dgrip == doctest::Approx(inside.dgrip));
}

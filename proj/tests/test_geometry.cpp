#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "skd/errors.hpp"
#include "skd/geometry.hpp"

using namespace skd;

namespace {

// Brute-force 8-corner pinhole projection, written independently of the
// library's corner ordering.
Box2D project_oracle(const Box3D& b, const CameraIntrinsics& cam) {
  double umin = 1e9, vmin = 1e9, umax = -1e9, vmax = -1e9;
  for (double sl : {-0.5, 0.5})
    for (double sw : {-0.5, 0.5})
      for (double sh : {-0.5, 0.5}) {
        const double lx = sl * b.l, lz = sw * b.w;
        const double X = b.x + std::cos(b.theta) * lx + std::sin(b.theta) * lz;
        const double Z = b.z - std::sin(b.theta) * lx + std::cos(b.theta) * lz;
        const double Y = b.y + sh * b.h;
        umin = std::min(umin, cam.fx * X / Z + cam.cx);
        umax = std::max(umax, cam.fx * X / Z + cam.cx);
        vmin = std::min(vmin, cam.fy * Y / Z + cam.cy);
        vmax = std::max(vmax, cam.fy * Y / Z + cam.cy);
      }
  return {umin, vmin, umax, vmax};
}

}  // namespace

TEST_CASE("cube projection") {
  const CameraIntrinsics cam{100, 100, 64, 64};
  const Box2D b = project_box3d_to_box2d(Box3D{0, 0, 10, 2, 2, 2, 0}, cam);
  // Extreme corners sit at z = 9: 100 * 1 / 9 from the center.
  CHECK(b.u_min == doctest::Approx(64 - 100.0 / 9).epsilon(1e-12));
  CHECK(b.u_max == doctest::Approx(64 + 100.0 / 9).epsilon(1e-12));
  CHECK(b.v_min == doctest::Approx(52.8889).epsilon(1e-5));
  CHECK(b.v_max == doctest::Approx(75.1111).epsilon(1e-5));
  const Box2D o = project_oracle(Box3D{0, 0, 10, 2, 2, 2, 0}, cam);
  CHECK(b.u_min == doctest::Approx(o.u_min));
  CHECK(b.v_max == doctest::Approx(o.v_max));
}

TEST_CASE("degenerate box projects to a point") {
  const Box2D b = project_box3d_to_box2d(Box3D{0, 0, 10, 1e-12, 1e-12, 1e-12, 0.3},
                                         CameraIntrinsics{100, 100, 0, 0});
  CHECK(std::fabs(b.u_min) < 1e-9);
  CHECK(std::fabs(b.u_max) < 1e-9);
  CHECK(std::fabs(b.v_min) < 1e-9);
  CHECK(std::fabs(b.v_max) < 1e-9);
}

TEST_CASE("projection behind camera is an error") {
  CHECK_THROWS_AS(project_box3d_to_box2d(Box3D{0, 0, 1, 1, 1, 4, 1.5707963}, CameraIntrinsics{}),
                  ContractViolation);
}

TEST_CASE("projection agrees with oracle and is scale invariant") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(-1, 1);
  const CameraIntrinsics cam{100, 110, 32, 30};
  for (int i = 0; i < 200; ++i) {
    Box3D b{5 * U(rng), 2 * U(rng), 15 + 5 * U(rng), 1.5 + 0.3 * U(rng), 1.6 + 0.3 * U(rng),
            3.9 + 0.5 * U(rng), 3 * U(rng)};
    const Box2D p = project_box3d_to_box2d(b, cam);
    const Box2D o = project_oracle(b, cam);
    CHECK(std::fabs(p.u_min - o.u_min) < 1e-9);
    CHECK(std::fabs(p.v_max - o.v_max) < 1e-9);
    Box3D s = b;
    s.x *= 2;
    s.y *= 2;
    s.z *= 2;
    s.h *= 2;
    s.w *= 2;
    s.l *= 2;
    const Box2D q = project_box3d_to_box2d(s, cam);
    CHECK(std::fabs(q.u_min - p.u_min) < 1e-9);
    CHECK(std::fabs(q.v_min - p.v_min) < 1e-9);
    CHECK(std::fabs(q.u_max - p.u_max) < 1e-9);
    CHECK(std::fabs(q.v_max - p.v_max) < 1e-9);
  }
}

TEST_CASE("bev iou analytic cases") {
  const Box3D a{0, 0, 10, 1, 1, 1, 0};
  CHECK(bev_iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  Box3D b = a;
  b.x += 0.5;
  CHECK(std::fabs(bev_iou(a, b) - 1.0 / 3.0) < 1e-9);
  Box3D r = a;
  r.theta = std::numbers::pi / 2;
  CHECK(std::fabs(bev_iou(a, r) - 1.0) < 1e-9);
  Box3D far = a;
  far.x += 3.0;
  CHECK(bev_iou(a, far) == 0.0);
  Box3D flat = a;
  flat.w = 0.0;
  CHECK(bev_iou(a, flat) == 0.0);
}

TEST_CASE("3d iou analytic cases") {
  const Box3D a{0, 0, 10, 1, 1, 1, 0};
  CHECK(iou_3d(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  Box3D b = a;
  b.y += 0.5;
  CHECK(std::fabs(iou_3d(a, b) - 1.0 / 3.0) < 1e-9);
  Box3D c = a;
  c.y += 1.5;
  CHECK(iou_3d(a, c) == 0.0);
  CHECK(bev_iou(a, c) == doctest::Approx(1.0));
}

TEST_CASE("iou symmetry, range and rigid-motion invariance") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int i = 0; i < 300; ++i) {
    Box3D a{U(rng), 0.3 * U(rng), 10 + U(rng), 1.5, 1 + 0.5 * U(rng), 3 + U(rng), 3 * U(rng)};
    Box3D b{U(rng), 0.3 * U(rng), 10 + U(rng), 1.4, 1 + 0.5 * U(rng), 3 + U(rng), 3 * U(rng)};
    const double ab = bev_iou(a, b), ba = bev_iou(b, a);
    CHECK(ab == ba);
    CHECK(iou_3d(a, b) == iou_3d(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(std::fabs(bev_iou(a, a) - 1.0) < 1e-12);
    // Rotate both about the origin of the ground plane and translate.
    const double phi = 2 * U(rng), dx = 3 * U(rng), dz = 3 * U(rng);
    auto move = [&](Box3D m) {
      const double c = std::cos(phi), s = std::sin(phi);
      const double x = m.x * c + m.z * s, z = -m.x * s + m.z * c;
      m.x = x + dx;
      m.z = z + dz;
      m.theta = normalize_angle(m.theta + phi);
      return m;
    };
    CHECK(std::fabs(bev_iou(move(a), move(b)) - ab) < 1e-9);
  }
}

TEST_CASE("normalize_angle range") {
  CHECK(normalize_angle(std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(normalize_angle(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(normalize_angle(3 * std::numbers::pi / 2) == doctest::Approx(-std::numbers::pi / 2));
}

TEST_CASE("2d iou") {
  const Box2D a{0, 0, 2, 2};
  CHECK(iou_2d(a, a) == 1.0);
  CHECK(iou_2d(a, Box2D{1, 0, 3, 2}) == doctest::Approx(1.0 / 3.0));
  CHECK(iou_2d(a, Box2D{5, 5, 6, 6}) == 0.0);
}

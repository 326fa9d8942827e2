#include "matchkit/geometry.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>

using namespace matchkit;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Mat3 rot_about(const Vec3& axis, double deg) {
  return Eigen::AngleAxisd(deg / kDegPerRad, axis.normalized()).toRotationMatrix();
}

Mat3 random_rotation(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 axis(n(rng), n(rng), n(rng));
  std::uniform_real_distribution<double> u(0.0, 180.0);
  return rot_about(axis, u(rng));
}

}  // namespace

TEST_CASE("warp_point basic transforms") {
  Homography id;
  Vec2 p = warp_point(id, Vec2(10, 20));
  CHECK(p.x() == Catch::Approx(10.0));
  CHECK(p.y() == Catch::Approx(20.0));

  Homography tr;
  tr.h(0, 2) = 5;
  tr.h(1, 2) = -3;
  p = warp_point(tr, Vec2(0, 0));
  CHECK(p.x() == Catch::Approx(5.0));
  CHECK(p.y() == Catch::Approx(-3.0));

  Homography d2;
  d2.h(0, 0) = 2;
  d2.h(1, 1) = 2;
  p = warp_point(d2, Vec2(3, 4));
  CHECK(p.x() == Catch::Approx(6.0));
  CHECK(p.y() == Catch::Approx(8.0));
}

TEST_CASE("warp_point degenerate cases throw") {
  Homography h;
  h.h << 1, 0, 0, 0, 1, 0, 0, 1, 0;  // w = y, vanishes on the x axis
  CHECK_THROWS_AS(warp_point(h, Vec2(3, 0)), DegenerateWarp);

  Homography sing;
  sing.h.setZero();
  CHECK_THROWS_AS(sing.inverse(), DegenerateWarp);
}

TEST_CASE("homography compose/inverse round trip") {
  Rng rng(7);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  std::uniform_real_distribution<double> shift(-30.0, 30.0);
  for (int it = 0; it < 100; ++it) {
    Homography h1, h2;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        h1.h(r, c) = (r == c ? 1.0 : 0.0) + u(rng);
        h2.h(r, c) = (r == c ? 1.0 : 0.0) + u(rng);
      }
    h1.h(0, 2) = shift(rng);
    h1.h(1, 2) = shift(rng);
    h2.h(0, 2) = shift(rng);
    h2.h(1, 2) = shift(rng);
    h1.h(2, 0) = u(rng) * 1e-3;
    h1.h(2, 1) = u(rng) * 1e-3;

    Vec2 p(shift(rng), shift(rng));
    Vec2 lhs = warp_point(compose(h1, h2), p);
    Vec2 rhs = warp_point(h1, warp_point(h2, p));
    CHECK((lhs - rhs).norm() < 1e-6);

    Vec2 back = warp_point(h1.inverse(), warp_point(h1, p));
    CHECK((back - p).norm() < 1e-9);
  }
}

TEST_CASE("reproject identity and axis translation") {
  Intrinsics k{100, 100, 50, 50};
  CameraPose id;
  Vec2 p(37.5, 62.25);
  Vec2 q = reproject(p, 4.0, k, k, id);
  CHECK((q - p).norm() < 1e-12);

  CameraPose tz;
  tz.t = Vec3(0, 0, -2.0);
  q = reproject(Vec2(50, 50), 4.0, k, k, tz);
  CHECK(q.x() == Catch::Approx(50.0));
  CHECK(q.y() == Catch::Approx(50.0));
}

TEST_CASE("reproject lateral translation arithmetic") {
  Intrinsics k{100, 100, 50, 50};
  CameraPose tx;
  tx.t = Vec3(1, 0, 0);
  Vec2 q = reproject(Vec2(60, 50), 10.0, k, k, tx);
  CHECK(q.x() == Catch::Approx(70.0));
  CHECK(q.y() == Catch::Approx(50.0));
}

TEST_CASE("reproject rejects invalid geometry") {
  Intrinsics k{100, 100, 50, 50};
  CameraPose id;
  CHECK_THROWS_AS(reproject(Vec2(0, 0), 0.0, k, k, id), InvalidDepth);
  CHECK_THROWS_AS(reproject(Vec2(0, 0), -1.0, k, k, id), InvalidDepth);

  CameraPose behind;
  behind.t = Vec3(0, 0, -10.0);
  CHECK_THROWS_AS(reproject(Vec2(50, 50), 4.0, k, k, behind), BehindCamera);
}

TEST_CASE("rotation_angle known values") {
  CHECK(rotation_angle(Mat3::Identity()) == Catch::Approx(0.0));
  CHECK(rotation_angle(rot_about(Vec3(0, 0, 1), 180.0)) == Catch::Approx(180.0));
  CHECK(std::abs(rotation_angle(rot_about(Vec3(0, 0, 1), 30.0)) - 30.0) < 1e-9);
}

TEST_CASE("rotation_angle conjugation invariance") {
  Rng rng(11);
  for (int it = 0; it < 200; ++it) {
    Mat3 r = random_rotation(rng);
    Mat3 q = random_rotation(rng);
    CHECK(std::abs(rotation_angle(q * r * q.transpose()) - rotation_angle(r)) < 1e-9);
  }
}

TEST_CASE("translation_angle values and sign invariance") {
  CHECK(translation_angle(Vec3(1, 0, 0), Vec3(1, 0, 0)) == Catch::Approx(0.0));
  CHECK(translation_angle(Vec3(-1, 0, 0), Vec3(1, 0, 0)) == Catch::Approx(0.0));
  CHECK(translation_angle(Vec3(1, 1, 0), Vec3(1, 0, 0)) == Catch::Approx(45.0));
  CHECK_THROWS_AS(translation_angle(Vec3::Zero(), Vec3(1, 0, 0)), ZeroTranslation);
  CHECK_THROWS_AS(translation_angle(Vec3(1, 0, 0), Vec3::Zero()), ZeroTranslation);
}

TEST_CASE("pose_error identities and max semantics") {
  Rng rng(13);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int it = 0; it < 100; ++it) {
    CameraPose x{random_rotation(rng), Vec3(n(rng), n(rng), n(rng))};
    if (x.t.norm() < 1e-6) continue;
    // acos conditioning near 1 bounds how close to zero the angle can get.
    PoseError e = pose_error(x, x);
    CHECK(e.rot_deg < 1e-5);
    CHECK(e.trans_deg < 1e-5);
    CHECK(e.max_deg == std::max(e.rot_deg, e.trans_deg));
  }

  CameraPose gt{Mat3::Identity(), Vec3(1, 0, 0)};
  CameraPose est{Mat3::Identity(), Vec3(std::cos(10.0 / kDegPerRad), std::sin(10.0 / kDegPerRad), 0)};
  CHECK(pose_error(est, gt).max_deg == Catch::Approx(10.0));

  CameraPose est2{rot_about(Vec3(0, 1, 0), 7.0),
                  Vec3(std::cos(3.0 / kDegPerRad), std::sin(3.0 / kDegPerRad), 0)};
  PoseError e2 = pose_error(est2, gt);
  CHECK(e2.rot_deg == Catch::Approx(7.0));
  CHECK(e2.trans_deg == Catch::Approx(3.0));
  CHECK(e2.max_deg == Catch::Approx(7.0));
}

TEST_CASE("auc exact values") {
  std::vector<double> t5{5.0};
  CHECK(auc({kInf, kInf}, t5)[0] == 0.0);
  CHECK(auc({0.0, 0.0}, t5)[0] == 1.0);
  CHECK(auc({1.0, 3.0, kInf}, t5)[0] == 0.4);
  CHECK_THROWS_AS(auc({}, t5), EmptyInput);
}

TEST_CASE("auc monotone in threshold and permutation invariant") {
  Rng rng(17);
  std::uniform_real_distribution<double> u(0.0, 30.0);
  std::bernoulli_distribution fail(0.2);
  for (int it = 0; it < 100; ++it) {
    std::vector<double> errs;
    int n = 1 + static_cast<int>(rng() % 40);
    for (int i = 0; i < n; ++i) errs.push_back(fail(rng) ? kInf : u(rng));
    std::vector<double> vals = auc(errs, {5.0, 10.0, 20.0});
    CHECK(vals[0] <= vals[1] + 1e-12);
    CHECK(vals[1] <= vals[2] + 1e-12);

    std::vector<double> shuffled = errs;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    std::vector<double> vals2 = auc(shuffled, {5.0, 10.0, 20.0});
    for (int i = 0; i < 3; ++i) CHECK(vals[i] == Catch::Approx(vals2[i]).margin(1e-12));
  }
}

TEST_CASE("essential matrix from pose") {
  CameraPose pose{Mat3::Identity(), Vec3(0, 0, 1)};
  Mat3 e = essential_from_pose(pose);
  Mat3 want;
  want << 0, -1, 0, 1, 0, 0, 0, 0, 0;
  CHECK((e - want).norm() < 1e-12);
  CHECK(std::abs(e.norm() - std::sqrt(2.0)) < 1e-9);

  CameraPose scaled = pose;
  scaled.t *= 5.0;
  CHECK((essential_from_pose(scaled) - e).norm() < 1e-12);

  CHECK_THROWS_AS(essential_from_pose(CameraPose{Mat3::Identity(), Vec3::Zero()}), ZeroTranslation);
}

TEST_CASE("essential matrix satisfies epipolar constraint on synthetic correspondences") {
  Rng rng(23);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> span(-1.0, 1.0);
  Intrinsics ka{120, 110, 64, 48};
  Intrinsics kb{90, 95, 60, 52};
  for (int it = 0; it < 50; ++it) {
    CameraPose pose{rot_about(Vec3(n(rng), n(rng), n(rng)), 10.0 * std::abs(n(rng))),
                    Vec3(n(rng), n(rng), n(rng))};
    if (pose.t.norm() < 0.1) continue;
    Mat3 e = essential_from_pose(pose);
    for (int j = 0; j < 20; ++j) {
      Vec3 xa(span(rng) * 2, span(rng) * 2, 6.0 + 2.0 * span(rng));
      Vec3 xb = pose.R * xa + pose.t;
      if (xb.z() < 0.5) continue;
      Vec2 pa = ka.project(xa);
      Vec2 pb = kb.project(xb);
      double resid = kb.normalize(pb).dot(e * ka.normalize(pa));
      CHECK(std::abs(resid) < 1e-9);
    }
  }
}

TEST_CASE("depth map nearest lookup") {
  DepthMap d = DepthMap::zeros(4, 3);
  d.z(1, 2) = 5.5;
  CHECK(d.at_nearest(Vec2(2.2, 0.9)) == Catch::Approx(5.5));
  CHECK(d.at_nearest(Vec2(0, 0)) == 0.0);
  CHECK(d.at_nearest(Vec2(-1, 0)) == 0.0);
  CHECK(d.at_nearest(Vec2(3.6, 2.0)) == 0.0);
}

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "neas/phantom.hpp"
#include "neas/posecal.hpp"
#include "test_support.hpp"

namespace neas {
namespace {

Camera identity_camera(int W = 64, int H = 48, double f = 20.0) {
  Camera c;
  c.fx = c.fy = f;
  c.width = W;
  c.height = H;
  c.cx = W / 2.0;
  c.cy = H / 2.0;
  return c;
}

std::vector<Camera> ring(int views = 8) {
  TrajectoryConfig t;
  t.views = views;
  t.step_deg = 360.0 / views;
  return make_trajectory(t);
}

TEST(GenerateRay, PrincipalPointLooksDownOpticalAxis) {
  for (const Camera& c : ring()) {
    const Ray r = generate_ray(c, c.cx, c.cy);
    EXPECT_LT((r.direction - c.optical_axis()).norm(), 1e-12);
    EXPECT_LT((r.origin - c.center()).norm(), 1e-12);
  }
}

TEST(GenerateRay, OneFocalLengthOffsetIsFortyFiveDegrees) {
  const Camera c = identity_camera();
  const Ray r = generate_ray(c, c.width / 2.0 + c.fx, c.height / 2.0);
  EXPECT_LT((r.direction - Eigen::Vector3d(1, 0, 1).normalized()).norm(), 1e-12);
  EXPECT_NEAR(r.direction.norm(), 1.0, 1e-12);
}

TEST(GenerateRay, OutOfBoundsPixelFails) {
  const Camera c = identity_camera();
  EXPECT_THROW(generate_ray(c, -0.1, 3.0), std::out_of_range);
  EXPECT_THROW(generate_ray(c, 3.0, c.height + 0.5), std::out_of_range);
  EXPECT_NO_THROW(generate_ray(c, 0.5, 0.5));
}

TEST(GenerateRay, ProjectRoundTripProperty) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const auto cams = ring(12);
  for (int n = 0; n < 1000; ++n) {
    Camera c = cams[static_cast<std::size_t>(n % 12)];
    c.translation += Eigen::Vector3d(u01(rng) - 0.5, u01(rng) - 0.5, u01(rng) - 0.5) * 0.1;
    c.cx += u01(rng) - 0.5;
    const double u = u01(rng) * c.width, v = u01(rng) * c.height;
    Ray r = generate_ray(c, u, v);
    const double t = 0.5 + 6.0 * u01(rng);
    const Eigen::Vector2d back = c.project(r.point_at(t));
    ASSERT_NEAR(back.x(), u, 1e-6);
    ASSERT_NEAR(back.y(), v, 1e-6);
    ASSERT_NEAR(r.direction.norm(), 1.0, 1e-9);
  }
}

TEST(GenerateRay, RaysOfOneCameraShareOrigin) {
  const Camera c = ring().front();
  const Eigen::Vector3d o = pixel_ray(c, 0, 0).origin;
  for (int j = 0; j < c.height; j += 7) {
    for (int i = 0; i < c.width; i += 5) EXPECT_EQ(pixel_ray(c, i, j).origin, o);
  }
}

TEST(GenerateRay, UnitSphereBounds) {
  const Camera c = ring().front();
  const Ray r = generate_ray(c, c.cx, c.cy);
  ASSERT_TRUE(r.hits());
  EXPECT_NEAR(r.near, 3.0, 1e-12);
  EXPECT_NEAR(r.far, 5.0, 1e-12);
  const Ray corner = pixel_ray(c, 0, 0);
  EXPECT_FALSE(corner.hits());
}

TEST(TauSchedule, Examples) {
  RefineSchedule s;
  s.total = 8000;
  s.tau_end = 14.0;
  EXPECT_EQ(tau_at(0, s), 2.0);
  EXPECT_EQ(tau_at(4000, s), 14.0);
  EXPECT_EQ(tau_at(8000, s), 14.0);
  EXPECT_DOUBLE_EQ(tau_at(2000, s), 8.0);
  EXPECT_THROW(tau_at(-1, s), std::invalid_argument);
}

TEST(TauSchedule, MonotoneProperty) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> total(2, 50000);
  for (int n = 0; n < 1000; ++n) {
    RefineSchedule s;
    s.total = total(rng);
    s.tau_end = 2.0 + (n % 20);
    std::uniform_int_distribution<int> it(0, 2 * s.total);
    int a = it(rng), b = it(rng);
    if (a > b) std::swap(a, b);
    ASSERT_LE(tau_at(a, s), tau_at(b, s));
    ASSERT_GE(tau_at(a, s), s.tau_start);
    ASSERT_LE(tau_at(b, s), s.tau_end);
  }
}

TEST(CameraRig, RoundTripsCameras) {
  const auto cams = ring();
  CameraRig rig(cams);
  for (std::size_t i = 0; i < cams.size(); ++i) EXPECT_EQ(rig.camera(i), cams[i]);
  CameraRig shared(cams, true);
  EXPECT_EQ(shared.principal().value().rows(), 1);
  EXPECT_EQ(shared.camera(3), cams[3]);
}

// Gradient of a random linear readout of the sample positions w.r.t. the
// translations and principal points.
void check_pose_points(bool shared) {
  auto cams = ring(4);
  cams[1].cx += 0.7;
  CameraRig rig(cams, shared);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<PoseSampleSpec> specs;
  for (int k = 0; k < 6; ++k) {
    PoseSampleSpec s;
    s.view = static_cast<std::size_t>(k % 4);
    s.u = 10 + 40 * u01(rng);
    s.v = 10 + 40 * u01(rng);
    for (int j = 0; j < 5; ++j) s.t.push_back(3.0 + 2.0 * u01(rng));
    specs.push_back(s);
  }
  Matrix readout(30, 3);
  for (Index i = 0; i < readout.size(); ++i) readout.data()[i] = u01(rng) - 0.5;
  auto f = [&](Graph& g) { return g.sum(g.mul_const(pose_points(g, rig, specs), readout)); };
  {
    Graph g;
    Var p = pose_points(g, rig, specs);
    Index row = 0;
    for (const auto& s : specs) {
      const Ray r = generate_ray(rig.camera(s.view), s.u, s.v);
      for (double t : s.t) {
        ASSERT_LT((g.value(p).row(row++).transpose() - r.point_at(t)).norm(), 1e-12);
      }
    }
  }
  {
    Graph g;
    g.backward(f(g));
  }
  const auto check = testing::check_gradients(
      [&] {
        Graph g;
        return g.item(f(g));
      },
      {&rig.translations(), &rig.principal()}, 1e-6);
  EXPECT_LT(check.max_rel_err, 1e-6) << check.worst;
}

TEST(PosePoints, GradientMatchesFiniteDifferences) { check_pose_points(false); }
TEST(PosePoints, SharedPrincipalGradientMatchesFiniteDifferences) { check_pose_points(true); }

TEST(PoseStep, WarmUpLeavesCamerasBitwiseUnchanged) {
  CameraRig rig(ring());
  Adam opt(rig.parameters());
  RefineSchedule s;
  s.warmup = 500;
  const Matrix t0 = rig.translations().value(), c0 = rig.principal().value();
  rig.translations().grad().setConstant(0.3);
  rig.principal().grad().setConstant(-0.2);
  EXPECT_FALSE(pose_step(rig, opt, 499, s, 1e-2));
  EXPECT_EQ(rig.translations().value(), t0);
  EXPECT_EQ(rig.principal().value(), c0);
  EXPECT_EQ(rig.translations().grad().cwiseAbs().maxCoeff(), 0.0);
}

TEST(PoseStep, AfterWarmUpMovesAgainstGradient) {
  CameraRig rig(ring());
  Adam opt(rig.parameters());
  RefineSchedule s;
  const Matrix t0 = rig.translations().value();
  rig.translations().grad().setZero();
  rig.translations().grad()(2, 1) = 0.5;
  rig.translations().grad()(3, 0) = -0.5;
  EXPECT_TRUE(pose_step(rig, opt, 500, s, 1e-2));
  EXPECT_LT(rig.translations().value()(2, 1), t0(2, 1));
  EXPECT_GT(rig.translations().value()(3, 0), t0(3, 0));
  EXPECT_EQ(rig.translations().value()(0, 0), t0(0, 0));
}

TEST(PoseStep, RotationsAndFocalsFrozenProperty) {
  const auto cams = ring(10);
  CameraRig rig(cams);
  Adam opt(rig.parameters());
  RefineSchedule s;
  s.warmup = 0;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  for (int it = 0; it < 1000; ++it) {
    for (ParamTensor* p : rig.parameters()) {
      for (Index i = 0; i < p->size(); ++i) p->grad().data()[i] = n(rng);
    }
    pose_step(rig, opt, it, s, 1e-3);
  }
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Camera c = rig.camera(i);
    ASSERT_EQ(c.rotation, cams[i].rotation);
    ASSERT_EQ(c.fx, cams[i].fx);
    ASSERT_EQ(c.fy, cams[i].fy);
    ASSERT_NE(c.translation, cams[i].translation);
  }
}

TEST(PoseStep, NonFiniteGradientIsSkippedAndLogged) {
  CameraRig rig(ring());
  Adam opt(rig.parameters());
  RefineSchedule s;
  const Matrix t0 = rig.translations().value();
  rig.translations().grad()(0, 0) = std::nan("");
  std::ostringstream sink;
  set_log_stream(sink);
  pose_step(rig, opt, 600, s, 1e-2);
  set_log_stream(std::clog);
  EXPECT_EQ(rig.translations().value(), t0);
  EXPECT_NE(sink.str().find("pose_t"), std::string::npos);
}

}  // namespace
}  // namespace neas

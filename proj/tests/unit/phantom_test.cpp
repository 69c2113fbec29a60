#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "neas/phantom.hpp"
#include "neas/renderer.hpp"

namespace neas {
namespace {

Eigen::Vector3d random_point(std::mt19937_64& rng, double half = 1.0) {
  std::uniform_real_distribution<double> u(-half, half);
  return {u(rng), u(rng), u(rng)};
}

Eigen::Vector3d random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
}

TEST(PhantomSdf, SphereExamples) {
  const AnalyticPhantom ph = sphere_phantom(0.5, 1.0);
  EXPECT_DOUBLE_EQ(ph.sdf(Eigen::Vector3d::Zero()), -0.5);
  EXPECT_DOUBLE_EQ(ph.sdf(Eigen::Vector3d(1, 0, 0)), 0.5);
}

TEST(PhantomSdf, UnionIsMinimum) {
  const SpherePrim a{Eigen::Vector3d(-0.4, 0, 0), 0.3}, b{Eigen::Vector3d(0.4, 0.1, 0), 0.25};
  const AnalyticPhantom ph("pair", {{a, Label::outer, 1.0}, {b, Label::outer, 2.0}});
  std::mt19937_64 rng(1);
  for (int k = 0; k < 100; ++k) {
    const Eigen::Vector3d x = random_point(rng);
    const double da = (x - a.center).norm() - a.radius, db = (x - b.center).norm() - b.radius;
    EXPECT_DOUBLE_EQ(ph.sdf(x), std::min(da, db));
  }
}

TEST(PhantomSdf, InnerSurfaceUsesInnerPrimitivesOnly) {
  const AnalyticPhantom ph = nested_spheres_phantom();
  EXPECT_DOUBLE_EQ(ph.sdf(Eigen::Vector3d(0.4, 0, 0), Surface::inner), 0.15);
  EXPECT_DOUBLE_EQ(ph.sdf(Eigen::Vector3d(0.4, 0, 0), Surface::outer), -0.1);
  EXPECT_DOUBLE_EQ(ph.nesting_fraction(1000), 1.0);
}

// Central differences of every primitive SDF have unit length away from the
// medial set.
TEST(PhantomSdf, EikonalProperty) {
  const std::vector<Shape3> shapes = {SpherePrim{Eigen::Vector3d(0.1, 0, -0.2), 0.4},
                                      BoxPrim{Eigen::Vector3d(0, 0.1, 0), Eigen::Vector3d(0.3, 0.2, 0.4)},
                                      CapsulePrim{Eigen::Vector3d(-0.3, 0, 0), Eigen::Vector3d(0.2, 0.3, 0.1), 0.15}};
  std::mt19937_64 rng(2);
  const double h = 1e-6;
  int checked = 0;
  for (const auto& s : shapes) {
    for (int k = 0; k < 1000; ++k) {
      const Eigen::Vector3d x = random_point(rng);
      // Skip points where the gradient is discontinuous (box interior
      // medial planes and the capsule axis).
      if (std::holds_alternative<BoxPrim>(s) && primitive_sdf(s, x) < 0.0) continue;
      Eigen::Vector3d g;
      for (int c = 0; c < 3; ++c) {
        Eigen::Vector3d e = Eigen::Vector3d::Zero();
        e[c] = h;
        g[c] = (primitive_sdf(s, x + e) - primitive_sdf(s, x - e)) / (2 * h);
      }
      ASSERT_NEAR(g.norm(), 1.0, 1e-5) << primitive_kind(s) << " at " << x.transpose();
      ++checked;
    }
  }
  EXPECT_GT(checked, 2500);
}

TEST(PhantomMu, InnerBeatsOuterAndAirIsZero) {
  const AnalyticPhantom ph = nested_spheres_phantom();
  EXPECT_EQ(ph.mu(Eigen::Vector3d::Zero()), 0.5);
  EXPECT_EQ(ph.mu(Eigen::Vector3d(0.4, 0, 0)), 0.2);
  EXPECT_EQ(ph.mu(Eigen::Vector3d(0.6, 0, 0)), 0.0);
}

TEST(PhantomMu, RejectsNegativeAttenuation) {
  EXPECT_THROW(AnalyticPhantom("bad", {{SpherePrim{}, Label::outer, -1.0}}), std::invalid_argument);
}

// Intervals returned for each primitive agree with the sign of its SDF.
TEST(PrimitiveInterval, AgreesWithSdfSignProperty) {
  const std::vector<Shape3> shapes = {SpherePrim{Eigen::Vector3d(0.1, 0, -0.2), 0.4},
                                      BoxPrim{Eigen::Vector3d(0, 0.1, 0), Eigen::Vector3d(0.3, 0.2, 0.4)},
                                      CapsulePrim{Eigen::Vector3d(-0.3, 0, 0), Eigen::Vector3d(0.2, 0.3, 0.1), 0.15}};
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ut(0.0, 6.0);
  int hits = 0;
  for (const auto& s : shapes) {
    for (int k = 0; k < 1000; ++k) {
      const Eigen::Vector3d o = 3.0 * random_direction(rng);
      const Eigen::Vector3d d = (random_point(rng, 0.4) - o).normalized();
      const auto iv = primitive_interval(s, o, d);
      if (iv) {
        ++hits;
        ASSERT_NEAR(primitive_sdf(s, o + iv->first * d), 0.0, 1e-9);
        ASSERT_NEAR(primitive_sdf(s, o + iv->second * d), 0.0, 1e-9);
        ASSERT_LE(primitive_sdf(s, o + 0.5 * (iv->first + iv->second) * d), 1e-12);
      }
      for (int j = 0; j < 8; ++j) {
        const double t = ut(rng);
        const double sd = primitive_sdf(s, o + t * d);
        const bool inside = iv && t > iv->first && t < iv->second;
        if (std::abs(sd) < 1e-9) continue;
        ASSERT_EQ(sd < 0.0, inside) << primitive_kind(s) << " t=" << t;
      }
    }
  }
  EXPECT_GT(hits, 1000);
}

Camera head_on(int W = 33, int H = 33) {
  TrajectoryConfig tc;
  tc.views = 1;
  tc.width = W;
  tc.height = H;
  return make_trajectory(tc).front();
}

TEST(Project, MissIsExactlyOne) {
  const Camera c = head_on();
  const Image img = project(sphere_phantom(0.5, 1.0), c);
  EXPECT_EQ(img(0, 0), 1.0);
  EXPECT_EQ(img(0, c.width - 1), 1.0);
}

TEST(Project, CentralRayThroughSphere) {
  const Camera c = head_on();
  const Image img = project(sphere_phantom(0.5, 1.0), c);
  EXPECT_NEAR(img(16, 16), std::exp(-1.0), 1e-12);
}

TEST(Project, CentralRayThroughNestedSpheres) {
  const Camera c = head_on();
  const Image img = project(nested_spheres_phantom(0.5, 0.2, 0.25, 0.5), c);
  EXPECT_NEAR(img(16, 16), std::exp(-0.35), 1e-12);
  EXPECT_NEAR(img(16, 16), 0.70469, 1e-5);
}

TEST(Project, SupersampleAveragesSubPixelRays) {
  const Camera c = head_on(9, 9);
  const AnalyticPhantom ph = limb_phantom();
  const Image img = project(ph, c, {2, 0.0, 0});
  double acc = 0.0;
  for (double dv : {0.25, 0.75}) {
    for (double du : {0.25, 0.75}) acc += ph.intensity(c.center(), c.back_project(3 + du, 5 + dv).normalized());
  }
  EXPECT_NEAR(img(5, 3), acc / 4.0, 1e-15);
}

TEST(Project, NoiseIsSeededAndClamped) {
  const Camera c = head_on(16, 16);
  const ProjectOptions opt{1, 0.05, 9};
  const Image a = project(sphere_phantom(), c, opt), b = project(sphere_phantom(), c, opt);
  EXPECT_EQ(a, b);
  EXPECT_LE(a.maxCoeff(), 1.0);
  EXPECT_GE(a.minCoeff(), 0.0);
}

// Exact projection against the renderer quadrature on the true mu field.
TEST(Project, AgreesWithRendererQuadrature) {
  TrajectoryConfig tc;
  tc.views = 3;
  tc.step_deg = 50;
  tc.width = tc.height = 24;
  const AnalyticPhantom ph = nested_spheres_phantom(0.5, 0.2, 0.25, 0.5);
  const auto mu = [&](const Eigen::Vector3d& x) { return ph.mu(x); };
  double worst = 0.0;
  for (const Camera& c : make_trajectory(tc)) {
    const Image img = project(ph, c);
    for (int j = 0; j < c.height; ++j) {
      for (int i = 0; i < c.width; ++i) {
        const Ray r = pixel_ray(c, i, j);
        const double q = r.hits() ? render_intensity(r, mu, midpoint_sample(r.near, r.far, 512)) : 1.0;
        worst = std::max(worst, std::abs(q - img(j, i)) / img(j, i));
      }
    }
  }
  EXPECT_LT(worst, 0.005);
}

TEST(Project, EnergyBoundProperty) {
  std::mt19937_64 rng(4);
  const AnalyticPhantom ph = limb_phantom();
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Vector3d o = 4.0 * random_direction(rng);
    const Eigen::Vector3d d = (random_point(rng, 0.7) - o).normalized();
    const double I = ph.intensity(o, d);
    ASSERT_GT(I, 0.0);
    ASSERT_LE(I, 1.0);
    bool hit = false;
    for (const auto& p : ph.primitives()) hit = hit || primitive_interval(p.shape, o, d).has_value();
    ASSERT_EQ(I == 1.0, !hit);
  }
}

TEST(Project, SphericalPhantomIsRotationallySymmetric) {
  TrajectoryConfig tc;
  tc.width = tc.height = 32;
  const AnalyticPhantom ph = nested_spheres_phantom();
  const auto cams = make_trajectory(tc);
  const Image ref = project(ph, cams.front());
  for (std::size_t k = 1; k < cams.size(); ++k) {
    EXPECT_LT((project(ph, cams[k]) - ref).cwiseAbs().maxCoeff(), 1e-12) << "view " << k;
  }
}

TEST(Trajectory, ThirtySixViewsTenDegreesApart) {
  TrajectoryConfig tc;
  tc.views = 36;
  tc.step_deg = 10.0;
  const auto cams = make_trajectory(tc);
  ASSERT_EQ(cams.size(), 36u);
  for (std::size_t k = 1; k < cams.size(); ++k) {
    const double c = std::clamp(cams[k].optical_axis().dot(cams[k - 1].optical_axis()), -1.0, 1.0);
    EXPECT_NEAR(std::acos(c) * 180.0 / std::numbers::pi, 10.0, 1e-9);
  }
  EXPECT_LT((cams[0].optical_axis() + cams[18].optical_axis()).norm(), 1e-12);
}

TEST(Trajectory, SourcesOnCircleLookingAtOrigin) {
  TrajectoryConfig tc;
  tc.d_source = 3.7;
  for (const Camera& c : make_trajectory(tc)) {
    EXPECT_NEAR(c.center().norm(), 3.7, 1e-12);
    EXPECT_NEAR(c.center().z(), 0.0, 1e-12);
    EXPECT_LT((c.optical_axis() + c.center().normalized()).norm(), 1e-12);
    EXPECT_NEAR(c.rotation.determinant(), 1.0, 1e-12);
  }
}

TEST(Trajectory, RejectsMoreThanOneTurn) {
  TrajectoryConfig tc;
  tc.views = 37;
  tc.step_deg = 10.0;
  EXPECT_THROW(make_trajectory(tc), std::invalid_argument);
}

TEST(Trajectory, DetectorGeometryFocal) {
  TrajectoryConfig tc;
  tc.detector_width = 2.5;
  tc.width = 480;
  EXPECT_DOUBLE_EQ(trajectory_focal(tc), 5.0 * 480 / 2.5);
  TrajectoryConfig fit;
  const Camera c = make_trajectory(fit).front();
  // The tangent ray to the field sphere lands on the image border.
  const double r = fit.field_radius, d = fit.d_source;
  const double half_angle = std::asin(r / d);
  EXPECT_NEAR(c.fx * std::tan(half_angle), 0.5 * fit.width, 1e-9);
}

TEST(PhantomPreset, KnownNamesAndError) {
  EXPECT_EQ(phantom_preset("sphere").name(), "sphere");
  EXPECT_TRUE(phantom_preset("nested_spheres").has_inner());
  EXPECT_TRUE(phantom_preset("limb").has_inner());
  EXPECT_EQ(phantom_preset("limb").nesting_fraction(1000), 1.0);
  EXPECT_THROW(phantom_preset("teapot"), std::invalid_argument);
}

}  // namespace
}  // namespace neas

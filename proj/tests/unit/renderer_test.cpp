#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "neas/phantom.hpp"
#include "neas/renderer.hpp"
#include "test_support.hpp"

namespace neas {
namespace {

Ray axis_ray(double x0 = -3.0) {
  Ray r;
  r.origin = Eigen::Vector3d(x0, 0, 0);
  r.direction = Eigen::Vector3d::UnitX();
  return clip_to_unit_sphere(r);
}

TEST(StratifiedSample, FourStrataExample) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    const SampleSet s = stratified_sample(0.0, 1.0, 4, rng);
    ASSERT_EQ(s.size(), 4u);
    for (int j = 0; j < 4; ++j) {
      EXPECT_GE(s.t[static_cast<std::size_t>(j)], j / 4.0);
      EXPECT_LT(s.t[static_cast<std::size_t>(j)], (j + 1) / 4.0);
    }
    EXPECT_DOUBLE_EQ(s.delta.back(), 1.0 - s.t.back());
  }
}

TEST(StratifiedSample, MembershipAndOrderProperty) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_int_distribution<int> nd(2, 300);
  for (int trial = 0; trial < 1000; ++trial) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    if (b - a < 1e-3) continue;
    const int n = nd(rng);
    const SampleSet s = stratified_sample(a, b, n, rng);
    const double w = (b - a) / n;
    for (int j = 0; j < n; ++j) {
      const double t = s.t[static_cast<std::size_t>(j)];
      ASSERT_GE(t, a + j * w);
      ASSERT_LT(t, a + (j + 1) * w);
      if (j > 0) {
        ASSERT_GT(t, s.t[static_cast<std::size_t>(j - 1)]);
      }
      ASSERT_GT(s.delta[static_cast<std::size_t>(j)], 0.0);
    }
  }
}

TEST(StratifiedSample, FixedSeedIsBitwiseReproducible) {
  std::mt19937_64 r1(42), r2(42);
  const SampleSet a = stratified_sample(0.3, 2.7, 128, r1);
  const SampleSet b = stratified_sample(0.3, 2.7, 128, r2);
  EXPECT_EQ(a.t, b.t);
  EXPECT_EQ(a.delta, b.delta);
}

TEST(StratifiedSample, MeanDrawIsStratumMidpoint) {
  std::mt19937_64 rng(3);
  const int n = 8, draws = 10000;
  std::vector<double> mean(n, 0.0);
  for (int d = 0; d < draws; ++d) {
    const SampleSet s = stratified_sample(0.0, 1.0, n, rng);
    for (int j = 0; j < n; ++j) mean[static_cast<std::size_t>(j)] += s.t[static_cast<std::size_t>(j)] / draws;
  }
  const double sigma = (1.0 / n) / std::sqrt(12.0) / std::sqrt(static_cast<double>(draws));
  for (int j = 0; j < n; ++j) EXPECT_NEAR(mean[static_cast<std::size_t>(j)], (j + 0.5) / n, 3.0 * sigma);
}

TEST(StratifiedSample, RejectsTooFewSamples) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(stratified_sample(0.0, 1.0, 1, rng), std::invalid_argument);
  EXPECT_THROW(midpoint_sample(1.0, 1.0, 8), std::invalid_argument);
}

TEST(RenderIntensity, EmptySceneIsOne) {
  const Ray r = axis_ray();
  const SampleSet s = midpoint_sample(r.near, r.far, 64);
  EXPECT_EQ(render_intensity(r, [](const Eigen::Vector3d&) { return 0.0; }, s), 1.0);
}

TEST(RenderIntensity, ConstantFieldOverLengthTwo) {
  // Unit-sphere bounds of a central ray: [2, 4], length 2.
  const Ray r = axis_ray();
  ASSERT_NEAR(r.far - r.near, 2.0, 1e-12);
  const auto one = [](const Eigen::Vector3d&) { return 1.0; };
  EXPECT_NEAR(render_intensity(r, one, midpoint_sample(r.near, r.far, 128)), std::exp(-2.0), 0.002);
  std::mt19937_64 rng(5);
  EXPECT_NEAR(render_intensity(r, one, stratified_sample(r.near, r.far, 128, rng)), std::exp(-2.0), 0.002);
}

TEST(RenderIntensity, SphereChordOracle) {
  const AnalyticPhantom ph = sphere_phantom(0.5, 1.0);
  const Ray r = axis_ray();
  const double got = render_intensity(r, [&](const Eigen::Vector3d& x) { return ph.mu(x); }, midpoint_sample(r.near, r.far, 128));
  EXPECT_NEAR(got / std::exp(-2.0 * 0.5), 1.0, 0.005);
}

// Quadrature error against the closed form shrinks like 1/N.
TEST(RenderIntensity, ConstantFieldErrorHalvesWithN) {
  const Ray r = axis_ray();
  const auto one = [](const Eigen::Vector3d&) { return 1.0; };
  double prev = 0.0;
  for (int n = 16; n <= 1024; n *= 2) {
    const double err = std::abs(render_intensity(r, one, midpoint_sample(r.near, r.far, n)) - std::exp(-2.0));
    if (prev > 0.0) {
      EXPECT_NEAR(prev / err, 2.0, 0.4) << "N=" << n;
    }
    prev = err;
  }
}

TEST(RenderIntensity, SmoothFieldConvergesProperty) {
  const Ray r = axis_ray();
  const auto smooth = [](const Eigen::Vector3d& x) { return 1.5 + std::sin(3.0 * x.x()) * 0.5; };
  double prev_gap = std::numeric_limits<double>::infinity();
  for (int n = 8; n <= 1024; n *= 2) {
    const double a = render_intensity(r, smooth, midpoint_sample(r.near, r.far, n));
    const double b = render_intensity(r, smooth, midpoint_sample(r.near, r.far, 2 * n));
    const double gap = std::abs(a - b);
    EXPECT_LT(gap, prev_gap);
    prev_gap = gap;
  }
}

TEST(RenderIntensity, MonotoneAndBoundedProperty) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  const Ray r = axis_ray();
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = u(rng), b = u(rng), c = u(rng), bump = u(rng);
    const auto mu1 = [&](const Eigen::Vector3d& x) { return a + b * x.x() * x.x() + c * std::abs(std::sin(5 * x.x())); };
    const auto mu2 = [&](const Eigen::Vector3d& x) { return mu1(x) + bump * (x.x() > 0 ? 1.0 : 0.5); };
    std::mt19937_64 r1(static_cast<std::uint64_t>(trial)), r2(static_cast<std::uint64_t>(trial));
    const double i1 = render_intensity(r, mu1, stratified_sample(r.near, r.far, 32, r1));
    const double i2 = render_intensity(r, mu2, stratified_sample(r.near, r.far, 32, r2));
    ASSERT_LE(i2, i1);
    ASSERT_GT(i1, 0.0);
    ASSERT_LE(i1, 1.0);
  }
}

TEST(Losses, IntensityExamples) {
  EXPECT_EQ(loss_intensity({0.3, 0.9}, {0.3, 0.9}), 0.0);
  EXPECT_NEAR(loss_intensity({0.6}, {0.5}), 0.01, 1e-15);
  EXPECT_NEAR(loss_intensity({0.6, 0.3}, {0.5, 0.5}), 0.05, 1e-15);
  EXPECT_THROW(loss_intensity({0.1}, {0.1, 0.2}), ShapeError);
  Graph g;
  Matrix p(2, 1), t(2, 1);
  p << 0.6, 0.3;
  t << 0.5, 0.5;
  EXPECT_NEAR(g.item(loss_intensity(g, g.constant(p), t)), 0.05, 1e-15);
  EXPECT_THROW(loss_intensity(g, g.constant(p), Matrix::Zero(3, 1)), ShapeError);
}

TEST(Losses, EikonalExamples) {
  Matrix unit(3, 3);
  unit << 1, 0, 0, 0, 0.6, 0.8, 0, -1, 0;
  EXPECT_NEAR(loss_eikonal(unit), 0.0, 1e-15);
  Matrix two(1, 3);
  two << 0, 2, 0;
  EXPECT_NEAR(loss_eikonal(two), 1.0, 1e-15);
  Matrix pair(2, 3);
  pair << 0, 0, 0, 2, 0, 0;
  EXPECT_NEAR(loss_eikonal(pair), 1.0, 1e-15);
  Graph g;
  EXPECT_NEAR(g.item(loss_eikonal(g, g.constant(pair))), 1.0, 1e-9);
}

TEST(Losses, TotalExamples) {
  EXPECT_NEAR(total_loss(0.5, 0.2, 0.1), 0.52, 1e-15);
  EXPECT_EQ(total_loss(0.37, 5.0, 0.0), 0.37);
  EXPECT_EQ(total_loss(0.0, 0.0, 0.7), 0.0);
  EXPECT_THROW(total_loss(1.0, 1.0, -0.1), std::invalid_argument);
}

TEST(Losses, FiniteDifferenceSdfGradientOfAnalyticField) {
  // A model is not needed to check the probe layout; compare the eikonal
  // probe on a sphere-initialised model against a direct difference.
  ModelConfig cfg;
  cfg.hash.levels = 2;
  cfg.hash.table_size = 1u << 10;
  cfg.sdf_width = 16;
  cfg.feature_dim = 4;
  NeasModel m(cfg, 1);
  Matrix pts(3, 3);
  pts << 0.1, 0.2, 0.3, -0.4, 0.0, 0.5, 0.7, -0.1, 0.0;
  Graph g;
  const auto grads = sdf_gradients(g, m, pts, kUnmasked, 1e-4);
  ASSERT_EQ(grads.size(), 1u);
  for (Index i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) {
      Matrix a = pts.row(i), b = pts.row(i);
      a(0, k) += 1e-4;
      b(0, k) -= 1e-4;
      const double fd = (m.eval_distances(a)(0, 0) - m.eval_distances(b)(0, 0)) / 2e-4;
      EXPECT_NEAR(g.value(grads[0])(i, k), fd, 1e-12);
    }
  }
}

ModelConfig micro(EncodingKind enc, MaterialMode mode) {
  ModelConfig c;
  c.encoding = enc;
  c.materials = mode;
  c.frequency.octaves = 3;
  c.hash.levels = 2;
  c.hash.base_resolution = 4;
  c.hash.max_resolution = 16;
  c.hash.table_size = 1u << 8;
  c.hash.init_range = 0.5;
  c.sdf_width = 8;
  c.att_width = 8;
  c.feature_dim = 4;
  c.sdf_layers = 1;
  c.att_layers = 1;
  c.s_init = 5.0;
  return c;
}

// Ray-to-loss chain on one ray with 8 samples: every model weight against
// central differences.
void end_to_end_gradient(EncodingKind enc, MaterialMode mode) {
  NeasModel m(micro(enc, mode), 3);
  geometric_init(m, {200, 128, 1e-2, 0.0, 1});
  // Move attenuation heads away from zero so every path carries gradient.
  std::mt19937_64 rng(9);
  BatchRay br;
  br.ray = axis_ray(-3.0);
  br.ray.origin.y() = 0.1;
  br.ray = clip_to_unit_sphere(br.ray);
  br.samples = stratified_sample(br.ray.near, br.ray.far, 8, rng);
  Matrix truth(1, 1);
  truth << 0.4;
  auto loss = [&](Graph& g) {
    const RenderOutput out = render_batch(g, m, {br}, 1.5);
    Var l_int = loss_intensity(g, out.intensity, truth);
    const auto grads = sdf_gradients(g, m, g.value(out.points), 1.5);
    Var l_reg = loss_eikonal(g, grads.front());
    if (grads.size() > 1) l_reg = g.add(l_reg, loss_eikonal(g, grads[1]));
    return total_loss(g, l_int, l_reg, 0.1);
  };
  m.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  const auto check = testing::check_gradients(
      [&] {
        Graph g;
        return g.item(loss(g));
      },
      m.parameters(), 1e-6, 1e-6);
  EXPECT_LT(check.max_rel_err, 1e-4) << check.worst;
  EXPECT_GT(check.checked, 100u);
}

TEST(EndToEndGradient, HashSingle) { end_to_end_gradient(EncodingKind::hash, MaterialMode::single); }
TEST(EndToEndGradient, HashDual) { end_to_end_gradient(EncodingKind::hash, MaterialMode::dual); }
TEST(EndToEndGradient, FrequencySingle) { end_to_end_gradient(EncodingKind::frequency, MaterialMode::single); }
TEST(EndToEndGradient, FrequencyDual) { end_to_end_gradient(EncodingKind::frequency, MaterialMode::dual); }

TEST(RenderBatch, MatchesPointwiseQuadrature) {
  NeasModel m(micro(EncodingKind::hash, MaterialMode::single), 4);
  geometric_init(m, {100, 128, 1e-2, 0.0, 1});
  std::mt19937_64 rng(10);
  std::vector<BatchRay> rays;
  for (int k = 0; k < 3; ++k) {
    BatchRay b;
    b.ray = axis_ray(-3.0);
    b.ray.origin.z() = 0.2 * k;
    b.ray = clip_to_unit_sphere(b.ray);
    b.samples = stratified_sample(b.ray.near, b.ray.far, 16, rng);
    rays.push_back(b);
  }
  Graph g;
  const RenderOutput out = render_batch(g, m, rays, kUnmasked);
  for (std::size_t k = 0; k < rays.size(); ++k) {
    const double ref = render_intensity(
        rays[k].ray,
        [&](const Eigen::Vector3d& x) {
          Matrix p(1, 3);
          p.row(0) = x.transpose();
          return m.eval_attenuation(p)(0, 0);
        },
        rays[k].samples);
    EXPECT_NEAR(g.value(out.intensity)(static_cast<Index>(k), 0), ref, 1e-13);
  }
}

TEST(RenderBatch, PoseGradientMatchesFiniteDifferences) {
  NeasModel m(micro(EncodingKind::frequency, MaterialMode::single), 5);
  geometric_init(m, {100, 128, 1e-2, 0.0, 1});
  TrajectoryConfig tc;
  tc.views = 3;
  tc.step_deg = 40;
  CameraRig rig(make_trajectory(tc));
  std::mt19937_64 rng(11);
  std::vector<BatchRay> rays;
  for (int k = 0; k < 6; ++k) {
    BatchRay b;
    b.view = static_cast<std::size_t>(k % 3);
    b.u = 28.5 + k;
    b.v = 30.5 - k;
    b.ray = generate_ray(rig.camera(b.view), b.u, b.v);
    b.samples = stratified_sample(b.ray.near, b.ray.far, 8, rng);
    rays.push_back(b);
  }
  Matrix truth = Matrix::Constant(6, 1, 0.5);
  auto loss = [&](Graph& g) { return loss_intensity(g, render_batch(g, m, rays, kUnmasked, &rig).intensity, truth); };
  {
    Graph g;
    g.backward(loss(g));
  }
  const auto check = testing::check_gradients(
      [&] {
        Graph g;
        return g.item(loss(g));
      },
      {&rig.translations(), &rig.principal()}, 1e-6, 1e-6);
  EXPECT_LT(check.max_rel_err, 1e-4) << check.worst;
}

}  // namespace
}  // namespace neas

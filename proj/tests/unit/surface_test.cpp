#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <numbers>
#include <random>

#include "neas/surface.hpp"

namespace neas {
namespace {

double signed_volume(const TriMesh& m) {
  double v = 0.0;
  for (const auto& f : m.faces) {
    v += m.vertices[static_cast<std::size_t>(f[0])].dot(
             m.vertices[static_cast<std::size_t>(f[1])].cross(m.vertices[static_cast<std::size_t>(f[2])])) /
         6.0;
  }
  return v;
}

PointCloud random_cloud(std::size_t n, std::mt19937_64& rng, double half = 1.0) {
  std::uniform_real_distribution<double> u(-half, half);
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) pc.emplace_back(u(rng), u(rng), u(rng));
  return pc;
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng)).normalized().toRotationMatrix();
}

TEST(MarchingCubes, SphereVerticesWithinOneSpacing) {
  const ScalarGrid grid = sample_grid(64, [](const Eigen::Vector3d& x) { return x.norm() - 0.5; });
  const TriMesh m = marching_cubes(grid);
  ASSERT_FALSE(m.empty());
  const double h = grid.spacing();
  for (const auto& v : m.vertices) {
    ASSERT_GE(v.norm(), 0.5 - h);
    ASSERT_LE(v.norm(), 0.5 + h);
  }
}

TEST(MarchingCubes, AllPositiveFieldGivesEmptyMesh) {
  const ScalarGrid grid = sample_grid(16, [](const Eigen::Vector3d&) { return 1.0; });
  const TriMesh m = marching_cubes(grid);
  EXPECT_TRUE(m.empty());
  EXPECT_TRUE(m.vertices.empty());
}

TEST(MarchingCubes, PlaneIsExact) {
  // Offset so the plane cuts edges rather than landing on lattice nodes.
  const ScalarGrid grid = sample_grid(17, [](const Eigen::Vector3d& x) { return x.x() - 0.03; });
  const TriMesh m = marching_cubes(grid);
  ASSERT_FALSE(m.empty());
  for (const auto& v : m.vertices) ASSERT_NEAR(v.x(), 0.03, 1e-12);
  double area = 0.0;
  for (std::size_t f = 0; f < m.faces.size(); ++f) area += m.area(f);
  EXPECT_NEAR(area, 4.0, 1e-9);
}

TEST(MarchingCubes, ClosedSurfaceIsWatertightAndOutward) {
  const ScalarGrid grid = sample_grid(40, [](const Eigen::Vector3d& x) {
    return std::max({std::abs(x.x()) - 0.4, std::abs(x.y()) - 0.3, std::abs(x.z()) - 0.5}) * 0.5 +
           0.5 * ((x - Eigen::Vector3d(0.1, 0, 0)).norm() - 0.45);
  });
  const TriMesh m = marching_cubes(grid);
  std::map<std::pair<int, int>, int> directed;
  for (const auto& f : m.faces) {
    for (int e = 0; e < 3; ++e) ++directed[{f[static_cast<std::size_t>(e)], f[static_cast<std::size_t>((e + 1) % 3)]}];
  }
  // Every directed edge appears once and its reverse appears once.
  for (const auto& [edge, count] : directed) {
    ASSERT_EQ(count, 1);
    ASSERT_EQ(directed.count({edge.second, edge.first}), 1u);
  }
  EXPECT_GT(signed_volume(m), 0.0);
  // Euler characteristic of a sphere.
  EXPECT_EQ(static_cast<long>(m.vertices.size()) - static_cast<long>(directed.size() / 2) +
                static_cast<long>(m.faces.size()),
            2);
}

TEST(MarchingCubes, SphereVolumeAndNoDegenerateFaces) {
  const ScalarGrid grid = sample_grid(48, [](const Eigen::Vector3d& x) { return x.norm() - 0.6; });
  const TriMesh m = marching_cubes(grid);
  EXPECT_NEAR(signed_volume(m), 4.0 / 3.0 * std::numbers::pi * 0.216, 0.01);
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    ASSERT_GT(m.area(f), 1e-12);
    for (int idx : m.faces[f]) ASSERT_LT(static_cast<std::size_t>(idx), m.vertices.size());
  }
}

// Vertex-to-surface distance stays within one grid spacing for random
// primitives.
TEST(MarchingCubes, PrimitiveFidelityProperty) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.3, 0.3), r(0.1, 0.4);
  for (int trial = 0; trial < 12; ++trial) {
    Shape3 s;
    switch (trial % 3) {
      case 0: s = SpherePrim{{u(rng), u(rng), u(rng)}, r(rng)}; break;
      case 1: s = BoxPrim{{u(rng), u(rng), u(rng)}, {r(rng), r(rng), r(rng)}}; break;
      default: s = CapsulePrim{{u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)}, r(rng) * 0.6}; break;
    }
    const ScalarGrid grid = sample_grid(33, [&](const Eigen::Vector3d& x) { return primitive_sdf(s, x); });
    const TriMesh m = marching_cubes(grid);
    ASSERT_FALSE(m.empty());
    for (const auto& v : m.vertices) ASSERT_LE(std::abs(primitive_sdf(s, v)), grid.spacing()) << primitive_kind(s);
  }
}

TEST(Ply, RoundTrip) {
  const TriMesh m = marching_cubes(sample_grid(12, [](const Eigen::Vector3d& x) { return x.norm() - 0.5; }));
  const auto path = std::filesystem::temp_directory_path() / "neas_surface_roundtrip.ply";
  write_ply(path, m);
  const TriMesh back = read_ply(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.faces, m.faces);
  ASSERT_EQ(back.vertices.size(), m.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i) EXPECT_EQ(back.vertices[i], m.vertices[i]);
}

TEST(SampleSurface, PointsLieOnMeshAndAreSeeded) {
  const TriMesh m = marching_cubes(sample_grid(32, [](const Eigen::Vector3d& x) { return x.norm() - 0.5; }));
  const PointCloud a = sample_surface(m, 2000, 5), b = sample_surface(m, 2000, 5);
  EXPECT_EQ(a, b);
  for (const auto& p : a) ASSERT_NEAR(p.norm(), 0.5, 2.0 / 31);
}

TEST(Chamfer, Examples) {
  std::mt19937_64 rng(2);
  const PointCloud a = random_cloud(50, rng);
  EXPECT_EQ(chamfer_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(chamfer_distance({Eigen::Vector3d::Zero()}, {Eigen::Vector3d::UnitX()}), 1.0);
  EXPECT_THROW(chamfer_distance({}, a), std::invalid_argument);
}

double brute_chamfer(const PointCloud& a, const PointCloud& b) {
  auto directed = [](const PointCloud& p, const PointCloud& q) {
    double s = 0.0;
    for (const auto& x : p) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& y : q) best = std::min(best, (x - y).squaredNorm());
      s += std::sqrt(best);
    }
    return s / static_cast<double>(p.size());
  };
  return 0.5 * (directed(a, b) + directed(b, a));
}

TEST(Chamfer, TenPointCloudsMatchBruteForce) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 1000; ++k) {
    const PointCloud a = random_cloud(10, rng), b = random_cloud(10, rng);
    ASSERT_EQ(chamfer_distance(a, b), brute_chamfer(a, b));
  }
}

TEST(Chamfer, SymmetryProperty) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> n(1, 60);
  for (int k = 0; k < 1000; ++k) {
    const PointCloud a = random_cloud(n(rng), rng), b = random_cloud(n(rng), rng);
    ASSERT_NEAR(chamfer_distance(a, b), chamfer_distance(b, a), 1e-15);
    ASSERT_EQ(chamfer_distance(a, a), 0.0);
  }
}

TEST(KdTree, AgreesWithBruteForceOnLargeClouds) {
  std::mt19937_64 rng(5);
  const PointCloud pts = random_cloud(5000, rng);
  const KdTree tree(pts);
  for (const auto& q : random_cloud(2000, rng, 1.3)) {
    const auto a = tree.nearest(q), b = tree.nearest_brute(q);
    ASSERT_EQ(a.first, b.first);
    ASSERT_EQ(a.second, b.second);
  }
}

TEST(KdTree, TiesGoToLowestIndex) {
  const PointCloud pts = {Eigen::Vector3d(1, 0, 0), Eigen::Vector3d(-1, 0, 0), Eigen::Vector3d(1, 0, 0)};
  EXPECT_EQ(KdTree(pts).nearest(Eigen::Vector3d::Zero()).first, 0u);
  PointCloud many;
  for (int i = 0; i < 3000; ++i) many.emplace_back(0.5, 0.5, 0.5);
  EXPECT_EQ(KdTree(many).nearest(Eigen::Vector3d::Zero()).first, 0u);
}

TEST(Umeyama, IdentityOnIdenticalClouds) {
  std::mt19937_64 rng(6);
  const PointCloud a = random_cloud(20, rng);
  const SimilarityTransform T = umeyama_align(a, a);
  EXPECT_NEAR(T.scale, 1.0, 1e-12);
  EXPECT_LT((T.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(T.translation.norm(), 1e-12);
}

TEST(Umeyama, RecoversKnownSimilarityProperty) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  for (int k = 0; k < 1000; ++k) {
    const PointCloud src = random_cloud(12, rng);
    SimilarityTransform truth{2.0, random_rotation(rng), Eigen::Vector3d(n(rng), n(rng), n(rng))};
    const SimilarityTransform T = umeyama_align(src, truth.apply(src));
    ASSERT_NEAR(T.scale, 2.0, 1e-9);
    ASSERT_LT((T.rotation - truth.rotation).cwiseAbs().maxCoeff(), 1e-9);
    ASSERT_LT((T.translation - truth.translation).cwiseAbs().maxCoeff(), 1e-9);
    ASSERT_NEAR(T.rotation.determinant(), 1.0, 1e-9);
  }
}

TEST(Umeyama, ReflectedTargetStillGivesProperRotation) {
  std::mt19937_64 rng(8);
  const PointCloud src = random_cloud(30, rng);
  PointCloud dst;
  for (const auto& p : src) dst.emplace_back(-p.x(), p.y(), p.z());
  const SimilarityTransform T = umeyama_align(src, dst);
  EXPECT_NEAR(T.rotation.determinant(), 1.0, 1e-9);
  EXPECT_LT((T.rotation.transpose() * T.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_GT(T.scale, 0.0);
}

TEST(Umeyama, LocalOptimalityProbe) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  const PointCloud src = random_cloud(40, rng);
  SimilarityTransform truth{1.3, random_rotation(rng), Eigen::Vector3d(0.2, -0.1, 0.5)};
  PointCloud dst = truth.apply(src);
  for (auto& p : dst) p += 0.05 * Eigen::Vector3d(n(rng), n(rng), n(rng));
  const SimilarityTransform T = umeyama_align(src, dst);
  const double best = alignment_residual(T, src, dst);
  for (int k = 0; k < 100; ++k) {
    SimilarityTransform P = T;
    P.scale *= 1.0 + 0.01 * n(rng);
    const Eigen::Vector3d w = 0.01 * Eigen::Vector3d(n(rng), n(rng), n(rng));
    P.rotation = Eigen::AngleAxisd(w.norm(), w.normalized()).toRotationMatrix() * P.rotation;
    P.translation += 0.01 * Eigen::Vector3d(n(rng), n(rng), n(rng));
    EXPECT_LE(best, alignment_residual(P, src, dst));
  }
}

TEST(Umeyama, CollinearPointsRejected) {
  const PointCloud line = {Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(1, 1, 1), Eigen::Vector3d(2, 2, 2),
                           Eigen::Vector3d(-1, -1, -1)};
  EXPECT_THROW(umeyama_align(line, line), std::invalid_argument);
  EXPECT_THROW(umeyama_align({Eigen::Vector3d::Zero()}, {Eigen::Vector3d::Zero()}), std::invalid_argument);
}

TEST(Icp, RecoversSmallSimilarityOnSphere) {
  const TriMesh m = marching_cubes(sample_grid(40, [](const Eigen::Vector3d& x) {
    return std::max({std::abs(x.x()) - 0.5, std::abs(x.y()) - 0.3, std::abs(x.z()) - 0.2});
  }));
  const PointCloud dst = sample_surface(m, 3000, 1);
  const SimilarityTransform truth{1.05, Eigen::AngleAxisd(0.08, Eigen::Vector3d::UnitZ()).toRotationMatrix(),
                                  Eigen::Vector3d(0.02, -0.01, 0.03)};
  SimilarityTransform inv{1.0 / truth.scale, truth.rotation.transpose(), Eigen::Vector3d::Zero()};
  inv.translation = -inv.scale * (inv.rotation * truth.translation);
  const PointCloud src = inv.apply(sample_surface(m, 3000, 2));
  const SimilarityTransform T = icp_align(src, dst);
  EXPECT_LT(chamfer_distance(T.apply(src), dst), 0.5 * chamfer_distance(src, dst));
  EXPECT_NEAR(T.scale, 1.05, 0.01);
}

TEST(ImageMetrics, PsnrExamples) {
  Image a = Image::Constant(8, 8, 0.5);
  EXPECT_EQ(psnr(a, a), std::numeric_limits<double>::infinity());
  EXPECT_NEAR(psnr(a, Image::Constant(8, 8, 0.6)), 20.0, 1e-9);
  EXPECT_NEAR(psnr(a, Image::Constant(8, 8, 0.5 + std::sqrt(1e-5))), 50.0, 1e-9);
  EXPECT_THROW(psnr(a, Image::Constant(8, 9, 0.5)), ShapeError);
}

TEST(ImageMetrics, SsimExamples) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0, 1);
  Image a(24, 20);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);

  Image check(16, 16);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) check(y, x) = (x + y) % 2;
  }
  const Image neg = Image::Ones(16, 16) - check;
  EXPECT_LT(ssim(check, neg), 0.0);

  // Constants: variances vanish, leaving the luminance term.
  const double m1 = 0.3, m2 = 0.7, C1 = 1e-4;
  EXPECT_NEAR(ssim(Image::Constant(12, 12, m1), Image::Constant(12, 12, m2)),
              (2 * m1 * m2 + C1) / (m1 * m1 + m2 * m2 + C1), 1e-12);

  EXPECT_THROW(ssim(Image::Zero(10, 10), Image::Zero(10, 10)), ShapeError);
  EXPECT_THROW(ssim(Image::Zero(12, 12), Image::Zero(12, 13)), ShapeError);
}

TEST(ImageMetrics, SsimBoundedProperty) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int k = 0; k < 1000; ++k) {
    Image a(11, 11), b(11, 11);
    for (Index i = 0; i < a.size(); ++i) {
      a.data()[i] = u(rng);
      b.data()[i] = u(rng);
    }
    const double s = ssim(a, b);
    ASSERT_GE(s, -1.0);
    ASSERT_LE(s, 1.0);
    ASSERT_NEAR(s, ssim(b, a), 1e-12);
  }
}

ModelConfig tiny_model(MaterialMode mode) {
  ModelConfig c;
  c.materials = mode;
  c.hash.levels = 4;
  c.hash.max_resolution = 64;
  c.hash.table_size = 1u << 12;
  c.sdf_width = 32;
  c.feature_dim = 8;
  c.att_width = 16;
  return c;
}

TEST(SdfGridEval, InitialisedModelExtractsInitSphere) {
  NeasModel m(tiny_model(MaterialMode::single), 1);
  geometric_init(m);
  const ScalarGrid grid = sdf_grid_eval(m, 48);
  const TriMesh mesh = marching_cubes(grid);
  ASSERT_FALSE(mesh.empty());
  double mean_r = 0.0;
  for (const auto& v : mesh.vertices) mean_r += v.norm();
  mean_r /= static_cast<double>(mesh.vertices.size());
  EXPECT_NEAR(mean_r, m.config().r_init, 0.05);
  EXPECT_GT(signed_volume(mesh), 0.0);
}

TEST(SdfGridEval, DeterministicAndCapabilityChecked) {
  NeasModel single(tiny_model(MaterialMode::single), 2);
  EXPECT_EQ(sdf_grid_eval(single, 12).values, sdf_grid_eval(single, 12).values);
  EXPECT_THROW(sdf_grid_eval(single, 12, Surface::inner), CapabilityError);
  NeasModel dual(tiny_model(MaterialMode::dual), 2);
  EXPECT_NO_THROW(sdf_grid_eval(dual, 12, Surface::inner));
}

}  // namespace
}  // namespace neas

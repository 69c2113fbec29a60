#pragma once

// Iso-surface extraction and the geometric and image metrics.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "neas/dataset.hpp"
#include "neas/fields.hpp"
#include "neas/mc_tables.hpp"
#include "neas/phantom.hpp"

namespace neas {

using PointCloud = std::vector<Eigen::Vector3d>;

struct TriMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> faces;

  bool empty() const { return faces.empty(); }
  double area(std::size_t f) const {
    const auto& t = faces[f];
    return 0.5 * (vertices[static_cast<std::size_t>(t[1])] - vertices[static_cast<std::size_t>(t[0])])
                     .cross(vertices[static_cast<std::size_t>(t[2])] - vertices[static_cast<std::size_t>(t[0])])
                     .norm();
  }
};

/// Samples on a G^3 lattice spanning [lo, hi]^3; x varies fastest.
struct ScalarGrid {
  int G = 0;
  double lo = -1.0, hi = 1.0;
  std::vector<double> values;

  double spacing() const { return (hi - lo) / (G - 1); }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(G) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(G) * k);
  }
  double at(int i, int j, int k) const { return values[index(i, j, k)]; }
  Eigen::Vector3d position(int i, int j, int k) const {
    const double h = spacing();
    return {lo + i * h, lo + j * h, lo + k * h};
  }
};

inline Matrix lattice_points(int G, double lo = -1.0, double hi = 1.0) {
  Matrix pts(static_cast<Index>(G) * G * G, 3);
  const double h = (hi - lo) / (G - 1);
  Index r = 0;
  for (int k = 0; k < G; ++k) {
    for (int j = 0; j < G; ++j) {
      for (int i = 0; i < G; ++i, ++r) pts.row(r) << lo + i * h, lo + j * h, lo + k * h;
    }
  }
  return pts;
}

template <class F>
ScalarGrid sample_grid(int G, F&& field, double lo = -1.0, double hi = 1.0) {
  if (G < 2) throw std::invalid_argument("sample_grid: need G >= 2");
  ScalarGrid grid{G, lo, hi, {}};
  grid.values.resize(static_cast<std::size_t>(G) * G * G);
  for (int k = 0; k < G; ++k) {
    for (int j = 0; j < G; ++j) {
      for (int i = 0; i < G; ++i) grid.values[grid.index(i, j, k)] = field(grid.position(i, j, k));
    }
  }
  return grid;
}

/// Model distances on the lattice. The inner surface needs a two-material
/// model.
inline ScalarGrid sdf_grid_eval(NeasModel& model, int G, Surface which = Surface::outer) {
  if (which == Surface::inner && !model.dual()) {
    throw CapabilityError("sdf_grid_eval: the inner surface needs a two-material (2M) model");
  }
  const Matrix d = model.eval_distances(lattice_points(G));
  ScalarGrid grid{G, -1.0, 1.0, {}};
  const Index col = which == Surface::inner ? 1 : 0;
  grid.values.resize(static_cast<std::size_t>(d.rows()));
  for (Index i = 0; i < d.rows(); ++i) grid.values[static_cast<std::size_t>(i)] = d(i, col);
  return grid;
}

inline ScalarGrid phantom_grid(const AnalyticPhantom& ph, int G, Surface which = Surface::outer) {
  return sample_grid(G, [&](const Eigen::Vector3d& x) { return ph.sdf(x, which); });
}

// ---------------------------------------------------------------------------
// Marching cubes

namespace detail {
// Corner offsets and edge endpoints in the table's numbering.
inline constexpr std::array<std::array<int, 3>, 8> kCorner{{
    {0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1},
}};
inline constexpr std::array<std::array<int, 2>, 12> kEdge{{
    {0, 1}, {1, 2}, {3, 2}, {0, 3}, {4, 5}, {5, 6}, {7, 6}, {4, 7}, {0, 4}, {1, 5}, {2, 6}, {3, 7},
}};
}  // namespace detail

/// Triangulates the level set {field = iso}. Vertices on shared lattice edges
/// are shared between cells. Faces are wound so normals point towards
/// increasing field values.
inline TriMesh marching_cubes(const ScalarGrid& grid, double iso = 0.0) {
  const int G = grid.G;
  if (G < 2) throw std::invalid_argument("marching_cubes: grid too small");
  for (double v : grid.values) {
    if (!std::isfinite(v)) throw std::invalid_argument("marching_cubes: field contains non-finite values");
  }
  TriMesh mesh;
  std::unordered_map<std::uint64_t, int> edge_vertex;
  auto vertex_on = [&](int i, int j, int k, int e) {
    const auto& c0 = detail::kCorner[static_cast<std::size_t>(detail::kEdge[static_cast<std::size_t>(e)][0])];
    const auto& c1 = detail::kCorner[static_cast<std::size_t>(detail::kEdge[static_cast<std::size_t>(e)][1])];
    const int ai = i + c0[0], aj = j + c0[1], ak = k + c0[2];
    const int bi = i + c1[0], bj = j + c1[1], bk = k + c1[2];
    const int axis = bi != ai ? 0 : (bj != aj ? 1 : 2);
    const std::uint64_t key = 3 * static_cast<std::uint64_t>(grid.index(ai, aj, ak)) + static_cast<std::uint64_t>(axis);
    if (auto it = edge_vertex.find(key); it != edge_vertex.end()) return it->second;
    const double va = grid.at(ai, aj, ak), vb = grid.at(bi, bj, bk);
    const double t = vb != va ? (iso - va) / (vb - va) : 0.5;
    const Eigen::Vector3d pa = grid.position(ai, aj, ak), pb = grid.position(bi, bj, bk);
    mesh.vertices.push_back(pa + t * (pb - pa));
    const int id = static_cast<int>(mesh.vertices.size()) - 1;
    edge_vertex.emplace(key, id);
    return id;
  };
  for (int k = 0; k + 1 < G; ++k) {
    for (int j = 0; j + 1 < G; ++j) {
      for (int i = 0; i + 1 < G; ++i) {
        unsigned cube = 0;
        for (int c = 0; c < 8; ++c) {
          const auto& o = detail::kCorner[static_cast<std::size_t>(c)];
          if (grid.at(i + o[0], j + o[1], k + o[2]) < iso) cube |= 1u << c;
        }
        if (mc::kEdgeTable[cube] == 0) continue;
        const auto& tri = mc::kTriTable[cube];
        for (int t = 0; t + 2 < 16 && tri[static_cast<std::size_t>(t)] != -1; t += 3) {
          std::array<int, 3> f{};
          for (int q = 0; q < 3; ++q) f[static_cast<std::size_t>(q)] = vertex_on(i, j, k, tri[static_cast<std::size_t>(t + q)]);
          // The table winds the other way round from our convention.
          std::swap(f[1], f[2]);
          if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
          mesh.faces.push_back(f);
          if (mesh.area(mesh.faces.size() - 1) <= 1e-12) mesh.faces.pop_back();
        }
      }
    }
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// PLY

inline void write_ply(const std::filesystem::path& path, const TriMesh& mesh) {
  std::ostringstream out;
  out.precision(17);
  out << "ply\nformat ascii 1.0\nelement vertex " << mesh.vertices.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nelement face " << mesh.faces.size()
      << "\nproperty list uchar int vertex_indices\nend_header\n";
  for (const auto& v : mesh.vertices) out << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& f : mesh.faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  atomic_write(path, out.str());
}

/// Reads the ASCII PLY subset that write_ply produces (triangles only).
inline TriMesh read_ply(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t nv = 0, nf = 0;
  if (!std::getline(in, line) || line != "ply") throw IoError(concat("'", path.string(), "' is not a PLY file"));
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw IoError(concat("'", path.string(), "': only ASCII PLY is supported"));
    } else if (word == "element") {
      std::string what;
      std::size_t n = 0;
      ls >> what >> n;
      (what == "vertex" ? nv : nf) = n;
    } else if (word == "end_header") {
      break;
    }
  }
  TriMesh mesh;
  for (std::size_t i = 0; i < nv; ++i) {
    Eigen::Vector3d v;
    if (!(in >> v.x() >> v.y() >> v.z())) throw IoError(concat("'", path.string(), "': truncated vertex list"));
    std::getline(in, line);
    mesh.vertices.push_back(v);
  }
  for (std::size_t i = 0; i < nf; ++i) {
    int n = 0;
    std::array<int, 3> f{};
    if (!(in >> n >> f[0] >> f[1] >> f[2]) || n != 3) throw IoError(concat("'", path.string(), "': bad face ", i));
    for (int idx : f) {
      if (idx < 0 || static_cast<std::size_t>(idx) >= nv) throw IoError(concat("'", path.string(), "': face index out of range"));
    }
    mesh.faces.push_back(f);
  }
  return mesh;
}

/// Points drawn uniformly over the surface (triangle chosen by area).
inline PointCloud sample_surface(const TriMesh& mesh, std::size_t count = 10000, std::uint64_t seed = 0) {
  if (mesh.empty()) throw std::invalid_argument("sample_surface: empty mesh");
  std::vector<double> cdf(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) cdf[f] = (total += mesh.area(f));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointCloud out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const double pick = u(rng) * total;
    const std::size_t f = std::min<std::size_t>(
        static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), pick) - cdf.begin()), cdf.size() - 1);
    double a = u(rng), b = u(rng);
    if (a + b > 1.0) {
      a = 1.0 - a;
      b = 1.0 - b;
    }
    const auto& t = mesh.faces[f];
    const Eigen::Vector3d& p0 = mesh.vertices[static_cast<std::size_t>(t[0])];
    out.push_back(p0 + a * (mesh.vertices[static_cast<std::size_t>(t[1])] - p0) +
                  b * (mesh.vertices[static_cast<std::size_t>(t[2])] - p0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nearest neighbours

class KdTree {
 public:
  static constexpr std::size_t kBruteForceBelow = 1000;

  explicit KdTree(const PointCloud& pts) : pts_(pts), order_(pts.size()) {
    std::iota(order_.begin(), order_.end(), 0);
    if (pts_.size() >= kBruteForceBelow) {
      nodes_.reserve(pts_.size());
      root_ = build(0, order_.size(), 0);
    }
  }

  /// Index of the closest point and its squared distance. Ties resolve to
  /// the lowest index, in both the tree and the brute-force path.
  std::pair<std::size_t, double> nearest(const Eigen::Vector3d& q) const {
    if (pts_.empty()) throw std::invalid_argument("KdTree::nearest: empty cloud");
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    if (root_ < 0) {
      for (std::size_t i = 0; i < pts_.size(); ++i) consider(i, q, best, best_d);
    } else {
      search(root_, q, best, best_d);
    }
    return {best, best_d};
  }

  std::pair<std::size_t, double> nearest_brute(const Eigen::Vector3d& q) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pts_.size(); ++i) consider(i, q, best, best_d);
    return {best, best_d};
  }

 private:
  struct Node {
    std::size_t point;
    int axis;
    int left = -1, right = -1;
  };

  void consider(std::size_t i, const Eigen::Vector3d& q, std::size_t& best, double& best_d) const {
    const double d = (pts_[i] - q).squaredNorm();
    if (d < best_d || (d == best_d && i < best)) {
      best_d = d;
      best = i;
    }
  }

  int build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::size_t a, std::size_t b) { return pts_[a][axis] < pts_[b][axis]; });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({order_[mid], axis});
    const int l = build(lo, mid, depth + 1);
    const int r = build(mid + 1, hi, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  void search(int id, const Eigen::Vector3d& q, std::size_t& best, double& best_d) const {
    if (id < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    consider(n.point, q, best, best_d);
    const double diff = q[n.axis] - pts_[n.point][n.axis];
    const int near = diff < 0.0 ? n.left : n.right;
    const int far = diff < 0.0 ? n.right : n.left;
    search(near, q, best, best_d);
    if (diff * diff <= best_d) search(far, q, best, best_d);
  }

  const PointCloud& pts_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

/// Mean nearest-neighbour distance from every point of a to cloud b.
inline double mean_nearest(const PointCloud& a, const PointCloud& b) {
  const KdTree tree(b);
  double sum = 0.0;
  for (const auto& p : a) sum += std::sqrt(tree.nearest(p).second);
  return sum / static_cast<double>(a.size());
}

/// Symmetric Chamfer distance: half the sum of the two directed means.
inline double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer_distance: empty point cloud");
  return 0.5 * (mean_nearest(a, b) + mean_nearest(b, a));
}

// ---------------------------------------------------------------------------
// Similarity alignment

struct SimilarityTransform {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return scale * (rotation * x) + translation; }
  PointCloud apply(const PointCloud& pts) const {
    PointCloud out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(apply(p));
    return out;
  }
  /// this after other.
  SimilarityTransform compose(const SimilarityTransform& other) const {
    return {scale * other.scale, rotation * other.rotation, scale * (rotation * other.translation) + translation};
  }
};

/// Closed-form least-squares similarity (or rigid, without scale) mapping
/// src[i] onto dst[i].
inline SimilarityTransform umeyama_align(const PointCloud& src, const PointCloud& dst, bool with_scale = true) {
  if (src.size() != dst.size()) throw std::invalid_argument("umeyama_align: correspondence counts differ");
  if (src.size() < 3) throw std::invalid_argument("umeyama_align: need at least 3 correspondences");
  const double n = static_cast<double>(src.size());
  Eigen::Vector3d ms = Eigen::Vector3d::Zero(), md = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    ms += src[i];
    md += dst[i];
  }
  ms /= n;
  md /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero(), spread = Eigen::Matrix3d::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Eigen::Vector3d a = src[i] - ms, b = dst[i] - md;
    cov += b * a.transpose();
    spread += a * a.transpose();
    var_s += a.squaredNorm();
  }
  cov /= n;
  var_s /= n;
  const Eigen::Vector3d sv = Eigen::JacobiSVD<Eigen::Matrix3d>(spread).singularValues();
  if (!(sv[1] > 1e-12 * std::max(sv[0], 1e-300))) {
    throw std::invalid_argument("umeyama_align: source points are collinear or coincident");
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
  SimilarityTransform T;
  T.rotation = svd.matrixU() * S * svd.matrixV().transpose();
  T.scale = with_scale ? (svd.singularValues().asDiagonal() * S).trace() / var_s : 1.0;
  T.translation = md - T.scale * T.rotation * ms;
  return T;
}

inline double alignment_residual(const SimilarityTransform& T, const PointCloud& src, const PointCloud& dst) {
  double sum = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) sum += (T.apply(src[i]) - dst[i]).squaredNorm();
  return sum;
}

struct IcpOptions {
  int max_iterations = 50;
  double tolerance = 1e-9;  // stop when the mean error changes less than this
  bool with_scale = true;
};

/// Iterative closest point: re-matches src to its nearest dst points and
/// re-solves the similarity until the mean error settles.
inline SimilarityTransform icp_align(const PointCloud& src, const PointCloud& dst, const IcpOptions& opt = {}) {
  if (src.empty() || dst.empty()) throw std::invalid_argument("icp_align: empty point cloud");
  const KdTree tree(dst);
  SimilarityTransform T;
  double prev = std::numeric_limits<double>::infinity();
  PointCloud matched(src.size());
  for (int it = 0; it < opt.max_iterations; ++it) {
    double err = 0.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      const auto [idx, d2] = tree.nearest(T.apply(src[i]));
      matched[i] = dst[idx];
      err += std::sqrt(d2);
    }
    err /= static_cast<double>(src.size());
    if (std::abs(prev - err) < opt.tolerance) break;
    prev = err;
    T = umeyama_align(src, matched, opt.with_scale);
  }
  return T;
}

// ---------------------------------------------------------------------------
// Image metrics

inline void require_same_shape(const Image& a, const Image& b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(concat(who, ": image shapes differ ([", a.rows(), "x", a.cols(), "] vs [", b.rows(), "x", b.cols(), "])"));
  }
}

/// Peak signal-to-noise ratio in dB; identical images give +infinity.
inline double psnr(const Image& a, const Image& b, double max_val = 1.0) {
  require_same_shape(a, b, "psnr");
  const double mse = (a - b).array().square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over all fully covered windows.
inline double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  constexpr int kW = 11;
  if (a.rows() < kW || a.cols() < kW) throw ShapeError("ssim: images must be at least 11x11");
  std::array<double, kW> g{};
  double gs = 0.0;
  for (int i = 0; i < kW; ++i) gs += (g[static_cast<std::size_t>(i)] = std::exp(-((i - 5) * (i - 5)) / (2.0 * 1.5 * 1.5)));
  for (double& v : g) v /= gs;
  const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double sum = 0.0;
  Index count = 0;
  for (Index y = 0; y + kW <= a.rows(); ++y) {
    for (Index x = 0; x + kW <= a.cols(); ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int j = 0; j < kW; ++j) {
        for (int i = 0; i < kW; ++i) {
          const double w = g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(j)];
          const double va = a(y + j, x + i), vb = b(y + j, x + i);
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * va * vb;
        }
      }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cab = sab - ma * mb;
      sum += ((2 * ma * mb + C1) * (2 * cab + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

}  // namespace neas

#pragma once

// Analytic phantoms built from spheres, boxes and capsules, an exact
// cone-beam projector, and circular acquisition trajectories.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "neas/fields.hpp"
#include "neas/posecal.hpp"

namespace neas {

enum class Label { outer, inner };

struct SpherePrim {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.5;
};

struct BoxPrim {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half = Eigen::Vector3d::Constant(0.25);
};

struct CapsulePrim {
  Eigen::Vector3d a = Eigen::Vector3d::Zero();
  Eigen::Vector3d b = Eigen::Vector3d::UnitX();
  double radius = 0.1;
};

using Shape3 = std::variant<SpherePrim, BoxPrim, CapsulePrim>;

struct Primitive {
  Shape3 shape;
  Label label = Label::outer;
  double mu = 1.0;
};

using Interval = std::pair<double, double>;

inline double primitive_sdf(const Shape3& s, const Eigen::Vector3d& x) {
  return std::visit(
      [&](const auto& p) -> double {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SpherePrim>) {
          return (x - p.center).norm() - p.radius;
        } else if constexpr (std::is_same_v<T, BoxPrim>) {
          const Eigen::Vector3d q = (x - p.center).cwiseAbs() - p.half;
          return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
        } else {
          const Eigen::Vector3d ab = p.b - p.a;
          const double h = std::clamp((x - p.a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
          return (x - p.a - h * ab).norm() - p.radius;
        }
      },
      s);
}

namespace detail {

inline std::optional<Interval> box_interval(const BoxPrim& b, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    const double lo = b.center[k] - b.half[k], hi = b.center[k] + b.half[k];
    if (d[k] == 0.0) {
      if (o[k] < lo || o[k] > hi) return std::nullopt;
      continue;
    }
    double a = (lo - o[k]) / d[k], c = (hi - o[k]) / d[k];
    if (a > c) std::swap(a, c);
    t0 = std::max(t0, a);
    t1 = std::min(t1, c);
  }
  if (!(t1 > t0)) return std::nullopt;
  return Interval{t0, t1};
}

inline std::optional<Interval> capsule_interval(const CapsulePrim& c, const Eigen::Vector3d& o,
                                                const Eigen::Vector3d& d) {
  // The capsule is convex, so the hit set is one interval: the hull of the
  // hits on the finite cylinder and the two end caps.
  std::optional<Interval> out;
  auto merge = [&](std::optional<Interval> iv) {
    if (!iv) return;
    out = out ? Interval{std::min(out->first, iv->first), std::max(out->second, iv->second)} : *iv;
  };
  auto sphere = [&](const Eigen::Vector3d& centre) -> std::optional<Interval> {
    const Eigen::Vector3d oc = o - centre;
    const double b = oc.dot(d), cc = oc.squaredNorm() - c.radius * c.radius;
    const double disc = b * b - cc;
    if (disc <= 0.0) return std::nullopt;
    return Interval{-b - std::sqrt(disc), -b + std::sqrt(disc)};
  };
  merge(sphere(c.a));
  merge(sphere(c.b));
  const Eigen::Vector3d axis = c.b - c.a;
  const double len = axis.norm();
  const Eigen::Vector3d w = axis / len;
  const Eigen::Vector3d oc = o - c.a;
  const Eigen::Vector3d dp = d - d.dot(w) * w;
  const Eigen::Vector3d op = oc - oc.dot(w) * w;
  const double A = dp.squaredNorm(), B = op.dot(dp), C = op.squaredNorm() - c.radius * c.radius;
  std::optional<Interval> cyl;
  if (A > 1e-300) {
    const double disc = B * B - A * C;
    if (disc > 0.0) cyl = Interval{(-B - std::sqrt(disc)) / A, (-B + std::sqrt(disc)) / A};
  } else if (C < 0.0) {
    cyl = Interval{-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  }
  if (cyl) {
    // Clip to the slab 0 <= (x - a).w <= len.
    const double s0 = oc.dot(w), sd = d.dot(w);
    double lo = cyl->first, hi = cyl->second;
    if (sd != 0.0) {
      double a = -s0 / sd, b = (len - s0) / sd;
      if (a > b) std::swap(a, b);
      lo = std::max(lo, a);
      hi = std::min(hi, b);
    } else if (s0 < 0.0 || s0 > len) {
      hi = lo;
    }
    if (hi > lo) merge(Interval{lo, hi});
  }
  return out;
}

}  // namespace detail

/// Parameter interval (in t) where the line o + t d lies inside the primitive.
/// d must be a unit vector. The interval is not clipped to t >= 0.
inline std::optional<Interval> primitive_interval(const Shape3& s, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  return std::visit(
      [&](const auto& p) -> std::optional<Interval> {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SpherePrim>) {
          const Eigen::Vector3d oc = o - p.center;
          const double b = oc.dot(d), c = oc.squaredNorm() - p.radius * p.radius;
          const double disc = b * b - c;
          if (disc <= 0.0) return std::nullopt;
          return Interval{-b - std::sqrt(disc), -b + std::sqrt(disc)};
        } else if constexpr (std::is_same_v<T, BoxPrim>) {
          return detail::box_interval(p, o, d);
        } else {
          return detail::capsule_interval(p, o, d);
        }
      },
      s);
}

inline std::string primitive_kind(const Shape3& s) {
  return std::visit(
      [](const auto& p) -> std::string {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SpherePrim>) return "sphere";
        if constexpr (std::is_same_v<T, BoxPrim>) return "box";
        return "capsule";
      },
      s);
}

class AnalyticPhantom {
 public:
  AnalyticPhantom() = default;
  AnalyticPhantom(std::string name, std::vector<Primitive> prims) : name_(std::move(name)), prims_(std::move(prims)) {
    for (const auto& p : prims_) {
      if (!std::isfinite(p.mu) || p.mu < 0.0) throw std::invalid_argument("AnalyticPhantom: attenuation must be finite and >= 0");
    }
  }

  const std::string& name() const { return name_; }
  const std::vector<Primitive>& primitives() const { return prims_; }
  bool has_inner() const {
    return std::any_of(prims_.begin(), prims_.end(), [](const Primitive& p) { return p.label == Label::inner; });
  }

  /// outer: boundary of everything against air. inner: boundary of the inner
  /// material. Both are unions, so min over the member primitives.
  double sdf(const Eigen::Vector3d& x, Surface which = Surface::outer) const {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& p : prims_) {
      if (which == Surface::inner && p.label != Label::inner) continue;
      d = std::min(d, primitive_sdf(p.shape, x));
    }
    return d;
  }

  /// Attenuation at a point. Inner material beats outer; within one label
  /// the last declared containing primitive wins. Air is 0.
  double mu(const Eigen::Vector3d& x) const {
    double value = 0.0;
    bool inner_hit = false;
    for (const auto& p : prims_) {
      if (primitive_sdf(p.shape, x) >= 0.0) continue;
      if (p.label == Label::inner) {
        value = p.mu;
        inner_hit = true;
      } else if (!inner_hit) {
        value = p.mu;
      }
    }
    return value;
  }

  /// Line integral of mu along o + t d for t in [t_min, t_max], computed
  /// exactly from the primitive intervals.
  double line_integral(const Eigen::Vector3d& o, const Eigen::Vector3d& d, double t_min = 0.0,
                       double t_max = std::numeric_limits<double>::infinity()) const {
    std::vector<double> cuts;
    for (const auto& p : prims_) {
      if (auto iv = primitive_interval(p.shape, o, d)) {
        const double a = std::max(iv->first, t_min), b = std::min(iv->second, t_max);
        if (b > a) {
          cuts.push_back(a);
          cuts.push_back(b);
        }
      }
    }
    if (cuts.empty()) return 0.0;
    std::sort(cuts.begin(), cuts.end());
    double sum = 0.0;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      const double len = cuts[i + 1] - cuts[i];
      if (len <= 0.0) continue;
      sum += len * mu(o + 0.5 * (cuts[i] + cuts[i + 1]) * d);
    }
    return sum;
  }

  double intensity(const Eigen::Vector3d& o, const Eigen::Vector3d& d) const { return std::exp(-line_integral(o, d)); }

  /// Fraction of `samples` random points inside an inner primitive that are
  /// also inside some outer primitive.
  double nesting_fraction(int samples, std::uint64_t seed = 1) const;

 private:
  std::string name_;
  std::vector<Primitive> prims_;
};

inline double AnalyticPhantom::nesting_fraction(int samples, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int inside = 0, nested = 0;
  for (int tries = 0; inside < samples && tries < samples * 1000; ++tries) {
    const Eigen::Vector3d x(u(rng), u(rng), u(rng));
    if (sdf(x, Surface::inner) >= 0.0) continue;
    ++inside;
    bool in_outer = false;
    for (const auto& p : prims_) {
      if (p.label == Label::outer && primitive_sdf(p.shape, x) < 0.0) in_outer = true;
    }
    nested += in_outer ? 1 : 0;
  }
  return inside == 0 ? 1.0 : static_cast<double>(nested) / inside;
}

// ---------------------------------------------------------------------------
// Presets

inline AnalyticPhantom sphere_phantom(double radius = 0.35, double mu = 3.0) {
  return AnalyticPhantom("sphere", {{SpherePrim{Eigen::Vector3d::Zero(), radius}, Label::outer, mu}});
}

inline AnalyticPhantom nested_spheres_phantom(double r_out = 0.5, double mu_out = 0.2, double r_in = 0.25,
                                              double mu_in = 0.5) {
  return AnalyticPhantom("nested_spheres", {{SpherePrim{Eigen::Vector3d::Zero(), r_out}, Label::outer, mu_out},
                                            {SpherePrim{Eigen::Vector3d::Zero(), r_in}, Label::inner, mu_in}});
}

/// Box body with a capsule "bone" through it and an inner sphere.
inline AnalyticPhantom limb_phantom() {
  return AnalyticPhantom("limb", {{BoxPrim{Eigen::Vector3d::Zero(), Eigen::Vector3d(0.3, 0.3, 0.45)}, Label::outer, 1.0},
                                  {CapsulePrim{Eigen::Vector3d(0, 0, -0.3), Eigen::Vector3d(0, 0, 0.3), 0.12},
                                   Label::inner, 4.0}});
}

inline AnalyticPhantom phantom_preset(const std::string& name) {
  if (name == "sphere") return sphere_phantom();
  if (name == "nested_spheres") return nested_spheres_phantom(0.5, 1.0, 0.25, 4.0);
  if (name == "limb") return limb_phantom();
  throw std::invalid_argument(concat("unknown phantom preset '", name, "' (expected sphere, nested_spheres, limb)"));
}

// ---------------------------------------------------------------------------
// Acquisition

struct TrajectoryConfig {
  int views = 20;
  double step_deg = 18.0;
  double d_source = 4.0;    // source to object centre
  double d_detector = 1.0;  // object centre to detector
  int width = 64, height = 64;
  /// Detector width in scene units. When zero, the focal length is chosen so
  /// a sphere of radius `field_radius` just fills the image.
  double detector_width = 0.0;
  double field_radius = 0.75;
};

inline double trajectory_focal(const TrajectoryConfig& c) {
  if (c.detector_width > 0.0) return (c.d_source + c.d_detector) * c.width / c.detector_width;
  const double r = c.field_radius, d = c.d_source;
  return 0.5 * c.width * std::sqrt(d * d - r * r) / r;
}

/// Sources on a circle of radius d_source in the x-y plane, each looking at
/// the origin; image v points along world -z.
inline std::vector<Camera> make_trajectory(const TrajectoryConfig& c) {
  if (c.views < 1) throw std::invalid_argument("make_trajectory: need at least one view");
  if (c.views * c.step_deg > 360.0 + 1e-9) {
    throw std::invalid_argument(concat("make_trajectory: ", c.views, " views x ", c.step_deg, " deg exceeds 360"));
  }
  if (!(c.d_source > 1.0)) throw std::invalid_argument("make_trajectory: source must sit outside the unit sphere");
  const double f = trajectory_focal(c);
  std::vector<Camera> out;
  for (int k = 0; k < c.views; ++k) {
    const double th = k * c.step_deg * std::numbers::pi / 180.0;
    const Eigen::Vector3d C(c.d_source * std::cos(th), c.d_source * std::sin(th), 0.0);
    const Eigen::Vector3d z = -C.normalized();
    const Eigen::Vector3d y(0.0, 0.0, -1.0);
    const Eigen::Vector3d x = y.cross(z);
    Camera cam;
    cam.fx = cam.fy = f;
    cam.width = c.width;
    cam.height = c.height;
    cam.cx = 0.5 * c.width;
    cam.cy = 0.5 * c.height;
    cam.rotation.row(0) = x.transpose();
    cam.rotation.row(1) = y.transpose();
    cam.rotation.row(2) = z.transpose();
    cam.translation = -cam.rotation * C;
    out.push_back(cam);
  }
  return out;
}

/// Row-major [H x W] image with values in [0, 1].
using Image = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ProjectOptions {
  int supersample = 1;  // sub-pixel rays per axis
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

/// Exact projection of the phantom through one camera.
inline Image project(const AnalyticPhantom& ph, const Camera& cam, const ProjectOptions& opt = {}) {
  if (opt.supersample < 1) throw std::invalid_argument("project: supersample must be >= 1");
  Image img(cam.height, cam.width);
  const int s = opt.supersample;
  const Eigen::Vector3d o = cam.center();
  for (int j = 0; j < cam.height; ++j) {
    for (int i = 0; i < cam.width; ++i) {
      double acc = 0.0;
      for (int b = 0; b < s; ++b) {
        for (int a = 0; a < s; ++a) {
          const double u = i + (a + 0.5) / s, v = j + (b + 0.5) / s;
          acc += ph.intensity(o, cam.back_project(u, v).normalized());
        }
      }
      img(j, i) = acc / (s * s);
    }
  }
  if (opt.noise_sigma > 0.0) {
    std::mt19937_64 rng(opt.noise_seed);
    std::normal_distribution<double> n(0.0, opt.noise_sigma);
    for (Index k = 0; k < img.size(); ++k) img.data()[k] = std::clamp(img.data()[k] + n(rng), 0.0, 1.0);
  }
  return img;
}

}  // namespace neas

#pragma once

// Pinhole X-ray cameras, ray generation and the pose-refinement schedule.
//
// World to camera: X_c = R X_w + t. The camera looks along +z, image u grows
// with camera x and v with camera y. Pixel (i, j) has its centre at
// (i + 0.5, j + 0.5).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "neas/diffcore.hpp"

namespace neas {

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();
  double near = 0.0;
  double far = 0.0;

  /// True when the ray crosses the bounding sphere.
  bool hits() const { return far > near; }
  Eigen::Vector3d point_at(double t) const { return origin + t * direction; }
};

/// Entry and exit distances of a ray through a sphere, if it crosses it.
inline std::optional<std::pair<double, double>> intersect_sphere(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                                                 const Eigen::Vector3d& centre, double radius) {
  const Eigen::Vector3d oc = o - centre;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc <= 0.0) return std::nullopt;
  const double root = std::sqrt(disc);
  const double t0 = -b - root, t1 = -b + root;
  if (t1 <= 0.0) return std::nullopt;
  return std::make_pair(std::max(t0, 0.0), t1);
}

/// Bounds a ray to the unit sphere; non-hitting rays get near == far == 0.
inline Ray clip_to_unit_sphere(Ray ray) {
  if (auto hit = intersect_sphere(ray.origin, ray.direction, Eigen::Vector3d::Zero(), 1.0)) {
    ray.near = hit->first;
    ray.far = hit->second;
  } else {
    ray.near = ray.far = 0.0;
  }
  return ray;
}

struct Camera {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;
  int width = 1, height = 1;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  /// Source position in world coordinates.
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
  Eigen::Vector3d optical_axis() const { return rotation.transpose().col(2); }

  /// Unnormalized world direction through continuous pixel coordinates.
  Eigen::Vector3d back_project(double u, double v) const {
    return rotation.transpose() * Eigen::Vector3d((u - cx) / fx, (v - cy) / fy, 1.0);
  }

  /// Pixel coordinates of a world point (must lie in front of the camera).
  Eigen::Vector2d project(const Eigen::Vector3d& x) const {
    const Eigen::Vector3d c = rotation * x + translation;
    if (!(c.z() > 0.0)) throw std::domain_error("project: point behind the source");
    return {fx * c.x() / c.z() + cx, fy * c.y() / c.z() + cy};
  }

  friend bool operator==(const Camera& a, const Camera& b) {
    return a.fx == b.fx && a.fy == b.fy && a.cx == b.cx && a.cy == b.cy && a.width == b.width &&
           a.height == b.height && a.rotation == b.rotation && a.translation == b.translation;
  }
};

/// Ray through continuous pixel coordinates (u, v), bounded by the unit
/// sphere. Pixel centres sit at integer + 0.5.
inline Ray generate_ray(const Camera& cam, double u, double v) {
  if (!(u >= 0.0 && u <= cam.width && v >= 0.0 && v <= cam.height)) {
    throw std::out_of_range(concat("generate_ray: pixel (", u, ", ", v, ") outside ", cam.width, "x", cam.height));
  }
  Ray r;
  r.origin = cam.center();
  r.direction = cam.back_project(u, v).normalized();
  return clip_to_unit_sphere(r);
}

inline Ray pixel_ray(const Camera& cam, int i, int j) { return generate_ray(cam, i + 0.5, j + 0.5); }

// ---------------------------------------------------------------------------

struct RefineSchedule {
  int warmup = 500;  // pose updates start at this iteration
  double tau_start = 2.0;
  double tau_end = 14.0;  // octave or level count of the encoder
  int total = 8000;
};

/// Mask progress: tau_start at iteration 0, linear up to tau_end at total/2,
/// flat afterwards.
inline double tau_at(int iter, const RefineSchedule& s) {
  if (iter < 0) throw std::invalid_argument("tau_at: negative iteration");
  const double half = 0.5 * s.total;
  const double frac = half > 0.0 ? std::min(1.0, iter / half) : 1.0;
  return s.tau_start + (s.tau_end - s.tau_start) * frac;
}

// ---------------------------------------------------------------------------

/// Per-view cameras whose translations and principal points are trainable.
/// Rotations and focal lengths live only in the original Camera records.
class CameraRig {
 public:
  CameraRig() = default;
  explicit CameraRig(std::vector<Camera> cams, bool shared_principal = false)
      : original_(std::move(cams)), shared_(shared_principal) {
    const auto n = static_cast<Index>(original_.size());
    Matrix t(n, 3), c(shared_ ? 1 : n, 2);
    for (Index i = 0; i < n; ++i) {
      t.row(i) = original_[static_cast<std::size_t>(i)].translation.transpose();
      if (!shared_ || i == 0) {
        c(shared_ ? 0 : i, 0) = original_[static_cast<std::size_t>(i)].cx;
        c(shared_ ? 0 : i, 1) = original_[static_cast<std::size_t>(i)].cy;
      }
    }
    translations_ = ParamTensor("pose_t", std::move(t));
    principal_ = ParamTensor("pose_c", std::move(c));
  }

  std::size_t size() const { return original_.size(); }
  bool shared_principal() const { return shared_; }
  const std::vector<Camera>& original() const { return original_; }

  ParamTensor& translations() { return translations_; }
  ParamTensor& principal() { return principal_; }
  const ParamTensor& translations() const { return translations_; }
  const ParamTensor& principal() const { return principal_; }
  std::vector<ParamTensor*> parameters() { return {&translations_, &principal_}; }

  Index principal_row(std::size_t view) const { return shared_ ? 0 : static_cast<Index>(view); }

  /// Current (possibly refined) camera for one view.
  Camera camera(std::size_t view) const {
    Camera c = original_.at(view);
    const auto i = static_cast<Index>(view);
    c.translation = translations_.value().row(i).transpose();
    c.cx = principal_.value()(principal_row(view), 0);
    c.cy = principal_.value()(principal_row(view), 1);
    return c;
  }

  std::vector<Camera> cameras() const {
    std::vector<Camera> out;
    for (std::size_t i = 0; i < size(); ++i) out.push_back(camera(i));
    return out;
  }

  /// Overwrite the trainable state from explicit cameras (same count).
  void set_cameras(const std::vector<Camera>& cams) {
    if (cams.size() != size()) throw ShapeError("CameraRig::set_cameras: view count mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
      translations_.value().row(static_cast<Index>(i)) = cams[i].translation.transpose();
      principal_.value()(principal_row(i), 0) = cams[i].cx;
      principal_.value()(principal_row(i), 1) = cams[i].cy;
    }
  }

 private:
  std::vector<Camera> original_;
  bool shared_ = false;
  ParamTensor translations_;
  ParamTensor principal_;
};

/// One ray's worth of pose-dependent sampling: which view and pixel, and the
/// distances along the ray at which points are taken. Distances are constants
/// of the step.
struct PoseSampleSpec {
  std::size_t view = 0;
  double u = 0.0, v = 0.0;
  std::vector<double> t;
};

/// Sample positions o + t r for a batch of rays, differentiable with respect
/// to the rig's translations and principal points. Rows are ray-major.
inline Var pose_points(Graph& g, CameraRig& rig, const std::vector<PoseSampleSpec>& specs) {
  Index rows = 0;
  for (const auto& s : specs) rows += static_cast<Index>(s.t.size());
  Matrix out(rows, 3);
  Index r = 0;
  for (const auto& s : specs) {
    const Camera cam = rig.camera(s.view);
    const Eigen::Vector3d o = cam.center();
    const Eigen::Vector3d dir = cam.back_project(s.u, s.v).normalized();
    for (double t : s.t) out.row(r++) = (o + t * dir).transpose();
  }
  Var tv = g.param(rig.translations());
  Var cv = g.param(rig.principal());
  const CameraRig* rp = &rig;
  return g.custom("pose_points", {tv, cv}, std::move(out), [tv, cv, rp, specs](Graph& gr, const Matrix& go) {
    const bool want_t = gr.needs_grad(tv), want_c = gr.needs_grad(cv);
    Matrix dt = Matrix::Zero(gr.value(tv).rows(), 3);
    Matrix dc = Matrix::Zero(gr.value(cv).rows(), 2);
    Index row = 0;
    for (const auto& s : specs) {
      const Camera cam = rp->camera(s.view);
      const Eigen::Vector3d w = cam.back_project(s.u, s.v);
      const double len = w.norm();
      const Eigen::Vector3d dir = w / len;
      Eigen::Vector3d sum_g = Eigen::Vector3d::Zero();
      Eigen::Vector3d sum_tg = Eigen::Vector3d::Zero();
      for (double t : s.t) {
        const Eigen::Vector3d gx = go.row(row++).transpose();
        sum_g += gx;
        sum_tg += t * gx;
      }
      const auto vi = static_cast<Index>(s.view);
      // o = -R^T t  =>  dL/dt = -R dL/do
      if (want_t) dt.row(vi) -= (cam.rotation * sum_g).transpose();
      if (want_c) {
        // dir = w/|w|, w = R^T q, dq/dcx = (-1/fx, 0, 0), dq/dcy = (0, -1/fy, 0).
        const Eigen::Vector3d gw = (sum_tg - dir * dir.dot(sum_tg)) / len;
        const Eigen::Vector3d gq = cam.rotation * gw;
        const Index pr = rp->principal_row(s.view);
        dc(pr, 0) -= gq.x() / cam.fx;
        dc(pr, 1) -= gq.y() / cam.fy;
      }
    }
    if (want_t) gr.accumulate(tv, dt);
    if (want_c) gr.accumulate(cv, dc);
  });
}

/// Applies one pose update unless still in warm-up. Pose gradients are
/// cleared either way. Returns true when the cameras were updated.
inline bool pose_step(CameraRig& rig, Adam& optimizer, int iter, const RefineSchedule& schedule, double lr) {
  bool moved = false;
  if (iter >= schedule.warmup) {
    moved = optimizer.step(lr) < rig.parameters().size();
  }
  for (ParamTensor* p : rig.parameters()) p->zero_grad();
  return moved;
}

}  // namespace neas

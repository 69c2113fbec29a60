#pragma once

// Stratified ray sampling, Beer-Lambert quadrature and the training losses.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "neas/fields.hpp"
#include "neas/posecal.hpp"

namespace neas {

/// Sample distances along one ray. delta[j] = t[j+1] - t[j]; the last
/// spacing runs to far.
struct SampleSet {
  std::vector<double> t;
  std::vector<double> delta;

  std::size_t size() const { return t.size(); }
};

namespace detail {
inline SampleSet finish_samples(std::vector<double> t, double far) {
  SampleSet s;
  s.delta.resize(t.size());
  for (std::size_t j = 0; j + 1 < t.size(); ++j) s.delta[j] = t[j + 1] - t[j];
  s.delta.back() = far - t.back();
  s.t = std::move(t);
  return s;
}
}  // namespace detail

/// One uniform draw inside each of N equal strata of [near, far).
template <class Rng>
SampleSet stratified_sample(double near, double far, int n, Rng& rng) {
  if (n < 2) throw std::invalid_argument("stratified_sample: need at least 2 samples");
  if (!(far > near)) throw std::invalid_argument(concat("stratified_sample: empty interval [", near, ", ", far, "]"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double width = (far - near) / n;
  std::vector<double> t(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    double tj = near + (j + u(rng)) * width;
    // Guard the open upper end of each stratum against rounding.
    tj = std::min(tj, std::nextafter(near + (j + 1) * width, near));
    t[static_cast<std::size_t>(j)] = tj;
  }
  return detail::finish_samples(std::move(t), far);
}

/// Deterministic stratum midpoints, used for evaluation renders.
inline SampleSet midpoint_sample(double near, double far, int n) {
  if (n < 2) throw std::invalid_argument("midpoint_sample: need at least 2 samples");
  if (!(far > near)) throw std::invalid_argument(concat("midpoint_sample: empty interval [", near, ", ", far, "]"));
  const double width = (far - near) / n;
  std::vector<double> t(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) t[static_cast<std::size_t>(j)] = near + (j + 0.5) * width;
  return detail::finish_samples(std::move(t), far);
}

/// exp(-sum mu(x_j) delta_j) for an arbitrary attenuation field.
inline double render_intensity(const Ray& ray, const std::function<double(const Eigen::Vector3d&)>& mu,
                               const SampleSet& samples) {
  double optical = 0.0;
  for (std::size_t j = 0; j < samples.size(); ++j) optical += mu(ray.point_at(samples.t[j])) * samples.delta[j];
  return std::exp(-optical);
}

/// Intensities for many rays through the model, evaluated at stratum
/// midpoints. Rays that miss the unit sphere render as 1.
inline std::vector<double> render_intensities(NeasModel& model, const std::vector<Ray>& rays, int n, double tau,
                                              std::size_t chunk_rays = 256) {
  std::vector<double> out(rays.size(), 1.0);
  std::vector<std::size_t> hit;
  for (std::size_t i = 0; i < rays.size(); ++i) {
    if (rays[i].hits()) hit.push_back(i);
  }
  for (std::size_t start = 0; start < hit.size(); start += chunk_rays) {
    const std::size_t m = std::min(chunk_rays, hit.size() - start);
    Matrix pts(static_cast<Index>(m) * n, 3);
    Matrix delta(static_cast<Index>(m), n);
    for (std::size_t k = 0; k < m; ++k) {
      const Ray& r = rays[hit[start + k]];
      const SampleSet s = midpoint_sample(r.near, r.far, n);
      for (int j = 0; j < n; ++j) {
        pts.row(static_cast<Index>(k) * n + j) = r.point_at(s.t[static_cast<std::size_t>(j)]).transpose();
        delta(static_cast<Index>(k), j) = s.delta[static_cast<std::size_t>(j)];
      }
    }
    const Matrix mu = model.eval_attenuation(pts, tau);
    for (std::size_t k = 0; k < m; ++k) {
      double optical = 0.0;
      for (int j = 0; j < n; ++j) optical += mu(static_cast<Index>(k) * n + j, 0) * delta(static_cast<Index>(k), j);
      out[hit[start + k]] = std::exp(-optical);
    }
  }
  return out;
}

inline double render_intensity(const Ray& ray, NeasModel& model, double tau, int n = 128) {
  return render_intensities(model, {ray}, n, tau).front();
}

/// A ray of a training batch together with its samples. `view`, `u` and `v`
/// are only used when gradients flow to the poses.
struct BatchRay {
  std::size_t view = 0;
  double u = 0.0, v = 0.0;
  Ray ray;
  SampleSet samples;
};

struct RenderOutput {
  Var points;     // [m*n x 3], ray-major
  Var mu;         // [m*n x 1]
  Var intensity;  // [m x 1]
};

/// Differentiable render of a batch of rays that all hit the unit sphere and
/// carry the same sample count. With a rig, sample positions depend on the
/// poses; otherwise they are constants.
inline RenderOutput render_batch(Graph& g, NeasModel& model, const std::vector<BatchRay>& rays, double tau,
                                 CameraRig* rig = nullptr) {
  if (rays.empty()) throw std::invalid_argument("render_batch: empty batch");
  const std::size_t n = rays.front().samples.size();
  const auto m = static_cast<Index>(rays.size());
  Matrix delta(m, static_cast<Index>(n));
  for (Index i = 0; i < m; ++i) {
    const auto& r = rays[static_cast<std::size_t>(i)];
    if (r.samples.size() != n) throw ShapeError("render_batch: rays carry different sample counts");
    for (std::size_t j = 0; j < n; ++j) delta(i, static_cast<Index>(j)) = r.samples.delta[j];
  }
  RenderOutput out;
  if (rig != nullptr) {
    std::vector<PoseSampleSpec> specs;
    specs.reserve(rays.size());
    for (const auto& r : rays) specs.push_back({r.view, r.u, r.v, r.samples.t});
    out.points = pose_points(g, *rig, specs);
  } else {
    Matrix pts(m * static_cast<Index>(n), 3);
    Index row = 0;
    for (const auto& r : rays) {
      for (double t : r.samples.t) pts.row(row++) = r.ray.point_at(t).transpose();
    }
    out.points = g.constant(std::move(pts));
  }
  out.mu = model.attenuation(g, out.points, tau);
  Var optical = g.row_sum(g.mul_const(g.reshape(out.mu, m, static_cast<Index>(n)), delta));
  out.intensity = g.exp(g.neg(optical));
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Sum over the batch of squared intensity errors.
inline double loss_intensity(const std::vector<double>& predicted, const std::vector<double>& truth) {
  if (predicted.size() != truth.size()) {
    throw ShapeError(concat("loss_intensity: batch lengths differ (", predicted.size(), " vs ", truth.size(), ")"));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) sum += (predicted[i] - truth[i]) * (predicted[i] - truth[i]);
  return sum;
}

inline Var loss_intensity(Graph& g, Var predicted, const Matrix& truth) {
  if (g.shape(predicted) != shape_of(truth)) {
    throw ShapeError(concat("loss_intensity: ", g.shape(predicted).str(), " vs ", shape_of(truth).str()));
  }
  return g.sum(g.square(g.sub(predicted, g.constant(truth))));
}

/// Mean of (|n| - 1)^2 over the rows of a [P x 3] gradient matrix.
inline double loss_eikonal(const Matrix& gradients) {
  if (gradients.cols() != 3 || gradients.rows() == 0) throw ShapeError("loss_eikonal: expected [P x 3] gradients");
  double sum = 0.0;
  for (Index i = 0; i < gradients.rows(); ++i) {
    const double e = gradients.row(i).norm() - 1.0;
    sum += e * e;
  }
  return sum / static_cast<double>(gradients.rows());
}

inline Var loss_eikonal(Graph& g, Var gradients) {
  if (g.shape(gradients).cols != 3) throw ShapeError("loss_eikonal: expected [P x 3] gradients");
  // The tiny shift keeps the square root differentiable at a zero gradient.
  Var norm = g.sqrt(g.shift(g.row_sum(g.square(gradients)), 1e-18));
  return g.mean(g.square(g.shift(norm, -1.0)));
}

/// Central-difference SDF gradients at constant points: one [P x 3] Var per
/// distance output of the model. All 6P probes share one network pass.
inline std::vector<Var> sdf_gradients(Graph& g, NeasModel& model, const Matrix& points, double tau, double h = 1e-4) {
  const Index P = points.rows();
  Matrix probes(6 * P, 3);
  for (int k = 0; k < 3; ++k) {
    for (int sgn = 0; sgn < 2; ++sgn) {
      Matrix block = points;
      block.col(k).array() += sgn == 0 ? h : -h;
      probes.middleRows((2 * k + sgn) * P, P) = block;
    }
  }
  Var d = model.query_distances(g, g.constant(std::move(probes)), tau);
  std::vector<Var> out;
  for (Index c = 0; c < g.shape(d).cols; ++c) {
    Var dc = g.cols(d, c, 1);
    Var grad;
    for (int k = 0; k < 3; ++k) {
      Var diff = g.scale(g.sub(g.rows(dc, 2 * k * P, P), g.rows(dc, (2 * k + 1) * P, P)), 0.5 / h);
      grad = k == 0 ? diff : g.concat_cols(grad, diff);
    }
    out.push_back(grad);
  }
  return out;
}

inline double total_loss(double l_int, double l_reg, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be non-negative");
  return l_int + lambda * l_reg;
}

inline Var total_loss(Graph& g, Var l_int, Var l_reg, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be non-negative");
  return g.add(l_int, g.scale(l_reg, lambda));
}

}  // namespace neas

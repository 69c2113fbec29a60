#pragma once

// The attenuation-surface model: an SDF network whose zero level set bounds
// one or two attenuation networks.
//
//   x -> [x, encode(x)] -> sdf MLP -> (d1[, d2], f)
//   f -> attenuation MLP -> raw -> mu_bar = alpha * sigmoid(raw) + beta
//   mu = sbf(d, s) * mu_bar,     sbf(d, s) = exp(-s d) / (1 + exp(-s d))
//
// In two-material mode a hard selector keeps mu1 where d2 >= 0 and mu2
// where d2 < 0.

#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "neas/diffcore.hpp"
#include "neas/encoders.hpp"

namespace neas {

enum class EncodingKind { frequency, hash };
enum class MaterialMode { single, dual };
enum class Surface { outer, inner };
enum class Activation { relu, softplus };

/// Output range (beta, beta + alpha) of an attenuation network.
struct ActivationRange {
  double beta = 0.1;
  double alpha = 3.4;

  double upper() const { return beta + alpha; }
  bool contains(double mu) const { return mu > beta && mu < beta + alpha; }
};

struct MaterialRanges {
  double t1 = 0.0, t2 = 0.0, t_max = 0.0;
  ActivationRange outer;
  ActivationRange inner;
};

/// Range parameters from approximate air/muscle/bone coefficients: thresholds
/// at the midpoints, muscle spanning [t1, t2] and bone spanning [t2, t_max].
inline MaterialRanges material_ranges(double mu_air, double mu_muscle, double mu_bone, double t_max) {
  if (!(mu_air < mu_muscle)) throw std::invalid_argument(concat("material_ranges: need mu_air < mu_muscle (", mu_air, " vs ", mu_muscle, ")"));
  if (!(mu_muscle < mu_bone)) throw std::invalid_argument(concat("material_ranges: need mu_muscle < mu_bone (", mu_muscle, " vs ", mu_bone, ")"));
  if (!(mu_bone < t_max)) throw std::invalid_argument(concat("material_ranges: need mu_bone < t_max (", mu_bone, " vs ", t_max, ")"));
  MaterialRanges r;
  r.t1 = (mu_air + mu_muscle) / 2.0;
  r.t2 = (mu_muscle + mu_bone) / 2.0;
  r.t_max = t_max;
  r.outer = {r.t1, r.t2 - r.t1};
  r.inner = {r.t2, t_max - r.t2};
  return r;
}

/// Surface boundary weight in (0, 1): near 1 inside (d < 0), near 0 outside.
inline double sbf(double d, double s) { return Graph::stable_sigmoid(-s * d); }

/// d2 >= 0 keeps the outer material.
inline double select_material(double d2, double mu1, double mu2) { return d2 >= 0.0 ? mu1 : mu2; }

inline Var sbf(Graph& g, Var d, Var s) { return g.sigmoid(g.neg(g.mul_scalar(d, s))); }

inline Var select_material(Graph& g, Var d2, Var mu1, Var mu2) {
  const Matrix mask = g.value(d2).unaryExpr([](double v) { return v >= 0.0 ? 1.0 : 0.0; });
  return g.where(mask, mu1, mu2);
}

// ---------------------------------------------------------------------------

/// Fully connected network; the activation applies to every layer but the last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, const std::vector<int>& dims, Activation act, double softplus_beta,
      std::mt19937_64& rng)
      : act_(act), beta_(softplus_beta) {
    if (dims.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
    weights_.reserve(dims.size() - 1);
    biases_.reserve(dims.size() - 1);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      Matrix w(dims[l], dims[l + 1]);
      Matrix b(1, dims[l + 1]);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
      for (Index i = 0; i < b.size(); ++i) b.data()[i] = u(rng);
      weights_.emplace_back(concat(name, ".w", l), std::move(w));
      biases_.emplace_back(concat(name, ".b", l), std::move(b));
    }
  }

  Mlp(const Mlp&) = delete;
  Mlp& operator=(const Mlp&) = delete;
  Mlp(Mlp&&) noexcept = default;
  Mlp& operator=(Mlp&&) noexcept = default;

  std::size_t layer_count() const { return weights_.size(); }
  Index input_dim() const { return weights_.front().value().rows(); }
  Index output_dim() const { return weights_.back().value().cols(); }

  ParamTensor& weight(std::size_t l) { return weights_.at(l); }
  ParamTensor& bias(std::size_t l) { return biases_.at(l); }

  Var forward(Graph& g, Var x) { return forward_prefix(g, x, output_dim()); }

  /// Same as forward but only the first `out_cols` outputs of the last layer.
  Var forward_prefix(Graph& g, Var x, Index out_cols) {
    Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const bool last = l + 1 == weights_.size();
      Var w = g.param(weights_[l]);
      Var b = g.param(biases_[l]);
      if (last && out_cols != output_dim()) {
        w = g.cols(w, 0, out_cols);
        b = g.cols(b, 0, out_cols);
      }
      h = g.add_row(g.matmul(h, w), b);
      if (!last) h = act_ == Activation::relu ? g.relu(h) : g.softplus(h, beta_);
    }
    return h;
  }

  std::vector<ParamTensor*> parameters() {
    std::vector<ParamTensor*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(&weights_[l]);
      out.push_back(&biases_[l]);
    }
    return out;
  }

 private:
  std::vector<ParamTensor> weights_;
  std::vector<ParamTensor> biases_;
  Activation act_ = Activation::relu;
  double beta_ = 100.0;
};

// ---------------------------------------------------------------------------

struct ModelConfig {
  EncodingKind encoding = EncodingKind::hash;
  MaterialMode materials = MaterialMode::single;
  FrequencyEncoderCfg frequency{};
  HashGridConfig hash{};
  int sdf_layers = 2;  // hidden layers
  int sdf_width = 64;
  int att_layers = 2;
  int att_width = 64;
  int feature_dim = 64;
  ActivationRange outer_range{0.1, 3.4};
  ActivationRange inner_range{3.5, 5.5};
  double s_init = 20.0;
  double softplus_beta = 100.0;
  double r_init = 0.5;
  double r_init_inner = 0.25;

  int sdf_outputs() const { return materials == MaterialMode::dual ? 2 : 1; }

  static ModelConfig hash_preset() { return {}; }

  static ModelConfig frequency_preset() {
    ModelConfig c;
    c.encoding = EncodingKind::frequency;
    c.sdf_layers = 6;
    c.sdf_width = 256;
    c.att_layers = 3;
    c.att_width = 256;
    c.feature_dim = 256;
    return c;
  }
};

/// Outputs of the SDF network for a batch of points.
struct SdfQuery {
  Var d1;
  Var d2;  // invalid in single-material mode
  Var features;
};

/// Every intermediate of the attenuation pipeline, for audits and tests.
struct AttenuationQuery {
  SdfQuery sdf;
  Var s;
  Var mu_bar1, mu_bar2;
  Var mu1, mu2;
  Var mu;
};

class NeasModel {
 public:
  NeasModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    std::mt19937_64 rng(seed);
    int enc_dim = 0;
    if (cfg.encoding == EncodingKind::hash) {
      grid_ = HashGrid(cfg.hash, rng());
      enc_dim = grid_.output_dim();
    } else {
      enc_dim = cfg.frequency.output_dim();
    }
    std::vector<int> sdf_dims{3 + enc_dim};
    for (int i = 0; i < cfg.sdf_layers; ++i) sdf_dims.push_back(cfg.sdf_width);
    sdf_dims.push_back(cfg.sdf_outputs() + cfg.feature_dim);
    sdf_ = Mlp("sdf", sdf_dims, Activation::softplus, cfg.softplus_beta, rng);

    std::vector<int> att_dims{cfg.feature_dim};
    for (int i = 0; i < cfg.att_layers; ++i) att_dims.push_back(cfg.att_width);
    att_dims.push_back(1);
    att1_ = Mlp("att1", att_dims, Activation::relu, cfg.softplus_beta, rng);
    if (cfg.materials == MaterialMode::dual) att2_ = Mlp("att2", att_dims, Activation::relu, cfg.softplus_beta, rng);
    log_s_ = ParamTensor("log_s", Matrix::Constant(1, 1, std::log(cfg.s_init)));
  }

  NeasModel(const NeasModel&) = delete;
  NeasModel& operator=(const NeasModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  bool dual() const { return cfg_.materials == MaterialMode::dual; }
  int encoding_dim() const {
    return cfg_.encoding == EncodingKind::hash ? grid_.output_dim() : cfg_.frequency.output_dim();
  }

  Mlp& sdf_net() { return sdf_; }
  Mlp& att_net(int which) { return which == 2 ? att2_ : att1_; }
  HashGrid& grid() { return grid_; }
  ParamTensor& log_s() { return log_s_; }
  double steepness() const { return std::exp(log_s_.value()(0, 0)); }

  /// [x, encode(x)] for a [P×3] batch.
  Var encode(Graph& g, Var x, double tau) {
    Var enc = cfg_.encoding == EncodingKind::hash ? hash_encode(g, x, grid_, tau)
                                                  : frequency_encode(g, x, cfg_.frequency, tau);
    return g.concat_cols(x, enc);
  }

  SdfQuery query_sdf(Graph& g, Var x, double tau) {
    Var out = sdf_.forward(g, encode(g, x, tau));
    SdfQuery q;
    q.d1 = g.cols(out, 0, 1);
    if (dual()) q.d2 = g.cols(out, 1, 1);
    q.features = g.cols(out, cfg_.sdf_outputs(), cfg_.feature_dim);
    return q;
  }

  /// Signed distances only ([P×1] or [P×2]); skips the feature head.
  Var query_distances(Graph& g, Var x, double tau) {
    return sdf_.forward_prefix(g, encode(g, x, tau), cfg_.sdf_outputs());
  }

  Var steepness(Graph& g) { return g.exp(g.param(log_s_)); }

  AttenuationQuery query_attenuation(Graph& g, Var x, double tau) {
    AttenuationQuery q;
    q.sdf = query_sdf(g, x, tau);
    q.s = steepness(g);
    q.mu_bar1 = bounded_output(g, att1_, q.sdf.features, cfg_.outer_range);
    q.mu1 = g.mul(sbf(g, q.sdf.d1, q.s), q.mu_bar1);
    if (!dual()) {
      q.mu = q.mu1;
      return q;
    }
    q.mu_bar2 = bounded_output(g, att2_, q.sdf.features, cfg_.inner_range);
    q.mu2 = g.mul(sbf(g, q.sdf.d2, q.s), q.mu_bar2);
    q.mu = select_material(g, q.sdf.d2, q.mu1, q.mu2);
    return q;
  }

  Var attenuation(Graph& g, Var x, double tau) { return query_attenuation(g, x, tau).mu; }

  /// Evaluates distances for many points without keeping a large graph.
  /// Column 0 is d1; column 1 (dual only) is d2.
  Matrix eval_distances(const Matrix& points, double tau = kUnmasked, Index chunk = 8192) {
    Matrix out(points.rows(), cfg_.sdf_outputs());
    for (Index start = 0; start < points.rows(); start += chunk) {
      const Index n = std::min(chunk, points.rows() - start);
      Graph g;
      Var d = query_distances(g, g.constant(points.middleRows(start, n)), tau);
      out.middleRows(start, n) = g.value(d);
    }
    return out;
  }

  Matrix eval_attenuation(const Matrix& points, double tau = kUnmasked, Index chunk = 8192) {
    Matrix out(points.rows(), 1);
    for (Index start = 0; start < points.rows(); start += chunk) {
      const Index n = std::min(chunk, points.rows() - start);
      Graph g;
      Var mu = attenuation(g, g.constant(points.middleRows(start, n)), tau);
      out.middleRows(start, n) = g.value(mu);
    }
    return out;
  }

  /// Every trainable tensor, in a stable order used by checkpoints.
  std::vector<ParamTensor*> parameters() {
    std::vector<ParamTensor*> out;
    if (cfg_.encoding == EncodingKind::hash) out.push_back(&grid_.table());
    for (ParamTensor* p : sdf_.parameters()) out.push_back(p);
    for (ParamTensor* p : att1_.parameters()) out.push_back(p);
    if (dual()) {
      for (ParamTensor* p : att2_.parameters()) out.push_back(p);
    }
    out.push_back(&log_s_);
    return out;
  }

  void zero_grad() {
    for (ParamTensor* p : parameters()) p->zero_grad();
  }

 private:
  static Var bounded_output(Graph& g, Mlp& net, Var features, const ActivationRange& range) {
    Var raw = net.forward(g, features);
    return g.shift(g.scale(g.sigmoid(raw), range.alpha), range.beta);
  }

  ModelConfig cfg_;
  HashGrid grid_;
  Mlp sdf_;
  Mlp att1_;
  Mlp att2_;
  ParamTensor log_s_;
};

// ---------------------------------------------------------------------------

struct GeometricInitOptions {
  int max_steps = 3000;
  int batch = 512;
  double lr = 1e-3;
  double target_mae = 0.02;
  std::uint64_t seed = 7;
};

/// Sphere initialization: the distance heads start near |x| - r (r_init for
/// d1, r_init_inner for d2). Weights are set with the usual geometric scheme
/// (encoding inputs zeroed), then the raw-coordinate path is regressed onto
/// the target until the mean absolute error over fresh samples drops below
/// target_mae. Returns that final error.
inline double geometric_init(NeasModel& model, const GeometricInitOptions& opt = {}) {
  const ModelConfig& cfg = model.config();
  if (!(cfg.r_init > 0.0 && cfg.r_init < 1.0)) throw std::invalid_argument("geometric_init: r_init must lie in (0,1)");
  std::mt19937_64 rng(opt.seed);
  Mlp& net = model.sdf_net();
  const std::size_t L = net.layer_count();
  const int n_d = cfg.sdf_outputs();
  const std::array<double, 2> radii{cfg.r_init, cfg.r_init_inner};

  for (std::size_t l = 0; l < L; ++l) {
    Matrix& w = net.weight(l).value();
    Matrix& b = net.bias(l).value();
    const auto out_dim = static_cast<double>(w.cols());
    const auto in_dim = static_cast<double>(w.rows());
    if (l + 1 < L) {
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0) / std::sqrt(out_dim));
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);
      if (l == 0) w.bottomRows(w.rows() - 3).setZero();
      b.setZero();
    } else {
      std::normal_distribution<double> head(std::sqrt(std::numbers::pi) / std::sqrt(in_dim), 1e-4);
      std::normal_distribution<double> feat(0.0, 1.0 / std::sqrt(in_dim));
      for (Index i = 0; i < w.rows(); ++i) {
        for (Index j = 0; j < w.cols(); ++j) w(i, j) = j < n_d ? head(rng) : feat(rng);
      }
      b.setZero();
      for (int j = 0; j < n_d; ++j) b(0, j) = -radii[static_cast<std::size_t>(j)];
    }
  }

  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss;
  auto sample = [&](Index n) {
    Matrix pts(n, 3);
    for (Index i = 0; i < pts.size(); ++i) pts.data()[i] = unit(rng);
    return pts;
  };
  // Half uniform in the cube, half along random rays with uniform radius so
  // the neighbourhood of the origin is not starved.
  auto sample_fit = [&](Index n) {
    Matrix pts = sample(n);
    for (Index i = 0; i < n / 2; ++i) {
      const Eigen::Vector3d dir = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng)).normalized();
      pts.row(i) = (0.5 * (unit(rng) + 1.0)) * dir.transpose();
    }
    return pts;
  };
  auto targets = [&](const Matrix& pts) {
    Matrix t(pts.rows(), n_d);
    for (Index i = 0; i < pts.rows(); ++i) {
      for (int j = 0; j < n_d; ++j) t(i, j) = pts.row(i).norm() - radii[static_cast<std::size_t>(j)];
    }
    return t;
  };
  // Mean error over the cube, but never below the error at the centre, where
  // the |x| kink is hardest for a smooth network.
  auto mae = [&]() {
    const Matrix pts = sample(1000);
    const double mean = (model.eval_distances(pts) - targets(pts)).cwiseAbs().mean();
    const Matrix origin = Matrix::Zero(1, 3);
    return std::max(mean, (model.eval_distances(origin) - targets(origin)).cwiseAbs().maxCoeff());
  };

  Adam adam(net.parameters());
  double err = mae();
  for (int step = 0; step < opt.max_steps && err >= opt.target_mae; ++step) {
    const Matrix pts = sample_fit(opt.batch);
    Graph g;
    Var d = model.query_distances(g, g.constant(pts), kUnmasked);
    Var loss = g.mean(g.square(g.sub(d, g.constant(targets(pts)))));
    adam.zero_grad();
    g.backward(loss);
    net.weight(0).grad().bottomRows(net.weight(0).value().rows() - 3).setZero();
    adam.step(opt.lr);
    if ((step + 1) % 100 == 0) err = mae();
  }
  model.zero_grad();
  if (cfg.encoding == EncodingKind::hash) model.grid().table().zero_grad();
  return err;
}

/// Fraction of lattice points over [-1,1]^3 (G per axis) where the inner
/// surface pokes outside the outer one (d2 < 0 while d1 > 0).
inline double nesting_violation_fraction(NeasModel& model, int G) {
  if (!model.dual()) throw CapabilityError("nesting audit needs a two-material model");
  Matrix pts(static_cast<Index>(G) * G * G, 3);
  Index r = 0;
  for (int k = 0; k < G; ++k) {
    for (int j = 0; j < G; ++j) {
      for (int i = 0; i < G; ++i, ++r) {
        pts(r, 0) = -1.0 + 2.0 * i / (G - 1);
        pts(r, 1) = -1.0 + 2.0 * j / (G - 1);
        pts(r, 2) = -1.0 + 2.0 * k / (G - 1);
      }
    }
  }
  const Matrix d = model.eval_distances(pts);
  Index bad = 0;
  for (Index i = 0; i < d.rows(); ++i) bad += (d(i, 1) < 0.0 && d(i, 0) > 0.0) ? 1 : 0;
  return static_cast<double>(bad) / static_cast<double>(d.rows());
}

}  // namespace neas

#pragma once

// Training loop, run configuration, checkpoints and the two-stage pose
// protocol.

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "neas/dataset.hpp"
#include "neas/fields.hpp"
#include "neas/posecal.hpp"
#include "neas/renderer.hpp"
#include "neas/surface.hpp"

namespace neas {

static_assert(std::endian::native == std::endian::little, "checkpoints are written in native little-endian order");

/// Full image through `cam` with midpoint samples and no encoding mask.
inline Image render_image(NeasModel& model, const Camera& cam, int samples) {
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(cam.width) * static_cast<std::size_t>(cam.height));
  for (int j = 0; j < cam.height; ++j) {
    for (int i = 0; i < cam.width; ++i) rays.push_back(pixel_ray(cam, i, j));
  }
  const auto vals = render_intensities(model, rays, samples, kUnmasked);
  Image img(cam.height, cam.width);
  for (Index k = 0; k < img.size(); ++k) img.data()[k] = vals[static_cast<std::size_t>(k)];
  return img;
}

struct TrainConfig {
  ModelConfig model{};
  int iterations = 8000;
  int batch_rays = 512;
  int samples_per_ray = 128;
  int eikonal_points = 0;  // per step; 0 uses every sample point
  double lambda = 0.1;
  double lr = 1e-3;
  double lr_final = 1e-4;  // cosine decay target
  double pose_lr = 1e-4;
  bool pose_refine = false;
  bool shared_principal = false;
  int warmup = 500;
  double tau_start = 2.0;
  double tau_end = 0.0;  // 0: octave or level count of the encoder
  std::uint64_t seed = 0;
  GeometricInitOptions init{};
  int checkpoint_every = 1000;
  int val_samples = 128;

  double resolved_tau_end() const {
    if (tau_end > 0.0) return tau_end;
    return model.encoding == EncodingKind::hash ? model.hash.levels : model.frequency.octaves;
  }

  RefineSchedule schedule() const { return {warmup, tau_start, resolved_tau_end(), iterations}; }

  /// Learning rate for network weights at an iteration.
  double weight_lr(int iter) const {
    const double frac = iterations > 0 ? std::min(1.0, static_cast<double>(iter) / iterations) : 1.0;
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + std::cos(std::numbers::pi * frac));
  }
};

// ---------------------------------------------------------------------------
// Presets

/// Paper-scale hash preset: 14 levels, 2^19 table, 512 rays x 128 samples.
inline TrainConfig hash_preset() {
  TrainConfig c;
  c.model = ModelConfig::hash_preset();
  c.iterations = 8000;
  return c;
}

inline TrainConfig frequency_preset() {
  TrainConfig c;
  c.model = ModelConfig::frequency_preset();
  c.iterations = 20000;
  return c;
}

/// Desk-scale hash preset sized for a single CPU core and 64x64 views.
inline TrainConfig desk_hash_preset() {
  TrainConfig c;
  c.model.encoding = EncodingKind::hash;
  c.model.hash.levels = 8;
  c.model.hash.base_resolution = 16;
  c.model.hash.max_resolution = 256;
  c.model.hash.table_size = 1u << 15;
  c.model.sdf_layers = 2;
  c.model.sdf_width = 64;
  c.model.feature_dim = 16;
  c.model.att_layers = 1;
  c.model.att_width = 32;
  c.iterations = 3000;
  c.batch_rays = 128;
  c.samples_per_ray = 64;
  c.eikonal_points = 256;
  c.lr = 5e-3;
  c.lr_final = 5e-4;
  c.warmup = 300;
  c.pose_lr = 5e-4;
  c.checkpoint_every = 1000;
  return c;
}

inline TrainConfig desk_frequency_preset() {
  TrainConfig c = desk_hash_preset();
  c.model.encoding = EncodingKind::frequency;
  c.model.frequency.octaves = 6;
  c.model.sdf_layers = 4;
  c.model.sdf_width = 64;
  c.iterations = 5000;
  c.lr = 1e-3;
  c.lr_final = 1e-4;
  return c;
}

inline TrainConfig train_preset(const std::string& name) {
  if (name == "hash") return hash_preset();
  if (name == "frequency") return frequency_preset();
  if (name == "desk_hash") return desk_hash_preset();
  if (name == "desk_frequency") return desk_frequency_preset();
  throw std::invalid_argument(concat("unknown preset '", name, "' (expected hash, frequency, desk_hash, desk_frequency)"));
}

// ---------------------------------------------------------------------------
// Config serialization

inline Json to_json(const ModelConfig& m) {
  return Json{{"encoding", m.encoding == EncodingKind::hash ? "hash" : "frequency"},
              {"materials", m.materials == MaterialMode::dual ? "2M" : "1M"},
              {"frequency_octaves", m.frequency.octaves},
              {"hash_levels", m.hash.levels},
              {"hash_base_resolution", m.hash.base_resolution},
              {"hash_max_resolution", m.hash.max_resolution},
              {"hash_features_per_level", m.hash.features_per_level},
              {"hash_table_size", m.hash.table_size},
              {"hash_init_range", m.hash.init_range},
              {"sdf_layers", m.sdf_layers},
              {"sdf_width", m.sdf_width},
              {"att_layers", m.att_layers},
              {"att_width", m.att_width},
              {"feature_dim", m.feature_dim},
              {"outer_beta", m.outer_range.beta},
              {"outer_alpha", m.outer_range.alpha},
              {"inner_beta", m.inner_range.beta},
              {"inner_alpha", m.inner_range.alpha},
              {"s_init", m.s_init},
              {"softplus_beta", m.softplus_beta},
              {"r_init", m.r_init},
              {"r_init_inner", m.r_init_inner}};
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"iterations", c.iterations},
              {"batch_rays", c.batch_rays},
              {"samples_per_ray", c.samples_per_ray},
              {"eikonal_points", c.eikonal_points},
              {"lambda", c.lambda},
              {"lr", c.lr},
              {"lr_final", c.lr_final},
              {"pose_lr", c.pose_lr},
              {"pose_refine", c.pose_refine},
              {"shared_principal", c.shared_principal},
              {"warmup", c.warmup},
              {"tau_start", c.tau_start},
              {"tau_end", c.resolved_tau_end()},
              {"seed", c.seed},
              {"init_max_steps", c.init.max_steps},
              {"init_batch", c.init.batch},
              {"init_lr", c.init.lr},
              {"init_target_mae", c.init.target_mae},
              {"init_seed", c.init.seed},
              {"checkpoint_every", c.checkpoint_every},
              {"val_samples", c.val_samples}};
}

namespace detail {
template <class T>
void read_opt(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw IoError(concat("config: field '", key, "' has the wrong type"));
  }
}
}  // namespace detail

/// Fields missing from `j` keep the values already in `base`.
inline ModelConfig model_config_from_json(const Json& j, ModelConfig m = {}) {
  std::string enc = m.encoding == EncodingKind::hash ? "hash" : "frequency";
  std::string mat = m.materials == MaterialMode::dual ? "2M" : "1M";
  detail::read_opt(j, "encoding", enc);
  detail::read_opt(j, "materials", mat);
  if (enc != "hash" && enc != "frequency") throw IoError(concat("config: field 'encoding' must be hash or frequency, got '", enc, "'"));
  if (mat != "1M" && mat != "2M") throw IoError(concat("config: field 'materials' must be 1M or 2M, got '", mat, "'"));
  m.encoding = enc == "hash" ? EncodingKind::hash : EncodingKind::frequency;
  m.materials = mat == "2M" ? MaterialMode::dual : MaterialMode::single;
  detail::read_opt(j, "frequency_octaves", m.frequency.octaves);
  detail::read_opt(j, "hash_levels", m.hash.levels);
  detail::read_opt(j, "hash_base_resolution", m.hash.base_resolution);
  detail::read_opt(j, "hash_max_resolution", m.hash.max_resolution);
  detail::read_opt(j, "hash_features_per_level", m.hash.features_per_level);
  detail::read_opt(j, "hash_table_size", m.hash.table_size);
  detail::read_opt(j, "hash_init_range", m.hash.init_range);
  detail::read_opt(j, "sdf_layers", m.sdf_layers);
  detail::read_opt(j, "sdf_width", m.sdf_width);
  detail::read_opt(j, "att_layers", m.att_layers);
  detail::read_opt(j, "att_width", m.att_width);
  detail::read_opt(j, "feature_dim", m.feature_dim);
  detail::read_opt(j, "outer_beta", m.outer_range.beta);
  detail::read_opt(j, "outer_alpha", m.outer_range.alpha);
  detail::read_opt(j, "inner_beta", m.inner_range.beta);
  detail::read_opt(j, "inner_alpha", m.inner_range.alpha);
  detail::read_opt(j, "s_init", m.s_init);
  detail::read_opt(j, "softplus_beta", m.softplus_beta);
  detail::read_opt(j, "r_init", m.r_init);
  detail::read_opt(j, "r_init_inner", m.r_init_inner);
  return m;
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
  if (!j.is_object()) throw IoError("config: expected a JSON object");
  if (j.contains("model")) c.model = model_config_from_json(j["model"], c.model);
  detail::read_opt(j, "iterations", c.iterations);
  detail::read_opt(j, "batch_rays", c.batch_rays);
  detail::read_opt(j, "samples_per_ray", c.samples_per_ray);
  detail::read_opt(j, "eikonal_points", c.eikonal_points);
  detail::read_opt(j, "lambda", c.lambda);
  detail::read_opt(j, "lr", c.lr);
  detail::read_opt(j, "lr_final", c.lr_final);
  detail::read_opt(j, "pose_lr", c.pose_lr);
  detail::read_opt(j, "pose_refine", c.pose_refine);
  detail::read_opt(j, "shared_principal", c.shared_principal);
  detail::read_opt(j, "warmup", c.warmup);
  detail::read_opt(j, "tau_start", c.tau_start);
  detail::read_opt(j, "tau_end", c.tau_end);
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "init_max_steps", c.init.max_steps);
  detail::read_opt(j, "init_batch", c.init.batch);
  detail::read_opt(j, "init_lr", c.init.lr);
  detail::read_opt(j, "init_target_mae", c.init.target_mae);
  detail::read_opt(j, "init_seed", c.init.seed);
  detail::read_opt(j, "checkpoint_every", c.checkpoint_every);
  detail::read_opt(j, "val_samples", c.val_samples);
  if (c.iterations < 0 || c.batch_rays < 1 || c.samples_per_ray < 2 || c.lambda < 0.0) {
    throw IoError("config: iterations >= 0, batch_rays >= 1, samples_per_ray >= 2 and lambda >= 0 are required");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Binary helpers for checkpoints

namespace ckpt {

class Writer {
 public:
  template <class T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.append(s);
  }
  void matrix(const Matrix& m) {
    pod<std::int64_t>(m.rows());
    pod<std::int64_t>(m.cols());
    buf_.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  const std::string& bytes() const { return buf_; }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string bytes, std::string source) : buf_(std::move(bytes)), src_(std::move(source)) {}
  template <class T>
  T pod() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const auto r = pod<std::int64_t>(), c = pod<std::int64_t>();
    if (r < 0 || c < 0) fail("negative matrix shape");
    Matrix m(r, c);
    need(sizeof(double) * static_cast<std::size_t>(r * c));
    std::memcpy(m.data(), buf_.data() + pos_, sizeof(double) * static_cast<std::size_t>(r * c));
    pos_ += sizeof(double) * static_cast<std::size_t>(r * c);
    return m;
  }
  void expect(const char* magic, std::size_t n) {
    need(n);
    if (std::memcmp(buf_.data() + pos_, magic, n) != 0) fail("bad magic header");
    pos_ += n;
  }
  [[noreturn]] void fail(const std::string& why) const { throw IoError(concat("checkpoint '", src_, "': ", why)); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) fail("truncated file");
  }
  std::string buf_;
  std::string src_;
  std::size_t pos_ = 0;
};

inline constexpr char kMagic[5] = {'N', 'E', 'A', 'S', '\0'};
inline constexpr std::uint8_t kVersion = 1;

}  // namespace ckpt

// ---------------------------------------------------------------------------

struct LossRecord {
  int iter = 0;
  double l_int = 0.0;
  double l_reg = 0.0;
  double total = 0.0;
  double tau = 0.0;

  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& msg, Json diagnostics)
      : std::runtime_error(msg), diagnostics_(std::move(diagnostics)) {}
  const Json& diagnostics() const { return diagnostics_; }

 private:
  Json diagnostics_;
};

/// One training run over a set of views with a given starting camera set.
class Trainer {
 public:
  /// `cameras` holds one entry per dataset image (starting poses); only the
  /// `views` listed are used for ray sampling.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  Trainer(const ProjectionDataset& data, TrainConfig cfg, std::vector<int> views, std::vector<Camera> cameras)
      : data_(&data),
        cfg_(std::move(cfg)),
        views_(std::move(views)),
        model_(cfg_.model, cfg_.seed),
        rig_(std::move(cameras), cfg_.shared_principal),
        rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL) {
    if (views_.empty()) throw std::invalid_argument("Trainer: no training views");
    if (rig_.size() != data.size()) throw std::invalid_argument("Trainer: one camera per image is required");
    for (int v : views_) {
      if (v < 0 || static_cast<std::size_t>(v) >= data.size()) throw std::invalid_argument(concat("Trainer: view ", v, " out of range"));
    }
    geometric_init(model_, cfg_.init);
    weights_ = Adam(model_.parameters());
    poses_ = Adam(rig_.parameters());
    if (!cfg_.pose_refine) {
      for (ParamTensor* p : rig_.parameters()) p->set_requires_grad(false);
    }
    for (int v : views_) {
      const Image& img = data.images[static_cast<std::size_t>(v)];
      for (Index j = 0; j < img.rows(); ++j) {
        for (Index i = 0; i < img.cols(); ++i) pool_.push_back({v, static_cast<int>(i), static_cast<int>(j)});
      }
    }
    order_.resize(pool_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    cursor_ = order_.size();
  }

  const TrainConfig& config() const { return cfg_; }
  int iteration() const { return iter_; }
  NeasModel& model() { return model_; }
  CameraRig& rig() { return rig_; }
  const CameraRig& rig() const { return rig_; }
  const std::vector<LossRecord>& history() const { return history_; }
  const std::vector<int>& views() const { return views_; }
  /// Pixel-pool ids drawn by the most recent step.
  const std::vector<std::uint32_t>& last_batch() const { return last_batch_; }

  double tau() const { return cfg_.pose_refine ? tau_at(iter_, cfg_.schedule()) : kUnmasked; }

  /// One optimisation step.
  LossRecord step() {
    const double tau_now = tau();
    const bool pose_grads = cfg_.pose_refine && iter_ >= cfg_.warmup;
    std::vector<BatchRay> rays;
    std::vector<double> truth;
    std::vector<std::uint32_t> ids;
    double miss_loss = 0.0;
    for (int b = 0; b < cfg_.batch_rays; ++b) {
      const std::uint32_t id = next_pixel();
      const PixelRef& px = pool_[id];
      const double gt = data_->images[static_cast<std::size_t>(px.view)](px.j, px.i);
      const Camera cam = rig_.camera(static_cast<std::size_t>(px.view));
      const Ray ray = pixel_ray(cam, px.i, px.j);
      ids.push_back(id);
      if (!ray.hits()) {
        miss_loss += (1.0 - gt) * (1.0 - gt);
        continue;
      }
      BatchRay br;
      br.view = static_cast<std::size_t>(px.view);
      br.u = px.i + 0.5;
      br.v = px.j + 0.5;
      br.ray = ray;
      br.samples = stratified_sample(ray.near, ray.far, cfg_.samples_per_ray, rng_);
      rays.push_back(std::move(br));
      truth.push_back(gt);
    }

    LossRecord rec;
    rec.iter = iter_;
    rec.tau = tau_now;
    weights_.zero_grad();
    for (ParamTensor* p : rig_.parameters()) p->zero_grad();
    if (!rays.empty()) {
      Graph g;
      const RenderOutput out = render_batch(g, model_, rays, tau_now, pose_grads ? &rig_ : nullptr);
      Matrix gt(static_cast<Index>(truth.size()), 1);
      for (std::size_t i = 0; i < truth.size(); ++i) gt(static_cast<Index>(i), 0) = truth[i];
      Var l_int = g.shift(loss_intensity(g, out.intensity, gt), miss_loss);

      const Matrix& pts = g.value(out.points);
      Matrix eik_pts;
      if (cfg_.eikonal_points > 0 && cfg_.eikonal_points < pts.rows()) {
        eik_pts.resize(cfg_.eikonal_points, 3);
        std::uniform_int_distribution<Index> pick(0, pts.rows() - 1);
        for (Index r = 0; r < eik_pts.rows(); ++r) eik_pts.row(r) = pts.row(pick(rng_));
      } else {
        eik_pts = pts;
      }
      const auto grads = sdf_gradients(g, model_, eik_pts, tau_now);
      Var l_reg = loss_eikonal(g, grads.front());
      for (std::size_t k = 1; k < grads.size(); ++k) l_reg = g.add(l_reg, loss_eikonal(g, grads[k]));
      if (grads.size() > 1) l_reg = g.scale(l_reg, 1.0 / static_cast<double>(grads.size()));
      Var total = total_loss(g, l_int, l_reg, cfg_.lambda);

      rec.l_int = g.item(l_int);
      rec.l_reg = g.item(l_reg);
      rec.total = g.item(total);
      check_finite(rec, ids);
      g.backward(total);
      weights_.step(cfg_.weight_lr(iter_));
      if (cfg_.pose_refine) pose_step(rig_, poses_, iter_, cfg_.schedule(), cfg_.pose_lr);
    } else {
      rec.l_int = rec.total = miss_loss;
      check_finite(rec, ids);
    }
    history_.push_back(rec);
    last_batch_ = std::move(ids);
    ++iter_;
    return rec;
  }

  /// Runs until `until` iterations have been done in total.
  void run(int until, const std::function<void(const LossRecord&)>& on_step = {}) {
    while (iter_ < until) {
      const LossRecord r = step();
      if (on_step) on_step(r);
    }
  }

  /// Evaluation render of one view through the current (refined) camera.
  Image render_view(std::size_t view, int samples = 0) {
    return render_image(model_, rig_.camera(view), samples > 0 ? samples : cfg_.val_samples);
  }

  // -- checkpoints -------------------------------------------------------

  std::string serialize() const {
    ckpt::Writer w;
    w.bytes().append(ckpt::kMagic, 5);
    w.pod<std::uint8_t>(ckpt::kVersion);
    w.str(to_json(cfg_).dump());
    w.pod<std::int64_t>(iter_);
    std::ostringstream rs;
    rs << rng_;
    w.str(rs.str());
    w.pod<std::uint64_t>(views_.size());
    for (int v : views_) w.pod<std::int32_t>(v);
    w.pod<std::uint64_t>(order_.size());
    for (std::uint32_t o : order_) w.pod<std::uint32_t>(o);
    w.pod<std::uint64_t>(cursor_);
    auto params = const_cast<Trainer*>(this)->model_.parameters();
    write_params(w, params, weights_);
    // Original cameras precede the pose tensors: loading rebuilds the rig
    // from them before restoring its state.
    w.str(cameras_to_json(rig_.original()).dump());
    auto pose_params = const_cast<Trainer*>(this)->rig_.parameters();
    write_params(w, pose_params, poses_);
    w.str(cameras_to_json(rig_.cameras()).dump());
    w.pod<std::uint64_t>(history_.size());
    for (const auto& h : history_) w.pod(h);
    return std::move(w.bytes());
  }

  void save(const std::filesystem::path& path) const { atomic_write(path, serialize()); }

  /// Rebuilds a trainer from a checkpoint. The dataset must be the one the
  /// checkpoint was trained on.
  static std::unique_ptr<Trainer> load(const ProjectionDataset& data, const std::filesystem::path& path) {
    ckpt::Reader r(read_file(path), path.string());
    r.expect(ckpt::kMagic, 5);
    const auto version = r.pod<std::uint8_t>();
    if (version != ckpt::kVersion) r.fail(concat("unsupported format version ", int(version)));
    TrainConfig cfg = train_config_from_json(Json::parse(r.str()));
    const auto iter = r.pod<std::int64_t>();
    const std::string rng_state = r.str();
    std::vector<int> views(r.pod<std::uint64_t>());
    for (int& v : views) v = r.pod<std::int32_t>();
    std::vector<std::uint32_t> order(r.pod<std::uint64_t>());
    for (auto& o : order) o = r.pod<std::uint32_t>();
    const auto cursor = r.pod<std::uint64_t>();

    // Parameters are restored below, so skip the (costly) sphere fit.
    TrainConfig quick = cfg;
    quick.init.max_steps = 0;
    auto owned = std::make_unique<Trainer>(data, quick, views, std::vector<Camera>(data.size()));
    Trainer& t = *owned;
    t.cfg_ = cfg;
    std::istringstream rs(rng_state);
    rs >> t.rng_;
    t.iter_ = static_cast<int>(iter);
    if (order.size() != t.order_.size()) r.fail("pixel pool does not match the dataset");
    t.order_ = std::move(order);
    t.cursor_ = cursor;
    read_params(r, t.model_.parameters(), t.weights_);
    // Cameras: rebuild the rig from the stored originals, then restore state.
    const auto original = cameras_from_json(Json::parse(r.str()), path.string() + " (original cameras)");
    t.rig_ = CameraRig(original, cfg.shared_principal);
    t.poses_ = Adam(t.rig_.parameters());
    if (!cfg.pose_refine) {
      for (ParamTensor* p : t.rig_.parameters()) p->set_requires_grad(false);
    }
    read_params(r, t.rig_.parameters(), t.poses_);
    (void)r.str();  // refined cameras, derivable from the rig state
    std::vector<LossRecord> hist(r.pod<std::uint64_t>());
    for (auto& h : hist) h = r.pod<LossRecord>();
    t.history_ = std::move(hist);
    return owned;
  }

  /// Reads only the config and cameras of a checkpoint (for render/extract).
  static std::pair<TrainConfig, std::vector<Camera>> peek(const std::filesystem::path& path);

  /// Restores only the model weights of a checkpoint into a fresh model.
  static std::unique_ptr<NeasModel> load_model(const std::filesystem::path& path);

 private:
  struct PixelRef {
    int view;
    int i, j;
  };

  std::uint32_t next_pixel() {
    if (cursor_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

  void check_finite(const LossRecord& rec, const std::vector<std::uint32_t>& ids) const {
    if (std::isfinite(rec.total) && std::isfinite(rec.l_int) && std::isfinite(rec.l_reg)) return;
    Json diag{{"iter", rec.iter}, {"L_int", rec.l_int}, {"L_reg", rec.l_reg}, {"total", rec.total}, {"tau", rec.tau}};
    Json rays = Json::array();
    for (std::uint32_t id : ids) {
      const PixelRef& p = pool_[id];
      rays.push_back({{"view", p.view}, {"u", p.i}, {"v", p.j}});
    }
    diag["rays"] = rays;
    throw TrainingAborted(concat("non-finite loss at iteration ", rec.iter, " (L_int=", rec.l_int, ", L_reg=", rec.l_reg, ")"),
                          diag);
  }

  static void write_params(ckpt::Writer& w, const std::vector<ParamTensor*>& params, const Adam& opt) {
    w.pod<std::uint64_t>(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.str(params[i]->name());
      w.matrix(params[i]->value());
      const AdamState& st = opt.states()[i];
      w.pod<std::int64_t>(st.step);
      w.matrix(st.m);
      w.matrix(st.v);
    }
  }

  static void read_params(ckpt::Reader& r, const std::vector<ParamTensor*>& params, Adam& opt) {
    const auto n = r.pod<std::uint64_t>();
    if (n != params.size()) r.fail(concat("expected ", params.size(), " tensors, found ", n));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::string name = r.str();
      Matrix value = r.matrix();
      if (name != params[i]->name() || shape_of(value) != params[i]->shape()) {
        r.fail(concat("tensor ", i, " is ", name, shape_of(value).str(), ", expected ", params[i]->name(),
                      params[i]->shape().str()));
      }
      params[i]->assign(std::move(value));
      AdamState& st = opt.states()[i];
      st.step = r.pod<std::int64_t>();
      st.m = r.matrix();
      st.v = r.matrix();
    }
  }

  const ProjectionDataset* data_;
  TrainConfig cfg_;
  std::vector<int> views_;
  NeasModel model_;
  CameraRig rig_;
  Adam weights_;
  Adam poses_;
  std::mt19937_64 rng_;
  std::vector<PixelRef> pool_;
  std::vector<std::uint32_t> order_;
  std::vector<std::uint32_t> last_batch_;
  std::size_t cursor_ = 0;
  int iter_ = 0;
  std::vector<LossRecord> history_;
};

namespace detail {
struct CheckpointHead {
  TrainConfig cfg;
  std::vector<Camera> original, refined;
};

inline CheckpointHead read_head(const std::filesystem::path& path, NeasModel** model_out) {
  ckpt::Reader r(read_file(path), path.string());
  r.expect(ckpt::kMagic, 5);
  const auto version = r.pod<std::uint8_t>();
  if (version != ckpt::kVersion) r.fail(concat("unsupported format version ", int(version)));
  CheckpointHead h;
  h.cfg = train_config_from_json(Json::parse(r.str()));
  (void)r.pod<std::int64_t>();
  (void)r.str();
  const auto nv = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < nv; ++i) (void)r.pod<std::int32_t>();
  const auto no = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < no; ++i) (void)r.pod<std::uint32_t>();
  (void)r.pod<std::uint64_t>();
  auto skip_or_read = [&](const std::vector<ParamTensor*>* params) {
    const auto n = r.pod<std::uint64_t>();
    if (params && n != params->size()) r.fail("tensor count mismatch");
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::string name = r.str();
      Matrix value = r.matrix();
      (void)r.pod<std::int64_t>();
      (void)r.matrix();
      (void)r.matrix();
      if (params) {
        ParamTensor* p = (*params)[i];
        if (name != p->name() || shape_of(value) != p->shape()) r.fail(concat("tensor ", name, " does not match the config"));
        p->assign(std::move(value));
      }
    }
  };
  if (model_out) {
    *model_out = new NeasModel(h.cfg.model, h.cfg.seed);
    const auto params = (*model_out)->parameters();
    skip_or_read(&params);
  } else {
    skip_or_read(nullptr);
  }
  h.original = cameras_from_json(Json::parse(r.str()), path.string());
  skip_or_read(nullptr);
  h.refined = cameras_from_json(Json::parse(r.str()), path.string());
  return h;
}
}  // namespace detail

inline std::pair<TrainConfig, std::vector<Camera>> Trainer::peek(const std::filesystem::path& path) {
  auto h = detail::read_head(path, nullptr);
  return {h.cfg, h.refined};
}

inline std::unique_ptr<NeasModel> Trainer::load_model(const std::filesystem::path& path) {
  NeasModel* raw = nullptr;
  detail::read_head(path, &raw);
  return std::unique_ptr<NeasModel>(raw);
}

// ---------------------------------------------------------------------------
// Run directories and the two-stage protocol

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int iter) {
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt_%06d.bin", iter);
  return dir / name;
}

inline std::string loss_csv(const std::vector<LossRecord>& hist) {
  std::ostringstream out;
  out.precision(17);
  out << "iter,L_int,L_reg,total,tau\n";
  for (const auto& h : hist) out << h.iter << ',' << h.l_int << ',' << h.l_reg << ',' << h.total << ',' << h.tau << '\n';
  return out.str();
}

struct RunOptions {
  std::filesystem::path dir;  // empty: nothing is written
  int log_every = 0;          // progress lines to the log stream
  bool write_val = true;
};

struct RunResult {
  std::vector<Camera> cameras;  // final (refined) cameras, one per image
  std::vector<LossRecord> history;
  std::vector<double> val_psnr;
  double mean_val_psnr = 0.0;
};

inline void write_run_files(const std::filesystem::path& dir, Trainer& t, const std::vector<int>& val, bool write_val) {
  atomic_write(dir / "loss.csv", loss_csv(t.history()));
  t.save(checkpoint_path(dir, t.iteration()));
  Json poses = cameras_to_json(t.rig().cameras());
  poses["provenance"] = {{"source", "pose refinement"}, {"iterations", t.iteration()}, {"refined", t.config().pose_refine}};
  atomic_write(dir / "poses_refined.json", poses.dump(2));
  if (write_val && !val.empty()) {
    std::filesystem::create_directories(dir / "val");
    for (int v : val) {
      const Image img = t.render_view(static_cast<std::size_t>(v));
      write_png(view_image_path(dir / "val", static_cast<std::size_t>(v)), img);
    }
  }
}

/// Trains one stage and fills in validation PSNR over `val` views.
inline RunResult train_stage(const ProjectionDataset& data, const TrainConfig& cfg, const std::vector<int>& views,
                             const std::vector<int>& val, const std::vector<Camera>& cameras, const RunOptions& opt) {
  Trainer t(data, cfg, views, cameras);
  if (!opt.dir.empty()) {
    std::filesystem::create_directories(opt.dir);
    atomic_write(opt.dir / "config.json", to_json(cfg).dump(2));
  }
  while (t.iteration() < cfg.iterations) {
    const LossRecord r = t.step();
    if (opt.log_every > 0 && (r.iter % opt.log_every == 0 || r.iter + 1 == cfg.iterations)) {
      log(LogLevel::info, concat("iter ", r.iter, " L_int=", r.l_int, " L_reg=", r.l_reg, " total=", r.total));
    }
    if (!opt.dir.empty() && cfg.checkpoint_every > 0 && t.iteration() % cfg.checkpoint_every == 0 &&
        t.iteration() < cfg.iterations) {
      t.save(checkpoint_path(opt.dir, t.iteration()));
      atomic_write(opt.dir / "loss.csv", loss_csv(t.history()));
    }
  }
  RunResult res;
  res.cameras = t.rig().cameras();
  res.history = t.history();
  for (int v : val) {
    const double p = psnr(t.render_view(static_cast<std::size_t>(v)), data.images[static_cast<std::size_t>(v)]);
    res.val_psnr.push_back(p);
    res.mean_val_psnr += p / static_cast<double>(val.size());
  }
  if (!opt.dir.empty()) write_run_files(opt.dir, t, val, opt.write_val);
  return res;
}

/// Full protocol. Without pose refinement: one stage on the training views.
/// With it: stage 1 refines poses on all views, stage 2 retrains from
/// scratch on the training views with the refined poses frozen.
inline RunResult train_protocol(const ProjectionDataset& data, const TrainConfig& cfg, const std::vector<Camera>& cameras,
                                const RunOptions& opt = {}) {
  if (!cfg.pose_refine) return train_stage(data, cfg, data.train, data.val, cameras, opt);
  std::vector<int> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  RunOptions s1 = opt;
  if (!opt.dir.empty()) s1.dir = opt.dir / "stage1";
  s1.write_val = false;
  const RunResult refine = train_stage(data, cfg, all, {}, cameras, s1);
  TrainConfig frozen = cfg;
  frozen.pose_refine = false;
  RunResult out = train_stage(data, frozen, data.train, data.val, refine.cameras, opt);
  if (!opt.dir.empty()) {
    Json poses = cameras_to_json(refine.cameras);
    poses["provenance"] = {{"source", "pose refinement, stage 1"}, {"iterations", cfg.iterations}, {"refined", true}};
    atomic_write(opt.dir / "poses_refined.json", poses.dump(2));
  }
  return out;
}

}  // namespace neas

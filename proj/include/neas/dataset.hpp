#pragma once

// Projection datasets on disk:
//   images/view_####.png  16-bit grayscale, 65535 = unattenuated
//   cameras.json          intrinsics and extrinsics per view
//   manifest.json         split, phantom description, attenuation table

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "neas/image_io.hpp"
#include "neas/phantom.hpp"
#include "neas/posecal.hpp"

namespace neas {

using Json = nlohmann::json;

/// Writes through a temporary file and renames it into place.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(concat("cannot open '", tmp.string(), "' for writing"));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(concat("write to '", tmp.string(), "' failed"));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(concat("cannot rename '", tmp.string(), "' to '", path.string(), "': ", ec.message()));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(concat("cannot open '", path.string(), "'"));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json parse_json_file(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw IoError(concat("'", path.string(), "': malformed JSON (", e.what(), ")"));
  }
}

// ---------------------------------------------------------------------------
// Cameras

inline Json camera_to_json(const Camera& c, const std::string& units = "scene") {
  Json j;
  j["fx"] = c.fx;
  j["fy"] = c.fy;
  j["cx"] = c.cx;
  j["cy"] = c.cy;
  j["W"] = c.width;
  j["H"] = c.height;
  std::vector<double> r, t;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) r.push_back(c.rotation(a, b));
    t.push_back(c.translation[a]);
  }
  j["rotation"] = r;
  j["translation"] = t;
  j["units"] = units;
  return j;
}

namespace detail {
template <class T>
T json_field(const Json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw IoError(concat(where, ": missing field '", key, "'"));
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw IoError(concat(where, ": field '", key, "' has the wrong type"));
  }
}
}  // namespace detail

inline Camera camera_from_json(const Json& j, const std::string& where) {
  Camera c;
  c.fx = detail::json_field<double>(j, "fx", where);
  c.fy = detail::json_field<double>(j, "fy", where);
  c.cx = detail::json_field<double>(j, "cx", where);
  c.cy = detail::json_field<double>(j, "cy", where);
  c.width = detail::json_field<int>(j, "W", where);
  c.height = detail::json_field<int>(j, "H", where);
  const auto r = detail::json_field<std::vector<double>>(j, "rotation", where);
  const auto t = detail::json_field<std::vector<double>>(j, "translation", where);
  if (r.size() != 9) throw IoError(concat(where, ": field 'rotation' needs 9 values, got ", r.size()));
  if (t.size() != 3) throw IoError(concat(where, ": field 'translation' needs 3 values, got ", t.size()));
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) c.rotation(a, b) = r[static_cast<std::size_t>(3 * a + b)];
    c.translation[a] = t[static_cast<std::size_t>(a)];
  }
  if (c.width <= 0 || c.height <= 0) throw IoError(concat(where, ": image size must be positive"));
  if ((c.rotation.transpose() * c.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
    throw IoError(concat(where, ": field 'rotation' is not orthonormal"));
  }
  return c;
}

inline Json cameras_to_json(const std::vector<Camera>& cams, const std::string& units = "scene") {
  Json arr = Json::array();
  for (const auto& c : cams) arr.push_back(camera_to_json(c, units));
  return Json{{"views", arr}};
}

inline std::vector<Camera> cameras_from_json(const Json& j, const std::string& file) {
  if (!j.is_object() || !j.contains("views") || !j["views"].is_array()) {
    throw IoError(concat(file, ": missing field 'views'"));
  }
  std::vector<Camera> out;
  for (std::size_t i = 0; i < j["views"].size(); ++i) {
    out.push_back(camera_from_json(j["views"][i], concat(file, " views[", i, "]")));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phantom description

inline Json vec_json(const Eigen::Vector3d& v) { return Json::array({v.x(), v.y(), v.z()}); }

inline Eigen::Vector3d vec_from_json(const Json& j, const char* key, const std::string& where) {
  const auto v = detail::json_field<std::vector<double>>(j, key, where);
  if (v.size() != 3) throw IoError(concat(where, ": field '", key, "' needs 3 values"));
  return {v[0], v[1], v[2]};
}

inline Json phantom_to_json(const AnalyticPhantom& ph) {
  Json prims = Json::array();
  for (const auto& p : ph.primitives()) {
    Json j;
    j["kind"] = primitive_kind(p.shape);
    j["label"] = p.label == Label::inner ? "inner" : "outer";
    j["mu"] = p.mu;
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, SpherePrim>) {
            j["center"] = vec_json(s.center);
            j["radius"] = s.radius;
          } else if constexpr (std::is_same_v<T, BoxPrim>) {
            j["center"] = vec_json(s.center);
            j["half_extents"] = vec_json(s.half);
          } else {
            j["a"] = vec_json(s.a);
            j["b"] = vec_json(s.b);
            j["radius"] = s.radius;
          }
        },
        p.shape);
    prims.push_back(j);
  }
  return Json{{"name", ph.name()}, {"primitives", prims}};
}

inline AnalyticPhantom phantom_from_json(const Json& j, const std::string& where) {
  const auto name = detail::json_field<std::string>(j, "name", where);
  if (!j.contains("primitives") || !j["primitives"].is_array()) throw IoError(concat(where, ": missing field 'primitives'"));
  std::vector<Primitive> prims;
  for (std::size_t i = 0; i < j["primitives"].size(); ++i) {
    const Json& pj = j["primitives"][i];
    const std::string w = concat(where, " primitives[", i, "]");
    Primitive p;
    const auto kind = detail::json_field<std::string>(pj, "kind", w);
    const auto label = detail::json_field<std::string>(pj, "label", w);
    p.mu = detail::json_field<double>(pj, "mu", w);
    if (label != "inner" && label != "outer") throw IoError(concat(w, ": field 'label' must be inner or outer"));
    p.label = label == "inner" ? Label::inner : Label::outer;
    if (kind == "sphere") {
      p.shape = SpherePrim{vec_from_json(pj, "center", w), detail::json_field<double>(pj, "radius", w)};
    } else if (kind == "box") {
      p.shape = BoxPrim{vec_from_json(pj, "center", w), vec_from_json(pj, "half_extents", w)};
    } else if (kind == "capsule") {
      p.shape = CapsulePrim{vec_from_json(pj, "a", w), vec_from_json(pj, "b", w), detail::json_field<double>(pj, "radius", w)};
    } else {
      throw IoError(concat(w, ": field 'kind' has unknown value '", kind, "'"));
    }
    prims.push_back(p);
  }
  return AnalyticPhantom(name, std::move(prims));
}

// ---------------------------------------------------------------------------
// Dataset

struct ProjectionDataset {
  std::vector<Image> images;
  std::vector<Camera> cameras;
  std::vector<int> train;
  std::vector<int> val;
  std::optional<AnalyticPhantom> phantom;
  double scene_scale = 1.0;  // millimetres per scene unit
  Json manifest;

  std::size_t size() const { return images.size(); }
};

/// `count` validation views spread evenly over `views`.
inline std::vector<int> spread_split(int views, int count) {
  std::vector<int> out;
  if (count <= 0) return out;
  const int stride = views / count;
  for (int k = 0; k < count; ++k) out.push_back(k * stride + stride / 2);
  return out;
}

inline std::filesystem::path view_image_path(const std::filesystem::path& dir, std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof(name), "view_%04zu.png", i);
  return dir / name;
}

struct DatasetMeta {
  std::optional<AnalyticPhantom> phantom;
  std::vector<int> val;
  double scene_scale = 1.0;
  double noise_sigma = 0.0;
  Json extra = Json::object();
};

inline void write_dataset(const std::filesystem::path& dir, const std::vector<Image>& images,
                          const std::vector<Camera>& cams, const DatasetMeta& meta) {
  if (images.size() != cams.size()) {
    throw std::invalid_argument(concat("write_dataset: ", images.size(), " images but ", cams.size(), " cameras"));
  }
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError(concat("cannot create '", (dir / "images").string(), "': ", ec.message()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto path = view_image_path(dir / "images", i);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    write_png(tmp, images[i]);
    std::filesystem::rename(tmp, path);
  }
  atomic_write(dir / "cameras.json", cameras_to_json(cams).dump(2));

  std::vector<int> train;
  for (int i = 0; i < static_cast<int>(images.size()); ++i) {
    if (std::find(meta.val.begin(), meta.val.end(), i) == meta.val.end()) train.push_back(i);
  }
  Json m;
  m["n_images"] = images.size();
  m["split"] = {{"train", train}, {"val", meta.val}};
  m["scene_scale_mm_per_unit"] = meta.scene_scale;
  m["noise_sigma"] = meta.noise_sigma;
  m["intensity_scale"] = 65535;
  if (meta.phantom) {
    m["phantom"] = phantom_to_json(*meta.phantom);
    Json table = Json::object();
    table["air"] = 0.0;
    for (const auto& p : meta.phantom->primitives()) table[p.label == Label::inner ? "inner" : "outer"] = p.mu;
    m["mu_table"] = table;
  }
  m["extra"] = meta.extra;
  atomic_write(dir / "manifest.json", m.dump(2));
}

inline ProjectionDataset load_dataset(const std::filesystem::path& dir) {
  ProjectionDataset ds;
  const auto cam_path = dir / "cameras.json";
  const auto man_path = dir / "manifest.json";
  ds.cameras = cameras_from_json(parse_json_file(cam_path), cam_path.string());
  ds.manifest = parse_json_file(man_path);
  const std::string mw = man_path.string();
  const auto n = detail::json_field<std::size_t>(ds.manifest, "n_images", mw);
  if (n != ds.cameras.size()) {
    throw IoError(concat(mw, ": field 'n_images' is ", n, " but cameras.json lists ", ds.cameras.size(), " views"));
  }
  if (!ds.manifest.contains("split")) throw IoError(concat(mw, ": missing field 'split'"));
  ds.train = detail::json_field<std::vector<int>>(ds.manifest["split"], "train", mw + " split");
  ds.val = detail::json_field<std::vector<int>>(ds.manifest["split"], "val", mw + " split");
  for (int v : ds.train) {
    if (v < 0 || static_cast<std::size_t>(v) >= n) throw IoError(concat(mw, ": split index ", v, " out of range"));
  }
  for (int v : ds.val) {
    if (v < 0 || static_cast<std::size_t>(v) >= n) throw IoError(concat(mw, ": split index ", v, " out of range"));
  }
  if (ds.manifest.contains("scene_scale_mm_per_unit")) ds.scene_scale = ds.manifest["scene_scale_mm_per_unit"].get<double>();
  if (ds.manifest.contains("phantom")) ds.phantom = phantom_from_json(ds.manifest["phantom"], mw + " phantom");
  for (std::size_t i = 0; i < n; ++i) {
    const auto path = view_image_path(dir / "images", i);
    Image img = read_png(path);
    const Camera& c = ds.cameras[i];
    if (img.cols() != c.width || img.rows() != c.height) {
      throw IoError(concat(path.string(), ": image is ", img.cols(), "x", img.rows(), " but cameras.json says ", c.width,
                           "x", c.height));
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Simulation

struct SimulateConfig {
  std::string phantom = "sphere";
  TrajectoryConfig trajectory{};
  int val_views = 4;
  int supersample = 1;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  double scene_scale = 100.0;  // mm per scene unit
};

struct SimulatedData {
  AnalyticPhantom phantom;
  std::vector<Camera> cameras;
  std::vector<Image> images;
  std::vector<int> val;
};

inline SimulatedData simulate(const AnalyticPhantom& ph, const SimulateConfig& cfg) {
  SimulatedData out{ph, make_trajectory(cfg.trajectory), {}, spread_split(cfg.trajectory.views, cfg.val_views)};
  for (std::size_t i = 0; i < out.cameras.size(); ++i) {
    ProjectOptions po{cfg.supersample, cfg.noise_sigma, cfg.seed + i};
    out.images.push_back(project(ph, out.cameras[i], po));
  }
  return out;
}

inline void simulate_to_dir(const std::filesystem::path& dir, const SimulateConfig& cfg) {
  const auto data = simulate(phantom_preset(cfg.phantom), cfg);
  DatasetMeta meta;
  meta.phantom = data.phantom;
  meta.val = data.val;
  meta.scene_scale = cfg.scene_scale;
  meta.noise_sigma = cfg.noise_sigma;
  meta.extra = {{"supersample", cfg.supersample},
                {"d_source", cfg.trajectory.d_source},
                {"d_detector", cfg.trajectory.d_detector},
                {"step_deg", cfg.trajectory.step_deg}};
  write_dataset(dir, data.images, data.cameras, meta);
}

}  // namespace neas

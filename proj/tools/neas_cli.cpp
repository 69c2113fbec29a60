// Command-line front end: simulate, train, render, extract, eval.

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "neas/neas.hpp"

namespace fs = std::filesystem;
using namespace neas;

namespace {

Json metric(const std::string& name, double value, const std::string& units) {
  // JSON has no infinity; identical inputs report the string "inf".
  Json v = std::isinf(value) ? Json("inf") : Json(value);
  return Json{{"metric", name}, {"value", v}, {"units", units}};
}

bool has_ext(const fs::path& p, const char* ext) { return p.extension() == ext; }

struct SimulateArgs {
  SimulateConfig cfg;
  std::string out;
};

struct TrainArgs {
  std::string data, out, preset = "desk_hash", config, resume, materials, encoding, ranges;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
  bool pose_refine = false, no_pose_refine = false;
  int log_every = 100;
};

struct RenderArgs {
  std::string checkpoint, out, cameras;
  std::vector<int> views;
  int samples = 128;
};

struct ExtractArgs {
  std::string checkpoint, out, material = "outer";
  int resolution = 128;
};

struct EvalArgs {
  std::string pred, ref;
  bool align = false;
  std::size_t points = 10000;
  double scale = 1.0;
  std::string units = "scene";
};

int run_simulate(const SimulateArgs& a) {
  simulate_to_dir(a.out, a.cfg);
  std::cout << "wrote " << a.cfg.trajectory.views << " views to " << a.out << "\n";
  return 0;
}

TrainConfig build_config(const TrainArgs& a) {
  TrainConfig cfg = train_preset(a.preset);
  if (!a.config.empty()) cfg = train_config_from_json(parse_json_file(a.config), cfg);
  if (!a.encoding.empty()) {
    if (a.encoding != "hash" && a.encoding != "frequency") throw std::invalid_argument("--encoding must be hash or frequency");
    cfg.model.encoding = a.encoding == "hash" ? EncodingKind::hash : EncodingKind::frequency;
  }
  if (!a.materials.empty()) {
    if (a.materials != "1M" && a.materials != "2M") throw std::invalid_argument("--materials must be 1M or 2M");
    cfg.model.materials = a.materials == "2M" ? MaterialMode::dual : MaterialMode::single;
  }
  if (!a.ranges.empty()) {
    std::vector<double> mu;
    std::stringstream ss(a.ranges);
    for (std::string tok; std::getline(ss, tok, ',');) mu.push_back(std::stod(tok));
    if (mu.size() != 4) throw std::invalid_argument("--ranges needs air,muscle,bone,t_max");
    const MaterialRanges r = material_ranges(mu[0], mu[1], mu[2], mu[3]);
    cfg.model.outer_range = r.outer;
    cfg.model.inner_range = r.inner;
  }
  if (a.iterations) cfg.iterations = *a.iterations;
  if (a.seed) cfg.seed = *a.seed;
  if (a.pose_refine) cfg.pose_refine = true;
  if (a.no_pose_refine) cfg.pose_refine = false;
  return cfg;
}

int run_train(const TrainArgs& a) {
  const ProjectionDataset data = load_dataset(a.data);
  RunOptions opt;
  opt.dir = a.out;
  opt.log_every = a.log_every;
  if (!a.resume.empty()) {
    auto t = Trainer::load(data, a.resume);
    const int until = a.iterations.value_or(t->config().iterations);
    t->run(until);
    fs::create_directories(opt.dir);
    write_run_files(opt.dir, *t, data.val, true);
    std::cout << "resumed to iteration " << t->iteration() << "\n";
    return 0;
  }
  const TrainConfig cfg = build_config(a);
  const RunResult res = train_protocol(data, cfg, data.cameras, opt);
  Json summary{{"mean_val_psnr", std::isinf(res.mean_val_psnr) ? Json("inf") : Json(res.mean_val_psnr)},
               {"val_views", data.val},
               {"dataset", fs::absolute(a.data).string()}};
  atomic_write(opt.dir / "summary.json", summary.dump(2));
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_render(const RenderArgs& a) {
  auto [cfg, cams] = Trainer::peek(a.checkpoint);
  if (!a.cameras.empty()) cams = cameras_from_json(parse_json_file(a.cameras), a.cameras);
  auto model = Trainer::load_model(a.checkpoint);
  std::vector<int> views = a.views;
  if (views.empty()) {
    for (int i = 0; i < static_cast<int>(cams.size()); ++i) views.push_back(i);
  }
  fs::create_directories(a.out);
  for (int v : views) {
    if (v < 0 || static_cast<std::size_t>(v) >= cams.size()) {
      throw std::out_of_range(concat("view ", v, " out of range (", cams.size(), " cameras)"));
    }
    write_png(view_image_path(a.out, static_cast<std::size_t>(v)), render_image(*model, cams[static_cast<std::size_t>(v)], a.samples));
  }
  std::cout << "rendered " << views.size() << " views to " << a.out << "\n";
  return 0;
}

int run_extract(const ExtractArgs& a) {
  if (a.resolution < 8) throw std::invalid_argument("--resolution must be at least 8");
  auto model = Trainer::load_model(a.checkpoint);
  const Surface which = a.material == "inner" ? Surface::inner : Surface::outer;
  const TriMesh mesh = marching_cubes(sdf_grid_eval(*model, a.resolution, which));
  write_ply(a.out, mesh);
  std::cout << "wrote " << mesh.faces.size() << " faces to " << a.out << "\n";
  return 0;
}

int run_eval(const EvalArgs& a) {
  const fs::path pred(a.pred), ref(a.ref);
  Json out = Json::array();
  if (has_ext(pred, ".png") && has_ext(ref, ".png")) {
    const Image p = read_png(pred), r = read_png(ref);
    out.push_back(metric("psnr", psnr(p, r), "dB"));
    out.push_back(metric("ssim", ssim(p, r), ""));
  } else if (has_ext(pred, ".ply") && has_ext(ref, ".ply")) {
    const TriMesh pm = read_ply(pred), rm = read_ply(ref);
    if (pm.empty() || rm.empty()) throw std::runtime_error("eval: a mesh has no faces");
    PointCloud pc = sample_surface(pm, a.points, 1), rc = sample_surface(rm, a.points, 2);
    if (a.align) pc = icp_align(pc, rc).apply(pc);
    out.push_back(metric("chamfer", a.scale * chamfer_distance(pc, rc), a.units));
  } else {
    throw std::invalid_argument("eval: --pred and --ref must both be .png images or both .ply meshes");
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural attenuation surfaces: simulate, train, render, extract, eval"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Project an analytic phantom into a dataset directory");
  s->add_option("--phantom", sim.cfg.phantom, "sphere | nested_spheres | limb")->capture_default_str();
  s->add_option("--out", sim.out, "Output dataset directory")->required();
  s->add_option("--views", sim.cfg.trajectory.views)->capture_default_str();
  s->add_option("--step", sim.cfg.trajectory.step_deg, "Degrees between views")->capture_default_str();
  s->add_option("--size", sim.cfg.trajectory.width, "Square image size in pixels")->capture_default_str();
  s->add_option("--d-source", sim.cfg.trajectory.d_source)->capture_default_str();
  s->add_option("--d-detector", sim.cfg.trajectory.d_detector)->capture_default_str();
  s->add_option("--val", sim.cfg.val_views, "Held-out validation views")->capture_default_str();
  s->add_option("--supersample", sim.cfg.supersample)->capture_default_str();
  s->add_option("--noise", sim.cfg.noise_sigma, "Gaussian pixel noise sigma")->capture_default_str();
  s->add_option("--seed", sim.cfg.seed)->capture_default_str();
  s->add_option("--scene-scale", sim.cfg.scene_scale, "Millimetres per scene unit")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on a dataset (two stages when pose refinement is on)");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--preset", tr.preset, "hash | frequency | desk_hash | desk_frequency")->capture_default_str();
  t->add_option("--config", tr.config, "JSON config (a run's config.json works)");
  t->add_option("--encoding", tr.encoding, "hash | frequency");
  t->add_option("--materials", tr.materials, "1M | 2M");
  t->add_option("--ranges", tr.ranges, "Material ranges from air,muscle,bone,t_max attenuation");
  t->add_option("--iterations", tr.iterations);
  t->add_option("--seed", tr.seed);
  t->add_flag("--pose-refine", tr.pose_refine);
  t->add_flag("--no-pose-refine", tr.no_pose_refine);
  t->add_option("--resume", tr.resume, "Continue from a checkpoint");
  t->add_option("--log-every", tr.log_every)->capture_default_str();

  RenderArgs rd;
  auto* r = app.add_subcommand("render", "Render views from a checkpoint");
  r->add_option("--checkpoint", rd.checkpoint)->required();
  r->add_option("--out", rd.out, "Output directory")->required();
  r->add_option("--cameras", rd.cameras, "cameras.json (default: refined cameras in the checkpoint)");
  r->add_option("--view", rd.views, "View indices (default: all)");
  r->add_option("--samples", rd.samples)->capture_default_str();

  ExtractArgs ex;
  auto* e = app.add_subcommand("extract", "Extract a surface mesh as PLY");
  e->add_option("--checkpoint", ex.checkpoint)->required();
  e->add_option("--out", ex.out, "PLY file")->required();
  e->add_option("--material", ex.material)->check(CLI::IsMember({"outer", "inner"}))->capture_default_str();
  e->add_option("--resolution", ex.resolution, "Grid size G")->capture_default_str();

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "PSNR/SSIM for images or Chamfer distance for meshes");
  v->add_option("--pred", ev.pred)->required();
  v->add_option("--ref", ev.ref)->required();
  v->add_flag("--align", ev.align, "ICP similarity pre-alignment (meshes)");
  v->add_option("--points", ev.points, "Surface samples per mesh")->capture_default_str();
  v->add_option("--scale", ev.scale, "Multiply distances (e.g. mm per scene unit)")->capture_default_str();
  v->add_option("--units", ev.units)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n\n";
    CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  }

  try {
    sim.cfg.trajectory.height = sim.cfg.trajectory.width;
    if (s->parsed()) return run_simulate(sim);
    if (t->parsed()) return run_train(tr);
    if (r->parsed()) return run_render(rd);
    if (e->parsed()) return run_extract(ex);
    if (v->parsed()) return run_eval(ev);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}

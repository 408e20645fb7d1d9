// facmap command-line tool: synth | map | eval | render | ablate.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "facmap/config.hpp"
#include "facmap/dataset.hpp"
#include "facmap/error.hpp"
#include "facmap/image_io.hpp"
#include "facmap/mesh.hpp"
#include "facmap/metrics.hpp"
#include "facmap/parallel.hpp"
#include "facmap/pipeline.hpp"
#include "facmap/renderer.hpp"

namespace fs = std::filesystem;
using namespace facmap;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

// Flags shared by every subcommand. Unset flags leave the configuration alone.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> iters_init;
  std::optional<std::size_t> iters_online;
  std::optional<std::size_t> window;
  std::optional<std::size_t> rays;
  std::string out;
  bool quiet = false;

  void add(CLI::App& app, const config::RunConfig& d, bool out_required) {
    const auto& s = d.mapper.schedule;
    app.add_option("--config", config, "JSON config file layered over the built-in defaults");
    app.add_option("--seed", seed, "random seed")->default_str(std::to_string(d.seed));
    app.add_option("--threads", threads, "worker threads (1 = deterministic)")
        ->default_str(std::to_string(d.threads));
    app.add_option("--iters-init", iters_init, "initialization iterations")
        ->default_str(std::to_string(s.iters_init));
    app.add_option("--iters-online", iters_online, "iterations per map update")
        ->default_str(std::to_string(s.iters_online));
    app.add_option("--window", window, "local window size, also the initialization window")
        ->default_str(std::to_string(d.mapper.window.local));
    app.add_option("--rays", rays, "rendered pixels per iteration")->default_str(std::to_string(s.rays));
    auto* o = app.add_option("--out", out, "output directory");
    if (out_required) o->required();
    app.add_flag("--quiet", quiet, "only warnings and errors");
  }

  config::RunConfig resolve(const config::RunConfig& defaults) const {
    config::RunConfig c = defaults;
    if (!config.empty()) c = config::load_file(c, config);
    if (seed) c.seed = *seed;
    if (threads) c.threads = *threads;
    if (iters_init) c.mapper.schedule.iters_init = *iters_init;
    if (iters_online) c.mapper.schedule.iters_online = *iters_online;
    if (window) c.mapper.window.local = c.mapper.schedule.window_init = *window;
    if (rays) c.mapper.schedule.rays = *rays;
    if (c.mapper.schedule.color_iters > c.mapper.schedule.iters_init)
      c.mapper.schedule.color_iters = c.mapper.schedule.iters_init;
    c.validate();
    set_num_threads(c.threads);
    spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
    return c;
  }
};

Pose parse_pose(const std::string& text) {
  std::istringstream is(text);
  double tx, ty, tz, qx, qy, qz, qw;
  if (!(is >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
    throw ConfigError("--pose expects 'tx ty tz qx qy qz qw', got '" + text + "'");
  const double n = std::sqrt(qx * qx + qy * qy + qz * qz + qw * qw);
  if (std::abs(n - 1.0) > 1e-3) throw ConfigError("--pose quaternion is not unit length");
  return Pose::from_tum(Vec3(tx, ty, tz), Eigen::Quaterniond(qw, qx, qy, qz));
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

int cmd_synth(const config::RunConfig& c, const fs::path& out) {
  data::Dataset d = data::generate_synthetic(c.synth, c.seed);
  data::save_dataset(d, out);
  spdlog::info("wrote {} frames to {}", d.frames.size(), out.string());
  return kOk;
}

int cmd_map(const config::RunConfig& c, const fs::path& dataset, const fs::path& out) {
  const data::Dataset d = data::load_dataset(dataset);
  pipeline::MapOptions opt;
  opt.out = out;
  opt.mesh = true;
  const pipeline::MapResult r = pipeline::run_mapping(d, c, opt);
  std::cout << metrics::format_report(r.report);
  return kOk;
}

int cmd_eval(const config::RunConfig& c, const std::string& checkpoint, const std::string& outputs,
             const fs::path& dataset, const fs::path& out) {
  if (checkpoint.empty() == outputs.empty()) throw ConfigError("eval needs exactly one of --checkpoint or --outputs");
  const data::Dataset d = data::load_dataset(dataset);
  const fs::path ckpt = checkpoint.empty() ? fs::path(outputs) / "model.ckpt" : fs::path(checkpoint);
  const auto model = config::load_model(ckpt);
  std::optional<mesh::Mesh> recon;
  if (!outputs.empty() && fs::exists(fs::path(outputs) / "mesh.ply"))
    recon = mesh::read_ply(fs::path(outputs) / "mesh.ply");
  else if (d.gt_mesh)
    recon = mesh::extract_mesh(*model, c.eval.mesh_cell, d.bounds, false);
  fs::create_directories(out);
  const metrics::MetricReport rep =
      pipeline::evaluate_model(*model, d, c, recon ? &*recon : nullptr, out / "renders");
  metrics::write_report(out / "report.txt", rep);
  std::cout << metrics::format_report(rep);
  return kOk;
}

int cmd_render(const config::RunConfig& c, const fs::path& checkpoint, const std::string& pose_text,
               const std::string& dataset, int width, int height, double fov, const fs::path& out) {
  const auto model = config::load_model(checkpoint);
  CameraIntrinsics k;
  if (!dataset.empty()) {
    const data::Dataset d = data::load_dataset(dataset);
    if (d.frames.empty()) throw DataError("dataset " + dataset + " has no frames");
    k = d.frames.front().intrinsics;
  } else {
    k = data::pinhole(width, height, fov);
  }
  const Pose pose = parse_pose(pose_text);
  const render::RenderedView v = render::render_view(*model, k, pose, c.mapper.render, true);
  fs::create_directories(out);
  io::write_png_rgb(out / "rgb.png", v.color);
  io::write_png_depth(out / "depth.png", v.zdepth);
  spdlog::info("wrote {} and {}", (out / "rgb.png").string(), (out / "depth.png").string());
  return kOk;
}

int cmd_ablate(const config::RunConfig& c, const fs::path& dataset, const std::string& axis, std::size_t seeds,
               const pipeline::OverfitSpec& overfit, const fs::path& out) {
  const pipeline::AblationAxis a = pipeline::parse_axis(axis);
  const data::Dataset d = data::load_dataset(dataset);
  const pipeline::AblationTable t = pipeline::run_ablation(d, c, a, seeds, overfit);
  fs::create_directories(out);
  write_file(out / ("ablation_" + axis + ".txt"), t.format());
  std::cout << t.format();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const config::RunConfig defaults;

  CLI::App app{"facmap: incremental dense mapping from posed RGB frames"};
  app.require_subcommand(1);

  CommonFlags synth_f, map_f, eval_f, render_f, ablate_f;

  auto* synth = app.add_subcommand("synth", "generate a synthetic room dataset with ground truth");
  synth_f.add(*synth, defaults, true);

  auto* map = app.add_subcommand("map", "map a dataset, writing checkpoints, log, mesh, renders and report");
  std::string map_dataset;
  map->add_option("--dataset", map_dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  map_f.add(*map, defaults, true);

  auto* eval = app.add_subcommand("eval", "compute render and mesh metrics of a trained model");
  std::string eval_dataset, eval_ckpt, eval_outputs;
  eval->add_option("--dataset", eval_dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->check(CLI::ExistingFile);
  eval->add_option("--outputs", eval_outputs, "output directory of a map run")->check(CLI::ExistingDirectory);
  eval_f.add(*eval, defaults, true);

  auto* rend = app.add_subcommand("render", "render color and depth from an arbitrary pose");
  std::string render_ckpt, render_pose, render_dataset;
  int render_w = 64, render_h = 64;
  double render_fov = 90.0;
  rend->add_option("--checkpoint", render_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  rend->add_option("--pose", render_pose, "world-from-camera pose 'tx ty tz qx qy qz qw'")->required();
  rend->add_option("--dataset", render_dataset, "take intrinsics from this dataset")
      ->check(CLI::ExistingDirectory);
  rend->add_option("--width", render_w, "image width without --dataset")->capture_default_str();
  rend->add_option("--height", render_h, "image height without --dataset")->capture_default_str();
  rend->add_option("--fov", render_fov, "horizontal field of view in degrees without --dataset")
      ->capture_default_str();
  render_f.add(*rend, defaults, true);

  auto* ablate = app.add_subcommand("ablate", "paired runs along one design axis");
  std::string ablate_dataset, ablate_axis;
  std::size_t ablate_seeds = 3;
  pipeline::OverfitSpec overfit;
  ablate->add_option("--dataset", ablate_dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--axis", ablate_axis, "factorization | dual_path | render_mode")
      ->required()
      ->check(CLI::IsMember({"factorization", "dual_path", "render_mode"}));
  ablate->add_option("--seeds", ablate_seeds, "consecutive seeds per variant")->capture_default_str();
  ablate->add_option("--target-psnr", overfit.target_psnr, "render_mode: PSNR to reach on frame 0")
      ->capture_default_str();
  ablate->add_option("--max-iters", overfit.max_iters, "render_mode: iteration cap")->capture_default_str();
  ablate_f.add(*ablate, defaults, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_f.resolve(defaults), synth_f.out);
    if (map->parsed()) return cmd_map(map_f.resolve(defaults), map_dataset, map_f.out);
    if (eval->parsed())
      return cmd_eval(eval_f.resolve(defaults), eval_ckpt, eval_outputs, eval_dataset, eval_f.out);
    if (rend->parsed())
      return cmd_render(render_f.resolve(defaults), render_ckpt, render_pose, render_dataset, render_w, render_h,
                        render_fov, render_f.out);
    if (ablate->parsed())
      return cmd_ablate(ablate_f.resolve(defaults), ablate_dataset, ablate_axis, ablate_seeds, overfit,
                        ablate_f.out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}

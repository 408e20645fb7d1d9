#include "facmap/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>

#include "facmap/error.hpp"
#include "facmap/image_io.hpp"
#include "facmap/losses.hpp"
#include "facmap/renderer.hpp"

namespace facmap::pipeline {

namespace fs = std::filesystem;

namespace {

std::string frame_name(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06lld", static_cast<long long>(id));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

MapResult run_mapping(const data::Dataset& data, const config::RunConfig& cfg, const MapOptions& opt) {
  cfg.validate();
  const mapping::Schedule& sch = cfg.mapper.schedule;
  if (data.frames.size() < sch.window_init)
    throw DataError("dataset has " + std::to_string(data.frames.size()) + " frames, initialization needs " +
                    std::to_string(sch.window_init));

  std::ofstream log_file;
  if (opt.out) {
    fs::create_directories(*opt.out);
    if (cfg.checkpoint_every > 0) fs::create_directories(*opt.out / "checkpoints");
    write_text(*opt.out / "config.json", config::to_json(cfg) + "\n");
    log_file.open(*opt.out / "log.jsonl");
    if (!log_file) throw DataError("cannot write " + (*opt.out / "log.jsonl").string());
  }

  MapResult result;
  result.model = std::make_unique<SceneModel>(data.bounds, cfg.model_spec(), cfg.seed);
  spdlog::info("model: {} parameters, bounds [{:.2f} {:.2f} {:.2f}] - [{:.2f} {:.2f} {:.2f}]",
               result.model->store().parameter_count(), data.bounds.min_corner().x(), data.bounds.min_corner().y(),
               data.bounds.min_corner().z(), data.bounds.max_corner().x(), data.bounds.max_corner().y(), data.bounds.max_corner().z());

  mapping::Mapper mapper(*result.model, cfg.mapper, cfg.seed);
  mapper.on_update = [&](const mapping::UpdateRecord& r) {
    if (log_file.is_open()) {
      log_file << mapping::to_json_line(r) << '\n';
      log_file.flush();
    }
    if (opt.out && cfg.checkpoint_every > 0 && r.update % cfg.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof name, "update_%04zu.ckpt", r.update);
      config::save_model(*opt.out / "checkpoints" / name, *result.model);
    }
    if (opt.on_update) opt.on_update(r);
  };

  const std::span<const Frame> frames(data.frames);
  mapper.initialize(frames.first(sch.window_init));
  for (std::size_t s = sch.window_init; s + sch.step_frames <= frames.size(); s += sch.step_frames)
    mapper.step(frames.subspan(s, sch.step_frames));
  result.log = mapper.log();

  if (opt.out) config::save_model(*opt.out / "model.ckpt", *result.model);
  if (opt.mesh) {
    result.mesh = mesh::extract_mesh(*result.model, cfg.eval.mesh_cell, data.bounds, cfg.eval.mesh_colors);
    if (opt.out) mesh::write_ply(*opt.out / "mesh.ply", result.mesh);
  }
  if (opt.evaluate) {
    std::optional<fs::path> renders;
    if (opt.out) renders = *opt.out / "renders";
    result.report = evaluate_model(*result.model, data, cfg, opt.mesh ? &result.mesh : nullptr, renders);
    if (opt.out) metrics::write_report(*opt.out / "report.txt", result.report);
  }
  return result;
}

metrics::MetricReport evaluate_model(const SceneModel& model, const data::Dataset& data,
                                     const config::RunConfig& cfg, const mesh::Mesh* recon,
                                     const std::optional<fs::path>& render_dir) {
  metrics::MetricReport report;
  if (render_dir) fs::create_directories(*render_dir);
  for (std::size_t i = 0; i < data.frames.size(); i += cfg.eval.frame_stride) {
    const Frame& f = data.frames[i];
    const render::RenderedView v = render::render_view(model, f.intrinsics, f.pose, cfg.mapper.render, true);
    if (render_dir) {
      io::write_png_rgb(*render_dir / (frame_name(f.id) + "_rgb.png"), v.color);
      io::write_png_depth(*render_dir / (frame_name(f.id) + "_depth.png"), v.zdepth);
    }
    if (!f.depth) continue;
    metrics::FrameRow row;
    row.id = f.id;
    row.render = metrics::evaluate_render(v.color, v.zdepth, f.rgb, *f.depth, metrics::opacity_mask(v.opacity));
    report.frames.push_back(row);
  }
  report.summarize_frames();
  if (recon && data.gt_mesh) {
    if (recon->empty())
      spdlog::warn("reconstructed mesh is empty, mesh metrics absent");
    else
      report.set_mesh(mesh::evaluate_mesh(*recon, *data.gt_mesh, cfg.eval.mesh_samples, cfg.eval.mesh_threshold,
                                          cfg.seed));
  }
  return report;
}

std::optional<double> mean_recent_depth_l1(const std::vector<mapping::UpdateRecord>& log, std::size_t count) {
  double sum = 0.0;
  std::size_t n = 0;
  for (auto it = log.rbegin(); it != log.rend() && n < count; ++it)
    if (it->depth_l1_cm) {
      sum += *it->depth_l1_cm;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::optional<std::size_t> overfit_view(const Frame& frame, const field::SceneBounds& bounds,
                                        const config::RunConfig& cfg, const OverfitSpec& spec) {
  cfg.validate();
  SceneModel model(bounds, cfg.model_spec(), cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  const CameraIntrinsics& k = frame.intrinsics;
  std::uniform_int_distribution<int> u(0, k.width - 1), v(0, k.height - 1);
  for (std::size_t it = 1; it <= spec.max_iters; ++it) {
    std::vector<render::Pixel> px(spec.rays);
    std::vector<double> observed;
    observed.reserve(3 * spec.rays);
    for (auto& p : px) {
      p.u = u(rng);
      p.v = v(rng);
      for (int c = 0; c < 3; ++c) observed.push_back(frame.rgb.at(static_cast<int>(p.u), static_cast<int>(p.v), c));
    }
    const render::RaySampleBatch batch =
        render::sample_rays(render::generate_rays(frame, px), bounds, cfg.mapper.render, rng, true);
    ad::Tape tape(model.store());
    const render::RenderOutput out = render::render_batch(tape, model, batch, cfg.mapper.render, true);
    const ad::Var loss = losses::photometric_loss(tape, out.color, observed);
    if (!std::isfinite(tape.value(loss)[0])) throw NumericalError("non-finite loss while fitting a view");
    model.store().zero_grad();
    tape.backward(loss);
    ad::adam_step(model.store(), cfg.mapper.adam, static_cast<std::int64_t>(it));
    if (it % spec.check_every == 0) {
      const render::RenderedView view = render::render_view(model, k, frame.pose, cfg.mapper.render, true);
      if (metrics::psnr(view.color, frame.rgb) >= spec.target_psnr) return it;
    }
  }
  return std::nullopt;
}

AblationAxis parse_axis(const std::string& s) {
  if (s == "factorization") return AblationAxis::factorization;
  if (s == "dual_path") return AblationAxis::dual_path;
  if (s == "render_mode") return AblationAxis::render_mode;
  throw ConfigError("unknown ablation axis '" + s + "' (factorization | dual_path | render_mode)");
}

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::factorization:
      return "factorization";
    case AblationAxis::dual_path:
      return "dual_path";
    case AblationAxis::render_mode:
      return "render_mode";
  }
  return "?";
}

std::vector<std::pair<std::string, config::RunConfig>> ablation_variants(AblationAxis axis,
                                                                         const config::RunConfig& cfg,
                                                                         const field::SceneBounds& bounds) {
  std::vector<std::pair<std::string, config::RunConfig>> out;
  config::RunConfig a = cfg, b = cfg;
  switch (axis) {
    case AblationAxis::factorization:
      a.field.geo.kind = a.field.app.kind = field::GridKind::factorized;
      b.field.geo = field::matched_dense_spec(bounds, a.field.geo);
      b.field.app = field::matched_dense_spec(bounds, a.field.app);
      // Keep the initial SDF offset of the factorized model.
      if (!b.geo_output_bias) b.geo_output_bias = a.model_spec().decoders.geo_output_bias;
      out.emplace_back("factorized", a);
      out.emplace_back("dense", b);
      break;
    case AblationAxis::dual_path:
      a.decoders.app_uses_coordinates = true;
      b.decoders.app_uses_coordinates = false;
      out.emplace_back("with_coordinates", a);
      out.emplace_back("without_coordinates", b);
      break;
    case AblationAxis::render_mode:
      a.mapper.render.mode = render::RenderMode::sdf_density;
      b.mapper.render.mode = render::RenderMode::occupancy;
      out.emplace_back("sdf_density", a);
      out.emplace_back("occupancy", b);
      break;
  }
  return out;
}

std::optional<double> AblationTable::median(const std::string& variant) const {
  std::vector<std::optional<double>> v;
  for (const AblationRow& r : rows)
    if (r.variant == variant) v.push_back(r.value);
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end(), [](const auto& x, const auto& y) {
    if (!x) return false;
    if (!y) return true;
    return *x < *y;
  });
  if (v.size() % 2 == 1) return v[v.size() / 2];
  const auto& lo = v[v.size() / 2 - 1];
  const auto& hi = v[v.size() / 2];
  if (!lo || !hi) return std::nullopt;
  return 0.5 * (*lo + *hi);
}

std::string AblationTable::format() const {
  std::ostringstream os;
  os.precision(10);
  os << "axis: " << to_string(axis) << '\n';
  os << "# variant seed parameters " << value_name << '\n';
  for (const AblationRow& r : rows) {
    os << r.variant << ' ' << r.seed << ' ' << r.parameters << ' ';
    if (r.value)
      os << *r.value;
    else
      os << "absent";
    os << '\n';
  }
  os << "# median over seeds\n";
  for (const std::string& v : variants) {
    const auto m = median(v);
    os << v << ' ';
    if (m)
      os << *m;
    else
      os << "absent";
    os << '\n';
  }
  return os.str();
}

AblationTable run_ablation(const data::Dataset& data, const config::RunConfig& cfg, AblationAxis axis,
                           std::size_t seeds, const OverfitSpec& overfit) {
  if (seeds == 0) throw ConfigError("ablation needs at least one seed");
  if (data.frames.empty()) throw DataError("ablation on an empty dataset");
  AblationTable table;
  table.axis = axis;
  table.value_name = axis == AblationAxis::render_mode ? "iterations_to_target_psnr" : "depth_l1_cm_last5";
  const auto variants = ablation_variants(axis, cfg, data.bounds);
  for (const auto& [name, c] : variants) table.variants.push_back(name);
  for (std::size_t s = 0; s < seeds; ++s)
    for (const auto& [name, base] : variants) {
      config::RunConfig c = base;
      c.seed = cfg.seed + s;
      AblationRow row;
      row.variant = name;
      row.seed = c.seed;
      if (axis == AblationAxis::render_mode) {
        row.parameters = SceneModel(data.bounds, c.model_spec(), c.seed).store().parameter_count();
        if (const auto it = overfit_view(data.frames.front(), data.bounds, c, overfit))
          row.value = static_cast<double>(*it);
      } else {
        MapOptions opt;
        opt.evaluate = false;
        opt.mesh = false;
        const MapResult r = run_mapping(data, c, opt);
        row.parameters = r.model->store().parameter_count();
        row.value = mean_recent_depth_l1(r.log, 5);
      }
      spdlog::info("ablation {} seed {}: {}", name, row.seed, row.value ? std::to_string(*row.value) : "absent");
      table.rows.push_back(row);
    }
  return table;
}

}  // namespace facmap::pipeline

#include "facmap/config.hpp"

#include <json.hpp>
#include <fstream>
#include <set>
#include <sstream>

#include "facmap/error.hpp"
#include "facmap/field.hpp"

namespace facmap::config {

using nlohmann::ordered_json;

namespace {

// Reads the members of one JSON object, remembering which keys were used so
// leftovers can be reported.
class Section {
 public:
  Section(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(name(key) + ": wrong type (" + it->dump() + ")");
    }
  }

  void get(const char* key, std::size_t& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    if (!it->is_number_integer() || it->get<long long>() < 0)
      throw ConfigError(name(key) + ": expected a non-negative integer");
    out = it->get<std::size_t>();
  }

  void get(const char* key, double& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    if (!it->is_number()) throw ConfigError(name(key) + ": expected a number");
    out = it->get<double>();
  }

  void get(const char* key, std::optional<double>& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    if (it->is_null()) {
      out.reset();
      return;
    }
    if (!it->is_number()) throw ConfigError(name(key) + ": expected a number or null");
    out = it->get<double>();
  }

  void get(const char* key, field::Vec3& out) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    out = vec3(*it, name(key));
  }

  bool has(const char* key) const { return j_.contains(key); }

  const ordered_json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::optional<Section> child(const char* key) {
    if (!j_.contains(key)) return std::nullopt;
    used_.insert(key);
    return Section(j_.at(key), name(key));
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError("unknown config key '" + name(k) + "'");
  }

  static field::Vec3 vec3(const ordered_json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 3 || !j[0].is_number() || !j[1].is_number() || !j[2].is_number())
      throw ConfigError(what + ": expected an array of three numbers");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const ordered_json& j_;
  std::string path_;
  std::set<std::string> used_;
};

ordered_json vec3_json(const field::Vec3& v) { return ordered_json::array({v.x(), v.y(), v.z()}); }

field::GridKind parse_kind(const std::string& s, const std::string& what) {
  if (s == "factorized") return field::GridKind::factorized;
  if (s == "dense") return field::GridKind::dense;
  throw ConfigError(what + ": unknown grid kind '" + s + "' (factorized | dense)");
}

const char* kind_name(field::GridKind k) { return k == field::GridKind::factorized ? "factorized" : "dense"; }

void read_grid(Section s, field::GridSpec& g) {
  std::string kind = kind_name(g.kind);
  s.get("kind", kind);
  g.kind = parse_kind(kind, s.name("kind"));
  if (s.has("levels")) {
    const ordered_json& levels = s.raw("levels");
    if (!levels.is_array()) throw ConfigError(s.name("levels") + ": expected an array");
    g.levels.clear();
    for (std::size_t i = 0; i < levels.size(); ++i) {
      Section l(levels[i], s.name("levels[" + std::to_string(i) + "]"));
      field::LevelSpec spec;
      l.get("cell", spec.cell_size);
      l.get("channels", spec.channels);
      l.finish();
      g.levels.push_back(spec);
    }
  }
  s.finish();
}

ordered_json grid_json(const field::GridSpec& g) {
  ordered_json levels = ordered_json::array();
  for (const auto& l : g.levels) levels.push_back({{"cell", l.cell_size}, {"channels", l.channels}});
  return {{"kind", kind_name(g.kind)}, {"levels", levels}};
}

void read_model(Section& root, field::FieldSpec& field, decoders::DecoderSpec& dec, std::optional<double>& bias,
                LearningRates& lr, double& beta_init) {
  if (auto f = root.child("field")) {
    if (auto g = f->child("geometry")) read_grid(*g, field.geo);
    if (auto a = f->child("appearance")) read_grid(*a, field.app);
    f->get("init_scale", field.init_scale);
    f->get("max_dense_bytes", field.max_dense_bytes);
    f->finish();
  }
  if (auto d = root.child("decoders")) {
    d->get("hidden", dec.hidden);
    d->get("app_uses_coordinates", dec.app_uses_coordinates);
    d->get("geo_output_bias", bias);
    d->finish();
  }
  if (auto o = root.child("learning_rates")) {
    o->get("grid", lr.grid);
    o->get("mlp", lr.mlp);
    o->get("beta", lr.beta);
    o->finish();
  }
  root.get("beta_init", beta_init);
}

ordered_json model_json(const field::FieldSpec& field, const decoders::DecoderSpec& dec,
                        const std::optional<double>& bias, const LearningRates& lr, double beta_init) {
  ordered_json j;
  j["field"] = {{"geometry", grid_json(field.geo)},
                {"appearance", grid_json(field.app)},
                {"init_scale", field.init_scale},
                {"max_dense_bytes", field.max_dense_bytes}};
  j["decoders"] = {{"hidden", dec.hidden},
                   {"app_uses_coordinates", dec.app_uses_coordinates},
                   {"geo_output_bias", bias ? ordered_json(*bias) : ordered_json(nullptr)}};
  j["learning_rates"] = {{"grid", lr.grid}, {"mlp", lr.mlp}, {"beta", lr.beta}};
  j["beta_init"] = beta_init;
  return j;
}

void check_grid(const field::GridSpec& g, const std::string& what) {
  if (g.levels.empty()) throw ConfigError(what + ".levels must not be empty");
  for (const auto& l : g.levels) {
    if (!(l.cell_size > 0.0)) throw ConfigError(what + ".levels: cell must be positive");
    if (l.channels == 0) throw ConfigError(what + ".levels: channels must be positive");
  }
}

}  // namespace

ModelSpec RunConfig::model_spec() const {
  ModelSpec m;
  m.field = field;
  m.decoders = decoders;
  m.decoders.geo_output_bias = geo_output_bias ? *geo_output_bias : default_geo_bias(field.geo);
  m.lr = lr;
  m.beta_init = beta_init;
  return m;
}

void RunConfig::validate() const {
  if (threads == 0) throw ConfigError("threads must be positive");
  check_grid(field.geo, "field.geometry");
  check_grid(field.app, "field.appearance");
  if (!(field.init_scale >= 0.0)) throw ConfigError("field.init_scale must be non-negative");
  if (decoders.hidden.empty()) throw ConfigError("decoders.hidden must not be empty");
  for (std::size_t h : decoders.hidden)
    if (h == 0) throw ConfigError("decoders.hidden: widths must be positive");
  if (!(lr.grid >= 0.0 && lr.mlp >= 0.0 && lr.beta >= 0.0))
    throw ConfigError("learning_rates must be non-negative");
  if (!(beta_init > 0.0)) throw ConfigError("beta_init must be positive");
  mapper.validate();
  if (!(mapper.render.near_floor > 0.0)) throw ConfigError("render.near_floor must be positive");
  if (!(mapper.render.truncation > 0.0)) throw ConfigError("render.truncation must be positive");
  if (!(mapper.render.color_weight_threshold >= 0.0 && mapper.render.color_weight_threshold < 1.0))
    throw ConfigError("render.color_weight_threshold must be in [0, 1)");
  if (!(mapper.warp.min_valid_fraction > 0.0 && mapper.warp.min_valid_fraction <= 1.0))
    throw ConfigError("loss.min_valid_fraction must be in (0, 1]");
  if (!(mapper.warp.ssim.c1 > 0.0 && mapper.warp.ssim.c2 > 0.0)) throw ConfigError("loss.ssim_c1/c2 must be positive");
  if (!(mapper.adam.beta1 >= 0.0 && mapper.adam.beta1 < 1.0 && mapper.adam.beta2 >= 0.0 && mapper.adam.beta2 < 1.0))
    throw ConfigError("adam.beta1/beta2 must be in [0, 1)");
  if (!(mapper.adam.eps > 0.0)) throw ConfigError("adam.eps must be positive");
  if (!(eval.mesh_cell > 0.0)) throw ConfigError("eval.mesh_cell must be positive");
  if (eval.mesh_samples == 0) throw ConfigError("eval.mesh_samples must be positive");
  if (!(eval.mesh_threshold > 0.0)) throw ConfigError("eval.mesh_threshold must be positive");
  if (eval.frame_stride == 0) throw ConfigError("eval.frame_stride must be positive");
  if (synth.width < 32 || synth.height < 32) throw ConfigError("synth.width/height must be at least 32");
  if (!(synth.fov_deg > 0.0 && synth.fov_deg < 180.0)) throw ConfigError("synth.fov_deg must be in (0, 180)");
  if (synth.trajectory.frames == 0) throw ConfigError("synth.trajectory.frames must be positive");
  if (!(synth.gt_mesh_cell > 0.0)) throw ConfigError("synth.gt_mesh_cell must be positive");
  const auto& room = synth.scene.room;
  if (!(room.x() > 0 && room.y() > 0 && room.z() > 0)) throw ConfigError("synth.scene.room must be positive");
}

RunConfig apply_json(const RunConfig& base, std::string_view text, const std::string& source) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  RunConfig c = base;
  try {
    Section root(j, "");
    root.get("seed", c.seed);
    root.get("threads", c.threads);
    read_model(root, c.field, c.decoders, c.geo_output_bias, c.lr, c.beta_init);

    mapping::MapperConfig& m = c.mapper;
    if (auto s = root.child("schedule")) {
      s->get("window_init", m.schedule.window_init);
      s->get("iters_init", m.schedule.iters_init);
      s->get("color_iters", m.schedule.color_iters);
      s->get("iters_online", m.schedule.iters_online);
      s->get("step_frames", m.schedule.step_frames);
      s->get("rays", m.schedule.rays);
      s->finish();
    }
    if (auto s = root.child("window")) {
      s->get("local", m.window.local);
      s->get("global", m.window.global);
      s->finish();
    }
    if (auto s = root.child("render")) {
      std::string mode = render::to_string(m.render.mode);
      s->get("samples", m.render.samples);
      s->get("near_floor", m.render.near_floor);
      s->get("mode", mode);
      s->get("truncation", m.render.truncation);
      s->get("color_weight_threshold", m.render.color_weight_threshold);
      s->finish();
      m.render.mode = render::parse_render_mode(mode);
    }
    if (auto s = root.child("loss")) {
      s->get("alpha_c_init", m.alpha_c_init);
      s->get("alpha_c_online", m.alpha_c_online);
      s->get("alpha_w", m.alpha_w);
      s->get("patch_radius", m.patch_radius);
      s->get("scales", m.warp.scales);
      s->get("min_valid_fraction", m.warp.min_valid_fraction);
      s->get("ssim_c1", m.warp.ssim.c1);
      s->get("ssim_c2", m.warp.ssim.c2);
      s->finish();
    }
    if (auto s = root.child("keyframes")) {
      s->get("overlap_probes", m.overlap_probes);
      s->get("warp_overlap", m.warp_overlap);
      s->get("overlap_refresh", m.overlap_refresh);
      s->finish();
    }
    if (auto s = root.child("adam")) {
      s->get("beta1", m.adam.beta1);
      s->get("beta2", m.adam.beta2);
      s->get("eps", m.adam.eps);
      s->finish();
    }
    if (auto s = root.child("eval")) {
      s->get("mesh_cell", c.eval.mesh_cell);
      s->get("mesh_samples", c.eval.mesh_samples);
      s->get("mesh_threshold", c.eval.mesh_threshold);
      s->get("frame_stride", c.eval.frame_stride);
      s->get("mesh_colors", c.eval.mesh_colors);
      s->get("update_metrics", m.update_metrics);
      s->finish();
    }
    if (auto s = root.child("synth")) {
      data::SynthSpec& y = c.synth;
      s->get("width", y.width);
      s->get("height", y.height);
      s->get("fov_deg", y.fov_deg);
      s->get("gt_mesh_cell", y.gt_mesh_cell);
      s->get("build_gt_mesh", y.build_gt_mesh);
      if (auto sc = s->child("scene")) {
        sc->get("room", y.scene.room);
        sc->get("textured_walls", y.scene.textured_walls);
        sc->get("bounds_margin", y.scene.bounds_margin);
        if (sc->has("spheres")) {
          const ordered_json& arr = sc->raw("spheres");
          if (!arr.is_array()) throw ConfigError(sc->name("spheres") + ": expected an array");
          y.scene.spheres.clear();
          for (std::size_t i = 0; i < arr.size(); ++i) {
            Section e(arr[i], sc->name("spheres[" + std::to_string(i) + "]"));
            data::SphereSpec sp{field::Vec3::Zero(), 0.0};
            e.get("center", sp.center);
            e.get("radius", sp.radius);
            e.finish();
            y.scene.spheres.push_back(sp);
          }
        }
        if (sc->has("boxes")) {
          const ordered_json& arr = sc->raw("boxes");
          if (!arr.is_array()) throw ConfigError(sc->name("boxes") + ": expected an array");
          y.scene.boxes.clear();
          for (std::size_t i = 0; i < arr.size(); ++i) {
            Section e(arr[i], sc->name("boxes[" + std::to_string(i) + "]"));
            data::BoxSpec b{field::Vec3::Zero(), field::Vec3::Zero()};
            e.get("center", b.center);
            e.get("half", b.half);
            e.finish();
            y.scene.boxes.push_back(b);
          }
        }
        sc->finish();
      }
      if (auto t = s->child("trajectory")) {
        t->get("frames", y.trajectory.frames);
        t->get("radius", y.trajectory.radius);
        t->get("height", y.trajectory.height);
        t->get("target", y.trajectory.target);
        t->get("arc", y.trajectory.arc);
        t->finish();
      }
      s->finish();
    }
    root.get("checkpoint_every", c.checkpoint_every);
    root.finish();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

RunConfig load_file(const RunConfig& base, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return apply_json(base, ss.str(), path.string());
}

std::string to_json(const RunConfig& c, int indent) {
  ordered_json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  const ordered_json model = model_json(c.field, c.decoders, c.geo_output_bias, c.lr, c.beta_init);
  for (const auto& [k, v] : model.items()) j[k] = v;
  const mapping::MapperConfig& m = c.mapper;
  j["schedule"] = {{"window_init", m.schedule.window_init}, {"iters_init", m.schedule.iters_init},
                   {"color_iters", m.schedule.color_iters}, {"iters_online", m.schedule.iters_online},
                   {"step_frames", m.schedule.step_frames}, {"rays", m.schedule.rays}};
  j["window"] = {{"local", m.window.local}, {"global", m.window.global}};
  j["render"] = {{"samples", m.render.samples},
                 {"near_floor", m.render.near_floor},
                 {"mode", render::to_string(m.render.mode)},
                 {"truncation", m.render.truncation},
                 {"color_weight_threshold", m.render.color_weight_threshold}};
  j["loss"] = {{"alpha_c_init", m.alpha_c_init},   {"alpha_c_online", m.alpha_c_online},
               {"alpha_w", m.alpha_w},             {"patch_radius", m.patch_radius},
               {"scales", m.warp.scales},          {"min_valid_fraction", m.warp.min_valid_fraction},
               {"ssim_c1", m.warp.ssim.c1},        {"ssim_c2", m.warp.ssim.c2}};
  j["keyframes"] = {{"overlap_probes", m.overlap_probes},
                    {"warp_overlap", m.warp_overlap},
                    {"overlap_refresh", m.overlap_refresh}};
  j["adam"] = {{"beta1", m.adam.beta1}, {"beta2", m.adam.beta2}, {"eps", m.adam.eps}};
  j["eval"] = {{"mesh_cell", c.eval.mesh_cell},         {"mesh_samples", c.eval.mesh_samples},
               {"mesh_threshold", c.eval.mesh_threshold}, {"frame_stride", c.eval.frame_stride},
               {"mesh_colors", c.eval.mesh_colors},     {"update_metrics", m.update_metrics}};
  const data::SynthSpec& y = c.synth;
  ordered_json spheres = ordered_json::array(), boxes = ordered_json::array();
  for (const auto& s : y.scene.spheres) spheres.push_back({{"center", vec3_json(s.center)}, {"radius", s.radius}});
  for (const auto& b : y.scene.boxes) boxes.push_back({{"center", vec3_json(b.center)}, {"half", vec3_json(b.half)}});
  j["synth"] = {{"width", y.width},
                {"height", y.height},
                {"fov_deg", y.fov_deg},
                {"gt_mesh_cell", y.gt_mesh_cell},
                {"build_gt_mesh", y.build_gt_mesh},
                {"scene",
                 {{"room", vec3_json(y.scene.room)},
                  {"textured_walls", y.scene.textured_walls},
                  {"bounds_margin", y.scene.bounds_margin},
                  {"spheres", spheres},
                  {"boxes", boxes}}},
                {"trajectory",
                 {{"frames", y.trajectory.frames},
                  {"radius", y.trajectory.radius},
                  {"height", y.trajectory.height},
                  {"target", vec3_json(y.trajectory.target)},
                  {"arc", y.trajectory.arc}}}};
  j["checkpoint_every"] = c.checkpoint_every;
  return j.dump(indent);
}

void save_model(const std::filesystem::path& path, const SceneModel& model, const std::string& note) {
  const ModelSpec& s = model.spec();
  ordered_json meta;
  meta["model"] = model_json(s.field, s.decoders, s.decoders.geo_output_bias, s.lr, s.beta_init);
  if (!note.empty()) meta["note"] = note;
  field::write_checkpoint(path, model.field().bounds(), s.field, meta.dump(), model.store());
}

std::unique_ptr<SceneModel> load_model(const std::filesystem::path& path) {
  const field::Checkpoint ck = field::read_checkpoint(path);
  ordered_json meta;
  try {
    meta = ordered_json::parse(ck.metadata);
  } catch (const nlohmann::json::parse_error&) {
    throw DataError(path.string() + ": checkpoint metadata is not JSON");
  }
  if (!meta.contains("model")) throw DataError(path.string() + ": checkpoint metadata lacks the model section");
  RunConfig c;
  try {
    Section root(meta.at("model"), "model");
    read_model(root, c.field, c.decoders, c.geo_output_bias, c.lr, c.beta_init);
    root.finish();
  } catch (const ConfigError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  c.field = ck.spec;
  auto model = std::make_unique<SceneModel>(ck.bounds, c.model_spec(), 0);
  field::restore_params(ck, model->store());
  return model;
}

}  // namespace facmap::config

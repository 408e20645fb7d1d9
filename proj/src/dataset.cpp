#include "facmap/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "facmap/image_io.hpp"

namespace facmap::data {

namespace fs = std::filesystem;

namespace {

std::string frame_name(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06lld.png", static_cast<long long>(id));
  return buf;
}

bool parse_id(const fs::path& p, std::int64_t& id) {
  const std::string stem = p.stem().string();
  if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](unsigned char c) { return std::isdigit(c); }))
    return false;
  id = std::stoll(stem);
  return true;
}

std::map<std::int64_t, fs::path> list_images(const fs::path& dir) {
  std::map<std::int64_t, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".png") continue;
    std::int64_t id;
    if (!parse_id(e.path(), id)) throw DataError("image name is not a frame id: " + e.path().string());
    if (!out.emplace(id, e.path()).second) throw DataError("duplicate frame id " + std::to_string(id) + " in " + dir.string());
  }
  return out;
}

}  // namespace

Dataset load_dataset(const fs::path& dir, double bounds_margin) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  const fs::path intr_path = dir / "intrinsics.txt";
  std::ifstream intr(intr_path);
  if (!intr) throw DataError("cannot read " + intr_path.string());
  CameraIntrinsics k;
  if (!(intr >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height))
    throw DataError("expected 'fx fy cx cy width height' in " + intr_path.string());
  try {
    k.validate();
  } catch (const ConfigError& e) {
    throw DataError(intr_path.string() + ": " + e.what());
  }

  const fs::path pose_path = dir / "poses.txt";
  std::ifstream poses(pose_path);
  if (!poses) throw DataError("cannot read " + pose_path.string());
  std::map<std::int64_t, Pose> pose_of;
  std::string line;
  int line_no = 0;
  while (std::getline(poses, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::int64_t id;
    double tx, ty, tz, qx, qy, qz, qw;
    const std::string where = pose_path.string() + ":" + std::to_string(line_no);
    if (!(ls >> id >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) throw DataError("malformed pose line " + where);
    const double qn = std::sqrt(qx * qx + qy * qy + qz * qz + qw * qw);
    if (std::abs(qn - 1.0) > 1e-3) throw DataError("non-unit quaternion (norm " + std::to_string(qn) + ") at " + where);
    if (!pose_of.emplace(id, Pose::from_tum(Vec3(tx, ty, tz), Eigen::Quaterniond(qw, qx, qy, qz))).second)
      throw DataError("duplicate pose for frame " + std::to_string(id) + " at " + where);
  }

  const fs::path rgb_dir = dir / "rgb";
  if (!fs::is_directory(rgb_dir)) throw DataError("missing image directory " + rgb_dir.string());
  const auto images = list_images(rgb_dir);
  std::map<std::int64_t, fs::path> depths;
  const bool with_depth = fs::is_directory(dir / "depth");
  if (with_depth) depths = list_images(dir / "depth");

  for (const auto& [id, path] : images)
    if (!pose_of.count(id)) throw DataError("missing pose for image " + path.string());
  for (const auto& [id, pose] : pose_of)
    if (!images.count(id))
      throw DataError("pose for frame " + std::to_string(id) + " has no image in " + rgb_dir.string());

  Dataset d;
  for (const auto& [id, path] : images) {
    Frame f;
    f.id = id;
    f.timestamp = static_cast<double>(id);
    f.rgb = io::read_png_rgb(path);
    f.pose = pose_of.at(id);
    f.intrinsics = k;
    if (with_depth) {
      auto it = depths.find(id);
      if (it == depths.end()) throw DataError("missing depth image for frame " + std::to_string(id));
      f.depth = io::read_png_depth(it->second);
    }
    try {
      f.validate();
    } catch (const Error& e) {
      throw DataError(path.string() + ": " + e.what());
    }
    d.frames.push_back(std::move(f));
  }
  if (d.frames.empty()) throw DataError("dataset has no frames: " + dir.string());

  const fs::path bounds_path = dir / "bounds.txt";
  if (fs::exists(bounds_path)) {
    std::ifstream bs(bounds_path);
    Vec3 lo, hi;
    if (!(bs >> lo.x() >> lo.y() >> lo.z() >> hi.x() >> hi.y() >> hi.z()))
      throw DataError("expected 6 reals in " + bounds_path.string());
    try {
      d.bounds = field::SceneBounds(lo, hi);
    } catch (const ConfigError& e) {
      throw DataError(bounds_path.string() + ": " + e.what());
    }
  } else {
    Vec3 lo = d.frames.front().pose.translation, hi = lo;
    for (const Frame& f : d.frames) {
      lo = lo.cwiseMin(f.pose.translation);
      hi = hi.cwiseMax(f.pose.translation);
    }
    d.bounds = field::SceneBounds(lo - Vec3::Constant(bounds_margin), hi + Vec3::Constant(bounds_margin));
  }
  if (fs::exists(dir / "gt_mesh.ply")) d.gt_mesh = mesh::read_ply(dir / "gt_mesh.ply");
  return d;
}

void save_dataset(const Dataset& d, const fs::path& dir) {
  if (d.frames.empty()) throw DataError("save_dataset: no frames");
  std::error_code ec;
  fs::create_directories(dir / "rgb", ec);
  if (ec) throw DataError("cannot create " + (dir / "rgb").string() + ": " + ec.message());
  if (d.has_depth()) fs::create_directories(dir / "depth");
  const CameraIntrinsics& k = d.frames.front().intrinsics;
  std::ofstream intr(dir / "intrinsics.txt");
  intr << std::setprecision(17) << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' ' << k.width << ' '
       << k.height << '\n';
  std::ofstream poses(dir / "poses.txt");
  poses << "# id tx ty tz qx qy qz qw\n" << std::setprecision(17);
  for (const Frame& f : d.frames) {
    const Eigen::Quaterniond q = f.pose.quaternion();
    const Vec3& t = f.pose.translation;
    poses << f.id << ' ' << t.x() << ' ' << t.y() << ' ' << t.z() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z()
          << ' ' << q.w() << '\n';
    io::write_png_rgb(dir / "rgb" / frame_name(f.id), f.rgb);
    if (f.depth) io::write_png_depth(dir / "depth" / frame_name(f.id), *f.depth);
  }
  std::ofstream bounds(dir / "bounds.txt");
  const Vec3 lo = d.bounds.min_corner(), hi = d.bounds.max_corner();
  bounds << std::setprecision(17) << lo.x() << ' ' << lo.y() << ' ' << lo.z() << ' ' << hi.x() << ' ' << hi.y() << ' '
         << hi.z() << '\n';
  if (!intr || !poses || !bounds) throw DataError("failed writing dataset files in " + dir.string());
  if (d.gt_mesh) mesh::write_ply(dir / "gt_mesh.ply", *d.gt_mesh);
}

// ---------------------------------------------------------------------------
// Synthetic rooms

namespace {

double box_sdf(const Vec3& p, const Vec3& half) {
  const Vec3 q = p.cwiseAbs() - half;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

enum class Surface { wall, floor, ceiling, sphere, box };

}  // namespace

SyntheticScene::SyntheticScene(SceneSpec spec, std::mt19937_64& rng) : spec_(std::move(spec)) {
  if (!(spec_.room.minCoeff() > 0.0)) throw ConfigError("room dimensions must be positive");
  std::uniform_real_distribution<double> period(0.35, 0.8), phase(0.0, 2.0 * 3.14159265358979323846);
  std::normal_distribution<double> gauss;
  auto make = [&](std::vector<Wave>& waves, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec3 dir;
      for (int a = 0; a < 3; ++a) dir[a] = gauss(rng);
      dir.normalize();
      const double k = 2.0 * 3.14159265358979323846 / period(rng);
      waves.push_back({dir * k, phase(rng)});
    }
  };
  make(waves_, 12);
  make(object_waves_, 12);
}

field::SceneBounds SyntheticScene::bounds() const {
  const Vec3 h = 0.5 * spec_.room + Vec3::Constant(spec_.bounds_margin);
  return {-h, h};
}

double SyntheticScene::sdf(const Vec3& p) const {
  double d = -box_sdf(p, 0.5 * spec_.room);
  for (const auto& s : spec_.spheres) d = std::min(d, (p - s.center).norm() - s.radius);
  for (const auto& b : spec_.boxes) d = std::min(d, box_sdf(p - b.center, b.half));
  return d;
}

Vec3 SyntheticScene::normal(const Vec3& p) const {
  const double h = 1e-5;
  Vec3 g;
  for (int a = 0; a < 3; ++a) {
    Vec3 e = Vec3::Zero();
    e[a] = h;
    g[a] = sdf(p + e) - sdf(p - e);
  }
  return g.normalized();
}

double SyntheticScene::pattern(const Vec3& p, std::span<const Wave> waves) {
  double s = 0.0;
  for (const Wave& w : waves) s += std::sin(w.k.dot(p) + w.phase);
  return s / static_cast<double>(waves.size());
}

Vec3 SyntheticScene::albedo(const Vec3& p) const {
  Surface surf = Surface::wall;
  double best = std::abs(-box_sdf(p, 0.5 * spec_.room));
  for (const auto& s : spec_.spheres) {
    const double d = std::abs((p - s.center).norm() - s.radius);
    if (d < best) best = d, surf = Surface::sphere;
  }
  for (const auto& b : spec_.boxes) {
    const double d = std::abs(box_sdf(p - b.center, b.half));
    if (d < best) best = d, surf = Surface::box;
  }
  if (surf == Surface::wall) {
    const Vec3 gap = 0.5 * spec_.room - p.cwiseAbs();
    int axis;
    gap.minCoeff(&axis);
    if (axis == 2) surf = p.z() < 0 ? Surface::floor : Surface::ceiling;
  }
  Vec3 base;
  bool textured = true;
  const std::vector<Wave>* waves = &waves_;
  switch (surf) {
    case Surface::wall:
      base = Vec3(0.78, 0.68, 0.55);
      textured = spec_.textured_walls;
      break;
    case Surface::floor:
      base = Vec3(0.62, 0.48, 0.34);
      break;
    case Surface::ceiling:
      base = Vec3(0.88, 0.88, 0.86);
      textured = spec_.textured_walls;
      break;
    case Surface::sphere:
      base = Vec3(0.85, 0.32, 0.25);
      waves = &object_waves_;
      break;
    case Surface::box:
      base = Vec3(0.25, 0.48, 0.8);
      waves = &object_waves_;
      break;
  }
  if (!textured) return base;
  const std::size_t per = waves->size() / 3;
  Vec3 out;
  for (int c = 0; c < 3; ++c) {
    out[c] = base[c] * (0.6 + 0.68 * pattern(p, std::span<const Wave>(waves->data() + c * per, per)));
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

Vec3 SyntheticScene::shade(const Vec3& p) const {
  static const Vec3 light = Vec3(0.45, 0.3, 0.84).normalized();
  const double lambert = std::max(0.0, normal(p).dot(light));
  return (albedo(p) * (0.45 + 0.55 * lambert)).cwiseMin(1.0);
}

std::optional<double> SyntheticScene::trace(const Vec3& origin, const Vec3& dir) const {
  double t = 0.0;
  for (int i = 0; i < 4096; ++i) {
    const double d = sdf(origin + t * dir);
    if (d < 1e-7) return t;
    t += d;
    if (t > 100.0) break;
  }
  return std::nullopt;
}

std::vector<Pose> circular_trajectory(const TrajectorySpec& t) {
  if (t.frames == 0) throw ConfigError("trajectory needs at least one frame");
  std::vector<Pose> out;
  out.reserve(t.frames);
  for (std::size_t i = 0; i < t.frames; ++i) {
    const double a = t.arc * static_cast<double>(i) / static_cast<double>(t.frames);
    const Vec3 eye(t.radius * std::cos(a), t.radius * std::sin(a), t.height);
    out.push_back(Pose::look_at(eye, t.target));
  }
  return out;
}

CameraIntrinsics pinhole(int width, int height, double fov_deg) {
  CameraIntrinsics k;
  k.width = width;
  k.height = height;
  k.fx = k.fy = 0.5 * width / std::tan(0.5 * fov_deg * 3.14159265358979323846 / 180.0);
  k.cx = 0.5 * (width - 1);
  k.cy = 0.5 * (height - 1);
  k.validate();
  return k;
}

Dataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.width < 32 || spec.height < 32) throw ConfigError("synthetic images must be at least 32x32");
  std::mt19937_64 rng(seed);
  const SyntheticScene scene(spec.scene, rng);
  const CameraIntrinsics k = pinhole(spec.width, spec.height, spec.fov_deg);
  Dataset d;
  d.bounds = scene.bounds();
  const std::vector<Pose> poses = circular_trajectory(spec.trajectory);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Pose& pose = poses[i];
    if (!(scene.sdf(pose.translation) > 0.0))
      throw ConfigError("camera " + std::to_string(i) + " is not in free space");
    Frame f;
    f.id = static_cast<std::int64_t>(i);
    f.timestamp = static_cast<double>(i);
    f.pose = pose;
    f.intrinsics = k;
    f.rgb = Image(k.width, k.height, 3);
    f.depth = Image(k.width, k.height, 1);
    for (int v = 0; v < k.height; ++v)
      for (int u = 0; u < k.width; ++u) {
        const Vec3 dc = k.backproject(u, v).normalized();
        const Vec3 dw = pose.rotation * dc;
        const auto hit = scene.trace(pose.translation, dw);
        if (!hit) continue;
        const Vec3 c = scene.shade(pose.translation + *hit * dw);
        for (int ch = 0; ch < 3; ++ch) f.rgb.at(u, v, ch) = c[ch];
        f.depth->at(u, v) = *hit * dc.z();
      }
    d.frames.push_back(std::move(f));
  }
  if (spec.build_gt_mesh)
    d.gt_mesh = mesh::marching_cubes(
        mesh::sample_grid([&scene](const Vec3& p) { return scene.sdf(p); }, d.bounds, spec.gt_mesh_cell));
  return d;
}

}  // namespace facmap::data

#pragma once

// Posed RGB sequences on disk and procedurally generated rooms with exact
// ground truth.
//
// Directory layout:
//   intrinsics.txt   fx fy cx cy width height
//   poses.txt        id tx ty tz qx qy qz qw per line (world from camera)
//   rgb/<id>.png     zero-padded frame ids
//   depth/<id>.png   optional, 16-bit millimeters (camera z-depth)
//   bounds.txt       optional, min xyz then max xyz
//   gt_mesh.ply      optional ground-truth surface

#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "facmap/camera.hpp"
#include "facmap/field.hpp"
#include "facmap/mesh.hpp"

namespace facmap::data {

struct Dataset {
  std::vector<Frame> frames;
  field::SceneBounds bounds;
  std::optional<mesh::Mesh> gt_mesh;

  bool has_depth() const { return !frames.empty() && frames.front().depth.has_value(); }
};

// Throws DataError naming the offending file.
Dataset load_dataset(const std::filesystem::path& dir, double bounds_margin = 3.0);
void save_dataset(const Dataset& d, const std::filesystem::path& dir);

// Box room centred at the origin seen from the inside, with primitives on the
// floor. Positive SDF is free space.
struct SphereSpec {
  Vec3 center;
  double radius;
};
struct BoxSpec {
  Vec3 center;
  Vec3 half;
};

struct SceneSpec {
  Vec3 room = Vec3(3.0, 3.0, 2.5);
  std::vector<SphereSpec> spheres = {{Vec3(0.55, 0.35, -0.95), 0.3}};
  std::vector<BoxSpec> boxes = {{Vec3(-0.5, -0.45, -1.05), Vec3(0.25, 0.2, 0.2)}};
  bool textured_walls = true;  // false: walls and ceiling get a flat albedo
  double bounds_margin = 0.1;
};

struct TrajectorySpec {
  std::size_t frames = 60;
  double radius = 1.0;
  double height = 0.0;
  Vec3 target = Vec3::Zero();
  double arc = 2.0 * 3.14159265358979323846;  // swept angle in radians
};

struct SynthSpec {
  SceneSpec scene;
  TrajectorySpec trajectory;
  int width = 64;
  int height = 64;
  double fov_deg = 90.0;  // horizontal
  double gt_mesh_cell = 0.015;
  bool build_gt_mesh = true;
};

class SyntheticScene {
 public:
  SyntheticScene(SceneSpec spec, std::mt19937_64& rng);

  const SceneSpec& spec() const { return spec_; }
  field::SceneBounds bounds() const;
  double sdf(const Vec3& p) const;
  Vec3 normal(const Vec3& p) const;
  Vec3 albedo(const Vec3& p) const;
  // Lambertian shading with a fixed directional light.
  Vec3 shade(const Vec3& p) const;
  // Sphere-traced distance along a unit ray to the first surface.
  std::optional<double> trace(const Vec3& origin, const Vec3& dir) const;

 private:
  struct Wave {
    Vec3 k;
    double phase;
  };
  static double pattern(const Vec3& p, std::span<const Wave> waves);

  SceneSpec spec_;
  std::vector<Wave> waves_;
  std::vector<Wave> object_waves_;
};

std::vector<Pose> circular_trajectory(const TrajectorySpec& t);
CameraIntrinsics pinhole(int width, int height, double fov_deg);

// Renders every frame with ground-truth color and z-depth. Throws ConfigError
// when a camera is not in free space or the image is smaller than 32x32.
Dataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

}  // namespace facmap::data

#pragma once

// Triangle meshes: marching-cubes extraction, ASCII PLY I/O, area-uniform
// sampling and point-to-point reconstruction metrics.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include "facmap/camera.hpp"
#include "facmap/field.hpp"

namespace facmap {

class SceneModel;

namespace mesh {

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;
  std::vector<Vec3> colors;  // empty or one per vertex, [0, 1]

  bool empty() const { return triangles.empty(); }
  double area() const;
  // Throws DataError on out-of-range indices or color count mismatch.
  void validate() const;
};

// Scalar samples on a regular lattice, x fastest: index (k * ny + j) * nx + i.
struct ScalarGrid {
  Vec3 origin = Vec3::Zero();
  double cell = 0.0;
  std::size_t nx = 0, ny = 0, nz = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j, std::size_t k) const { return values[(k * ny + j) * nx + i]; }
  Vec3 point(std::size_t i, std::size_t j, std::size_t k) const {
    return origin + cell * Vec3(static_cast<double>(i), static_cast<double>(j), static_cast<double>(k));
  }
};

// Samples `fn` on the lattice covering `bounds` with spacing `cell`.
ScalarGrid sample_grid(const std::function<double(const Vec3&)>& fn, const field::SceneBounds& bounds, double cell);

// Zero level set of the lattice. Vertices lie on lattice edges (linear
// interpolation) and are shared between neighbouring cells; triangle normals
// point towards positive values. Faces with two diagonal positive corners
// keep the positive corners separated.
Mesh marching_cubes(const ScalarGrid& grid);

// Decoded SDF of a trained model on a lattice; with `colors`, vertex colors
// come from the appearance branch. Logs a warning for an empty result.
Mesh extract_mesh(const SceneModel& model, double cell, const field::SceneBounds& bounds, bool colors = false);

void write_ply(const std::filesystem::path& path, const Mesh& m);
Mesh read_ply(const std::filesystem::path& path);

// Area-uniform surface samples. Throws DataError for an empty mesh.
std::vector<Vec3> sample_surface(const Mesh& m, std::size_t count, std::uint64_t seed);

// Exact nearest-neighbour queries over a static point set.
class KdTree {
 public:
  explicit KdTree(std::vector<Vec3> points);
  // Distance to the closest point.
  double nearest(const Vec3& q) const;
  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    std::uint32_t point;
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
  };
  std::int32_t build(std::vector<std::uint32_t>& idx, std::size_t begin, std::size_t end, int depth);
  void search(std::int32_t node, const Vec3& q, double& best) const;

  std::vector<Vec3> points_;
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
};

struct MeshMetrics {
  double acc_cm = 0.0;         // mean recon -> gt distance
  double comp_cm = 0.0;        // mean gt -> recon distance
  double comp_ratio = 0.0;     // % of gt samples closer than the threshold
};

// Both meshes are sampled with the same seed, so swapping the arguments swaps
// accuracy and completion exactly.
MeshMetrics evaluate_mesh(const Mesh& recon, const Mesh& gt, std::size_t samples = 100000, double threshold = 0.05,
                          std::uint64_t seed = 0);

}  // namespace mesh
}  // namespace facmap

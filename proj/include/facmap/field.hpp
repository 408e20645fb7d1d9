#pragma once

// Multi-resolution feature grids for geometry and appearance.
//
// Each resolution level is either a vector-matrix factorized grid
//   F_c(p) = vx_c(x) * Myz_c(y,z) + vy_c(y) * Mxz_c(x,z) + vz_c(z) * Mxy_c(x,y)
// (lines sampled by linear, planes by bilinear interpolation) or, for the
// ablation baseline, a dense grid sampled by trilinear interpolation. A field
// concatenates its levels' features coarse to fine.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "facmap/autodiff.hpp"

namespace facmap::field {

using Vec3 = Eigen::Vector3d;

class SceneBounds {
 public:
  SceneBounds() : SceneBounds(Vec3::Constant(-1.0), Vec3::Constant(1.0)) {}
  SceneBounds(const Vec3& min_corner, const Vec3& max_corner);

  const Vec3& min_corner() const { return min_; }
  const Vec3& max_corner() const { return max_; }
  Vec3 extent() const { return max_ - min_; }
  Vec3 center() const { return 0.5 * (min_ + max_); }
  bool contains(const Vec3& p) const;

  // Maps the box onto [-1, 1]^3 and back.
  Vec3 normalize(const Vec3& p) const;
  Vec3 denormalize(const Vec3& q) const;

 private:
  Vec3 min_;
  Vec3 max_;
};

enum class GridKind { factorized, dense };

struct LevelSpec {
  double cell_size = 0.0;  // meters
  std::size_t channels = 0;
};

struct GridSpec {
  GridKind kind = GridKind::factorized;
  std::vector<LevelSpec> levels;

  std::size_t feature_dim() const;
};

// Six geometry levels linearly spaced from 2 cm to 64 cm, two channels each,
// ordered coarse to fine.
GridSpec default_geometry_spec();
// Appearance levels at 24 cm and 2 cm with 32 channels each.
GridSpec default_appearance_spec();

struct FieldSpec {
  GridSpec geo = default_geometry_spec();
  GridSpec app = default_appearance_spec();
  double init_scale = 1e-2;
  // Upper bound on a single dense level's storage.
  std::size_t max_dense_bytes = std::size_t{2} << 30;
};

// Vertex counts per axis: ceil(extent / cell) cells, plus one.
struct Resolution {
  std::size_t nx = 0, ny = 0, nz = 0;
  bool operator==(const Resolution&) const = default;
};
Resolution cells_for(const SceneBounds& bounds, double cell_size);
Resolution vertices_for(const SceneBounds& bounds, double cell_size);

// Points in normalized coordinates, n x 3 row-major, shared between the
// level queries of one batch.
using PointBatch = std::shared_ptr<const std::vector<double>>;
PointBatch make_batch(std::vector<double> normalized_xyz);

class GridLevel {
 public:
  virtual ~GridLevel() = default;

  virtual std::size_t channels() const = 0;
  virtual double cell_size() const = 0;
  virtual Resolution resolution() const = 0;
  virtual std::size_t parameter_count() const = 0;
  virtual std::vector<ad::ParamId> params() const = 0;

  // Differentiable batched query; result is n x channels.
  virtual ad::Var query(ad::Tape& tape, const PointBatch& points) const = 0;
  // Plain evaluation at one normalized point (clamped into the box).
  virtual void evaluate(const ad::ParamStore& store, const Vec3& p_norm, std::span<double> out) const = 0;
};

class FactorizedLevel final : public GridLevel {
 public:
  // Registers lines "<prefix>.vx/.vy/.vz" and planes "<prefix>.myz/.mxz/.mxy"
  // in `group`, initialised i.i.d. uniform in [-init_scale, init_scale].
  FactorizedLevel(ad::ParamStore& store, const std::string& prefix, const std::string& group,
                  const SceneBounds& bounds, LevelSpec spec, double init_scale, std::mt19937_64& rng);

  std::size_t channels() const override { return channels_; }
  double cell_size() const override { return cell_size_; }
  Resolution resolution() const override { return res_; }
  std::size_t parameter_count() const override;
  std::size_t dense_parameter_count() const { return channels_ * res_.nx * res_.ny * res_.nz; }
  std::vector<ad::ParamId> params() const override { return {vx_, vy_, vz_, myz_, mxz_, mxy_}; }

  ad::Var query(ad::Tape& tape, const PointBatch& points) const override;
  void evaluate(const ad::ParamStore& store, const Vec3& p_norm, std::span<double> out) const override;

  ad::ParamId line_x() const { return vx_; }
  ad::ParamId line_y() const { return vy_; }
  ad::ParamId line_z() const { return vz_; }
  ad::ParamId plane_yz() const { return myz_; }
  ad::ParamId plane_xz() const { return mxz_; }
  ad::ParamId plane_xy() const { return mxy_; }

 private:
  Vec3 extent_;
  double cell_size_;
  std::size_t channels_;
  Resolution res_;
  ad::ParamId vx_, vy_, vz_, myz_, mxz_, mxy_;
};

class DenseLevel final : public GridLevel {
 public:
  // Registers "<prefix>.grid" (nx*ny*nz x channels, x-major). Throws
  // ConfigError when the buffer would exceed max_bytes.
  DenseLevel(ad::ParamStore& store, const std::string& prefix, const std::string& group, const SceneBounds& bounds,
             LevelSpec spec, double init_scale, std::mt19937_64& rng, std::size_t max_bytes);

  std::size_t channels() const override { return channels_; }
  double cell_size() const override { return cell_size_; }
  Resolution resolution() const override { return res_; }
  std::size_t parameter_count() const override { return channels_ * res_.nx * res_.ny * res_.nz; }
  std::vector<ad::ParamId> params() const override { return {grid_}; }

  ad::Var query(ad::Tape& tape, const PointBatch& points) const override;
  void evaluate(const ad::ParamStore& store, const Vec3& p_norm, std::span<double> out) const override;

  ad::ParamId grid() const { return grid_; }

 private:
  Vec3 extent_;
  double cell_size_;
  std::size_t channels_;
  Resolution res_;
  ad::ParamId grid_;
};

// Dense cell size whose parameter count does not exceed `budget` for the
// given channel count (never finer than `finest`).
double dense_cell_for_budget(const SceneBounds& bounds, std::size_t channels, std::size_t budget, double finest);

// Replaces every level of a factorized spec with a dense level of at most the
// same parameter count.
GridSpec matched_dense_spec(const SceneBounds& bounds, const GridSpec& factorized);

class FeatureField {
 public:
  // Builds geometry levels in group "grid_geo" and appearance levels in
  // "grid_app"; both groups must exist in the store.
  FeatureField(ad::ParamStore& store, const SceneBounds& bounds, const FieldSpec& spec, std::mt19937_64& rng);

  const SceneBounds& bounds() const { return bounds_; }
  const FieldSpec& spec() const { return spec_; }
  std::size_t geo_dim() const { return spec_.geo.feature_dim(); }
  std::size_t app_dim() const { return spec_.app.feature_dim(); }
  const std::vector<std::unique_ptr<GridLevel>>& geo_levels() const { return geo_; }
  const std::vector<std::unique_ptr<GridLevel>>& app_levels() const { return app_; }
  std::size_t parameter_count() const;

  // World positions (n x 3) to a normalized batch.
  PointBatch normalize(std::span<const double> world_xyz) const;

  ad::Var query_geo(ad::Tape& tape, const PointBatch& points) const;
  ad::Var query_app(ad::Tape& tape, const PointBatch& points) const;

  void evaluate_geo(const ad::ParamStore& store, const Vec3& p_world, std::span<double> out) const;
  void evaluate_app(const ad::ParamStore& store, const Vec3& p_world, std::span<double> out) const;

 private:
  static ad::Var concat(ad::Tape& tape, const std::vector<std::unique_ptr<GridLevel>>& levels,
                        const PointBatch& points);

  SceneBounds bounds_;
  FieldSpec spec_;
  std::vector<std::unique_ptr<GridLevel>> geo_;
  std::vector<std::unique_ptr<GridLevel>> app_;
};

// ---------------------------------------------------------------------------
// Checkpoint file: little-endian binary.
//   magic "FCMAPCKP", u32 version
//   bounds (6 f64)
//   geometry spec, appearance spec: u32 kind, u32 level count, per level (f64 cell, u32 channels)
//   f64 init_scale
//   u32 metadata length, metadata bytes (free-form text, e.g. decoder config)
//   u32 buffer count, per buffer: u32 name len, name, u32 group len, group,
//       u64 rows, u64 cols, rows*cols f64 values

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  SceneBounds bounds;
  FieldSpec spec;
  std::string metadata;
  struct Buffer {
    std::string name;
    std::string group;
    ad::Shape shape;
    std::vector<double> values;
  };
  std::vector<Buffer> buffers;
};

void write_checkpoint(const std::filesystem::path& path, const SceneBounds& bounds, const FieldSpec& spec,
                      const std::string& metadata, const ad::ParamStore& store);
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Copies buffer values into a store whose layout was rebuilt from the same
// specs. Throws DataError on missing names or shape mismatches.
void restore_params(const Checkpoint& ckpt, ad::ParamStore& store);

}  // namespace facmap::field

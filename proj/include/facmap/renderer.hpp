#pragma once

// Ray generation, stratified sampling and differentiable volume rendering.
//
// sdf_density: sigma_i = beta * sigmoid(-beta * s_i), then alpha-composited
//   with spacings: w_i = exp(-sum_{k<i} sigma_k delta_k) (1 - exp(-sigma_i delta_i)).
// occupancy:   o_i = sigmoid(-s_i), w_i = o_i prod_{k<i} (1 - o_k).
// sdf_direct:  w_i proportional to sigmoid(s_i/tr) sigmoid(-s_i/tr), normalized per ray.

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "facmap/autodiff.hpp"
#include "facmap/camera.hpp"
#include "facmap/field.hpp"
#include "facmap/model.hpp"

namespace facmap::render {

enum class RenderMode { sdf_density, sdf_direct, occupancy };

RenderMode parse_render_mode(const std::string& s);
std::string to_string(RenderMode m);

struct RenderSpec {
  std::size_t samples = 96;
  double near_floor = 0.01;
  RenderMode mode = RenderMode::sdf_density;
  double truncation = 0.05;  // sdf_direct only
  // Samples below this weight skip the appearance branch (0 = evaluate all).
  double color_weight_threshold = 0.0;
};

struct Pixel {
  double u = 0;
  double v = 0;
};

struct Rays {
  std::vector<Vec3> origins;
  std::vector<Vec3> directions;  // unit length
  std::size_t size() const { return origins.size(); }
};

// Rays through pixel centers. Throws DataError for pixels outside the image.
Rays generate_rays(const CameraIntrinsics& k, const Pose& pose, std::span<const Pixel> pixels);
Rays generate_rays(const Frame& frame, std::span<const Pixel> pixels);

// Entry and exit distances of a ray through the bounds, near floored at
// `near_floor`. A ray that misses gets a minimal interval past the floor.
std::pair<double, double> ray_interval(const field::SceneBounds& bounds, const Vec3& o, const Vec3& d,
                                       double near_floor);

struct RaySampleBatch {
  std::size_t rays = 0;
  std::size_t samples = 0;
  std::vector<Vec3> origins;
  std::vector<Vec3> directions;
  std::vector<double> near, far;    // per ray
  std::vector<double> z;            // rays x samples, increasing per ray
  std::vector<double> delta;        // z_{i+1} - z_i, last = far - z_N
  std::vector<double> positions;    // rays*samples x 3 world coordinates
};

// One sample per equal stratum of [near, far]: uniform inside the stratum
// when `jitter`, otherwise the stratum midpoint.
RaySampleBatch stratified_samples(const Rays& rays, std::span<const double> near, std::span<const double> far,
                                  std::size_t count, std::mt19937_64& rng, bool jitter = true);
RaySampleBatch sample_rays(const Rays& rays, const field::SceneBounds& bounds, const RenderSpec& spec,
                           std::mt19937_64& rng, bool jitter = true);

// Differentiable rendering ops.
ad::Var sdf_to_density(ad::Tape& t, ad::Var sdf, ad::Var log_beta);
ad::Var densities_to_weights(ad::Tape& t, ad::Var sigma, std::vector<double> delta);
ad::Var occupancy_weights(ad::Tape& t, ad::Var occupancy);
ad::Var sdf_direct_weights(ad::Tape& t, ad::Var sdf, double truncation);
// Per-ray weighted sums: w[R x S], values[R*S x k] -> [R x k].
ad::Var integrate(ad::Tape& t, ad::Var weights, ad::Var values);
// Reinterprets a buffer with a new shape of equal size.
ad::Var reshape(ad::Tape& t, ad::Var x, ad::Shape shape);

struct RenderOutput {
  ad::Var sdf;      // R*S x 1
  ad::Var weights;  // R x S
  ad::Var color;    // R x 3
  ad::Var depth;    // R x 1, sum_i w_i z_i (distance along the unit ray)
  ad::Var opacity;  // R x 1, sum_i w_i
};

// Weights from decoded sdf for every mode.
ad::Var weights_for_mode(ad::Tape& t, const SceneModel& model, const RenderSpec& spec, ad::Var sdf,
                         const RaySampleBatch& batch);

// Full differentiable rendering of a sample batch.
RenderOutput render_batch(ad::Tape& t, const SceneModel& model, const RaySampleBatch& batch, const RenderSpec& spec,
                          bool with_color = true);

struct RenderedView {
  Image color;    // 3 channels
  Image depth;    // ray distance, 1 channel
  Image zdepth;   // camera z-depth, 1 channel
  Image opacity;  // 1 channel
};

// Non-differentiable chunked rendering of every pixel (stratum midpoints).
RenderedView render_view(const SceneModel& model, const CameraIntrinsics& k, const Pose& pose, const RenderSpec& spec,
                         bool with_color = true, std::size_t chunk = 256);

struct PixelRender {
  std::vector<double> depth;    // ray distance
  std::vector<double> opacity;
};
// Depth and opacity for a list of pixels (stratum midpoints, no color).
PixelRender render_depth(const SceneModel& model, const CameraIntrinsics& k, const Pose& pose,
                         std::span<const Pixel> pixels, const RenderSpec& spec, std::size_t chunk = 256);

}  // namespace facmap::render

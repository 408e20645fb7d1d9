#pragma once

// Training objectives: per-pixel L1 color loss, masked SSIM, the multi-view
// patch warping loss and their weighted sum.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "facmap/autodiff.hpp"
#include "facmap/camera.hpp"
#include "facmap/renderer.hpp"

namespace facmap::losses {

inline constexpr double kAlphaColorInit = 0.1;
inline constexpr double kAlphaColorOnline = 0.001;
inline constexpr double kAlphaWarp = 1.0;

struct SsimConstants {
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

// Single-window SSIM of two equally sized patches, averaged over channels.
// Throws ShapeError for mismatched patches or patches smaller than 2x2.
double ssim(const Image& a, const Image& b, SsimConstants k = {});

// SSIM over the pixels of two interleaved buffers (n x channels) where
// mask != 0, averaged over channels. When `grad_b` is non-empty it receives
// d ssim / d b (zero at masked-out entries). Returns 1 for fewer than two
// valid pixels.
double ssim_masked(std::span<const double> a, std::span<const double> b, std::span<const std::uint8_t> mask,
                   int channels, SsimConstants k = {}, std::span<double> grad_b = {});

// (1/M) sum_x ||c_x - c~_x||_1 for rendered colors [M x 3] against observed
// colors (M*3 values). Throws DataError for M = 0.
ad::Var photometric_loss(ad::Tape& t, ad::Var rendered, std::span<const double> observed);

struct PatchEntry {
  std::size_t frame = 0;  // index into the current window
  int u = 0;              // integer patch center
  int v = 0;
};

// Square patches whose pixels are all rendered. Every patch lies at least
// `radius` pixels inside the image.
struct PixelSampleSet {
  int radius = 3;
  std::vector<PatchEntry> patches;

  std::size_t patch_pixels() const { return static_cast<std::size_t>((2 * radius + 1) * (2 * radius + 1)); }
  // Total pixel count M.
  std::size_t size() const { return patches.size() * patch_pixels(); }
  // Pixels of one patch, row by row.
  std::vector<render::Pixel> pixels(std::size_t patch) const;
};

// Frames uniformly over the window, then centers uniformly over the valid
// interior of a width x height image.
PixelSampleSet sample_patches(std::size_t frame_count, int width, int height, std::size_t patch_count, int radius,
                              std::mt19937_64& rng);

// A posed frame with its 2x box-filtered pyramid (level 0 = full resolution).
struct ViewPyramid {
  CameraIntrinsics intrinsics;
  Pose pose;
  std::vector<Image> levels;

  static ViewPyramid build(const Frame& frame, int scales);
};

// Continuous pixel coordinate of a level-0 coordinate on pyramid level `scale`.
inline double to_level(double x, int scale) { return (x + 0.5) / static_cast<double>(1 << scale) - 0.5; }

struct WarpResult {
  std::vector<double> values;    // n x channels, target samples on the pyramid level
  std::vector<double> d_depth;   // n x channels, d value / d depth
  std::vector<std::uint8_t> valid;
  std::size_t valid_count() const;
};

// Backprojects source pixels (level-0 coordinates) with per-pixel ray
// distances, moves them into the target camera and samples the target level
// bilinearly. Points behind the target camera, outside its image, or with
// non-positive depth are invalid.
WarpResult warp_patch(const ViewPyramid& src, const ViewPyramid& tgt, std::span<const render::Pixel> pixels,
                      std::span<const double> depth, int scale);

// Source patch colors on a pyramid level.
std::vector<double> source_patch(const ViewPyramid& src, std::span<const render::Pixel> pixels, int scale);

struct WarpSpec {
  int scales = 3;
  // A (patch, target, scale) triple needs this fraction of valid pixels.
  double min_valid_fraction = 0.5;
  SsimConstants ssim;
};

struct WarpStats {
  std::size_t triples = 0;  // contributing (patch, target, scale) triples
  std::size_t skipped = 0;  // triples dropped for too few valid pixels
};

// Mean of 1 - ssim(source patch, warped patch) over valid triples. `depth` is
// the [M x 1] rendered ray distance of every patch pixel in set order;
// `targets[f]` lists the views that patches of window frame f warp into.
// Without any valid triple the loss is the constant 0.
ad::Var warping_loss(ad::Tape& t, ad::Var depth, const PixelSampleSet& set, std::span<const ViewPyramid> views,
                     const std::vector<std::vector<std::size_t>>& targets, const WarpSpec& spec,
                     WarpStats* stats = nullptr);

struct LossTerms {
  double color = 0.0;
  double warp = 0.0;
  double total = 0.0;
  double alpha_c = 0.0;
  double alpha_w = 0.0;
};

// alpha_c * l_c + alpha_w * l_w. Throws ConfigError for negative weights.
ad::Var total_loss(ad::Tape& t, ad::Var l_c, ad::Var l_w, double alpha_c, double alpha_w);
double total_loss(double l_c, double l_w, double alpha_c, double alpha_w);

}  // namespace facmap::losses

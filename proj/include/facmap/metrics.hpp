#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "facmap/camera.hpp"
#include "facmap/mesh.hpp"

namespace facmap::metrics {

inline constexpr double kPsnrCap = 99.0;

// 10 log10(1 / MSE) over all channels, capped at kPsnrCap.
double psnr(const Image& a, const Image& b);
// Mean SSIM over every 7x7 window (stride 1), channel-averaged.
double image_ssim(const Image& a, const Image& b, int window = 7);

struct RenderMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> depth_l1_cm;  // absent for an empty mask
  std::size_t depth_pixels = 0;
};

// PSNR and SSIM over the full image; Depth L1 over mask != 0 pixels with a
// positive ground-truth depth. Depths are camera z-depths in meters.
RenderMetrics evaluate_render(const Image& color, const Image& depth, const Image& gt_color, const Image& gt_depth,
                              const std::vector<std::uint8_t>& mask);

// Pixels with accumulated opacity >= threshold.
std::vector<std::uint8_t> opacity_mask(const Image& opacity, double threshold = 0.5);

struct FrameRow {
  std::int64_t id = 0;
  RenderMetrics render;
};

struct MetricReport {
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::optional<double> depth_l1_cm;
  std::optional<double> acc_cm;
  std::optional<double> comp_cm;
  std::optional<double> comp_ratio;
  std::vector<FrameRow> frames;

  // Frame averages of the render metrics (depth over frames that have it).
  void summarize_frames();
  void set_mesh(const mesh::MeshMetrics& m);
};

// "key: value" lines for the six metrics (absent values spelled "absent")
// followed by a per-frame table.
std::string format_report(const MetricReport& r);
void write_report(const std::filesystem::path& path, const MetricReport& r);

}  // namespace facmap::metrics

#include "facmap/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "facmap/losses.hpp"

namespace facmap::metrics {

namespace {

void require_same(const Image& a, const Image& b, const char* what) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw ShapeError(std::string(what) + ": image shapes differ");
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  require_same(a, b, "psnr");
  if (a.data.empty()) throw ShapeError("psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) se += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  const double mse = se / static_cast<double>(a.data.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double image_ssim(const Image& a, const Image& b, int window) {
  require_same(a, b, "image_ssim");
  if (a.width < window || a.height < window) throw ShapeError("image_ssim: image smaller than the window");
  Image pa(window, window, a.channels), pb(window, window, b.channels);
  double total = 0.0;
  std::size_t count = 0;
  for (int y = 0; y + window <= a.height; ++y)
    for (int x = 0; x + window <= a.width; ++x) {
      for (int dy = 0; dy < window; ++dy)
        for (int dx = 0; dx < window; ++dx)
          for (int c = 0; c < a.channels; ++c) {
            pa.at(dx, dy, c) = a.at(x + dx, y + dy, c);
            pb.at(dx, dy, c) = b.at(x + dx, y + dy, c);
          }
      total += losses::ssim(pa, pb);
      ++count;
    }
  return total / static_cast<double>(count);
}

RenderMetrics evaluate_render(const Image& color, const Image& depth, const Image& gt_color, const Image& gt_depth,
                              const std::vector<std::uint8_t>& mask) {
  RenderMetrics m;
  m.psnr = psnr(color, gt_color);
  m.ssim = image_ssim(color, gt_color);
  require_same(depth, gt_depth, "evaluate_render depth");
  if (mask.size() != depth.data.size()) throw ShapeError("evaluate_render: mask size");
  double err = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i] || !(gt_depth.data[i] > 0.0)) continue;
    err += std::abs(depth.data[i] - gt_depth.data[i]);
    ++m.depth_pixels;
  }
  if (m.depth_pixels > 0) m.depth_l1_cm = 100.0 * err / static_cast<double>(m.depth_pixels);
  return m;
}

std::vector<std::uint8_t> opacity_mask(const Image& opacity, double threshold) {
  std::vector<std::uint8_t> m(opacity.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = opacity.data[i] >= threshold;
  return m;
}

void MetricReport::summarize_frames() {
  if (frames.empty()) return;
  double p = 0, s = 0, d = 0;
  std::size_t nd = 0;
  for (const FrameRow& f : frames) {
    p += f.render.psnr;
    s += f.render.ssim;
    if (f.render.depth_l1_cm) {
      d += *f.render.depth_l1_cm;
      ++nd;
    }
  }
  psnr = p / static_cast<double>(frames.size());
  ssim = s / static_cast<double>(frames.size());
  depth_l1_cm = nd ? std::optional<double>(d / static_cast<double>(nd)) : std::nullopt;
}

void MetricReport::set_mesh(const mesh::MeshMetrics& m) {
  acc_cm = m.acc_cm;
  comp_cm = m.comp_cm;
  comp_ratio = m.comp_ratio;
}

std::string format_report(const MetricReport& r) {
  std::ostringstream os;
  os.precision(17);
  auto line = [&os](const char* key, const std::optional<double>& v) {
    os << key << ": ";
    if (v)
      os << *v;
    else
      os << "absent";
    os << '\n';
  };
  line("psnr_db", r.psnr);
  line("ssim", r.ssim);
  line("depth_l1_cm", r.depth_l1_cm);
  line("acc_cm", r.acc_cm);
  line("comp_cm", r.comp_cm);
  line("comp_ratio_pct", r.comp_ratio);
  os << "frames: " << r.frames.size() << '\n';
  os << "# frame psnr_db ssim depth_l1_cm depth_pixels\n";
  for (const FrameRow& f : r.frames) {
    os << f.id << ' ' << f.render.psnr << ' ' << f.render.ssim << ' ';
    if (f.render.depth_l1_cm)
      os << *f.render.depth_l1_cm;
    else
      os << "absent";
    os << ' ' << f.render.depth_pixels << '\n';
  }
  return os.str();
}

void write_report(const std::filesystem::path& path, const MetricReport& r) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report " + path.string());
  out << format_report(r);
  if (!out) throw DataError("failed writing report " + path.string());
}

}  // namespace facmap::metrics

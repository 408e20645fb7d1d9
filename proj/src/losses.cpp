#include "facmap/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <spdlog/spdlog.h>

namespace facmap::losses {

double ssim(const Image& a, const Image& b, SsimConstants k) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    std::ostringstream os;
    os << "ssim: patch shapes differ (" << a.width << "x" << a.height << "x" << a.channels << " vs " << b.width << "x"
       << b.height << "x" << b.channels << ")";
    throw ShapeError(os.str());
  }
  if (a.width < 2 || a.height < 2) throw ShapeError("ssim: patches must be at least 2x2");
  const std::vector<std::uint8_t> mask(static_cast<std::size_t>(a.width) * a.height, 1);
  return ssim_masked(a.data, b.data, mask, a.channels, k);
}

double ssim_masked(std::span<const double> a, std::span<const double> b, std::span<const std::uint8_t> mask,
                   int channels, SsimConstants k, std::span<double> grad_b) {
  const std::size_t c = static_cast<std::size_t>(channels);
  if (a.size() != b.size() || a.size() != mask.size() * c) throw ShapeError("ssim_masked: buffer sizes differ");
  if (!grad_b.empty() && grad_b.size() != b.size()) throw ShapeError("ssim_masked: gradient buffer size");
  std::fill(grad_b.begin(), grad_b.end(), 0.0);
  std::size_t n = 0;
  for (std::uint8_t m : mask) n += m != 0;
  if (n < 2) return 1.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) {
        ma += a[i * c + ch];
        mb += b[i * c + ch];
      }
    ma *= inv_n;
    mb *= inv_n;
    double va = 0, vb = 0, cov = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) {
        const double da = a[i * c + ch] - ma, db = b[i * c + ch] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
      }
    va *= inv_n;
    vb *= inv_n;
    cov *= inv_n;
    const double a1 = 2 * ma * mb + k.c1, a2 = 2 * cov + k.c2;
    const double b1 = ma * ma + mb * mb + k.c1, b2 = va + vb + k.c2;
    const double s = a1 * a2 / (b1 * b2);
    total += s;
    if (grad_b.empty()) continue;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      const double da1 = 2 * ma * inv_n, da2 = 2 * (a[i * c + ch] - ma) * inv_n;
      const double db1 = 2 * mb * inv_n, db2 = 2 * (b[i * c + ch] - mb) * inv_n;
      const double ds = (da1 * a2 + a1 * da2) / (b1 * b2) - s * (db1 / b1 + db2 / b2);
      grad_b[i * c + ch] = ds / static_cast<double>(c);
    }
  }
  return total / static_cast<double>(c);
}

ad::Var photometric_loss(ad::Tape& t, ad::Var rendered, std::span<const double> observed) {
  const ad::Shape s = t.shape(rendered);
  if (s.rows == 0) throw DataError("photometric_loss: empty pixel set");
  if (s.cols != 3 || observed.size() != s.size())
    throw ShapeError("photometric_loss: rendered " + ad::to_string(s) + " vs " + std::to_string(observed.size()) +
                     " observed values");
  const ad::Var target = t.constant(s, std::vector<double>(observed.begin(), observed.end()));
  const ad::Var l1 = ad::ops::sum(t, ad::ops::abs(t, ad::ops::sub(t, rendered, target)));
  return ad::ops::scale(t, l1, 1.0 / static_cast<double>(s.rows));
}

std::vector<render::Pixel> PixelSampleSet::pixels(std::size_t patch) const {
  const PatchEntry& e = patches.at(patch);
  std::vector<render::Pixel> out;
  out.reserve(patch_pixels());
  for (int dv = -radius; dv <= radius; ++dv)
    for (int du = -radius; du <= radius; ++du)
      out.push_back({static_cast<double>(e.u + du), static_cast<double>(e.v + dv)});
  return out;
}

PixelSampleSet sample_patches(std::size_t frame_count, int width, int height, std::size_t patch_count, int radius,
                              std::mt19937_64& rng) {
  if (frame_count == 0) throw DataError("sample_patches: empty window");
  if (radius < 0 || width <= 2 * radius || height <= 2 * radius)
    throw DataError("sample_patches: image too small for patch radius " + std::to_string(radius));
  PixelSampleSet set;
  set.radius = radius;
  set.patches.reserve(patch_count);
  std::uniform_int_distribution<std::size_t> frame(0, frame_count - 1);
  std::uniform_int_distribution<int> u(radius, width - 1 - radius);
  std::uniform_int_distribution<int> v(radius, height - 1 - radius);
  for (std::size_t i = 0; i < patch_count; ++i) {
    PatchEntry e;
    e.frame = frame(rng);
    e.u = u(rng);
    e.v = v(rng);
    set.patches.push_back(e);
  }
  return set;
}

ViewPyramid ViewPyramid::build(const Frame& frame, int scales) {
  if (scales < 1) throw ConfigError("pyramid needs at least one scale");
  ViewPyramid p{frame.intrinsics, frame.pose, {frame.rgb}};
  for (int s = 1; s < scales; ++s) {
    if (p.levels.back().width < 4 || p.levels.back().height < 4)
      throw ConfigError("image too small for " + std::to_string(scales) + " pyramid scales");
    p.levels.push_back(downsample2(p.levels.back()));
  }
  return p;
}

std::size_t WarpResult::valid_count() const {
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }));
}

WarpResult warp_patch(const ViewPyramid& src, const ViewPyramid& tgt, std::span<const render::Pixel> pixels,
                      std::span<const double> depth, int scale) {
  if (depth.size() != pixels.size()) throw ShapeError("warp_patch: one depth per pixel required");
  if (scale < 0 || scale >= static_cast<int>(tgt.levels.size())) throw ShapeError("warp_patch: scale out of range");
  const Image& img = tgt.levels[scale];
  const std::size_t c = static_cast<std::size_t>(img.channels);
  const double f = 1.0 / static_cast<double>(1 << scale);
  const CameraIntrinsics& kt = tgt.intrinsics;
  const Mat3 rt = tgt.pose.rotation.transpose();
  WarpResult out;
  out.values.assign(pixels.size() * c, 0.0);
  out.d_depth.assign(pixels.size() * c, 0.0);
  out.valid.assign(pixels.size(), 0);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (!(depth[i] > 0.0)) continue;
    const Vec3 dir = (src.pose.rotation * src.intrinsics.backproject(pixels[i].u, pixels[i].v)).normalized();
    const Vec3 pw = src.pose.translation + depth[i] * dir;
    const Vec3 pc = rt * (pw - tgt.pose.translation);
    const Vec3 dpc = rt * dir;
    if (!(pc.z() > 1e-6)) continue;
    const double iz = 1.0 / pc.z();
    const double u0 = kt.fx * pc.x() * iz + kt.cx, v0 = kt.fy * pc.y() * iz + kt.cy;
    const double us = to_level(u0, scale), vs = to_level(v0, scale);
    if (us < 0.0 || vs < 0.0 || us > img.width - 1 || vs > img.height - 1) continue;
    out.valid[i] = 1;
    const double dus = f * kt.fx * (dpc.x() * iz - pc.x() * dpc.z() * iz * iz);
    const double dvs = f * kt.fy * (dpc.y() * iz - pc.y() * dpc.z() * iz * iz);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double gu, gv;
      out.values[i * c + ch] = img.bilinear_grad(us, vs, static_cast<int>(ch), gu, gv);
      out.d_depth[i * c + ch] = gu * dus + gv * dvs;
    }
  }
  return out;
}

std::vector<double> source_patch(const ViewPyramid& src, std::span<const render::Pixel> pixels, int scale) {
  const Image& img = src.levels.at(static_cast<std::size_t>(scale));
  const std::size_t c = static_cast<std::size_t>(img.channels);
  std::vector<double> out(pixels.size() * c);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      out[i * c + ch] =
          img.bilinear(to_level(pixels[i].u, scale), to_level(pixels[i].v, scale), static_cast<int>(ch));
  return out;
}

ad::Var warping_loss(ad::Tape& t, ad::Var depth, const PixelSampleSet& set, std::span<const ViewPyramid> views,
                     const std::vector<std::vector<std::size_t>>& targets, const WarpSpec& spec, WarpStats* stats) {
  const std::size_t n = set.patch_pixels();
  if (t.shape(depth) != ad::Shape{set.size(), 1})
    throw ShapeError("warping_loss: depth " + ad::to_string(t.shape(depth)) + " for " + std::to_string(set.size()) +
                     " pixels");
  if (targets.size() != views.size()) throw ShapeError("warping_loss: one target list per view required");
  auto d = t.value(depth);
  std::vector<double> grad(d.size(), 0.0);
  const auto need = static_cast<std::size_t>(std::ceil(spec.min_valid_fraction * static_cast<double>(n)));
  double loss = 0.0;
  WarpStats local;
  std::vector<double> gb;
  for (std::size_t p = 0; p < set.patches.size(); ++p) {
    const std::size_t f = set.patches[p].frame;
    if (f >= views.size()) throw ShapeError("warping_loss: patch frame outside the window");
    const std::vector<render::Pixel> px = set.pixels(p);
    const std::span<const double> dp = d.subspan(p * n, n);
    for (std::size_t l : targets[f]) {
      if (l == f || l >= views.size()) continue;
      for (int s = 0; s < spec.scales; ++s) {
        const WarpResult w = warp_patch(views[f], views[l], px, dp, s);
        if (w.valid_count() < std::max<std::size_t>(need, 2)) {
          ++local.skipped;
          continue;
        }
        const std::vector<double> q = source_patch(views[f], px, s);
        const int c = views[l].levels[s].channels;
        gb.assign(w.values.size(), 0.0);
        loss += 1.0 - ssim_masked(q, w.values, w.valid, c, spec.ssim, gb);
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0.0;
          for (int ch = 0; ch < c; ++ch) acc += gb[i * c + ch] * w.d_depth[i * c + ch];
          grad[p * n + i] -= acc;
        }
        ++local.triples;
      }
    }
  }
  if (stats) *stats = local;
  if (local.triples == 0) {
    spdlog::debug("warping loss: no valid (patch, target, scale) triple");
    return t.scalar(0.0);
  }
  const double inv = 1.0 / static_cast<double>(local.triples);
  for (double& g : grad) g *= inv;
  return t.record("warping_loss", {1, 1}, {loss * inv}, {depth}, [depth, grad = std::move(grad)](ad::Tape& tp,
                                                                                                  ad::Var self) {
    const double g = tp.grad(self)[0];
    auto gd = tp.grad_mut(depth);
    for (std::size_t i = 0; i < grad.size(); ++i) gd[i] += g * grad[i];
  });
}

ad::Var total_loss(ad::Tape& t, ad::Var l_c, ad::Var l_w, double alpha_c, double alpha_w) {
  if (alpha_c < 0.0 || alpha_w < 0.0) throw ConfigError("loss weights must be non-negative");
  return ad::ops::add(t, ad::ops::scale(t, l_c, alpha_c), ad::ops::scale(t, l_w, alpha_w));
}

double total_loss(double l_c, double l_w, double alpha_c, double alpha_w) {
  if (alpha_c < 0.0 || alpha_w < 0.0) throw ConfigError("loss weights must be non-negative");
  return alpha_c * l_c + alpha_w * l_w;
}

}  // namespace facmap::losses

#include "facmap/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace facmap::render {

RenderMode parse_render_mode(const std::string& s) {
  if (s == "sdf_density") return RenderMode::sdf_density;
  if (s == "sdf_direct") return RenderMode::sdf_direct;
  if (s == "occupancy") return RenderMode::occupancy;
  throw ConfigError("unknown render mode '" + s + "' (expected sdf_density, sdf_direct or occupancy)");
}

std::string to_string(RenderMode m) {
  switch (m) {
    case RenderMode::sdf_density:
      return "sdf_density";
    case RenderMode::sdf_direct:
      return "sdf_direct";
    case RenderMode::occupancy:
      return "occupancy";
  }
  return "unknown";
}

Rays generate_rays(const CameraIntrinsics& k, const Pose& pose, std::span<const Pixel> pixels) {
  Rays r;
  r.origins.reserve(pixels.size());
  r.directions.reserve(pixels.size());
  for (const Pixel& p : pixels) {
    if (!k.contains(p.u, p.v)) {
      std::ostringstream os;
      os << "pixel (" << p.u << ", " << p.v << ") outside the " << k.width << "x" << k.height << " image";
      throw DataError(os.str());
    }
    r.origins.push_back(pose.translation);
    r.directions.push_back((pose.rotation * k.backproject(p.u, p.v)).normalized());
  }
  return r;
}

Rays generate_rays(const Frame& frame, std::span<const Pixel> pixels) {
  return generate_rays(frame.intrinsics, frame.pose, pixels);
}

std::pair<double, double> ray_interval(const field::SceneBounds& bounds, const Vec3& o, const Vec3& d,
                                       double near_floor) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < bounds.min_corner()[a] || o[a] > bounds.max_corner()[a]) return {near_floor, near_floor + 1e-3};
      continue;
    }
    double ta = (bounds.min_corner()[a] - o[a]) / d[a];
    double tb = (bounds.max_corner()[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  const double near = std::max(t0, near_floor);
  if (!(t1 > near)) return {near_floor, near_floor + 1e-3};
  return {near, t1};
}

RaySampleBatch stratified_samples(const Rays& rays, std::span<const double> near, std::span<const double> far,
                                  std::size_t count, std::mt19937_64& rng, bool jitter) {
  if (count < 2) throw ConfigError("stratified_samples: need at least 2 samples per ray");
  if (near.size() != rays.size() || far.size() != rays.size())
    throw ShapeError("stratified_samples: near/far length mismatch");
  RaySampleBatch b;
  b.rays = rays.size();
  b.samples = count;
  b.origins = rays.origins;
  b.directions = rays.directions;
  b.near.assign(near.begin(), near.end());
  b.far.assign(far.begin(), far.end());
  b.z.resize(b.rays * count);
  b.delta.resize(b.rays * count);
  b.positions.resize(b.rays * count * 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t r = 0; r < b.rays; ++r) {
    if (!(near[r] < far[r])) throw ConfigError("stratified_samples: near must be < far");
    const double step = (far[r] - near[r]) / static_cast<double>(count);
    double* z = &b.z[r * count];
    for (std::size_t i = 0; i < count; ++i) {
      const double u = jitter ? unit(rng) : 0.5;
      z[i] = near[r] + (static_cast<double>(i) + u) * step;
    }
    for (std::size_t i = 0; i + 1 < count; ++i) b.delta[r * count + i] = z[i + 1] - z[i];
    b.delta[r * count + count - 1] = far[r] - z[count - 1];
    const Vec3& o = rays.origins[r];
    const Vec3& d = rays.directions[r];
    for (std::size_t i = 0; i < count; ++i) {
      double* p = &b.positions[(r * count + i) * 3];
      p[0] = o.x() + z[i] * d.x();
      p[1] = o.y() + z[i] * d.y();
      p[2] = o.z() + z[i] * d.z();
    }
  }
  return b;
}

RaySampleBatch sample_rays(const Rays& rays, const field::SceneBounds& bounds, const RenderSpec& spec,
                           std::mt19937_64& rng, bool jitter) {
  std::vector<double> near(rays.size()), far(rays.size());
  for (std::size_t i = 0; i < rays.size(); ++i)
    std::tie(near[i], far[i]) = ray_interval(bounds, rays.origins[i], rays.directions[i], spec.near_floor);
  return stratified_samples(rays, near, far, spec.samples, rng, jitter);
}

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ad::Var sdf_to_density(ad::Tape& t, ad::Var sdf, ad::Var log_beta) {
  if (t.shape(log_beta) != ad::Shape{1, 1}) throw ShapeError("sdf_to_density: log_beta must be 1x1");
  const double beta = std::exp(t.value(log_beta)[0]);
  auto s = t.value(sdf);
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = beta * sigmoid(-beta * s[i]);
  return t.record("sdf_to_density", t.shape(sdf), std::move(out), {sdf, log_beta},
                  [sdf, log_beta](ad::Tape& tp, ad::Var self) {
                    const double beta = std::exp(tp.value(log_beta)[0]);
                    auto g = tp.grad(self);
                    auto s = tp.value(sdf);
                    const bool gs_live = tp.needs_grad(sdf);
                    std::span<double> gs = gs_live ? tp.grad_mut(sdf) : std::span<double>{};
                    double gbeta = 0.0;
                    for (std::size_t i = 0; i < s.size(); ++i) {
                      const double sg = sigmoid(-beta * s[i]);
                      const double dsg = sg * (1.0 - sg);
                      if (gs_live) gs[i] += g[i] * (-beta * beta * dsg);
                      gbeta += g[i] * (sg - beta * s[i] * dsg);
                    }
                    if (tp.needs_grad(log_beta)) tp.grad_mut(log_beta)[0] += gbeta * beta;
                  });
}

ad::Var densities_to_weights(ad::Tape& t, ad::Var sigma, std::vector<double> delta) {
  const ad::Shape s = t.shape(sigma);
  if (delta.size() != s.size()) throw ShapeError("densities_to_weights: spacing count does not match densities");
  auto sv = t.value(sigma);
  std::vector<double> w(s.size());
  for (std::size_t r = 0; r < s.rows; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s.cols; ++i) {
      const std::size_t k = r * s.cols + i;
      const double tau = sv[k] * delta[k];
      w[k] = std::exp(-acc) * (1.0 - std::exp(-tau));
      acc += tau;
    }
  }
  return t.record("densities_to_weights", s, std::move(w), {sigma},
                  [sigma, s, delta = std::move(delta)](ad::Tape& tp, ad::Var self) {
                    auto g = tp.grad(self);
                    auto w = tp.value(self);
                    auto sv = tp.value(sigma);
                    auto gs = tp.grad_mut(sigma);
                    for (std::size_t r = 0; r < s.rows; ++r) {
                      const std::size_t base = r * s.cols;
                      // Transmittance after each sample, recomputed front to back.
                      double acc = 0.0;
                      std::vector<double> t_after(s.cols);
                      for (std::size_t i = 0; i < s.cols; ++i) {
                        acc += sv[base + i] * delta[base + i];
                        t_after[i] = std::exp(-acc);
                      }
                      double suffix = 0.0;  // sum_{i>j} g_i w_i
                      for (std::size_t j = s.cols; j-- > 0;) {
                        const double dtau = g[base + j] * t_after[j] - suffix;
                        gs[base + j] += dtau * delta[base + j];
                        suffix += g[base + j] * w[base + j];
                      }
                    }
                  });
}

ad::Var occupancy_weights(ad::Tape& t, ad::Var occupancy) {
  const ad::Shape s = t.shape(occupancy);
  auto o = t.value(occupancy);
  std::vector<double> w(s.size());
  for (std::size_t r = 0; r < s.rows; ++r) {
    double trans = 1.0;
    for (std::size_t i = 0; i < s.cols; ++i) {
      const std::size_t k = r * s.cols + i;
      w[k] = o[k] * trans;
      trans *= 1.0 - o[k];
    }
  }
  return t.record("occupancy_weights", s, std::move(w), {occupancy}, [occupancy, s](ad::Tape& tp, ad::Var self) {
    auto g = tp.grad(self);
    auto o = tp.value(occupancy);
    auto go = tp.grad_mut(occupancy);
    std::vector<double> before(s.cols);
    for (std::size_t r = 0; r < s.rows; ++r) {
      const std::size_t base = r * s.cols;
      double trans = 1.0;
      for (std::size_t i = 0; i < s.cols; ++i) {
        before[i] = trans;
        trans *= 1.0 - o[base + i];
      }
      // q_j = sum_{i>j} g_i o_i prod_{j<k<i} (1 - o_k)
      double q = 0.0;
      for (std::size_t j = s.cols; j-- > 0;) {
        go[base + j] += before[j] * (g[base + j] - q);
        q = g[base + j] * o[base + j] + (1.0 - o[base + j]) * q;
      }
    }
  });
}

ad::Var sdf_direct_weights(ad::Tape& t, ad::Var sdf, double truncation) {
  if (!(truncation > 0.0)) throw ConfigError("sdf_direct truncation must be positive");
  const ad::Shape s = t.shape(sdf);
  auto sv = t.value(sdf);
  std::vector<double> w(s.size());
  for (std::size_t r = 0; r < s.rows; ++r) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.cols; ++i) {
      const std::size_t k = r * s.cols + i;
      const double x = sv[k] / truncation;
      w[k] = sigmoid(x) * sigmoid(-x);
      total += w[k];
    }
    if (total > 0.0)
      for (std::size_t i = 0; i < s.cols; ++i) w[r * s.cols + i] /= total;
  }
  return t.record("sdf_direct_weights", s, std::move(w), {sdf}, [sdf, s, truncation](ad::Tape& tp, ad::Var self) {
    auto g = tp.grad(self);
    auto w = tp.value(self);
    auto sv = tp.value(sdf);
    auto gs = tp.grad_mut(sdf);
    for (std::size_t r = 0; r < s.rows; ++r) {
      const std::size_t base = r * s.cols;
      double total = 0.0, gw = 0.0;
      for (std::size_t i = 0; i < s.cols; ++i) {
        const double x = sv[base + i] / truncation;
        total += sigmoid(x) * sigmoid(-x);
        gw += g[base + i] * w[base + i];
      }
      if (!(total > 0.0)) continue;
      for (std::size_t j = 0; j < s.cols; ++j) {
        const double x = sv[base + j] / truncation;
        const double u = sigmoid(x) * sigmoid(-x);
        const double du = u * (1.0 - 2.0 * sigmoid(x)) / truncation;
        gs[base + j] += (g[base + j] - gw) / total * du;
      }
    }
  });
}

ad::Var integrate(ad::Tape& t, ad::Var weights, ad::Var values) {
  const ad::Shape ws = t.shape(weights), vs = t.shape(values);
  if (vs.rows != ws.size())
    throw ShapeError("integrate: weights " + ad::to_string(ws) + " do not align with values " + ad::to_string(vs));
  const std::size_t k = vs.cols;
  auto w = t.value(weights);
  auto v = t.value(values);
  std::vector<double> out(ws.rows * k, 0.0);
  for (std::size_t r = 0; r < ws.rows; ++r)
    for (std::size_t i = 0; i < ws.cols; ++i) {
      const std::size_t row = r * ws.cols + i;
      for (std::size_t c = 0; c < k; ++c) out[r * k + c] += w[row] * v[row * k + c];
    }
  return t.record("integrate", {ws.rows, k}, std::move(out), {weights, values},
                  [weights, values, ws, k](ad::Tape& tp, ad::Var self) {
                    auto g = tp.grad(self);
                    auto w = tp.value(weights);
                    auto v = tp.value(values);
                    const bool gw_live = tp.needs_grad(weights), gv_live = tp.needs_grad(values);
                    std::span<double> gw = gw_live ? tp.grad_mut(weights) : std::span<double>{};
                    std::span<double> gv = gv_live ? tp.grad_mut(values) : std::span<double>{};
                    for (std::size_t r = 0; r < ws.rows; ++r)
                      for (std::size_t i = 0; i < ws.cols; ++i) {
                        const std::size_t row = r * ws.cols + i;
                        double acc = 0.0;
                        for (std::size_t c = 0; c < k; ++c) {
                          acc += g[r * k + c] * v[row * k + c];
                          if (gv_live) gv[row * k + c] += g[r * k + c] * w[row];
                        }
                        if (gw_live) gw[row] += acc;
                      }
                  });
}

ad::Var reshape(ad::Tape& t, ad::Var x, ad::Shape shape) {
  if (shape.size() != t.shape(x).size())
    throw ShapeError("reshape: " + ad::to_string(t.shape(x)) + " to " + ad::to_string(shape));
  auto xv = t.value(x);
  return t.record("reshape", shape, std::vector<double>(xv.begin(), xv.end()), {x}, [x](ad::Tape& tp, ad::Var self) {
    auto g = tp.grad(self);
    auto gx = tp.grad_mut(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

ad::Var weights_for_mode(ad::Tape& t, const SceneModel& model, const RenderSpec& spec, ad::Var sdf,
                         const RaySampleBatch& batch) {
  const ad::Shape grid{batch.rays, batch.samples};
  switch (spec.mode) {
    case RenderMode::sdf_density: {
      const ad::Var sigma = sdf_to_density(t, sdf, t.param(model.log_beta()));
      return densities_to_weights(t, reshape(t, sigma, grid), batch.delta);
    }
    case RenderMode::occupancy: {
      const ad::Var occ = ad::ops::sigmoid(t, ad::ops::scale(t, sdf, -1.0));
      return occupancy_weights(t, reshape(t, occ, grid));
    }
    case RenderMode::sdf_direct:
      return sdf_direct_weights(t, reshape(t, sdf, grid), spec.truncation);
  }
  throw ConfigError("unknown render mode");
}

RenderOutput render_batch(ad::Tape& t, const SceneModel& model, const RaySampleBatch& batch, const RenderSpec& spec,
                          bool with_color) {
  const auto& field = model.field();
  const auto& dec = model.decoders();
  const std::size_t n = batch.rays * batch.samples;
  RenderOutput out;
  const field::PointBatch pts = field.normalize(batch.positions);
  out.sdf = dec.decode_geo(t, field.query_geo(t, pts));
  out.weights = weights_for_mode(t, model, spec, out.sdf, batch);
  out.opacity = integrate(t, out.weights, t.constant({n, 1}, std::vector<double>(n, 1.0)));
  out.depth = integrate(t, out.weights, t.constant({n, 1}, batch.z));
  if (!with_color) return out;

  if (spec.color_weight_threshold <= 0.0) {
    const ad::Var rgb = dec.decode_app(t, pts, field.query_app(t, pts));
    out.color = integrate(t, out.weights, rgb);
    return out;
  }
  auto w = t.value(out.weights);
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < n; ++i)
    if (w[i] >= spec.color_weight_threshold) live.push_back(i);
  if (live.empty()) {
    out.color = integrate(t, out.weights, t.constant({n, 3}, std::vector<double>(n * 3, 0.0)));
    return out;
  }
  std::vector<double> sub(live.size() * 3);
  for (std::size_t j = 0; j < live.size(); ++j)
    for (int a = 0; a < 3; ++a) sub[j * 3 + a] = (*pts)[live[j] * 3 + a];
  const field::PointBatch sub_pts = field::make_batch(std::move(sub));
  const ad::Var rgb = dec.decode_app(t, sub_pts, field.query_app(t, sub_pts));
  out.color = integrate(t, out.weights, ad::ops::scatter_add_rows(t, rgb, std::move(live), n));
  return out;
}

RenderedView render_view(const SceneModel& model, const CameraIntrinsics& k, const Pose& pose, const RenderSpec& spec,
                         bool with_color, std::size_t chunk) {
  RenderedView view{Image(k.width, k.height, 3), Image(k.width, k.height, 1), Image(k.width, k.height, 1),
                    Image(k.width, k.height, 1)};
  std::vector<Pixel> all;
  all.reserve(static_cast<std::size_t>(k.width) * k.height);
  for (int v = 0; v < k.height; ++v)
    for (int u = 0; u < k.width; ++u) all.push_back({static_cast<double>(u), static_cast<double>(v)});
  std::mt19937_64 rng(0);
  for (std::size_t begin = 0; begin < all.size(); begin += chunk) {
    const std::size_t end = std::min(all.size(), begin + chunk);
    const std::span<const Pixel> px(all.data() + begin, end - begin);
    const Rays rays = generate_rays(k, pose, px);
    const RaySampleBatch batch = sample_rays(rays, model.field().bounds(), spec, rng, false);
    ad::Tape tape(const_cast<ad::ParamStore&>(model.store()));
    const RenderOutput r = render_batch(tape, model, batch, spec, with_color);
    auto d = tape.value(r.depth);
    auto a = tape.value(r.opacity);
    for (std::size_t i = 0; i < px.size(); ++i) {
      const int u = static_cast<int>(px[i].u), v = static_cast<int>(px[i].v);
      view.depth.at(u, v) = d[i];
      view.opacity.at(u, v) = a[i];
      const Vec3 dir_cam = k.backproject(px[i].u, px[i].v);
      view.zdepth.at(u, v) = d[i] / dir_cam.norm();
      if (with_color) {
        auto c = tape.value(r.color);
        for (int ch = 0; ch < 3; ++ch) view.color.at(u, v, ch) = c[i * 3 + ch];
      }
    }
  }
  return view;
}

PixelRender render_depth(const SceneModel& model, const CameraIntrinsics& k, const Pose& pose,
                         std::span<const Pixel> pixels, const RenderSpec& spec, std::size_t chunk) {
  PixelRender out;
  out.depth.reserve(pixels.size());
  out.opacity.reserve(pixels.size());
  std::mt19937_64 rng(0);
  for (std::size_t begin = 0; begin < pixels.size(); begin += chunk) {
    const std::size_t end = std::min(pixels.size(), begin + chunk);
    const Rays rays = generate_rays(k, pose, pixels.subspan(begin, end - begin));
    const RaySampleBatch batch = sample_rays(rays, model.field().bounds(), spec, rng, false);
    ad::Tape tape(const_cast<ad::ParamStore&>(model.store()));
    const RenderOutput r = render_batch(tape, model, batch, spec, false);
    auto d = tape.value(r.depth);
    auto a = tape.value(r.opacity);
    out.depth.insert(out.depth.end(), d.begin(), d.end());
    out.opacity.insert(out.opacity.end(), a.begin(), a.end());
  }
  return out;
}

}  // namespace facmap::render

#include "facmap/field.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "facmap/parallel.hpp"

namespace facmap::field {

SceneBounds::SceneBounds(const Vec3& min_corner, const Vec3& max_corner) : min_(min_corner), max_(max_corner) {
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(min_[a]) || !std::isfinite(max_[a]) || !(max_[a] > min_[a])) {
      std::ostringstream os;
      os << "degenerate scene bounds: min (" << min_.transpose() << ") max (" << max_.transpose() << ")";
      throw ConfigError(os.str());
    }
  }
}

bool SceneBounds::contains(const Vec3& p) const {
  return (p.array() >= min_.array()).all() && (p.array() <= max_.array()).all();
}

Vec3 SceneBounds::normalize(const Vec3& p) const {
  return (2.0 * (p - min_).array() / extent().array() - 1.0).matrix();
}

Vec3 SceneBounds::denormalize(const Vec3& q) const {
  return (min_.array() + (q.array() + 1.0) * 0.5 * extent().array()).matrix();
}

std::size_t GridSpec::feature_dim() const {
  std::size_t d = 0;
  for (const auto& l : levels) d += l.channels;
  return d;
}

GridSpec default_geometry_spec() {
  GridSpec s;
  const double coarse = 0.64, fine = 0.02;
  const int count = 6;
  for (int i = 0; i < count; ++i)
    s.levels.push_back({coarse + (fine - coarse) * static_cast<double>(i) / (count - 1), 2});
  return s;
}

GridSpec default_appearance_spec() {
  GridSpec s;
  s.levels = {{0.24, 32}, {0.02, 32}};
  return s;
}

Resolution cells_for(const SceneBounds& bounds, double cell_size) {
  if (!(cell_size > 0.0) || !std::isfinite(cell_size))
    throw ConfigError("grid cell size must be positive, got " + std::to_string(cell_size));
  const Vec3 e = bounds.extent();
  auto count = [&](double extent) {
    // Tolerate round-off so an extent that is an exact multiple of the cell
    // does not gain a spurious extra cell.
    return static_cast<std::size_t>(std::ceil(extent / cell_size - 1e-9));
  };
  return {std::max<std::size_t>(1, count(e.x())), std::max<std::size_t>(1, count(e.y())),
          std::max<std::size_t>(1, count(e.z()))};
}

Resolution vertices_for(const SceneBounds& bounds, double cell_size) {
  const Resolution c = cells_for(bounds, cell_size);
  return {c.nx + 1, c.ny + 1, c.nz + 1};
}

PointBatch make_batch(std::vector<double> normalized_xyz) {
  if (normalized_xyz.size() % 3 != 0) throw ShapeError("point batch size must be a multiple of 3");
  return std::make_shared<const std::vector<double>>(std::move(normalized_xyz));
}

namespace {

struct Lerp {
  std::size_t i0;
  double t;  // weight of vertex i0 + 1
};

// Normalized coordinate to a clamped interpolation cell on an axis with n vertices.
inline Lerp axis_lerp(double p_norm, double extent, double cell, std::size_t n) {
  const double max_g = static_cast<double>(n - 1);
  double g = (p_norm + 1.0) * 0.5 * extent / cell;
  g = std::clamp(g, 0.0, max_g);
  std::size_t i0 = static_cast<std::size_t>(g);
  if (i0 >= n - 1) i0 = n - 2;
  return {i0, g - static_cast<double>(i0)};
}

std::vector<double> uniform_init(std::size_t n, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

void require_vertices(const Resolution& r, const std::string& prefix) {
  if (r.nx < 2 || r.ny < 2 || r.nz < 2) throw ConfigError(prefix + ": fewer than 2 vertices on an axis");
}

// Gradient buffers for a backward pass: accumulate straight into the store
// with one worker, or into private copies merged in worker order otherwise.
class GradSink {
 public:
  GradSink(ad::Tape& tape, const std::vector<ad::Var>& vars, std::size_t workers) : workers_(workers) {
    for (ad::Var v : vars) targets_.push_back(tape.grad_mut(v));
    if (workers_ > 1) {
      priv_.resize(workers_);
      for (auto& w : priv_)
        for (auto t : targets_) w.emplace_back(t.size(), 0.0);
    }
  }
  double* buffer(std::size_t worker, std::size_t k) {
    return workers_ > 1 ? priv_[worker][k].data() : targets_[k].data();
  }
  void merge() {
    if (workers_ <= 1) return;
    for (std::size_t w = 0; w < workers_; ++w)
      for (std::size_t k = 0; k < targets_.size(); ++k)
        for (std::size_t i = 0; i < targets_[k].size(); ++i) targets_[k][i] += priv_[w][k][i];
  }

 private:
  std::size_t workers_;
  std::vector<std::span<double>> targets_;
  std::vector<std::vector<std::vector<double>>> priv_;
};

}  // namespace

// ---------------------------------------------------------------------------
// FactorizedLevel

FactorizedLevel::FactorizedLevel(ad::ParamStore& store, const std::string& prefix, const std::string& group,
                                 const SceneBounds& bounds, LevelSpec spec, double init_scale, std::mt19937_64& rng)
    : extent_(bounds.extent()), cell_size_(spec.cell_size), channels_(spec.channels) {
  if (channels_ == 0) throw ConfigError(prefix + ": zero channels");
  res_ = vertices_for(bounds, cell_size_);
  require_vertices(res_, prefix);
  const std::size_t c = channels_;
  vx_ = store.add(prefix + ".vx", group, {res_.nx, c}, uniform_init(res_.nx * c, init_scale, rng));
  vy_ = store.add(prefix + ".vy", group, {res_.ny, c}, uniform_init(res_.ny * c, init_scale, rng));
  vz_ = store.add(prefix + ".vz", group, {res_.nz, c}, uniform_init(res_.nz * c, init_scale, rng));
  myz_ = store.add(prefix + ".myz", group, {res_.ny * res_.nz, c}, uniform_init(res_.ny * res_.nz * c, init_scale, rng));
  mxz_ = store.add(prefix + ".mxz", group, {res_.nx * res_.nz, c}, uniform_init(res_.nx * res_.nz * c, init_scale, rng));
  mxy_ = store.add(prefix + ".mxy", group, {res_.nx * res_.ny, c}, uniform_init(res_.nx * res_.ny * c, init_scale, rng));
}

std::size_t FactorizedLevel::parameter_count() const {
  return channels_ * (res_.nx + res_.ny + res_.nz) +
         channels_ * (res_.ny * res_.nz + res_.nx * res_.nz + res_.nx * res_.ny);
}

namespace {

struct FactorCell {
  Lerp x, y, z;
};

struct FactorGeometry {
  Vec3 extent;
  double cell;
  Resolution res;
  std::size_t c;

  FactorCell locate(const double* p) const {
    return {axis_lerp(p[0], extent.x(), cell, res.nx), axis_lerp(p[1], extent.y(), cell, res.ny),
            axis_lerp(p[2], extent.z(), cell, res.nz)};
  }
};

struct FactorViews {
  const double* vx;
  const double* vy;
  const double* vz;
  const double* myz;
  const double* mxz;
  const double* mxy;
};

inline void factor_eval(const FactorGeometry& g, const FactorViews& f, const FactorCell& q, double* out) {
  const std::size_t C = g.c;
  const auto [x0, tx] = q.x;
  const auto [y0, ty] = q.y;
  const auto [z0, tz] = q.z;
  const Resolution& r = g.res;
  const double* vx0 = f.vx + x0 * C;
  const double* vy0 = f.vy + y0 * C;
  const double* vz0 = f.vz + z0 * C;
  const double* yz00 = f.myz + (y0 * r.nz + z0) * C;
  const double* yz10 = yz00 + r.nz * C;
  const double* xz00 = f.mxz + (x0 * r.nz + z0) * C;
  const double* xz10 = xz00 + r.nz * C;
  const double* xy00 = f.mxy + (x0 * r.ny + y0) * C;
  const double* xy10 = xy00 + r.ny * C;
  const double wy0z0 = (1 - ty) * (1 - tz), wy0z1 = (1 - ty) * tz, wy1z0 = ty * (1 - tz), wy1z1 = ty * tz;
  const double wx0z0 = (1 - tx) * (1 - tz), wx0z1 = (1 - tx) * tz, wx1z0 = tx * (1 - tz), wx1z1 = tx * tz;
  const double wx0y0 = (1 - tx) * (1 - ty), wx0y1 = (1 - tx) * ty, wx1y0 = tx * (1 - ty), wx1y1 = tx * ty;
  for (std::size_t c = 0; c < C; ++c) {
    const double lx = (1 - tx) * vx0[c] + tx * vx0[C + c];
    const double ly = (1 - ty) * vy0[c] + ty * vy0[C + c];
    const double lz = (1 - tz) * vz0[c] + tz * vz0[C + c];
    const double pyz = wy0z0 * yz00[c] + wy0z1 * yz00[C + c] + wy1z0 * yz10[c] + wy1z1 * yz10[C + c];
    const double pxz = wx0z0 * xz00[c] + wx0z1 * xz00[C + c] + wx1z0 * xz10[c] + wx1z1 * xz10[C + c];
    const double pxy = wx0y0 * xy00[c] + wx0y1 * xy00[C + c] + wx1y0 * xy10[c] + wx1y1 * xy10[C + c];
    out[c] = lx * pyz + ly * pxz + lz * pxy;
  }
}

struct FactorGrads {
  double* vx;
  double* vy;
  double* vz;
  double* myz;
  double* mxz;
  double* mxy;
};

inline void factor_backward(const FactorGeometry& g, const FactorViews& f, const FactorCell& q, const double* go,
                            const FactorGrads& d) {
  const std::size_t C = g.c;
  const auto [x0, tx] = q.x;
  const auto [y0, ty] = q.y;
  const auto [z0, tz] = q.z;
  const Resolution& r = g.res;
  const std::size_t ix = x0 * C, iy = y0 * C, iz = z0 * C;
  const std::size_t iyz = (y0 * r.nz + z0) * C, iyz1 = iyz + r.nz * C;
  const std::size_t ixz = (x0 * r.nz + z0) * C, ixz1 = ixz + r.nz * C;
  const std::size_t ixy = (x0 * r.ny + y0) * C, ixy1 = ixy + r.ny * C;
  const double wy0z0 = (1 - ty) * (1 - tz), wy0z1 = (1 - ty) * tz, wy1z0 = ty * (1 - tz), wy1z1 = ty * tz;
  const double wx0z0 = (1 - tx) * (1 - tz), wx0z1 = (1 - tx) * tz, wx1z0 = tx * (1 - tz), wx1z1 = tx * tz;
  const double wx0y0 = (1 - tx) * (1 - ty), wx0y1 = (1 - tx) * ty, wx1y0 = tx * (1 - ty), wx1y1 = tx * ty;
  for (std::size_t c = 0; c < C; ++c) {
    const double gc = go[c];
    if (gc == 0.0) continue;
    const double lx = (1 - tx) * f.vx[ix + c] + tx * f.vx[ix + C + c];
    const double ly = (1 - ty) * f.vy[iy + c] + ty * f.vy[iy + C + c];
    const double lz = (1 - tz) * f.vz[iz + c] + tz * f.vz[iz + C + c];
    const double pyz = wy0z0 * f.myz[iyz + c] + wy0z1 * f.myz[iyz + C + c] + wy1z0 * f.myz[iyz1 + c] +
                       wy1z1 * f.myz[iyz1 + C + c];
    const double pxz = wx0z0 * f.mxz[ixz + c] + wx0z1 * f.mxz[ixz + C + c] + wx1z0 * f.mxz[ixz1 + c] +
                       wx1z1 * f.mxz[ixz1 + C + c];
    const double pxy = wx0y0 * f.mxy[ixy + c] + wx0y1 * f.mxy[ixy + C + c] + wx1y0 * f.mxy[ixy1 + c] +
                       wx1y1 * f.mxy[ixy1 + C + c];
    const double gl_x = gc * pyz, gl_y = gc * pxz, gl_z = gc * pxy;
    d.vx[ix + c] += (1 - tx) * gl_x;
    d.vx[ix + C + c] += tx * gl_x;
    d.vy[iy + c] += (1 - ty) * gl_y;
    d.vy[iy + C + c] += ty * gl_y;
    d.vz[iz + c] += (1 - tz) * gl_z;
    d.vz[iz + C + c] += tz * gl_z;
    const double gp_yz = gc * lx, gp_xz = gc * ly, gp_xy = gc * lz;
    d.myz[iyz + c] += wy0z0 * gp_yz;
    d.myz[iyz + C + c] += wy0z1 * gp_yz;
    d.myz[iyz1 + c] += wy1z0 * gp_yz;
    d.myz[iyz1 + C + c] += wy1z1 * gp_yz;
    d.mxz[ixz + c] += wx0z0 * gp_xz;
    d.mxz[ixz + C + c] += wx0z1 * gp_xz;
    d.mxz[ixz1 + c] += wx1z0 * gp_xz;
    d.mxz[ixz1 + C + c] += wx1z1 * gp_xz;
    d.mxy[ixy + c] += wx0y0 * gp_xy;
    d.mxy[ixy + C + c] += wx0y1 * gp_xy;
    d.mxy[ixy1 + c] += wx1y0 * gp_xy;
    d.mxy[ixy1 + C + c] += wx1y1 * gp_xy;
  }
}

FactorViews views_of(const ad::Tape& t, const std::vector<ad::Var>& v) {
  return {t.value(v[0]).data(), t.value(v[1]).data(), t.value(v[2]).data(),
          t.value(v[3]).data(), t.value(v[4]).data(), t.value(v[5]).data()};
}

}  // namespace

ad::Var FactorizedLevel::query(ad::Tape& tape, const PointBatch& points) const {
  const std::size_t n = points->size() / 3;
  std::vector<ad::Var> vars;
  for (ad::ParamId id : params()) vars.push_back(tape.param(id));
  const FactorGeometry geom{extent_, cell_size_, res_, channels_};
  const FactorViews f = views_of(tape, vars);
  std::vector<double> out(n * channels_);
  parallel_for(n, [&](std::size_t b, std::size_t e, std::size_t) {
    for (std::size_t i = b; i < e; ++i) factor_eval(geom, f, geom.locate(points->data() + 3 * i), &out[i * geom.c]);
  });
  return tape.record("factorized_query", {n, channels_}, std::move(out), vars,
                     [vars, points, geom](ad::Tape& t, ad::Var self) {
                       const std::size_t n = points->size() / 3;
                       auto g = t.grad(self);
                       const FactorViews f = views_of(t, vars);
                       const std::size_t workers = worker_count(n);
                       GradSink sink(t, vars, workers);
                       parallel_for(n, [&](std::size_t b, std::size_t e, std::size_t w) {
                         const FactorGrads d{sink.buffer(w, 0), sink.buffer(w, 1), sink.buffer(w, 2),
                                             sink.buffer(w, 3), sink.buffer(w, 4), sink.buffer(w, 5)};
                         for (std::size_t i = b; i < e; ++i)
                           factor_backward(geom, f, geom.locate(points->data() + 3 * i), &g[i * geom.c], d);
                       });
                       sink.merge();
                     });
}

void FactorizedLevel::evaluate(const ad::ParamStore& store, const Vec3& p_norm, std::span<double> out) const {
  if (out.size() != channels_) throw ShapeError("FactorizedLevel::evaluate: output size mismatch");
  const FactorGeometry geom{extent_, cell_size_, res_, channels_};
  const FactorViews f{store.value(vx_).data(),  store.value(vy_).data(),  store.value(vz_).data(),
                      store.value(myz_).data(), store.value(mxz_).data(), store.value(mxy_).data()};
  const double p[3] = {p_norm.x(), p_norm.y(), p_norm.z()};
  factor_eval(geom, f, geom.locate(p), out.data());
}

// ---------------------------------------------------------------------------
// DenseLevel

DenseLevel::DenseLevel(ad::ParamStore& store, const std::string& prefix, const std::string& group,
                       const SceneBounds& bounds, LevelSpec spec, double init_scale, std::mt19937_64& rng,
                       std::size_t max_bytes)
    : extent_(bounds.extent()), cell_size_(spec.cell_size), channels_(spec.channels) {
  if (channels_ == 0) throw ConfigError(prefix + ": zero channels");
  res_ = vertices_for(bounds, cell_size_);
  require_vertices(res_, prefix);
  const double bytes = 8.0 * static_cast<double>(res_.nx) * static_cast<double>(res_.ny) *
                       static_cast<double>(res_.nz) * static_cast<double>(channels_);
  if (bytes > static_cast<double>(max_bytes)) {
    std::ostringstream os;
    os << prefix << ": dense grid " << res_.nx << "x" << res_.ny << "x" << res_.nz << "x" << channels_ << " needs "
       << bytes / (1024.0 * 1024.0) << " MiB, above the cap of " << static_cast<double>(max_bytes) / (1024.0 * 1024.0)
       << " MiB";
    throw ConfigError(os.str());
  }
  const std::size_t n = res_.nx * res_.ny * res_.nz;
  grid_ = store.add(prefix + ".grid", group, {n, channels_}, uniform_init(n * channels_, init_scale, rng));
}

namespace {

struct DenseGeometry {
  Vec3 extent;
  double cell;
  Resolution res;
  std::size_t c;

  FactorCell locate(const double* p) const {
    return {axis_lerp(p[0], extent.x(), cell, res.nx), axis_lerp(p[1], extent.y(), cell, res.ny),
            axis_lerp(p[2], extent.z(), cell, res.nz)};
  }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return ((i * res.ny + j) * res.nz + k) * c; }
};

template <class Fn>
inline void for_corners(const DenseGeometry& g, const FactorCell& q, Fn&& fn) {
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const double w = (dx ? q.x.t : 1 - q.x.t) * (dy ? q.y.t : 1 - q.y.t) * (dz ? q.z.t : 1 - q.z.t);
        fn(g.index(q.x.i0 + dx, q.y.i0 + dy, q.z.i0 + dz), w);
      }
}

}  // namespace

ad::Var DenseLevel::query(ad::Tape& tape, const PointBatch& points) const {
  const std::size_t n = points->size() / 3;
  ad::Var grid = tape.param(grid_);
  const DenseGeometry geom{extent_, cell_size_, res_, channels_};
  const double* gv = tape.value(grid).data();
  std::vector<double> out(n * channels_, 0.0);
  parallel_for(n, [&](std::size_t b, std::size_t e, std::size_t) {
    for (std::size_t i = b; i < e; ++i) {
      double* o = &out[i * geom.c];
      for_corners(geom, geom.locate(points->data() + 3 * i), [&](std::size_t base, double w) {
        for (std::size_t c = 0; c < geom.c; ++c) o[c] += w * gv[base + c];
      });
    }
  });
  return tape.record("dense_query", {n, channels_}, std::move(out), {grid},
                     [grid, points, geom](ad::Tape& t, ad::Var self) {
                       const std::size_t n = points->size() / 3;
                       auto g = t.grad(self);
                       const std::size_t workers = worker_count(n);
                       GradSink sink(t, {grid}, workers);
                       parallel_for(n, [&](std::size_t b, std::size_t e, std::size_t w) {
                         double* d = sink.buffer(w, 0);
                         for (std::size_t i = b; i < e; ++i) {
                           const double* gi = &g[i * geom.c];
                           for_corners(geom, geom.locate(points->data() + 3 * i), [&](std::size_t base, double wt) {
                             for (std::size_t c = 0; c < geom.c; ++c) d[base + c] += wt * gi[c];
                           });
                         }
                       });
                       sink.merge();
                     });
}

void DenseLevel::evaluate(const ad::ParamStore& store, const Vec3& p_norm, std::span<double> out) const {
  if (out.size() != channels_) throw ShapeError("DenseLevel::evaluate: output size mismatch");
  const DenseGeometry geom{extent_, cell_size_, res_, channels_};
  const double p[3] = {p_norm.x(), p_norm.y(), p_norm.z()};
  const double* gv = store.value(grid_).data();
  std::fill(out.begin(), out.end(), 0.0);
  for_corners(geom, geom.locate(p), [&](std::size_t base, double w) {
    for (std::size_t c = 0; c < geom.c; ++c) out[c] += w * gv[base + c];
  });
}

double dense_cell_for_budget(const SceneBounds& bounds, std::size_t channels, std::size_t budget, double finest) {
  auto count = [&](double cell) {
    const Resolution r = vertices_for(bounds, cell);
    return r.nx * r.ny * r.nz * channels;
  };
  if (count(finest) <= budget) return finest;
  // Parameter count is non-increasing in cell size; bisect for the finest cell within budget.
  double lo = finest, hi = finest;
  while (count(hi) > budget) hi *= 2.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (count(mid) > budget)
      lo = mid;
    else
      hi = mid;
  }
  return hi;
}

GridSpec matched_dense_spec(const SceneBounds& bounds, const GridSpec& factorized) {
  GridSpec out;
  out.kind = GridKind::dense;
  for (const auto& l : factorized.levels) {
    const Resolution r = vertices_for(bounds, l.cell_size);
    const std::size_t budget = l.channels * (r.nx + r.ny + r.nz + r.ny * r.nz + r.nx * r.nz + r.nx * r.ny);
    out.levels.push_back({dense_cell_for_budget(bounds, l.channels, budget, l.cell_size), l.channels});
  }
  return out;
}

// ---------------------------------------------------------------------------
// FeatureField

namespace {

std::vector<std::unique_ptr<GridLevel>> build_levels(ad::ParamStore& store, const std::string& name,
                                                     const std::string& group, const SceneBounds& bounds,
                                                     const GridSpec& spec, double init_scale, std::size_t max_bytes,
                                                     std::mt19937_64& rng) {
  if (spec.levels.empty()) throw ConfigError(name + ": at least one level required");
  std::vector<std::unique_ptr<GridLevel>> out;
  for (std::size_t i = 0; i < spec.levels.size(); ++i) {
    const std::string prefix = name + ".level" + std::to_string(i);
    if (spec.kind == GridKind::factorized)
      out.push_back(std::make_unique<FactorizedLevel>(store, prefix, group, bounds, spec.levels[i], init_scale, rng));
    else
      out.push_back(
          std::make_unique<DenseLevel>(store, prefix, group, bounds, spec.levels[i], init_scale, rng, max_bytes));
  }
  return out;
}

}  // namespace

FeatureField::FeatureField(ad::ParamStore& store, const SceneBounds& bounds, const FieldSpec& spec,
                           std::mt19937_64& rng)
    : bounds_(bounds), spec_(spec) {
  if (!(spec.init_scale >= 0.0)) throw ConfigError("field init_scale must be >= 0");
  geo_ = build_levels(store, "geo", "grid_geo", bounds, spec.geo, spec.init_scale, spec.max_dense_bytes, rng);
  app_ = build_levels(store, "app", "grid_app", bounds, spec.app, spec.init_scale, spec.max_dense_bytes, rng);
}

std::size_t FeatureField::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : geo_) n += l->parameter_count();
  for (const auto& l : app_) n += l->parameter_count();
  return n;
}

PointBatch FeatureField::normalize(std::span<const double> world_xyz) const {
  if (world_xyz.size() % 3 != 0) throw ShapeError("normalize: positions must be n x 3");
  std::vector<double> out(world_xyz.size());
  const Vec3 mn = bounds_.min_corner();
  const Vec3 ext = bounds_.extent();
  for (std::size_t i = 0; i < world_xyz.size(); i += 3)
    for (int a = 0; a < 3; ++a) out[i + a] = 2.0 * (world_xyz[i + a] - mn[a]) / ext[a] - 1.0;
  return make_batch(std::move(out));
}

ad::Var FeatureField::concat(ad::Tape& tape, const std::vector<std::unique_ptr<GridLevel>>& levels,
                             const PointBatch& points) {
  std::vector<ad::Var> parts;
  for (const auto& l : levels) parts.push_back(l->query(tape, points));
  if (parts.size() == 1) return parts[0];
  return ad::ops::concat_cols(tape, parts);
}

ad::Var FeatureField::query_geo(ad::Tape& tape, const PointBatch& points) const { return concat(tape, geo_, points); }

ad::Var FeatureField::query_app(ad::Tape& tape, const PointBatch& points) const { return concat(tape, app_, points); }

void FeatureField::evaluate_geo(const ad::ParamStore& store, const Vec3& p_world, std::span<double> out) const {
  if (out.size() != geo_dim()) throw ShapeError("evaluate_geo: output size mismatch");
  const Vec3 q = bounds_.normalize(p_world);
  std::size_t off = 0;
  for (const auto& l : geo_) {
    l->evaluate(store, q, out.subspan(off, l->channels()));
    off += l->channels();
  }
}

void FeatureField::evaluate_app(const ad::ParamStore& store, const Vec3& p_world, std::span<double> out) const {
  if (out.size() != app_dim()) throw ShapeError("evaluate_app: output size mismatch");
  const Vec3 q = bounds_.normalize(p_world);
  std::size_t off = 0;
  for (const auto& l : app_) {
    l->evaluate(store, q, out.subspan(off, l->channels()));
    off += l->channels();
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'F', 'C', 'M', 'A', 'P', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  explicit Writer(const std::filesystem::path& p) : os_(p, std::ios::binary), path_(p) {
    if (!os_) throw DataError("cannot open checkpoint for writing: " + p.string());
  }
  void bytes(const void* d, std::size_t n) { os_.write(static_cast<const char*>(d), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void finish() {
    os_.flush();
    if (!os_) throw DataError("failed writing checkpoint: " + path_.string());
  }

 private:
  std::ofstream os_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& p) : is_(p, std::ios::binary), path_(p) {
    if (!is_) throw DataError("cannot open checkpoint: " + p.string());
  }
  void bytes(void* d, std::size_t n) {
    is_.read(static_cast<char*>(d), static_cast<std::streamsize>(n));
    if (!is_) throw DataError("truncated checkpoint: " + path_.string());
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 28)) throw DataError("corrupt string length in checkpoint: " + path_.string());
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream is_;
  std::filesystem::path path_;
};

void write_grid_spec(Writer& w, const GridSpec& s) {
  w.u32(s.kind == GridKind::factorized ? 0u : 1u);
  w.u32(static_cast<std::uint32_t>(s.levels.size()));
  for (const auto& l : s.levels) {
    w.f64(l.cell_size);
    w.u32(static_cast<std::uint32_t>(l.channels));
  }
}

GridSpec read_grid_spec(Reader& r) {
  GridSpec s;
  const std::uint32_t kind = r.u32();
  if (kind > 1) throw DataError("checkpoint: unknown grid kind " + std::to_string(kind));
  s.kind = kind == 0 ? GridKind::factorized : GridKind::dense;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    LevelSpec l;
    l.cell_size = r.f64();
    l.channels = r.u32();
    s.levels.push_back(l);
  }
  return s;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const SceneBounds& bounds, const FieldSpec& spec,
                      const std::string& metadata, const ad::ParamStore& store) {
  Writer w(path);
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);
  for (int a = 0; a < 3; ++a) w.f64(bounds.min_corner()[a]);
  for (int a = 0; a < 3; ++a) w.f64(bounds.max_corner()[a]);
  write_grid_spec(w, spec.geo);
  write_grid_spec(w, spec.app);
  w.f64(spec.init_scale);
  w.str(metadata);
  w.u32(static_cast<std::uint32_t>(store.buffer_count()));
  for (std::uint32_t i = 0; i < store.buffer_count(); ++i) {
    const ad::ParamId id{i};
    w.str(store.name(id));
    w.str(store.group(id));
    w.u64(store.shape(id).rows);
    w.u64(store.shape(id).cols);
    auto v = store.value(id);
    w.bytes(v.data(), v.size() * sizeof(double));
  }
  w.finish();
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError("not a checkpoint file: " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  Vec3 mn, mx;
  for (int a = 0; a < 3; ++a) mn[a] = r.f64();
  for (int a = 0; a < 3; ++a) mx[a] = r.f64();
  Checkpoint ck;
  ck.bounds = SceneBounds(mn, mx);
  ck.spec.geo = read_grid_spec(r);
  ck.spec.app = read_grid_spec(r);
  ck.spec.init_scale = r.f64();
  ck.metadata = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Buffer b;
    b.name = r.str();
    b.group = r.str();
    b.shape.rows = r.u64();
    b.shape.cols = r.u64();
    if (b.shape.size() > (std::size_t{1} << 32)) throw DataError("corrupt buffer shape in checkpoint: " + b.name);
    b.values.resize(b.shape.size());
    r.bytes(b.values.data(), b.values.size() * sizeof(double));
    ck.buffers.push_back(std::move(b));
  }
  return ck;
}

void restore_params(const Checkpoint& ckpt, ad::ParamStore& store) {
  if (ckpt.buffers.size() != store.buffer_count())
    throw DataError("checkpoint holds " + std::to_string(ckpt.buffers.size()) + " buffers, model expects " +
                    std::to_string(store.buffer_count()));
  for (const auto& b : ckpt.buffers) {
    auto id = store.find(b.name);
    if (!id) throw DataError("checkpoint buffer '" + b.name + "' has no counterpart in the model");
    if (store.shape(*id) != b.shape)
      throw DataError("checkpoint buffer '" + b.name + "' shape " + ad::to_string(b.shape) + " vs model " +
                      ad::to_string(store.shape(*id)));
    std::copy(b.values.begin(), b.values.end(), store.value(*id).begin());
  }
}

}  // namespace facmap::field

#pragma once

// Independent oracles and finite-difference helpers shared by the unit tests
// and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "facmap/autodiff.hpp"
#include "facmap/field.hpp"
#include "facmap/model.hpp"

namespace facmap::testing {

// Tent function of the vertex at integer position i evaluated at g.
inline double hat(double g, double i) { return std::max(0.0, 1.0 - std::abs(g - i)); }

// Continuous vertex coordinate of a normalized point on one axis.
inline double grid_coord(double p_norm, double extent, double cell, std::size_t n) {
  return std::clamp((p_norm + 1.0) * 0.5 * extent / cell, 0.0, static_cast<double>(n - 1));
}

// Dense trilinear interpolation as a sum of tensor-product tents over every
// vertex (no cell lookup).
inline std::vector<double> brute_dense(const field::DenseLevel& level, const ad::ParamStore& store,
                                       const field::Vec3& extent, const field::Vec3& p) {
  const auto r = level.resolution();
  const std::size_t C = level.channels();
  const auto g = store.value(level.grid());
  const double gx = grid_coord(p.x(), extent.x(), level.cell_size(), r.nx);
  const double gy = grid_coord(p.y(), extent.y(), level.cell_size(), r.ny);
  const double gz = grid_coord(p.z(), extent.z(), level.cell_size(), r.nz);
  std::vector<double> out(C, 0.0);
  for (std::size_t i = 0; i < r.nx; ++i)
    for (std::size_t j = 0; j < r.ny; ++j)
      for (std::size_t k = 0; k < r.nz; ++k) {
        const double w = hat(gx, double(i)) * hat(gy, double(j)) * hat(gz, double(k));
        if (w == 0.0) continue;
        for (std::size_t c = 0; c < C; ++c) out[c] += w * g[((i * r.ny + j) * r.nz + k) * C + c];
      }
  return out;
}

// Vector-matrix factorized grid evaluated with tents over every line and
// plane vertex.
inline std::vector<double> brute_factorized(const field::FactorizedLevel& level, const ad::ParamStore& store,
                                            const field::Vec3& extent, const field::Vec3& p) {
  const auto r = level.resolution();
  const std::size_t C = level.channels();
  const double cell = level.cell_size();
  const double gx = grid_coord(p.x(), extent.x(), cell, r.nx);
  const double gy = grid_coord(p.y(), extent.y(), cell, r.ny);
  const double gz = grid_coord(p.z(), extent.z(), cell, r.nz);
  const auto vx = store.value(level.line_x()), vy = store.value(level.line_y()), vz = store.value(level.line_z());
  const auto myz = store.value(level.plane_yz()), mxz = store.value(level.plane_xz()),
             mxy = store.value(level.plane_xy());
  std::vector<double> out(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double lx = 0, ly = 0, lz = 0, pyz = 0, pxz = 0, pxy = 0;
    for (std::size_t i = 0; i < r.nx; ++i) lx += hat(gx, double(i)) * vx[i * C + c];
    for (std::size_t j = 0; j < r.ny; ++j) ly += hat(gy, double(j)) * vy[j * C + c];
    for (std::size_t k = 0; k < r.nz; ++k) lz += hat(gz, double(k)) * vz[k * C + c];
    for (std::size_t j = 0; j < r.ny; ++j)
      for (std::size_t k = 0; k < r.nz; ++k) pyz += hat(gy, double(j)) * hat(gz, double(k)) * myz[(j * r.nz + k) * C + c];
    for (std::size_t i = 0; i < r.nx; ++i)
      for (std::size_t k = 0; k < r.nz; ++k) pxz += hat(gx, double(i)) * hat(gz, double(k)) * mxz[(i * r.nz + k) * C + c];
    for (std::size_t i = 0; i < r.nx; ++i)
      for (std::size_t j = 0; j < r.ny; ++j) pxy += hat(gx, double(i)) * hat(gy, double(j)) * mxy[(i * r.ny + j) * C + c];
    out[c] = lx * pyz + ly * pxz + lz * pxy;
  }
  return out;
}

// Compositing weights by the loop definition:
// w_i = exp(-sum_{k<i} sigma_k delta_k) (1 - exp(-sigma_i delta_i)).
inline std::vector<double> loop_weights(const std::vector<double>& sigma, const std::vector<double>& delta) {
  std::vector<double> w(sigma.size());
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < i; ++k) acc += sigma[k] * delta[k];
    w[i] = std::exp(-acc) * (1.0 - std::exp(-sigma[i] * delta[i]));
  }
  return w;
}

inline double rel_error(double analytic, double numeric, double floor = 1e-7) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheckResult {
  std::size_t cases = 0;
  double max_rel = 0.0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

// Central differences of the scalar `loss` against the analytic gradient for
// `cases` random entries of the given parameter buffers.
inline GradCheckResult check_param_grads(ad::ParamStore& store, const std::vector<ad::ParamId>& params,
                                         const std::function<ad::Var(ad::Tape&)>& loss, std::size_t cases,
                                         std::mt19937_64& rng, double h = 1e-6, double floor = 1e-7) {
  store.zero_grad();
  {
    ad::Tape t(store);
    t.backward(loss(t));
  }
  std::vector<std::vector<double>> grads;
  for (ad::ParamId p : params) grads.emplace_back(store.grad(p).begin(), store.grad(p).end());
  auto eval = [&]() {
    ad::Tape t(store);
    return t.value(loss(t))[0];
  };
  GradCheckResult r;
  std::uniform_int_distribution<std::size_t> pick_param(0, params.size() - 1);
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t pi = pick_param(rng);
    auto v = store.value(params[pi]);
    std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
    const std::size_t e = pick(rng);
    const double x0 = v[e];
    v[e] = x0 + h;
    const double fp = eval();
    v[e] = x0 - h;
    const double fm = eval();
    v[e] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel = rel_error(grads[pi][e], numeric, floor);
    if (rel > r.max_rel) {
      r.max_rel = rel;
      r.worst_analytic = grads[pi][e];
      r.worst_numeric = numeric;
    }
    ++r.cases;
  }
  return r;
}

// A model small enough for exhaustive checks: bounds [-1, 1]^3 with 4^3-ish
// grids and narrow decoders.
inline ModelSpec tiny_model_spec(field::GridKind kind = field::GridKind::factorized) {
  ModelSpec m;
  m.field.geo.kind = kind;
  m.field.geo.levels = {{1.0, 2}, {0.6, 2}};
  m.field.app.kind = kind;
  m.field.app.levels = {{0.7, 3}};
  m.field.init_scale = 0.5;
  m.decoders.hidden = {8, 8};
  m.decoders.geo_output_bias = 0.1;
  return m;
}

inline field::SceneBounds unit_bounds() { return field::SceneBounds(field::Vec3::Constant(-1.0), field::Vec3::Constant(1.0)); }

}  // namespace facmap::testing

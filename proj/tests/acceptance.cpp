// Acceptance runner: one PASS/FAIL line per criterion, exit status 0 only when
// every selected criterion passes.
//
//   facmap_acceptance [--only 1,3,5] [--work DIR]

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "facmap/config.hpp"
#include "facmap/dataset.hpp"
#include "facmap/losses.hpp"
#include "facmap/mapper.hpp"
#include "facmap/parallel.hpp"
#include "facmap/pipeline.hpp"
#include "facmap/renderer.hpp"
#include "support.hpp"

#ifndef FACMAP_SOURCE_DIR
#error "FACMAP_SOURCE_DIR must point at the source tree"
#endif

namespace fs = std::filesystem;
using namespace facmap;
using facmap::testing::rel_error;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kWarpGradTol = 1e-3;
constexpr std::size_t kGradCases = 100;
constexpr double kGradSeconds = 120.0;
constexpr double kInterpTol = 1e-12;
constexpr std::size_t kInterpPoints = 1000;
constexpr double kOracleTol = 1e-9;
constexpr std::size_t kProfiles = 10000;
constexpr double kWeightSlack = 1e-9;
constexpr double kIterationRatio = 1.5;
constexpr double kOverfitPsnr = 25.0;
constexpr std::size_t kOverfitSeeds = 5;
constexpr double kDeskPsnr = 25.0;
constexpr double kDeskDepthCm = 5.0;
constexpr double kDeskCompRatio = 70.0;
constexpr double kDeskSeconds = 30.0 * 60.0;
constexpr std::size_t kAblationSeeds = 3;
constexpr std::size_t kLossTrendUpdates = 10;
constexpr std::size_t kLossTrendViolations = 2;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt_opt(const std::optional<double>& v, int precision = 4) {
  if (!v) return "absent";
  std::ostringstream os;
  os.precision(precision);
  os << *v;
  return os.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string slurp_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Shared fixtures

struct Workspace {
  fs::path root;
  std::map<std::string, data::Dataset> cache;

  // Synthetic room from the default generator, written to disk and read back
  // so runs see the same quantized images as the command-line tool.
  const data::Dataset& room(const std::string& name, bool textured_walls) {
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    data::SynthSpec s;
    s.scene.textured_walls = textured_walls;
    const fs::path dir = root / ("data_" + name);
    fs::remove_all(dir);
    data::save_dataset(data::generate_synthetic(s, 0), dir);
    return cache.emplace(name, data::load_dataset(dir)).first->second;
  }

  config::RunConfig desk_config() const {
    return config::load_file(config::RunConfig{}, fs::path(FACMAP_SOURCE_DIR) / "configs" / "desk.json");
  }
};

// Central differences on entries with a non-zero analytic gradient.
struct FdStats {
  std::size_t cases = 0;
  double max_rel = 0.0;
};

void fd_cases(ad::ParamStore& store, const std::vector<ad::ParamId>& params,
              const std::function<ad::Var(ad::Tape&)>& loss, std::size_t count, std::mt19937_64& rng, double h,
              double floor, FdStats& stats) {
  store.zero_grad();
  {
    ad::Tape t(store);
    t.backward(loss(t));
  }
  std::vector<std::pair<std::size_t, std::size_t>> live;
  std::vector<std::vector<double>> grads;
  for (std::size_t p = 0; p < params.size(); ++p) {
    grads.emplace_back(store.grad(params[p]).begin(), store.grad(params[p]).end());
    for (std::size_t e = 0; e < grads.back().size(); ++e)
      if (std::abs(grads.back()[e]) > 1e-9) live.emplace_back(p, e);
  }
  if (live.empty()) return;
  std::shuffle(live.begin(), live.end(), rng);
  auto eval = [&]() {
    ad::Tape t(store);
    return t.value(loss(t))[0];
  };
  for (std::size_t c = 0; c < std::min(count, live.size()); ++c) {
    const auto [p, e] = live[c];
    auto v = store.value(params[p]);
    const double x0 = v[e];
    v[e] = x0 + h;
    const double fp = eval();
    v[e] = x0 - h;
    const double fm = eval();
    v[e] = x0;
    stats.max_rel = std::max(stats.max_rel, rel_error(grads[p][e], (fp - fm) / (2.0 * h), floor));
    ++stats.cases;
  }
}

std::vector<ad::ParamId> params_in(const ad::ParamStore& store, std::initializer_list<const char*> groups) {
  std::vector<ad::ParamId> out;
  for (std::uint32_t i = 0; i < store.buffer_count(); ++i)
    for (const char* g : groups)
      if (store.group(ad::ParamId{i}) == g) out.push_back(ad::ParamId{i});
  return out;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  data::SynthSpec s;
  s.width = s.height = 32;
  s.trajectory.frames = 3;
  s.trajectory.arc = 0.4;
  s.build_gt_mesh = false;
  const data::Dataset d = data::generate_synthetic(s, 0);
  ModelSpec spec;
  spec.field.geo.levels = {{0.8, 2}, {0.5, 2}};
  spec.field.app.levels = {{0.5, 3}};
  spec.field.init_scale = 0.3;
  spec.decoders.hidden = {8, 8};
  spec.decoders.geo_output_bias = 0.2;
  SceneModel model(d.bounds, spec, 3);
  ad::ParamStore& store = model.store();
  render::RenderSpec rs;
  rs.samples = 12;
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> pix(0, 31);
  // Zero-initialized hidden biases put rows whose previous layer is fully
  // inactive exactly on a ReLU kink; check at a generic point instead.
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  for (const decoders::Mlp* mlp : {&model.decoders().geo(), &model.decoders().app()})
    for (std::size_t l = 0; l + 1 < mlp->layer_count(); ++l)
      for (double& b : store.value(mlp->bias(l))) b = jitter(rng);

  auto render_loss_for = [&](const render::RaySampleBatch& b, const std::vector<double>& observed) {
    return [&, b, observed](ad::Tape& t) {
      const render::RenderOutput o = render::render_batch(t, model, b, rs);
      const ad::Var lc = losses::photometric_loss(t, o.color, observed);
      return ad::ops::add(t, lc, ad::ops::scale(t, ad::ops::mean(t, ad::ops::mul(t, o.depth, o.depth)), 0.1));
    };
  };
  auto random_batch = [&](std::vector<double>& observed) {
    std::vector<render::Pixel> px(6);
    observed.clear();
    for (auto& p : px) {
      p = {double(pix(rng)), double(pix(rng))};
      for (int c = 0; c < 3; ++c) observed.push_back(d.frames[0].rgb.at(int(p.u), int(p.v), c));
    }
    return render::sample_rays(render::generate_rays(d.frames[0], px), d.bounds, rs, rng);
  };

  std::map<std::string, FdStats> paths;
  const std::vector<std::pair<std::string, std::vector<ad::ParamId>>> groups = {
      {"grid factors", params_in(store, {"grid_geo", "grid_app"})},
      {"geometry MLP", params_in(store, {"mlp_geo"})},
      {"appearance MLP", params_in(store, {"mlp_app"})}};
  for (const auto& [name, ids] : groups)
    for (int config = 0; config < 5; ++config) {
      std::vector<double> observed;
      const auto b = random_batch(observed);
      fd_cases(store, ids, render_loss_for(b, observed), 25, rng, 1e-5, 1e-6, paths[name]);
    }
  // beta has a single entry: one case per random (beta, batch) configuration.
  std::uniform_real_distribution<double> log_beta(std::log(2.0), std::log(80.0));
  const double beta0 = store.value(model.log_beta())[0];
  for (std::size_t config = 0; config < kGradCases; ++config) {
    store.value(model.log_beta())[0] = log_beta(rng);
    std::vector<double> observed;
    const auto b = random_batch(observed);
    fd_cases(store, {model.log_beta()}, render_loss_for(b, observed), 1, rng, 1e-5, 1e-6, paths["beta"]);
  }
  store.value(model.log_beta())[0] = beta0;

  // Rendered depth of source patches drives the warping loss.
  const int radius = 3;
  std::vector<losses::ViewPyramid> views;
  for (const Frame& f : d.frames) views.push_back(losses::ViewPyramid::build(f, 2));
  const std::vector<std::vector<std::size_t>> targets = {{1, 2}, {}, {}};
  losses::WarpSpec ws;
  ws.scales = 2;
  FdStats& warp = paths["warped-patch depth"];
  std::size_t triples = 0;
  for (int config = 0; config < 8 && warp.cases < 2 * kGradCases; ++config) {
    const losses::PixelSampleSet set = losses::sample_patches(1, 32, 32, 2, radius, rng);
    std::vector<render::Pixel> px;
    for (std::size_t p = 0; p < set.patches.size(); ++p)
      for (const auto& q : set.pixels(p)) px.push_back(q);
    const auto b = render::sample_rays(render::generate_rays(d.frames[0], px), d.bounds, rs, rng);
    losses::WarpStats st;
    auto loss = [&](ad::Tape& t) {
      const render::RenderOutput o = render::render_batch(t, model, b, rs, false);
      return losses::warping_loss(t, o.depth, set, views, targets, ws, &st);
    };
    {
      ad::Tape t(store);
      loss(t);
    }
    if (st.triples == 0) continue;
    triples += st.triples;
    fd_cases(store, params_in(store, {"grid_geo", "mlp_geo", "beta"}), loss, 40, rng, 1e-6, 1e-6, warp);
  }

  const double elapsed = seconds_since(t0);
  bool pass = elapsed < kGradSeconds && triples > 0;
  std::ostringstream os;
  for (const auto& [name, st] : paths) {
    const double tol = name == "warped-patch depth" ? kWarpGradTol : kGradTol;
    pass = pass && st.cases >= kGradCases && st.max_rel <= tol;
    os << name << " " << st.cases << " cases max rel " << fmt_opt(st.max_rel, 3) << " (tol " << tol << "); ";
  }
  os << "time " << fmt_opt(elapsed, 3) << " s";
  return {pass, os.str()};
}

// ---------------------------------------------------------------------------
// 2. Interpolation oracles

Outcome interpolation_oracles() {
  const field::SceneBounds b(Vec3(-1.3, 0.2, -0.4), Vec3(1.1, 1.9, 0.7));
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-1.05, 1.05);
  std::ostringstream os;
  bool pass = true;
  for (field::GridKind kind : {field::GridKind::factorized, field::GridKind::dense}) {
    ad::ParamStore store;
    store.add_group("grid_geo", 0.01);
    store.add_group("grid_app", 0.01);
    field::FieldSpec fs;
    fs.geo = {kind, {{0.45, 3}, {0.17, 2}}};
    fs.app = {kind, {{0.3, 2}}};
    fs.init_scale = 1.0;
    const field::FeatureField f(store, b, fs, rng);
    std::vector<double> xyz;
    std::vector<Vec3> pts;
    for (std::size_t i = 0; i < kInterpPoints; ++i) {
      pts.emplace_back(b.denormalize(Vec3(u(rng), u(rng), u(rng))));
      xyz.insert(xyz.end(), {pts.back().x(), pts.back().y(), pts.back().z()});
    }
    ad::Tape t(store);
    const auto got = t.value(f.query_geo(t, f.normalize(xyz)));
    double worst = 0.0;
    for (std::size_t i = 0; i < kInterpPoints; ++i) {
      const Vec3 pn = b.normalize(pts[i]);
      std::vector<double> ref;
      for (const auto& level : f.geo_levels()) {
        std::vector<double> r;
        if (kind == field::GridKind::factorized)
          r = facmap::testing::brute_factorized(dynamic_cast<const field::FactorizedLevel&>(*level), store,
                                                b.extent(), pn);
        else
          r = facmap::testing::brute_dense(dynamic_cast<const field::DenseLevel&>(*level), store, b.extent(), pn);
        ref.insert(ref.end(), r.begin(), r.end());
      }
      for (std::size_t c = 0; c < ref.size(); ++c)
        worst = std::max(worst, std::abs(got[i * ref.size() + c] - ref[c]));
    }
    pass = pass && worst <= kInterpTol;
    os << (kind == field::GridKind::factorized ? "factorized" : "dense") << " max err " << fmt_opt(worst, 3)
       << " over " << kInterpPoints << " points; ";
  }
  os << "tol " << kInterpTol;
  return {pass, os.str()};
}

// ---------------------------------------------------------------------------
// 3. Rendering oracle

Outcome rendering_oracle() {
  ad::ParamStore store;
  ad::Tape t(store);
  const auto w = t.value(render::densities_to_weights(t, t.constant({1, 3}, {1, 1, 1}), {1, 1, 1}));
  const double e = std::exp(-1.0);
  const double closed[3] = {1 - e, e * (1 - e), e * e * (1 - e)};
  const double rounded[3] = {0.63212, 0.23254, 0.08555};
  double err = 0.0, sum = 0.0;
  bool rounded_ok = true;
  for (int i = 0; i < 3; ++i) {
    err = std::max(err, std::abs(w[i] - closed[i]));
    rounded_ok = rounded_ok && std::abs(w[i] - rounded[i]) <= 5e-6;
    sum += w[i];
  }
  err = std::max(err, std::abs(sum - (1.0 - std::exp(-3.0))));
  rounded_ok = rounded_ok && std::abs(sum - 0.95021) <= 5e-6;

  // Random profiles through both density entry points.
  std::mt19937_64 rng(29);
  std::uniform_int_distribution<std::size_t> len(1, 128);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_sum = 0.0, worst_neg = 0.0;
  for (std::size_t n = 0; n < kProfiles; ++n) {
    const std::size_t S = len(rng);
    std::vector<double> delta(S), values(S);
    for (std::size_t i = 0; i < S; ++i) {
      delta[i] = std::pow(10.0, -4.0 + 4.0 * u(rng));
      values[i] = n % 2 == 0 ? (u(rng) < 0.2 ? 0.0 : std::pow(10.0, -3.0 + 7.0 * u(rng))) : 4.0 * (u(rng) - 0.5);
    }
    ad::Tape tp(store);
    ad::Var sigma = tp.constant({1, S}, values);
    if (n % 2 == 1) sigma = render::sdf_to_density(tp, sigma, tp.scalar(std::log(1.0 + 200.0 * u(rng))));
    const auto wp = tp.value(render::densities_to_weights(tp, sigma, delta));
    double s = 0.0;
    for (double x : wp) {
      s += x;
      worst_neg = std::min(worst_neg, x);
    }
    worst_sum = std::max(worst_sum, s);
  }
  const bool pass = err <= kOracleTol && rounded_ok && worst_sum <= 1.0 + kWeightSlack && worst_neg >= 0.0;
  std::ostringstream os;
  os.precision(6);
  os << "w = " << w[0] << "/" << w[1] << "/" << w[2] << " sum " << sum << ", closed-form err " << fmt_opt(err, 3)
     << " (tol " << kOracleTol << "); " << kProfiles << " profiles max sum " << std::setprecision(12) << worst_sum
     << ", min w " << worst_neg;
  return {pass, os.str()};
}

// ---------------------------------------------------------------------------
// 4. Weight smoothness and render-mode convergence

double max_second_difference(const std::vector<double>& w) {
  double m = 0.0;
  for (std::size_t i = 1; i + 1 < w.size(); ++i) m = std::max(m, std::abs(w[i + 1] - 2.0 * w[i] + w[i - 1]));
  return m;
}

Outcome render_mode_comparison(Workspace& ws) {
  const config::RunConfig cfg = ws.desk_config();
  const std::size_t S = cfg.mapper.render.samples;
  std::size_t wins = 0, trials = 0;
  double worst_ratio = 0.0;
  ad::ParamStore store;
  for (int k = 0; k < 21; ++k) {
    // Identical samples on [0.2, 3], zero crossing moved across a sample gap.
    const double start = 0.2, stop = 3.0, step = (stop - start) / S;
    const double crossing = 1.0 + step * k / 20.0;
    std::vector<double> sdf(S), delta(S, step);
    for (std::size_t i = 0; i < S; ++i) sdf[i] = crossing - (start + step * (i + 0.5));
    ad::Tape t(store);
    const auto dens = t.value(render::densities_to_weights(
        t, render::sdf_to_density(t, t.constant({1, S}, sdf), t.scalar(std::log(cfg.beta_init))), delta));
    const auto direct = t.value(render::sdf_direct_weights(t, t.constant({1, S}, sdf), cfg.mapper.render.truncation));
    const double a = max_second_difference({dens.begin(), dens.end()});
    const double b = max_second_difference({direct.begin(), direct.end()});
    wins += a <= b;
    ++trials;
    worst_ratio = std::max(worst_ratio, a / b);
  }

  pipeline::OverfitSpec spec;
  spec.target_psnr = kOverfitPsnr;
  spec.max_iters = 2000;
  spec.check_every = 5;
  const pipeline::AblationTable table =
      pipeline::run_ablation(ws.room("desk", true), cfg, pipeline::AblationAxis::render_mode, kOverfitSeeds, spec);
  const auto density = table.median("sdf_density"), occupancy = table.median("occupancy");
  // Never reaching the target inside the cap counts as more than the cap.
  const bool cap_ok = double(spec.max_iters) >= kIterationRatio * density.value_or(1e300);
  const bool slower = density && (occupancy ? *occupancy >= kIterationRatio * *density : cap_ok);
  std::ostringstream os;
  os << "second difference density <= direct in " << wins << "/" << trials << " crossings (worst ratio "
     << fmt_opt(worst_ratio, 3) << "); iterations to " << kOverfitPsnr << " dB, median of " << kOverfitSeeds
     << " seeds: sdf_density " << fmt_opt(density) << ", occupancy " << fmt_opt(occupancy) << " [";
  for (const auto& r : table.rows) os << " " << r.variant[0] << r.seed << "=" << fmt_opt(r.value);
  os << " ] ratio " << (density && occupancy ? fmt_opt(*occupancy / *density, 3) : std::string("n/a"))
     << " (need >= " << kIterationRatio << ")";
  return {wins == trials && slower, os.str()};
}

// ---------------------------------------------------------------------------
// 5 and 9. Desk-scale mapping and determinism

struct DeskRun {
  pipeline::MapResult result;
  double seconds = 0.0;
  fs::path out;
};

DeskRun desk_run(Workspace& ws, const std::string& name) {
  DeskRun r;
  r.out = ws.root / name;
  fs::remove_all(r.out);
  pipeline::MapOptions opt;
  opt.out = r.out;
  const auto t0 = Clock::now();
  r.result = pipeline::run_mapping(ws.room("desk", true), ws.desk_config(), opt);
  r.seconds = seconds_since(t0);
  return r;
}

Outcome desk_mapping(const DeskRun& r) {
  const metrics::MetricReport& m = r.result.report;
  const bool pass = m.psnr && *m.psnr >= kDeskPsnr && m.depth_l1_cm && *m.depth_l1_cm <= kDeskDepthCm &&
                    m.comp_ratio && *m.comp_ratio >= kDeskCompRatio && r.seconds <= kDeskSeconds;
  std::ostringstream os;
  os << "PSNR " << fmt_opt(m.psnr) << " dB (>= " << kDeskPsnr << "), Depth L1 " << fmt_opt(m.depth_l1_cm)
     << " cm (<= " << kDeskDepthCm << "), Comp Ratio " << fmt_opt(m.comp_ratio) << " % (>= " << kDeskCompRatio
     << "), Acc " << fmt_opt(m.acc_cm) << " cm, Comp " << fmt_opt(m.comp_cm) << " cm, SSIM " << fmt_opt(m.ssim)
     << ", time " << fmt_opt(r.seconds / 60.0, 3) << " min (<= " << kDeskSeconds / 60.0 << ")";
  return {pass, os.str()};
}

Outcome loss_trend(const DeskRun& r) {
  const auto& log = r.result.log;
  std::size_t violations = 0;
  std::ostringstream os;
  os.precision(4);
  const std::size_t n = std::min(kLossTrendUpdates, log.size());
  for (std::size_t i = 0; i < n; ++i) {
    os << (i ? " " : "") << log[i].loss_total;
    if (i > 0 && log[i].loss_total > log[i - 1].loss_total) ++violations;
  }
  return {n == kLossTrendUpdates && violations <= kLossTrendViolations,
          "mean total loss per update: " + os.str() + "; increases " + std::to_string(violations) + " (allowed " +
              std::to_string(kLossTrendViolations) + ")"};
}

Outcome determinism(const DeskRun& a, const DeskRun& b) {
  std::vector<std::string> differ;
  for (const char* f : {"model.ckpt", "report.txt", "log.jsonl", "mesh.ply"})
    if (slurp_bytes(a.out / f) != slurp_bytes(b.out / f)) differ.push_back(f);
  if (fs::exists(a.out / "checkpoints"))
    for (const auto& e : fs::directory_iterator(a.out / "checkpoints"))
      if (slurp_bytes(e.path()) != slurp_bytes(b.out / "checkpoints" / e.path().filename()))
        differ.push_back("checkpoints/" + e.path().filename().string());
  std::string detail = "model.ckpt, report.txt, log.jsonl and mesh.ply of two seed-0 runs ";
  if (differ.empty()) return {true, detail + "are bitwise identical"};
  for (const auto& f : differ) detail += f + " ";
  return {false, detail + "differ"};
}

// ---------------------------------------------------------------------------
// 6 and 7. Paired ablations

Outcome ablation(Workspace& ws, pipeline::AblationAxis axis, const data::Dataset& d) {
  const pipeline::AblationTable t = pipeline::run_ablation(d, ws.desk_config(), axis, kAblationSeeds);
  const std::string& ref = t.variants.at(0);
  const std::string& other = t.variants.at(1);
  const auto a = t.median(ref), b = t.median(other);
  std::ostringstream os;
  os << "Depth L1 over the last 5 updates, median of " << kAblationSeeds << " seeds: " << ref << " " << fmt_opt(a)
     << " cm, " << other << " " << fmt_opt(b) << " cm [";
  for (const auto& r : t.rows) os << " " << r.variant << "/" << r.seed << "=" << fmt_opt(r.value);
  os << " ]; parameters";
  for (const auto& r : t.rows)
    if (r.seed == t.rows.front().seed) os << " " << r.variant << " " << r.parameters;
  return {a && b && *a <= *b, os.str()};
}

// ---------------------------------------------------------------------------
// 8. Window bookkeeping through the real mapper

Outcome window_bookkeeping(Workspace& ws) {
  data::SynthSpec s;
  s.width = s.height = 32;
  s.trajectory.frames = 100;
  s.build_gt_mesh = false;
  const data::Dataset d = data::generate_synthetic(s, 0);
  (void)ws;
  ModelSpec spec;
  spec.field.geo.levels = {{0.64, 2}};
  spec.field.app.levels = {{0.64, 2}};
  spec.decoders.hidden = {8};
  spec.decoders.geo_output_bias = 0.32;
  SceneModel model(d.bounds, spec, 1);
  mapping::MapperConfig cfg;
  cfg.schedule = {15, 1, 1, 1, 5, 49};
  cfg.render.samples = 4;
  cfg.overlap_probes = 16;
  cfg.update_metrics = false;
  mapping::Mapper m(model, cfg, 1);
  const std::span<const Frame> all(d.frames);
  std::size_t violations = 0, steps = 0, retirements = 0;
  auto check = [&]() {
    violations += mapping::check_window(m.window(), m.cache()).size();
    violations += m.window().local().size() > 15;
    violations += m.window().global().size() > 5;
    for (std::int64_t id : m.window().local()) violations += m.cache().contains(id);
  };
  m.initialize(all.first(15));
  check();
  for (std::size_t f = 15; f + 5 <= all.size(); f += 5) {
    const std::size_t before = m.cache().size();
    const mapping::RetireResult r = m.step(all.subspan(f, 5));
    ++steps;
    if (r.cached || !r.discarded.empty()) {
      ++retirements;
      violations += !r.cached;
      violations += r.discarded.size() != 4;
    }
    violations += m.cache().size() != before + (r.cached ? 1 : 0);
    check();
  }
  violations += retirements != steps;
  return {violations == 0 && steps == 17, std::to_string(steps) + " steps over 100 frames, " +
                                              std::to_string(retirements) + " retirements, " +
                                              std::to_string(violations) + " violations"};
}

void report(int id, const std::string& name, const Outcome& o) {
  std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"facmap acceptance suite"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "facmap_acceptance").string();
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work", work, "scratch directory")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);
  set_num_threads(1);

  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9}
                                              : std::set<int>(only.begin(), only.end());
  Workspace ws{work, {}};
  fs::create_directories(ws.root);
  int failures = 0;
  auto run = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    if (!selected.count(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    report(id, name, o);
  };

  run(1, "gradient suite", gradient_suite);
  run(2, "interpolation oracles", interpolation_oracles);
  run(3, "rendering oracle", rendering_oracle);
  run(8, "window bookkeeping", [&] { return window_bookkeeping(ws); });
  run(4, "render-mode smoothness and convergence", [&] { return render_mode_comparison(ws); });

  std::optional<DeskRun> first;
  if (selected.count(5) || selected.count(9)) {
    try {
      first = desk_run(ws, "desk_a");
    } catch (const std::exception& e) {
      spdlog::error("desk run failed: {}", e.what());
    }
  }
  run(5, "desk-scale mapping", [&] {
    if (!first) return Outcome{false, "desk run failed"};
    const Outcome trend = loss_trend(*first);
    std::printf("       (property) training-loss trend %s: %s\n", trend.pass ? "holds" : "violated",
                trend.detail.c_str());
    return desk_mapping(*first);
  });
  run(9, "determinism", [&] {
    if (!first) return Outcome{false, "desk run failed"};
    return determinism(*first, desk_run(ws, "desk_b"));
  });
  run(6, "factorization ablation",
      [&] { return ablation(ws, pipeline::AblationAxis::factorization, ws.room("desk", true)); });
  run(7, "dual-path ablation",
      [&] { return ablation(ws, pipeline::AblationAxis::dual_path, ws.room("flat_walls", false)); });

  std::printf("%zu criteria, %d failed\n", selected.size(), failures);
  return failures == 0 ? 0 : 1;
}

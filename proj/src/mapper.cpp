#include "facmap/mapper.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "facmap/metrics.hpp"

namespace facmap::mapping {

void Schedule::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("schedule.") + name + " must be positive");
  };
  positive(window_init, "window_init");
  positive(iters_init, "iters_init");
  positive(color_iters, "color_iters");
  positive(iters_online, "iters_online");
  positive(step_frames, "step_frames");
  positive(rays, "rays");
  if (color_iters > iters_init) throw ConfigError("schedule.color_iters must not exceed schedule.iters_init");
}

void MapperConfig::validate() const {
  schedule.validate();
  if (window.local == 0) throw ConfigError("window.local must be positive");
  if (schedule.window_init > window.local) throw ConfigError("schedule.window_init must not exceed window.local");
  if (schedule.step_frames > window.local) throw ConfigError("schedule.step_frames must not exceed window.local");
  if (patch_radius < 1) throw ConfigError("patch_radius must be at least 1");
  if (schedule.rays < static_cast<std::size_t>((2 * patch_radius + 1) * (2 * patch_radius + 1)))
    throw ConfigError("schedule.rays must cover at least one patch");
  if (alpha_c_init < 0 || alpha_c_online < 0 || alpha_w < 0) throw ConfigError("loss weights must be non-negative");
  if (overlap_probes == 0) throw ConfigError("overlap_probes must be positive");
  if (overlap_refresh == 0) throw ConfigError("overlap_refresh must be positive");
  if (!(warp_overlap >= 0.0 && warp_overlap <= 1.0)) throw ConfigError("warp_overlap must be in [0, 1]");
  if (render.samples < 2) throw ConfigError("render.samples must be at least 2");
  if (warp.scales < 1) throw ConfigError("warp.scales must be positive");
}

// ---------------------------------------------------------------------------
// Window bookkeeping

SlidingWindow::SlidingWindow(WindowSpec spec) : spec_(spec) {}

std::vector<std::int64_t> SlidingWindow::frames() const {
  std::vector<std::int64_t> out(local_.begin(), local_.end());
  out.insert(out.end(), global_.begin(), global_.end());
  return out;
}

void SlidingWindow::push_local(std::int64_t id) {
  if (local_.size() >= spec_.local) throw DataError("local window is full");
  if (!local_.empty() && id <= local_.back())
    throw DataError("frame id " + std::to_string(id) + " is not newer than " + std::to_string(local_.back()));
  local_.push_back(id);
}

std::int64_t SlidingWindow::pop_oldest() {
  if (local_.empty()) throw DataError("local window is empty");
  const std::int64_t id = local_.front();
  local_.pop_front();
  return id;
}

void SlidingWindow::set_global(std::vector<std::int64_t> ids) {
  if (ids.size() > spec_.global) throw ConfigError("too many global keyframes");
  for (std::int64_t id : ids)
    if (std::find(local_.begin(), local_.end(), id) != local_.end())
      throw ConfigError("global keyframe " + std::to_string(id) + " is also a local frame");
  global_ = std::move(ids);
}

void KeyframeCache::add(std::int64_t id) {
  if (contains(id)) throw DataError("frame " + std::to_string(id) + " is already a keyframe");
  ids_.push_back(id);
}

bool KeyframeCache::contains(std::int64_t id) const { return std::find(ids_.begin(), ids_.end(), id) != ids_.end(); }

RetireResult retire_frames(SlidingWindow& window, KeyframeCache& cache, std::size_t count) {
  RetireResult r;
  count = std::min(count, window.local().size());
  for (std::size_t i = 0; i < count; ++i) {
    const std::int64_t id = window.pop_oldest();
    if (i == 0) {
      cache.add(id);
      r.cached = id;
    } else {
      r.discarded.push_back(id);
    }
  }
  return r;
}

std::vector<std::string> check_window(const SlidingWindow& window, const KeyframeCache& cache) {
  std::vector<std::string> v;
  const auto& local = window.local();
  const auto& global = window.global();
  if (local.size() > window.spec().local) v.push_back("local window over capacity");
  if (global.size() > window.spec().global) v.push_back("global window over capacity");
  for (std::size_t i = 1; i < local.size(); ++i)
    if (local[i] <= local[i - 1]) v.push_back("local frames out of order");
  std::set<std::int64_t> seen;
  for (std::int64_t id : window.frames())
    if (!seen.insert(id).second) v.push_back("duplicate frame " + std::to_string(id));
  for (std::int64_t id : local)
    if (cache.contains(id)) v.push_back("local frame " + std::to_string(id) + " is in the cache");
  for (std::int64_t id : global)
    if (!cache.contains(id)) v.push_back("global frame " + std::to_string(id) + " is not a keyframe");
  return v;
}

// ---------------------------------------------------------------------------
// Overlap

OverlapProbe probe_frame(const SceneModel& model, const Frame& a, std::size_t count, const render::RenderSpec& spec,
                         std::mt19937_64& rng) {
  const CameraIntrinsics& k = a.intrinsics;
  std::uniform_int_distribution<int> u(0, k.width - 1), v(0, k.height - 1);
  std::vector<render::Pixel> px(count);
  for (auto& p : px) {
    p.u = u(rng);
    p.v = v(rng);
  }
  const render::PixelRender r = render::render_depth(model, k, a.pose, px, spec);
  OverlapProbe probe;
  probe.probes = count;
  for (std::size_t i = 0; i < count; ++i) {
    if (!(r.opacity[i] >= 0.5)) continue;
    const Vec3 dir = (a.pose.rotation * k.backproject(px[i].u, px[i].v)).normalized();
    probe.points.push_back(a.pose.translation + (r.depth[i] / r.opacity[i]) * dir);
  }
  return probe;
}

double overlap_ratio(const OverlapProbe& probe, const Frame& b) {
  if (probe.points.empty()) return 0.0;
  std::size_t inside = 0;
  for (const Vec3& p : probe.points) {
    const auto uv = b.intrinsics.project(b.pose.to_camera(p));
    if (uv && b.intrinsics.contains(uv->x(), uv->y())) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(probe.points.size());
}

double estimate_overlap(const SceneModel& model, const Frame& a, const Frame& b, std::size_t count,
                        const render::RenderSpec& spec, std::mt19937_64& rng) {
  return overlap_ratio(probe_frame(model, a, count, spec, rng), b);
}

std::vector<std::size_t> weighted_sample(std::span<const double> weights, std::size_t count, std::mt19937_64& rng) {
  std::vector<double> w(weights.begin(), weights.end());
  for (double& x : w)
    if (!(x > 0.0)) x = 0.0;
  std::vector<std::size_t> out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (out.size() < count) {
    double total = 0.0;
    for (double x : w) total += x;
    if (!(total > 0.0)) break;
    const double r = unit(rng) * total;
    double acc = 0.0;
    std::size_t pick = w.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (w[i] <= 0.0) continue;
      acc += w[i];
      pick = i;
      if (r < acc) break;
    }
    out.push_back(pick);
    w[pick] = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run log

std::string to_json_line(const UpdateRecord& r) {
  nlohmann::ordered_json j;
  j["update"] = r.update;
  j["optimizer_step"] = r.optimizer_step;
  j["newest_frame"] = r.newest_frame;
  j["iterations"] = r.iterations;
  j["loss_color"] = r.loss_color;
  j["loss_warp"] = r.loss_warp;
  j["loss_total"] = r.loss_total;
  j["beta"] = r.beta;
  j["warp_triples"] = r.warp_triples;
  j["local"] = r.local;
  j["global"] = r.global;
  j["cached"] = r.cached ? nlohmann::ordered_json(*r.cached) : nlohmann::ordered_json(nullptr);
  j["discarded"] = r.discarded;
  j["psnr_db"] = r.psnr ? nlohmann::ordered_json(*r.psnr) : nlohmann::ordered_json(nullptr);
  j["depth_l1_cm"] = r.depth_l1_cm ? nlohmann::ordered_json(*r.depth_l1_cm) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

// ---------------------------------------------------------------------------
// Mapper

Mapper::Mapper(SceneModel& model, MapperConfig config, std::uint64_t seed)
    : model_(model), config_(std::move(config)), rng_(seed), window_(config_.window) {
  config_.validate();
}

const Frame& Mapper::frame(std::int64_t id) const {
  auto it = frames_.find(id);
  if (it == frames_.end()) throw DataError("frame " + std::to_string(id) + " is not held by the mapper");
  return it->second;
}

void Mapper::add_frame(const Frame& f) {
  f.validate();
  if (!frames_.empty()) {
    const CameraIntrinsics& k = frames_.begin()->second.intrinsics;
    if (!(k == f.intrinsics)) throw DataError("frame " + std::to_string(f.id) + ": intrinsics differ from the sequence");
  }
  frames_.emplace(f.id, f);
}

void Mapper::forget_frame(std::int64_t id) { frames_.erase(id); }

void Mapper::refresh_targets(const std::vector<std::int64_t>& ids) {
  target_ids_ = ids;
  views_.clear();
  targets_.assign(ids.size(), {});
  render::RenderSpec spec = config_.render;
  for (std::int64_t id : ids) views_.push_back(losses::ViewPyramid::build(frame(id), config_.warp.scales));
  if (config_.alpha_w <= 0.0) return;
  for (std::size_t a = 0; a < ids.size(); ++a) {
    const OverlapProbe probe = probe_frame(model_, frame(ids[a]), config_.overlap_probes, spec, rng_);
    for (std::size_t b = 0; b < ids.size(); ++b)
      if (b != a && overlap_ratio(probe, frame(ids[b])) > config_.warp_overlap) targets_[a].push_back(b);
  }
}

void Mapper::resample_global() {
  std::vector<std::int64_t> candidates;
  for (std::int64_t id : cache_.ids())
    if (std::find(window_.local().begin(), window_.local().end(), id) == window_.local().end())
      candidates.push_back(id);
  if (candidates.empty() || window_.spec().global == 0 || window_.local().empty()) {
    window_.set_global({});
    return;
  }
  const OverlapProbe probe =
      probe_frame(model_, frame(window_.local().back()), config_.overlap_probes, config_.render, rng_);
  std::vector<double> w;
  w.reserve(candidates.size());
  for (std::int64_t id : candidates) w.push_back(overlap_ratio(probe, frame(id)));
  std::vector<std::int64_t> chosen;
  for (std::size_t i : weighted_sample(w, window_.spec().global, rng_)) chosen.push_back(candidates[i]);
  window_.set_global(std::move(chosen));
}

losses::LossTerms Mapper::iterate(double alpha_c, double alpha_w, std::size_t& triples) {
  const std::vector<std::int64_t>& ids = target_ids_;
  const CameraIntrinsics& k = frame(ids.front()).intrinsics;
  const int r = config_.patch_radius;
  const std::size_t per = static_cast<std::size_t>((2 * r + 1) * (2 * r + 1));
  const losses::PixelSampleSet set =
      losses::sample_patches(ids.size(), k.width, k.height, std::max<std::size_t>(1, config_.schedule.rays / per), r,
                             rng_);
  render::Rays rays;
  std::vector<double> observed;
  rays.origins.reserve(set.size());
  rays.directions.reserve(set.size());
  observed.reserve(set.size() * 3);
  for (std::size_t p = 0; p < set.patches.size(); ++p) {
    const Frame& f = frame(ids[set.patches[p].frame]);
    const std::vector<render::Pixel> px = set.pixels(p);
    render::Rays pr = render::generate_rays(f, px);
    rays.origins.insert(rays.origins.end(), pr.origins.begin(), pr.origins.end());
    rays.directions.insert(rays.directions.end(), pr.directions.begin(), pr.directions.end());
    for (const auto& q : px)
      for (int c = 0; c < 3; ++c) observed.push_back(f.rgb.at(static_cast<int>(q.u), static_cast<int>(q.v), c));
  }
  const render::RaySampleBatch batch = render::sample_rays(rays, model_.field().bounds(), config_.render, rng_, true);

  ad::Tape tape(model_.store());
  const render::RenderOutput out = render::render_batch(tape, model_, batch, config_.render, alpha_c > 0.0);
  const ad::Var lc = alpha_c > 0.0 ? losses::photometric_loss(tape, out.color, observed) : tape.scalar(0.0);
  losses::WarpStats stats;
  const ad::Var lw = alpha_w > 0.0 ? losses::warping_loss(tape, out.depth, set, views_, targets_, config_.warp, &stats)
                                   : tape.scalar(0.0);
  const ad::Var total = losses::total_loss(tape, lc, lw, alpha_c, alpha_w);

  losses::LossTerms terms;
  terms.color = tape.value(lc)[0];
  terms.warp = tape.value(lw)[0];
  terms.total = tape.value(total)[0];
  terms.alpha_c = alpha_c;
  terms.alpha_w = alpha_w;
  if (!std::isfinite(terms.total)) {
    std::ostringstream os;
    os << "non-finite loss at optimizer step " << adam_t_ + 1 << " (L_c=" << terms.color << ", L_w=" << terms.warp
       << ")";
    throw NumericalError(os.str());
  }
  model_.store().zero_grad();
  tape.backward(total);
  ad::adam_step(model_.store(), config_.adam, ++adam_t_);
  triples = stats.triples;
  return terms;
}

void Mapper::run(std::size_t iterations, bool init, UpdateRecord& rec) {
  double lc = 0, lw = 0, lt = 0, tr = 0;
  for (std::size_t it = 0; it < iterations; ++it) {
    if (init && it > 0 && it % config_.overlap_refresh == 0) refresh_targets(target_ids_);
    const double alpha_c =
        init ? (it < config_.schedule.color_iters ? config_.alpha_c_init : 0.0) : config_.alpha_c_online;
    std::size_t triples = 0;
    const losses::LossTerms t = iterate(alpha_c, config_.alpha_w, triples);
    lc += t.color;
    lw += t.warp;
    lt += t.total;
    tr += static_cast<double>(triples);
    if (on_iteration) on_iteration({it, init, t, triples});
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, iterations));
  rec.iterations = iterations;
  rec.loss_color = lc / n;
  rec.loss_warp = lw / n;
  rec.loss_total = lt / n;
  rec.warp_triples = tr / n;
}

void Mapper::finish_update(UpdateRecord& rec, std::span<const std::int64_t> new_frames) {
  rec.update = log_.size();
  rec.optimizer_step = adam_t_;
  rec.newest_frame = window_.local().back();
  rec.beta = model_.beta();
  rec.local.assign(window_.local().begin(), window_.local().end());
  rec.global = window_.global();
  if (config_.update_metrics) {
    double psnr = 0.0, depth = 0.0;
    std::size_t with_depth = 0;
    for (std::int64_t id : new_frames) {
      const Frame& f = frame(id);
      const render::RenderedView v = render::render_view(model_, f.intrinsics, f.pose, config_.render, true);
      psnr += metrics::psnr(v.color, f.rgb);
      if (f.depth) {
        const auto mask = metrics::opacity_mask(v.opacity);
        const auto m = metrics::evaluate_render(v.color, v.zdepth, f.rgb, *f.depth, mask);
        if (m.depth_l1_cm) {
          depth += *m.depth_l1_cm;
          ++with_depth;
        }
      }
    }
    rec.psnr = psnr / static_cast<double>(new_frames.size());
    if (with_depth) rec.depth_l1_cm = depth / static_cast<double>(with_depth);
  }
  log_.push_back(rec);
  spdlog::info("update {} step {} frame {}: L_c={:.5f} L_w={:.5f} L={:.5f} beta={:.3f} psnr={} depth_l1_cm={}",
               rec.update, rec.optimizer_step, rec.newest_frame, rec.loss_color, rec.loss_warp, rec.loss_total,
               rec.beta, rec.psnr ? fmt::format("{:.2f}", *rec.psnr) : "-",
               rec.depth_l1_cm ? fmt::format("{:.2f}", *rec.depth_l1_cm) : "-");
  if (on_update) on_update(rec);
}

void Mapper::initialize(std::span<const Frame> frames) {
  if (initialized_) throw Error("mapper is already initialized");
  const std::size_t n = config_.schedule.window_init;
  if (frames.size() < n)
    throw DataError("initialization needs " + std::to_string(n) + " frames, got " + std::to_string(frames.size()));
  std::vector<std::int64_t> ids;
  for (std::size_t i = 0; i < n; ++i) {
    add_frame(frames[i]);
    window_.push_local(frames[i].id);
    ids.push_back(frames[i].id);
  }
  refresh_targets(window_.frames());
  UpdateRecord rec;
  run(config_.schedule.iters_init, true, rec);
  initialized_ = true;
  finish_update(rec, ids);
}

RetireResult Mapper::step(std::span<const Frame> frames) {
  if (!initialized_) throw Error("step before initialize");
  if (frames.size() != config_.schedule.step_frames)
    throw DataError("step expects " + std::to_string(config_.schedule.step_frames) + " frames, got " +
                    std::to_string(frames.size()));
  std::int64_t last = window_.local().empty() ? frames.front().id - 1 : window_.local().back();
  for (const Frame& f : frames) {
    if (f.id <= last) throw DataError("frame ids must increase (" + std::to_string(f.id) + " after " +
                                      std::to_string(last) + ")");
    last = f.id;
  }
  const std::size_t room = window_.spec().local - window_.local().size();
  const std::size_t overflow = frames.size() > room ? frames.size() - room : 0;
  RetireResult retired = retire_frames(window_, cache_, overflow);
  for (std::int64_t id : retired.discarded) forget_frame(id);
  std::vector<std::int64_t> ids;
  for (const Frame& f : frames) {
    add_frame(f);
    window_.push_local(f.id);
    ids.push_back(f.id);
  }
  resample_global();
  refresh_targets(window_.frames());
  UpdateRecord rec;
  rec.cached = retired.cached;
  rec.discarded = retired.discarded;
  run(config_.schedule.iters_online, false, rec);
  finish_update(rec, ids);
  return retired;
}

}  // namespace facmap::mapping

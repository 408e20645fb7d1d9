#pragma once

// Online mapping: initialization on the first frames, then a fixed number of
// optimization iterations for every n new frames over a sliding window of
// recent (local) frames plus overlap-sampled keyframes (global).

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "facmap/autodiff.hpp"
#include "facmap/camera.hpp"
#include "facmap/losses.hpp"
#include "facmap/model.hpp"
#include "facmap/renderer.hpp"

namespace facmap::mapping {

struct Schedule {
  std::size_t window_init = 15;
  std::size_t iters_init = 1500;
  std::size_t color_iters = 250;  // init iterations that include the color term
  std::size_t iters_online = 20;
  std::size_t step_frames = 5;    // n
  std::size_t rays = 2048;        // rendered pixels per iteration, in whole patches

  // Throws ConfigError unless all counts are positive and color_iters <= iters_init.
  void validate() const;
};

struct WindowSpec {
  std::size_t local = 15;
  std::size_t global = 5;
};

struct MapperConfig {
  Schedule schedule;
  WindowSpec window;
  render::RenderSpec render;
  losses::WarpSpec warp;
  int patch_radius = 3;
  double alpha_c_init = losses::kAlphaColorInit;
  double alpha_c_online = losses::kAlphaColorOnline;
  double alpha_w = losses::kAlphaWarp;
  std::size_t overlap_probes = 256;
  double warp_overlap = 0.3;         // minimum overlap for a warp target
  std::size_t overlap_refresh = 100;  // init iterations between target updates
  bool update_metrics = true;         // render new frames after each update
  ad::AdamHyper adam;

  void validate() const;
};

class SlidingWindow {
 public:
  explicit SlidingWindow(WindowSpec spec = {});

  const WindowSpec& spec() const { return spec_; }
  const std::deque<std::int64_t>& local() const { return local_; }
  const std::vector<std::int64_t>& global() const { return global_; }
  // Local frames oldest first, then global frames.
  std::vector<std::int64_t> frames() const;
  std::size_t size() const { return local_.size() + global_.size(); }

  // Throws DataError for a full window or an id not newer than the last.
  void push_local(std::int64_t id);
  std::int64_t pop_oldest();
  // Throws ConfigError for more than spec().global frames or overlap with local.
  void set_global(std::vector<std::int64_t> ids);

 private:
  WindowSpec spec_;
  std::deque<std::int64_t> local_;
  std::vector<std::int64_t> global_;
};

// Retired frames eligible as global keyframes; append-only.
class KeyframeCache {
 public:
  void add(std::int64_t id);
  bool contains(std::int64_t id) const;
  const std::vector<std::int64_t>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }

 private:
  std::vector<std::int64_t> ids_;
};

struct RetireResult {
  std::optional<std::int64_t> cached;
  std::vector<std::int64_t> discarded;
};

// Moves the oldest `count` local frames out of the window (fewer if the
// window holds fewer): the earliest enters the cache, the rest are dropped.
RetireResult retire_frames(SlidingWindow& window, KeyframeCache& cache, std::size_t count);

// Window invariant violations (empty when consistent).
std::vector<std::string> check_window(const SlidingWindow& window, const KeyframeCache& cache);

// World points of the probes of frame a whose rendered opacity reaches 0.5.
struct OverlapProbe {
  std::vector<Vec3> points;
  std::size_t probes = 0;
};
OverlapProbe probe_frame(const SceneModel& model, const Frame& a, std::size_t count, const render::RenderSpec& spec,
                         std::mt19937_64& rng);
// Fraction of probe points in front of camera b and inside its image.
double overlap_ratio(const OverlapProbe& probe, const Frame& b);
double estimate_overlap(const SceneModel& model, const Frame& a, const Frame& b, std::size_t count,
                        const render::RenderSpec& spec, std::mt19937_64& rng);

// Draws up to `count` indices without replacement, each with probability
// proportional to its weight among the remaining positive weights.
std::vector<std::size_t> weighted_sample(std::span<const double> weights, std::size_t count, std::mt19937_64& rng);

struct UpdateRecord {
  std::size_t update = 0;             // 0 = initialization
  std::int64_t optimizer_step = 0;    // Adam steps so far
  std::int64_t newest_frame = 0;
  std::size_t iterations = 0;
  double loss_color = 0.0;            // means over the update's iterations
  double loss_warp = 0.0;
  double loss_total = 0.0;
  double beta = 0.0;
  double warp_triples = 0.0;          // mean per iteration
  std::vector<std::int64_t> local, global;
  std::optional<std::int64_t> cached;
  std::vector<std::int64_t> discarded;
  std::optional<double> psnr;         // over this update's new frames
  std::optional<double> depth_l1_cm;
};

std::string to_json_line(const UpdateRecord& r);

struct IterationInfo {
  std::size_t iteration = 0;  // within the current phase
  bool init = true;
  losses::LossTerms terms;
  std::size_t warp_triples = 0;
};

class Mapper {
 public:
  Mapper(SceneModel& model, MapperConfig config, std::uint64_t seed);

  // Trains on the first window_init frames and seeds the window with them.
  // Throws DataError when fewer frames are given.
  void initialize(std::span<const Frame> frames);
  // Exactly step_frames new frames with increasing ids; returns the retirement.
  RetireResult step(std::span<const Frame> frames);

  const SlidingWindow& window() const { return window_; }
  const KeyframeCache& cache() const { return cache_; }
  const MapperConfig& config() const { return config_; }
  std::int64_t optimizer_step() const { return adam_t_; }
  const std::vector<UpdateRecord>& log() const { return log_; }
  const Frame& frame(std::int64_t id) const;

  std::function<void(const UpdateRecord&)> on_update;
  std::function<void(const IterationInfo&)> on_iteration;

 private:
  void add_frame(const Frame& f);
  void forget_frame(std::int64_t id);
  void refresh_targets(const std::vector<std::int64_t>& ids);
  void resample_global();
  losses::LossTerms iterate(double alpha_c, double alpha_w, std::size_t& triples);
  void run(std::size_t iterations, bool init, UpdateRecord& rec);
  void finish_update(UpdateRecord& rec, std::span<const std::int64_t> new_frames);

  SceneModel& model_;
  MapperConfig config_;
  std::mt19937_64 rng_;
  SlidingWindow window_;
  KeyframeCache cache_;
  std::map<std::int64_t, Frame> frames_;
  // Window frames at the last target refresh, their pyramids and warp targets.
  std::vector<std::int64_t> target_ids_;
  std::vector<losses::ViewPyramid> views_;
  std::vector<std::vector<std::size_t>> targets_;
  std::int64_t adam_t_ = 0;
  bool initialized_ = false;
  std::vector<UpdateRecord> log_;
};

}  // namespace facmap::mapping

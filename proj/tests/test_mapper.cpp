#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "facmap/dataset.hpp"
#include "facmap/mapper.hpp"
#include "support.hpp"

namespace {

using namespace facmap;
using namespace facmap::mapping;

SlidingWindow filled(std::int64_t first, std::int64_t last, WindowSpec spec = {}) {
  SlidingWindow w(spec);
  for (std::int64_t i = first; i <= last; ++i) w.push_local(i);
  return w;
}

TEST(Mapper, RetireKeepsEarliestAndDropsTheRest) {
  SlidingWindow w = filled(1, 15);
  KeyframeCache cache;
  const RetireResult r = retire_frames(w, cache, 5);
  ASSERT_TRUE(r.cached.has_value());
  EXPECT_EQ(*r.cached, 1);
  EXPECT_EQ(r.discarded, (std::vector<std::int64_t>{2, 3, 4, 5}));
  EXPECT_EQ(std::vector<std::int64_t>(w.local().begin(), w.local().end()),
            (std::vector<std::int64_t>{6, 7, 8, 9, 10, 11, 12, 13, 14, 15}));
  EXPECT_EQ(cache.ids(), (std::vector<std::int64_t>{1}));
  EXPECT_TRUE(check_window(w, cache).empty());
}

TEST(Mapper, SingleFrameStepsCacheEveryRetiredFrame) {
  SlidingWindow w = filled(0, 14);
  KeyframeCache cache;
  for (std::int64_t id = 15; id < 30; ++id) {
    const RetireResult r = retire_frames(w, cache, 1);
    ASSERT_TRUE(r.cached.has_value());
    EXPECT_EQ(*r.cached, id - 15);
    EXPECT_TRUE(r.discarded.empty());
    w.push_local(id);
  }
  EXPECT_EQ(cache.size(), 15u);
}

TEST(Mapper, UnderfullRetireTakesWhatExists) {
  SlidingWindow w = filled(3, 5);
  KeyframeCache cache;
  const RetireResult r = retire_frames(w, cache, 5);
  EXPECT_EQ(r.cached, std::optional<std::int64_t>(3));
  EXPECT_EQ(r.discarded, (std::vector<std::int64_t>{4, 5}));
  EXPECT_EQ(w.size(), 0u);
  const RetireResult none = retire_frames(w, cache, 2);
  EXPECT_FALSE(none.cached.has_value());
  EXPECT_TRUE(none.discarded.empty());
  const RetireResult zero = retire_frames(w, cache, 0);
  EXPECT_FALSE(zero.cached.has_value());
}

TEST(Mapper, WindowRejectsBadUpdates) {
  SlidingWindow w = filled(0, 14);
  EXPECT_THROW(w.push_local(15), DataError);  // full
  w.pop_oldest();
  EXPECT_THROW(w.push_local(14), DataError);  // not newer
  EXPECT_THROW(w.set_global({3}), ConfigError);  // also local
  EXPECT_THROW(w.set_global({-1, -2, -3, -4, -5, -6}), ConfigError);
  w.set_global({-3, -1});
  EXPECT_EQ(w.frames().back(), -1);
  EXPECT_EQ(w.frames().front(), 1);
  EXPECT_EQ(w.size(), 16u);
  SlidingWindow empty;
  EXPECT_THROW(empty.pop_oldest(), DataError);
  KeyframeCache cache;
  cache.add(4);
  EXPECT_THROW(cache.add(4), DataError);
}

TEST(Mapper, CheckWindowReportsViolations) {
  SlidingWindow w = filled(0, 4);
  KeyframeCache cache;
  cache.add(2);
  EXPECT_FALSE(check_window(w, cache).empty());
  KeyframeCache ok;
  ok.add(-7);
  w.set_global({-7});
  EXPECT_TRUE(check_window(w, ok).empty());
  KeyframeCache missing;
  EXPECT_FALSE(check_window(w, missing).empty());  // global frame not from the cache
}

TEST(Mapper, ScriptedRunKeepsInvariants) {
  SlidingWindow w;
  KeyframeCache cache;
  std::mt19937_64 rng(1);
  for (std::int64_t i = 0; i < 15; ++i) w.push_local(i);
  std::int64_t next = 15;
  while (next + 5 <= 100) {
    const std::size_t before = cache.size();
    const std::size_t overflow = w.local().size() + 5 - w.spec().local;
    const RetireResult r = retire_frames(w, cache, overflow);
    EXPECT_EQ(cache.size(), before + 1);
    EXPECT_EQ(r.discarded.size(), 4u);
    for (int k = 0; k < 5; ++k) w.push_local(next++);
    std::vector<double> weights(cache.size(), 1.0);
    std::vector<std::int64_t> global;
    for (std::size_t idx : weighted_sample(weights, w.spec().global, rng)) global.push_back(cache.ids()[idx]);
    w.set_global(global);
    EXPECT_LE(w.local().size(), 15u);
    EXPECT_LE(w.global().size(), 5u);
    EXPECT_TRUE(check_window(w, cache).empty());
  }
}

TEST(Mapper, WeightedSampleFrequencies) {
  const std::vector<double> weights = {1.0, 2.0, 3.0, 0.0, 4.0};
  std::mt19937_64 rng(2);
  std::vector<double> freq(5, 0.0);
  const int draws = 40000;
  for (int n = 0; n < draws; ++n) freq[weighted_sample(weights, 1, rng).at(0)] += 1.0 / draws;
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(freq[i], weights[i] / 10.0, 0.01);
  for (int n = 0; n < 200; ++n) {
    const auto pick = weighted_sample(weights, 3, rng);
    ASSERT_EQ(pick.size(), 3u);
    EXPECT_EQ(std::set<std::size_t>(pick.begin(), pick.end()).size(), 3u);
    EXPECT_EQ(std::count(pick.begin(), pick.end(), 3u), 0);
  }
  EXPECT_EQ(weighted_sample(weights, 10, rng).size(), 4u);
  EXPECT_TRUE(weighted_sample(std::vector<double>{0.0, 0.0}, 2, rng).empty());
  EXPECT_TRUE(weighted_sample(std::vector<double>{}, 2, rng).empty());
  EXPECT_EQ(weighted_sample(std::vector<double>{0.0, 0.7}, 1, rng), (std::vector<std::size_t>{1}));
}

TEST(Mapper, WeightedSampleSecondDrawIsConditional) {
  // P(second = j | first = i) = w_j / (W - w_i); P(1 is drawn second) over all orders.
  const std::vector<double> weights = {1.0, 1.0, 2.0};
  std::mt19937_64 rng(3);
  double second_is_2 = 0.0;
  const int draws = 40000;
  for (int n = 0; n < draws; ++n) second_is_2 += weighted_sample(weights, 2, rng)[1] == 2 ? 1.0 / draws : 0.0;
  // first 0 (1/4) then 2 (2/3); first 1 (1/4) then 2 (2/3).
  EXPECT_NEAR(second_is_2, 2.0 * 0.25 * (2.0 / 3.0), 0.01);
}

// Probes scattered over a plane z = 2 as seen by camera a.
OverlapProbe plane_probe(const Frame& a, std::size_t count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, a.intrinsics.width - 0.5), v(-0.5, a.intrinsics.height - 0.5);
  OverlapProbe p;
  p.probes = count;
  for (std::size_t i = 0; i < count; ++i) {
    const Vec3 d = a.pose.rotation * a.intrinsics.backproject(u(rng), v(rng));
    p.points.push_back(a.pose.translation + d * ((2.0 - a.pose.translation.z()) / d.z()));
  }
  return p;
}

Frame camera_frame(const Pose& pose) {
  Frame f;
  f.intrinsics = data::pinhole(64, 64, 60.0);
  f.pose = pose;
  f.rgb = Image(64, 64, 3);
  return f;
}

TEST(Mapper, OverlapOracles) {
  std::mt19937_64 rng(4);
  const Frame a = camera_frame(Pose{});
  const OverlapProbe probe = plane_probe(a, 256, rng);
  EXPECT_DOUBLE_EQ(overlap_ratio(probe, a), 1.0);
  Pose back;
  back.rotation = Eigen::AngleAxisd(M_PI, Vec3::UnitY()).toRotationMatrix();
  EXPECT_DOUBLE_EQ(overlap_ratio(probe, camera_frame(back)), 0.0);
  // The footprint on the plane is 2 * 2 * tan(30 deg) wide; shifting by half of it halves the overlap.
  Pose half;
  half.translation = Vec3(2.0 * std::tan(M_PI / 6.0), 0.0, 0.0);
  EXPECT_NEAR(overlap_ratio(probe, camera_frame(half)), 0.5, 0.1);
  EXPECT_EQ(overlap_ratio(OverlapProbe{{}, 256}, a), 0.0);
}

TEST(Mapper, ProbeFrameFindsSolidGeometry) {
  SceneModel model(facmap::testing::unit_bounds(), facmap::testing::tiny_model_spec(), 3);
  auto& s = model.store();
  const auto& geo = model.decoders().geo();
  render::RenderSpec spec;
  spec.samples = 16;
  std::mt19937_64 rng(5);
  Frame a = camera_frame(Pose::look_at(Vec3(0.0, -0.5, 0.0), Vec3::Zero()));
  // Zero last layer: constant positive SDF, empty space, no accepted probes.
  for (double& w : s.value(geo.weight(geo.layer_count() - 1))) w = 0.0;
  s.value(geo.bias(geo.layer_count() - 1))[0] = 1.0;
  EXPECT_TRUE(probe_frame(model, a, 64, spec, rng).points.empty());
  EXPECT_EQ(estimate_overlap(model, a, a, 64, spec, rng), 0.0);
  // Constant negative SDF: everything is solid, every probe is accepted.
  s.value(geo.bias(geo.layer_count() - 1))[0] = -1.0;
  const OverlapProbe p = probe_frame(model, a, 64, spec, rng);
  EXPECT_EQ(p.points.size(), 64u);
  EXPECT_DOUBLE_EQ(overlap_ratio(p, a), 1.0);
  Pose turned = a.pose;
  turned.rotation = a.pose.rotation * Eigen::AngleAxisd(M_PI, Vec3::UnitY()).toRotationMatrix();
  EXPECT_DOUBLE_EQ(overlap_ratio(p, camera_frame(turned)), 0.0);
}

TEST(Mapper, ConfigValidation) {
  MapperConfig c;
  EXPECT_NO_THROW(c.validate());
  auto expect_bad = [](auto mutate) {
    MapperConfig m;
    mutate(m);
    EXPECT_THROW(m.validate(), ConfigError);
  };
  expect_bad([](MapperConfig& m) { m.schedule.color_iters = m.schedule.iters_init + 1; });
  expect_bad([](MapperConfig& m) { m.schedule.rays = 10; });
  expect_bad([](MapperConfig& m) { m.schedule.step_frames = 0; });
  expect_bad([](MapperConfig& m) { m.schedule.window_init = 16; });
  expect_bad([](MapperConfig& m) { m.alpha_w = -1.0; });
  expect_bad([](MapperConfig& m) { m.warp_overlap = 1.5; });
  expect_bad([](MapperConfig& m) { m.render.samples = 1; });
}

TEST(Mapper, UpdateRecordJson) {
  UpdateRecord r;
  r.update = 3;
  r.optimizer_step = 560;
  r.local = {6, 7};
  r.cached = 1;
  r.psnr = 24.5;
  const std::string j = to_json_line(r);
  EXPECT_EQ(j.find('\n'), std::string::npos);
  EXPECT_NE(j.find("\"update\":3"), std::string::npos);
  EXPECT_NE(j.find("\"local\":[6,7]"), std::string::npos);
  EXPECT_NE(j.find("\"cached\":1"), std::string::npos);
  EXPECT_NE(j.find("\"depth_l1_cm\":null"), std::string::npos);
}

struct TinySequence {
  data::Dataset data;
  MapperConfig cfg;
  ModelSpec spec;

  TinySequence() {
    data::SynthSpec s;
    s.width = s.height = 32;
    s.trajectory.frames = 14;
    s.trajectory.arc = 1.0;
    s.build_gt_mesh = false;
    data = data::generate_synthetic(s, 0);
    spec.field.geo.levels = {{0.64, 2}, {0.32, 2}};
    spec.field.app.levels = {{0.32, 4}};
    spec.decoders.hidden = {16, 16};
    spec.decoders.geo_output_bias = 0.32;
    cfg.schedule = {4, 6, 3, 2, 2, 98};
    cfg.window = {6, 2};
    cfg.render.samples = 16;
    cfg.overlap_probes = 32;
  }
};

TEST(Mapper, MappingRunBookkeeping) {
  TinySequence seq;
  SceneModel model(seq.data.bounds, seq.spec, 7);
  Mapper m(model, seq.cfg, 7);
  std::vector<std::size_t> updates;
  m.on_update = [&](const UpdateRecord& r) { updates.push_back(r.update); };
  std::size_t iterations = 0;
  m.on_iteration = [&](const IterationInfo&) { ++iterations; };
  const std::span<const Frame> all(seq.data.frames);
  EXPECT_THROW(m.initialize(all.first(3)), DataError);
  m.initialize(all.first(4));
  EXPECT_EQ(m.optimizer_step(), 6);
  EXPECT_THROW(m.initialize(all.first(4)), Error);
  EXPECT_THROW(m.step(all.subspan(4, 3)), DataError);
  EXPECT_THROW(m.step(all.subspan(2, 2)), DataError);  // ids not newer
  for (std::size_t f = 4; f + 2 <= all.size(); f += 2) {
    const std::size_t cache_before = m.cache().size();
    const RetireResult r = m.step(all.subspan(f, 2));
    EXPECT_TRUE(check_window(m.window(), m.cache()).empty());
    EXPECT_LE(m.window().local().size(), 6u);
    EXPECT_LE(m.window().global().size(), 2u);
    EXPECT_EQ(m.cache().size(), cache_before + (r.cached ? 1 : 0));
    if (r.cached) EXPECT_EQ(r.discarded.size(), 1u);
  }
  EXPECT_EQ(m.optimizer_step(), 6 + 5 * 2);
  EXPECT_EQ(iterations, 16u);
  EXPECT_EQ(updates, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  ASSERT_EQ(m.log().size(), 6u);
  EXPECT_EQ(m.log().back().newest_frame, all.back().id);
  EXPECT_TRUE(m.log().back().psnr.has_value());
  EXPECT_GT(m.log().back().beta, 0.0);
  EXPECT_NO_THROW(m.frame(all[0].id));                // first retired frame is a keyframe
  EXPECT_THROW(m.frame(all[1].id), DataError);        // dropped
}

TEST(Mapper, RunsAreBitwiseRepeatable) {
  TinySequence seq;
  auto run = [&]() {
    auto model = std::make_unique<SceneModel>(seq.data.bounds, seq.spec, 11);
    Mapper m(*model, seq.cfg, 11);
    const std::span<const Frame> all(seq.data.frames);
    m.initialize(all.first(4));
    for (std::size_t f = 4; f + 2 <= 8; f += 2) m.step(all.subspan(f, 2));
    std::vector<double> values;
    for (std::uint32_t i = 0; i < model->store().buffer_count(); ++i) {
      auto v = model->store().value(ad::ParamId{i});
      values.insert(values.end(), v.begin(), v.end());
    }
    return values;
  };
  EXPECT_EQ(run(), run());
}

}  // namespace

#pragma once

// End-to-end runs shared by the command-line tool and the acceptance suite:
// mapping a sequence, evaluating a model, single-view overfitting and paired
// ablations.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "facmap/config.hpp"
#include "facmap/dataset.hpp"
#include "facmap/mapper.hpp"
#include "facmap/mesh.hpp"
#include "facmap/metrics.hpp"
#include "facmap/model.hpp"

namespace facmap::pipeline {

// Output directory layout of a mapping run:
//   config.json      resolved configuration
//   log.jsonl        one record per map update
//   checkpoints/     update_<k>.ckpt every checkpoint_every updates
//   model.ckpt       final state
//   mesh.ply         reconstruction
//   renders/         <id>_rgb.png and <id>_depth.png per evaluated frame
//   report.txt       metric report
struct MapResult {
  std::unique_ptr<SceneModel> model;
  std::vector<mapping::UpdateRecord> log;
  metrics::MetricReport report;
  mesh::Mesh mesh;
};

struct MapOptions {
  std::optional<std::filesystem::path> out;
  bool evaluate = true;   // final render metrics
  bool mesh = true;       // extract and score the mesh
  std::function<void(const mapping::UpdateRecord&)> on_update;
};

// Initializes on the first window_init frames, then steps through the rest
// in groups of step_frames (a trailing partial group is dropped).
MapResult run_mapping(const data::Dataset& data, const config::RunConfig& cfg, const MapOptions& opt = {});

// Render metrics on every eval.frame_stride-th frame that has ground-truth
// depth; mesh metrics when `mesh` is given and the dataset has a GT mesh.
metrics::MetricReport evaluate_model(const SceneModel& model, const data::Dataset& data,
                                     const config::RunConfig& cfg, const mesh::Mesh* mesh = nullptr,
                                     const std::optional<std::filesystem::path>& render_dir = std::nullopt);

// Mean Depth L1 of the last `count` update records that report one.
std::optional<double> mean_recent_depth_l1(const std::vector<mapping::UpdateRecord>& log, std::size_t count = 5);

// Photometric fitting of a single view. Returns the first iteration count at
// which the full-view PSNR reaches `target_psnr` (checked every
// `check_every` iterations), or nullopt within `max_iters`.
struct OverfitSpec {
  double target_psnr = 25.0;
  std::size_t max_iters = 2000;
  std::size_t check_every = 10;
  std::size_t rays = 1024;
};
std::optional<std::size_t> overfit_view(const Frame& frame, const field::SceneBounds& bounds,
                                        const config::RunConfig& cfg, const OverfitSpec& spec);

enum class AblationAxis { factorization, dual_path, render_mode };
AblationAxis parse_axis(const std::string& s);
std::string to_string(AblationAxis a);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t parameters = 0;
  // factorization / dual_path: mean Depth L1 over the last five updates.
  // render_mode: iterations to the target PSNR (absent when never reached).
  std::optional<double> value;
};

struct AblationTable {
  AblationAxis axis;
  std::string value_name;
  std::vector<std::string> variants;  // reference variant first
  std::vector<AblationRow> rows;

  // Median over seeds of one variant (absent values sort last).
  std::optional<double> median(const std::string& variant) const;
  std::string format() const;
};

// Variants of `cfg` along an axis, reference first.
std::vector<std::pair<std::string, config::RunConfig>> ablation_variants(AblationAxis axis,
                                                                         const config::RunConfig& cfg,
                                                                         const field::SceneBounds& bounds);

// Runs every variant for seeds cfg.seed .. cfg.seed + seeds - 1. The
// render_mode axis overfits frame 0; the others map the full sequence.
AblationTable run_ablation(const data::Dataset& data, const config::RunConfig& cfg, AblationAxis axis,
                           std::size_t seeds, const OverfitSpec& overfit = {});

}  // namespace facmap::pipeline

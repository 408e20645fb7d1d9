#pragma once

// Run configuration: built-in defaults, overridden by a JSON config file,
// overridden by command-line flags. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "facmap/dataset.hpp"
#include "facmap/mapper.hpp"
#include "facmap/model.hpp"

namespace facmap::config {

struct EvalSpec {
  double mesh_cell = 0.02;            // marching-cubes lattice spacing
  std::size_t mesh_samples = 100000;  // surface samples per mesh
  double mesh_threshold = 0.05;       // completion-ratio distance
  std::size_t frame_stride = 1;       // evaluate every k-th frame
  bool mesh_colors = false;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  field::FieldSpec field;
  decoders::DecoderSpec decoders;
  // Absent: derived from the coarsest geometry cell.
  std::optional<double> geo_output_bias;
  LearningRates lr;
  double beta_init = 10.0;
  mapping::MapperConfig mapper;
  EvalSpec eval;
  data::SynthSpec synth;
  std::size_t checkpoint_every = 0;  // map updates between checkpoints, 0 = final only

  ModelSpec model_spec() const;
  // Throws ConfigError naming the first offending key.
  void validate() const;
};

// Applies a JSON document on top of `base`. `source` prefixes error messages.
RunConfig apply_json(const RunConfig& base, std::string_view text, const std::string& source = "config");
RunConfig load_file(const RunConfig& base, const std::filesystem::path& path);
// Full configuration as a JSON document accepted by apply_json.
std::string to_json(const RunConfig& c, int indent = 2);

// Checkpoints carry the model section of the configuration as metadata so a
// model can be rebuilt without the original config.
void save_model(const std::filesystem::path& path, const SceneModel& model, const std::string& note = {});
std::unique_ptr<SceneModel> load_model(const std::filesystem::path& path);

}  // namespace facmap::config

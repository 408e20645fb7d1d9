#pragma once

// Shallow MLP decoders: geometry features -> SDF, and (normalized position,
// appearance features) -> RGB.

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "facmap/autodiff.hpp"
#include "facmap/field.hpp"

namespace facmap::decoders {

enum class OutputActivation { none, sigmoid };

struct MlpSpec {
  std::size_t input = 0;
  std::vector<std::size_t> hidden = {32, 32};
  std::size_t output = 1;
  OutputActivation activation = OutputActivation::none;
  double output_bias = 0.0;
};

// Fully connected ReLU network. Weights use a He-uniform init, hidden biases
// start at zero so the initial output equals `output_bias` for zero input.
class Mlp {
 public:
  Mlp(ad::ParamStore& store, const std::string& name, const std::string& group, MlpSpec spec, std::mt19937_64& rng);

  const MlpSpec& spec() const { return spec_; }
  std::size_t layer_count() const { return weights_.size(); }
  ad::ParamId weight(std::size_t layer) const { return weights_.at(layer); }
  ad::ParamId bias(std::size_t layer) const { return biases_.at(layer); }

  // x is n x input; result n x output.
  ad::Var forward(ad::Tape& tape, ad::Var x) const;
  // Single-row evaluation without recording.
  void evaluate(const ad::ParamStore& store, std::span<const double> in, std::span<double> out) const;

 private:
  MlpSpec spec_;
  std::vector<ad::ParamId> weights_;
  std::vector<ad::ParamId> biases_;
};

struct DecoderSpec {
  std::vector<std::size_t> hidden = {32, 32};
  // Appearance MLP receives the normalized position in its first three inputs.
  bool app_uses_coordinates = true;
  // Initial SDF offset in meters; the default is set from the coarsest cell.
  double geo_output_bias = 0.32;
};

class Decoders {
 public:
  // Geometry MLP in group "mlp_geo", appearance MLP in "mlp_app".
  Decoders(ad::ParamStore& store, std::size_t geo_dim, std::size_t app_dim, const DecoderSpec& spec,
           std::mt19937_64& rng);

  const DecoderSpec& spec() const { return spec_; }
  const Mlp& geo() const { return geo_; }
  const Mlp& app() const { return app_; }
  std::size_t geo_dim() const { return geo_dim_; }
  std::size_t app_dim() const { return app_dim_; }

  // n x geo_dim -> n x 1 signed distances.
  ad::Var decode_geo(ad::Tape& tape, ad::Var f_geo) const;
  // Dispatches on app_uses_coordinates. `coords` may be a constant or a
  // differentiable n x 3 variable.
  ad::Var decode_app(ad::Tape& tape, ad::Var coords, ad::Var f_app) const;
  ad::Var decode_app(ad::Tape& tape, const field::PointBatch& p_norm, ad::Var f_app) const;
  // Appearance from features only; requires app_uses_coordinates == false.
  ad::Var decode_app_nocoord(ad::Tape& tape, ad::Var f_app) const;

  double evaluate_sdf(const ad::ParamStore& store, std::span<const double> f_geo) const;
  void evaluate_color(const ad::ParamStore& store, const field::Vec3& p_norm, std::span<const double> f_app,
                      std::span<double> rgb) const;

 private:
  DecoderSpec spec_;
  std::size_t geo_dim_;
  std::size_t app_dim_;
  Mlp geo_;
  Mlp app_;
};

}  // namespace facmap::decoders

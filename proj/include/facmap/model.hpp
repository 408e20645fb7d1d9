#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>

#include "facmap/autodiff.hpp"
#include "facmap/decoders.hpp"
#include "facmap/field.hpp"

namespace facmap {

struct LearningRates {
  double grid = 0.01;
  double mlp = 1e-5;
  double beta = 1e-2;
};

struct ModelSpec {
  field::FieldSpec field;
  decoders::DecoderSpec decoders;
  LearningRates lr;
  double beta_init = 10.0;
};

// Everything trainable: feature grids, both decoders and the density
// sharpness beta (stored as log beta in group "beta").
class SceneModel {
 public:
  SceneModel(const field::SceneBounds& bounds, const ModelSpec& spec, std::uint64_t seed);

  SceneModel(const SceneModel&) = delete;
  SceneModel& operator=(const SceneModel&) = delete;

  ad::ParamStore& store() { return *store_; }
  const ad::ParamStore& store() const { return *store_; }
  const field::FeatureField& field() const { return *field_; }
  const decoders::Decoders& decoders() const { return *decoders_; }
  const ModelSpec& spec() const { return spec_; }
  ad::ParamId log_beta() const { return log_beta_; }
  double beta() const { return std::exp(store_->value(log_beta_)[0]); }

  // Signed distance at a world position without recording a tape.
  double sdf(const field::Vec3& p_world) const;
  // Color at a world position without recording a tape.
  field::Vec3 color(const field::Vec3& p_world) const;

 private:
  ModelSpec spec_;
  std::unique_ptr<ad::ParamStore> store_;
  std::unique_ptr<field::FeatureField> field_;
  std::unique_ptr<decoders::Decoders> decoders_;
  ad::ParamId log_beta_;
};

// Default geometry-decoder bias: half the coarsest geometry cell.
double default_geo_bias(const field::GridSpec& geo);

}  // namespace facmap

#include "facmap/model.hpp"

#include <algorithm>
#include <cmath>

namespace facmap {

double default_geo_bias(const field::GridSpec& geo) {
  double coarsest = 0.0;
  for (const auto& l : geo.levels) coarsest = std::max(coarsest, l.cell_size);
  return 0.5 * coarsest;
}

SceneModel::SceneModel(const field::SceneBounds& bounds, const ModelSpec& spec, std::uint64_t seed)
    : spec_(spec), store_(std::make_unique<ad::ParamStore>()) {
  if (!(spec.beta_init > 0.0)) throw ConfigError("beta_init must be positive");
  store_->add_group("grid_geo", spec.lr.grid);
  store_->add_group("grid_app", spec.lr.grid);
  store_->add_group("mlp_geo", spec.lr.mlp);
  store_->add_group("mlp_app", spec.lr.mlp);
  store_->add_group("beta", spec.lr.beta);
  std::mt19937_64 rng(seed);
  field_ = std::make_unique<field::FeatureField>(*store_, bounds, spec.field, rng);
  decoders_ = std::make_unique<decoders::Decoders>(*store_, field_->geo_dim(), field_->app_dim(), spec.decoders, rng);
  log_beta_ = store_->add("log_beta", "beta", {1, 1}, {std::log(spec.beta_init)});
}

double SceneModel::sdf(const field::Vec3& p_world) const {
  std::vector<double> f(field_->geo_dim());
  field_->evaluate_geo(*store_, p_world, f);
  return decoders_->evaluate_sdf(*store_, f);
}

field::Vec3 SceneModel::color(const field::Vec3& p_world) const {
  std::vector<double> f(field_->app_dim());
  field_->evaluate_app(*store_, p_world, f);
  field::Vec3 rgb;
  decoders_->evaluate_color(*store_, field_->bounds().normalize(p_world), f, std::span<double>(rgb.data(), 3));
  return rgb;
}

}  // namespace facmap

#include "facmap/decoders.hpp"

#include <algorithm>
#include <cmath>

namespace facmap::decoders {

Mlp::Mlp(ad::ParamStore& store, const std::string& name, const std::string& group, MlpSpec spec,
         std::mt19937_64& rng)
    : spec_(std::move(spec)) {
  if (spec_.input == 0 || spec_.output == 0) throw ConfigError(name + ": MLP input and output widths must be > 0");
  std::vector<std::size_t> widths{spec_.input};
  widths.insert(widths.end(), spec_.hidden.begin(), spec_.hidden.end());
  widths.push_back(spec_.output);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l], out = widths[l + 1];
    if (in == 0 || out == 0) throw ConfigError(name + ": zero-width layer");
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(in * out);
    for (double& v : w) v = dist(rng);
    const bool last = l + 2 == widths.size();
    std::vector<double> b(out, last ? spec_.output_bias : 0.0);
    weights_.push_back(store.add(name + ".w" + std::to_string(l), group, {in, out}, std::move(w)));
    biases_.push_back(store.add(name + ".b" + std::to_string(l), group, {1, out}, std::move(b)));
  }
}

ad::Var Mlp::forward(ad::Tape& tape, ad::Var x) const {
  if (tape.shape(x).cols != spec_.input)
    throw ShapeError("mlp: input width " + std::to_string(tape.shape(x).cols) + ", expected " +
                     std::to_string(spec_.input));
  ad::Var h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = ad::ops::linear(tape, h, tape.param(weights_[l]), tape.param(biases_[l]));
    if (l + 1 < weights_.size()) h = ad::ops::relu(tape, h);
  }
  if (spec_.activation == OutputActivation::sigmoid) h = ad::ops::sigmoid(tape, h);
  return h;
}

void Mlp::evaluate(const ad::ParamStore& store, std::span<const double> in, std::span<double> out) const {
  if (in.size() != spec_.input || out.size() != spec_.output) throw ShapeError("mlp evaluate: size mismatch");
  std::vector<double> cur(in.begin(), in.end()), next;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const ad::Shape s = store.shape(weights_[l]);
    auto w = store.value(weights_[l]);
    auto b = store.value(biases_[l]);
    next.assign(b.begin(), b.end());
    for (std::size_t p = 0; p < s.rows; ++p) {
      const double v = cur[p];
      if (v == 0.0) continue;
      for (std::size_t j = 0; j < s.cols; ++j) next[j] += v * w[p * s.cols + j];
    }
    if (l + 1 < weights_.size())
      for (double& v : next) v = std::max(v, 0.0);
    cur.swap(next);
  }
  if (spec_.activation == OutputActivation::sigmoid)
    for (double& v : cur) v = 1.0 / (1.0 + std::exp(-v));
  std::copy(cur.begin(), cur.end(), out.begin());
}

namespace {

MlpSpec geo_spec(std::size_t geo_dim, const DecoderSpec& s) {
  return {geo_dim, s.hidden, 1, OutputActivation::none, s.geo_output_bias};
}

MlpSpec app_spec(std::size_t app_dim, const DecoderSpec& s) {
  return {app_dim + (s.app_uses_coordinates ? 3u : 0u), s.hidden, 3, OutputActivation::sigmoid, 0.0};
}

}  // namespace

Decoders::Decoders(ad::ParamStore& store, std::size_t geo_dim, std::size_t app_dim, const DecoderSpec& spec,
                   std::mt19937_64& rng)
    : spec_(spec),
      geo_dim_(geo_dim),
      app_dim_(app_dim),
      geo_(store, "mlp_geo", "mlp_geo", geo_spec(geo_dim, spec), rng),
      app_(store, "mlp_app", "mlp_app", app_spec(app_dim, spec), rng) {}

ad::Var Decoders::decode_geo(ad::Tape& tape, ad::Var f_geo) const {
  if (tape.shape(f_geo).cols != geo_dim_)
    throw ShapeError("decode_geo: feature length " + std::to_string(tape.shape(f_geo).cols) + ", expected " +
                     std::to_string(geo_dim_));
  return geo_.forward(tape, f_geo);
}

ad::Var Decoders::decode_app(ad::Tape& tape, ad::Var coords, ad::Var f_app) const {
  if (tape.shape(f_app).cols != app_dim_)
    throw ShapeError("decode_app: feature length " + std::to_string(tape.shape(f_app).cols) + ", expected " +
                     std::to_string(app_dim_));
  if (!spec_.app_uses_coordinates) return app_.forward(tape, f_app);
  if (tape.shape(coords) != ad::Shape{tape.shape(f_app).rows, 3})
    throw ShapeError("decode_app: coordinates " + ad::to_string(tape.shape(coords)) + " do not match features " +
                     ad::to_string(tape.shape(f_app)));
  return app_.forward(tape, ad::ops::concat_cols(tape, {coords, f_app}));
}

ad::Var Decoders::decode_app(ad::Tape& tape, const field::PointBatch& p_norm, ad::Var f_app) const {
  if (!spec_.app_uses_coordinates) return decode_app(tape, ad::Var{}, f_app);
  const ad::Var coords = tape.constant({p_norm->size() / 3, 3}, *p_norm);
  return decode_app(tape, coords, f_app);
}

ad::Var Decoders::decode_app_nocoord(ad::Tape& tape, ad::Var f_app) const {
  if (spec_.app_uses_coordinates) throw ConfigError("decode_app_nocoord: decoder was built with coordinate inputs");
  return decode_app(tape, ad::Var{}, f_app);
}

double Decoders::evaluate_sdf(const ad::ParamStore& store, std::span<const double> f_geo) const {
  double s = 0.0;
  geo_.evaluate(store, f_geo, std::span<double>(&s, 1));
  return s;
}

void Decoders::evaluate_color(const ad::ParamStore& store, const field::Vec3& p_norm, std::span<const double> f_app,
                              std::span<double> rgb) const {
  if (!spec_.app_uses_coordinates) {
    app_.evaluate(store, f_app, rgb);
    return;
  }
  std::vector<double> in(3 + f_app.size());
  in[0] = p_norm.x();
  in[1] = p_norm.y();
  in[2] = p_norm.z();
  std::copy(f_app.begin(), f_app.end(), in.begin() + 3);
  app_.evaluate(store, in, rgb);
}

}  // namespace facmap::decoders

#pragma once

// Reverse-mode automatic differentiation over flat row-major buffers.
//
// A ParamStore owns every trainable buffer together with its gradient and the
// Adam moment state. A Tape is rebuilt for every optimization iteration: each
// op computes its forward value eagerly and records a closure that
// back-propagates into the gradients of its inputs. Gradients of parameter
// leaves accumulate directly into the store.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "facmap/error.hpp"

namespace facmap::ad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(Shape s);

struct ParamId {
  std::uint32_t index = 0;
  bool operator==(const ParamId&) const = default;
};

struct AdamHyper;

class ParamStore {
 public:
  void add_group(const std::string& name, double lr);
  bool has_group(std::string_view name) const;
  double lr(std::string_view group) const;
  void set_lr(std::string_view group, double lr);
  std::vector<std::string> group_names() const;

  // Registers a buffer in an existing group. `init` must hold shape.size() values.
  ParamId add(const std::string& name, std::string_view group, Shape shape, std::vector<double> init);

  std::size_t buffer_count() const { return buffers_.size(); }
  std::size_t parameter_count() const;
  std::size_t parameter_count(std::string_view group) const;
  std::optional<ParamId> find(std::string_view name) const;
  ParamId at(std::string_view name) const;

  const std::string& name(ParamId id) const { return buffers_[id.index].name; }
  const std::string& group(ParamId id) const;
  Shape shape(ParamId id) const { return buffers_[id.index].shape; }

  std::span<double> value(ParamId id) { return buffers_[id.index].value; }
  std::span<const double> value(ParamId id) const { return buffers_[id.index].value; }
  std::span<double> grad(ParamId id) { return buffers_[id.index].grad; }
  std::span<const double> grad(ParamId id) const { return buffers_[id.index].grad; }

  void zero_grad();

 private:
  friend void adam_step(ParamStore&, const AdamHyper&, std::int64_t);

  struct Group {
    std::string name;
    double lr = 0.0;
  };
  struct Buffer {
    std::string name;
    std::size_t group = 0;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> m;
    std::vector<double> v;
  };

  std::size_t group_index(std::string_view name) const;

  std::vector<Group> groups_;
  std::vector<Buffer> buffers_;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update using each buffer's group learning rate.
// `t` is the 1-based step index; t < 1 is rejected.
void adam_step(ParamStore& store, const AdamHyper& hyper, std::int64_t t);

struct Var {
  static constexpr std::uint32_t kInvalid = 0xffffffffu;
  std::uint32_t id = kInvalid;
  bool valid() const { return id != kInvalid; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var)>;

  Tape() = default;
  explicit Tape(ParamStore& store) : store_(&store) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Shape shape, std::vector<double> values);
  Var scalar(double v) { return constant({1, 1}, {v}); }
  Var param(ParamId id);

  // Records a node with an eagerly computed forward value. `backward` reads
  // grad(out) and accumulates into grad_mut(input) for inputs that need it.
  Var record(std::string_view op, Shape shape, std::vector<double> value, std::vector<Var> inputs,
             BackwardFn backward);

  Shape shape(Var v) const { return nodes_.at(v.id).shape; }
  std::span<const double> value(Var v) const;
  std::string_view op(Var v) const { return nodes_.at(v.id).op; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  // Upstream gradient of a node (empty until backward reaches it).
  std::span<const double> grad(Var v) const;
  // Mutable gradient for accumulation inside backward closures. Parameter
  // leaves alias the store's gradient buffer.
  std::span<double> grad_mut(Var v);

  // Back-propagates d(output)/d(.) through the tape in reverse recording order.
  void backward(Var output);

  std::size_t node_count() const { return nodes_.size(); }
  ParamStore* store() const { return store_; }

 private:
  struct Node {
    std::string_view op;
    Shape shape;
    std::vector<double> value;
    std::optional<ParamId> param;
    std::vector<Var> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    std::vector<double> grad;
  };

  ParamStore* store_ = nullptr;
  std::vector<Node> nodes_;
};

// Primitive ops. All shapes are row-major (rows x cols).
namespace ops {

Var gather_rows(Tape& t, Var x, std::vector<std::size_t> rows);
Var scatter_add_rows(Tape& t, Var x, std::vector<std::size_t> rows, std::size_t out_rows);
Var matmul(Tape& t, Var a, Var b);
// x[n x k] * w[k x m] + bias[1 x m]
Var linear(Tape& t, Var x, Var w, Var bias);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var x, double c);
// x * s for a 1x1 variable s.
Var scale_by(Tape& t, Var x, Var s);
Var sigmoid(Tape& t, Var x);
Var relu(Tape& t, Var x);
Var exp(Tape& t, Var x);
Var abs(Tape& t, Var x);
Var sum(Tape& t, Var x);
Var mean(Tape& t, Var x);
Var concat_cols(Tape& t, const std::vector<Var>& parts);
Var slice_cols(Tape& t, Var x, std::size_t begin, std::size_t count);

}  // namespace ops

}  // namespace facmap::ad

#include "facmap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Core>

#include "facmap/parallel.hpp"

namespace facmap::ad {

std::string to_string(Shape s) {
  std::ostringstream os;
  os << "[" << s.rows << "x" << s.cols << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add_group(const std::string& name, double lr) {
  if (has_group(name)) throw ConfigError("parameter group '" + name + "' already exists");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("parameter group '" + name + "': invalid learning rate");
  groups_.push_back({name, lr});
}

bool ParamStore::has_group(std::string_view name) const {
  return std::any_of(groups_.begin(), groups_.end(), [&](const Group& g) { return g.name == name; });
}

std::size_t ParamStore::group_index(std::string_view name) const {
  for (std::size_t i = 0; i < groups_.size(); ++i)
    if (groups_[i].name == name) return i;
  throw ConfigError("unknown parameter group '" + std::string(name) + "'");
}

double ParamStore::lr(std::string_view group) const { return groups_[group_index(group)].lr; }

void ParamStore::set_lr(std::string_view group, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("invalid learning rate for group " + std::string(group));
  groups_[group_index(group)].lr = lr;
}

std::vector<std::string> ParamStore::group_names() const {
  std::vector<std::string> out;
  for (const auto& g : groups_) out.push_back(g.name);
  return out;
}

ParamId ParamStore::add(const std::string& name, std::string_view group, Shape shape, std::vector<double> init) {
  if (find(name)) throw ConfigError("parameter '" + name + "' registered twice");
  if (init.size() != shape.size())
    throw ShapeError("parameter '" + name + "': init holds " + std::to_string(init.size()) + " values for shape " +
                     to_string(shape));
  Buffer b;
  b.name = name;
  b.group = group_index(group);
  b.shape = shape;
  b.value = std::move(init);
  b.grad.assign(shape.size(), 0.0);
  b.m.assign(shape.size(), 0.0);
  b.v.assign(shape.size(), 0.0);
  buffers_.push_back(std::move(b));
  return ParamId{static_cast<std::uint32_t>(buffers_.size() - 1)};
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : buffers_) n += b.value.size();
  return n;
}

std::size_t ParamStore::parameter_count(std::string_view group) const {
  const std::size_t g = group_index(group);
  std::size_t n = 0;
  for (const auto& b : buffers_)
    if (b.group == g) n += b.value.size();
  return n;
}

std::optional<ParamId> ParamStore::find(std::string_view name) const {
  for (std::size_t i = 0; i < buffers_.size(); ++i)
    if (buffers_[i].name == name) return ParamId{static_cast<std::uint32_t>(i)};
  return std::nullopt;
}

ParamId ParamStore::at(std::string_view name) const {
  auto id = find(name);
  if (!id) throw ConfigError("unknown parameter '" + std::string(name) + "'");
  return *id;
}

const std::string& ParamStore::group(ParamId id) const { return groups_[buffers_[id.index].group].name; }

void ParamStore::zero_grad() {
  for (auto& b : buffers_) std::fill(b.grad.begin(), b.grad.end(), 0.0);
}

void adam_step(ParamStore& store, const AdamHyper& hyper, std::int64_t t) {
  if (t < 1) throw NumericalError("adam_step: step index must be >= 1 (got " + std::to_string(t) + ")");
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  for (auto& b : store.buffers_) {
    const double lr = store.groups_[b.group].lr;
    if (lr == 0.0) continue;
    const std::size_t n = b.value.size();
    double* p = b.value.data();
    const double* g = b.grad.data();
    double* m = b.m.data();
    double* v = b.v.data();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape.size())
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
  Node n;
  n.op = "constant";
  n.shape = shape;
  n.value = std::move(values);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(ParamId id) {
  if (!store_) throw Error("Tape::param: tape has no parameter store");
  Node n;
  n.op = "param";
  n.shape = store_->shape(id);
  n.param = id;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(std::string_view op, Shape shape, std::vector<double> value, std::vector<Var> inputs,
                 BackwardFn backward) {
  if (value.size() != shape.size())
    throw ShapeError(std::string(op) + ": forward produced " + std::to_string(value.size()) + " values for shape " +
                     to_string(shape));
  Node n;
  n.op = op;
  n.shape = shape;
  n.value = std::move(value);
  n.needs_grad = std::any_of(inputs.begin(), inputs.end(), [&](Var v) { return nodes_.at(v.id).needs_grad; });
  n.inputs = std::move(inputs);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::span<const double> Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.param) return store_->value(*n.param);
  return n.value;
}

std::span<const double> Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.param) return store_->grad(*n.param);
  return n.grad;
}

std::span<double> Tape::grad_mut(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.param) return store_->grad(*n.param);
  if (n.grad.empty()) n.grad.assign(n.shape.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var output) {
  if (nodes_.at(output.id).shape.size() != 1)
    throw ShapeError("backward: output must be scalar, got " + to_string(nodes_[output.id].shape));
  for (auto& n : nodes_)
    if (!n.param) n.grad.clear();
  if (!nodes_[output.id].needs_grad) return;
  grad_mut(output)[0] += 1.0;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, Var{static_cast<std::uint32_t>(i)});
  }
}

// ---------------------------------------------------------------------------
// Primitive ops

namespace ops {
namespace {

void require_same(const Tape& t, std::string_view op, Var a, Var b) {
  if (t.shape(a) != t.shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(t.shape(a)) + " vs " + to_string(t.shape(b)));
}

template <class F, class D>
Var unary(Tape& t, std::string_view op, Var x, F f, D dfdx) {
  auto xv = t.value(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return t.record(op, t.shape(x), std::move(out), {x}, [x, dfdx](Tape& tp, Var self) {
    if (!tp.needs_grad(x)) return;
    auto g = tp.grad(self);
    auto xv = tp.value(x);
    auto yv = tp.value(self);
    auto gx = tp.grad_mut(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace

Var gather_rows(Tape& t, Var x, std::vector<std::size_t> rows) {
  const Shape s = t.shape(x);
  for (std::size_t r : rows)
    if (r >= s.rows)
      throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range for " + to_string(s));
  auto xv = t.value(x);
  std::vector<double> out(rows.size() * s.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * s.cols), s.cols,
                out.begin() + static_cast<std::ptrdiff_t>(i * s.cols));
  const std::size_t cols = s.cols;
  const std::size_t n = rows.size();
  return t.record("gather_rows", {n, cols}, std::move(out), {x},
                  [x, rows = std::move(rows), cols](Tape& tp, Var self) {
                    auto g = tp.grad(self);
                    auto gx = tp.grad_mut(x);
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      for (std::size_t c = 0; c < cols; ++c) gx[rows[i] * cols + c] += g[i * cols + c];
                  });
}

Var scatter_add_rows(Tape& t, Var x, std::vector<std::size_t> rows, std::size_t out_rows) {
  const Shape s = t.shape(x);
  if (rows.size() != s.rows)
    throw ShapeError("scatter_add_rows: " + std::to_string(rows.size()) + " indices for " + to_string(s));
  for (std::size_t r : rows)
    if (r >= out_rows) throw ShapeError("scatter_add_rows: index " + std::to_string(r) + " >= " + std::to_string(out_rows));
  auto xv = t.value(x);
  const std::size_t cols = s.cols;
  std::vector<double> out(out_rows * cols, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < cols; ++c) out[rows[i] * cols + c] += xv[i * cols + c];
  return t.record("scatter_add_rows", {out_rows, cols}, std::move(out), {x},
                  [x, rows = std::move(rows), cols](Tape& tp, Var self) {
                    auto g = tp.grad(self);
                    auto gx = tp.grad_mut(x);
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      for (std::size_t c = 0; c < cols; ++c) gx[i * cols + c] += g[rows[i] * cols + c];
                  });
}

namespace {

// out[n x m] = a[n x k] * b[k x m] (+ bias)
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void gemm_forward(std::span<const double> a, std::span<const double> b, const double* bias, std::size_t n,
                  std::size_t k, std::size_t m, std::vector<double>& out) {
  out.assign(n * m, 0.0);
  const ConstMap bm(b.data(), k, m);
  parallel_for(n, [&](std::size_t begin, std::size_t end, std::size_t) {
    const auto rows = static_cast<Eigen::Index>(end - begin);
    MutMap o(out.data() + begin * m, rows, m);
    o.noalias() = ConstMap(a.data() + begin * k, rows, k) * bm;
    if (bias) o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias, m);
  });
}

// Accumulates ga += g * b^T and gb += a^T * g (gbias += colsum(g)) with
// per-worker partials for the shared weight gradients, merged in worker order.
void gemm_backward(std::span<const double> g, std::span<const double> a, std::span<const double> b, std::size_t n,
                   std::size_t k, std::size_t m, std::span<double> ga, std::span<double> gb, std::span<double> gbias) {
  const ConstMap bm(b.data(), k, m);
  if (!ga.empty()) {
    parallel_for(n, [&](std::size_t begin, std::size_t end, std::size_t) {
      const auto rows = static_cast<Eigen::Index>(end - begin);
      MutMap(ga.data() + begin * k, rows, k).noalias() += ConstMap(g.data() + begin * m, rows, m) * bm.transpose();
    });
  }
  if (gb.empty() && gbias.empty()) return;
  const std::size_t workers = worker_count(n);
  std::vector<RowMat> part_b(workers, RowMat::Zero(gb.empty() ? 0 : k, gb.empty() ? 0 : m));
  std::vector<Eigen::RowVectorXd> part_bias(workers, Eigen::RowVectorXd::Zero(gbias.empty() ? 0 : m));
  parallel_for(n, [&](std::size_t begin, std::size_t end, std::size_t w) {
    const auto rows = static_cast<Eigen::Index>(end - begin);
    const ConstMap gm(g.data() + begin * m, rows, m);
    if (!gb.empty()) part_b[w].noalias() += ConstMap(a.data() + begin * k, rows, k).transpose() * gm;
    if (!gbias.empty()) part_bias[w] += gm.colwise().sum();
  });
  for (std::size_t w = 0; w < workers; ++w) {
    if (!gb.empty()) MutMap(gb.data(), k, m) += part_b[w];
    if (!gbias.empty()) Eigen::Map<Eigen::RowVectorXd>(gbias.data(), m) += part_bias[w];
  }
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Shape sa = t.shape(a), sb = t.shape(b);
  if (sa.cols != sb.rows) throw ShapeError("matmul: shape mismatch " + to_string(sa) + " x " + to_string(sb));
  std::vector<double> out;
  gemm_forward(t.value(a), t.value(b), nullptr, sa.rows, sa.cols, sb.cols, out);
  return t.record("matmul", {sa.rows, sb.cols}, std::move(out), {a, b}, [a, b, sa, sb](Tape& tp, Var self) {
    std::span<double> ga = tp.needs_grad(a) ? tp.grad_mut(a) : std::span<double>{};
    std::span<double> gb = tp.needs_grad(b) ? tp.grad_mut(b) : std::span<double>{};
    gemm_backward(tp.grad(self), tp.value(a), tp.value(b), sa.rows, sa.cols, sb.cols, ga, gb, {});
  });
}

Var linear(Tape& t, Var x, Var w, Var bias) {
  const Shape sx = t.shape(x), sw = t.shape(w), sbias = t.shape(bias);
  if (sx.cols != sw.rows || sbias != Shape{1, sw.cols})
    throw ShapeError("linear: shape mismatch x" + to_string(sx) + " w" + to_string(sw) + " b" + to_string(sbias));
  std::vector<double> out;
  gemm_forward(t.value(x), t.value(w), t.value(bias).data(), sx.rows, sx.cols, sw.cols, out);
  return t.record("linear", {sx.rows, sw.cols}, std::move(out), {x, w, bias},
                  [x, w, bias, sx, sw](Tape& tp, Var self) {
                    std::span<double> gx = tp.needs_grad(x) ? tp.grad_mut(x) : std::span<double>{};
                    std::span<double> gw = tp.needs_grad(w) ? tp.grad_mut(w) : std::span<double>{};
                    std::span<double> gbias = tp.needs_grad(bias) ? tp.grad_mut(bias) : std::span<double>{};
                    gemm_backward(tp.grad(self), tp.value(x), tp.value(w), sx.rows, sx.cols, sw.cols, gx, gw, gbias);
                  });
}

Var add(Tape& t, Var a, Var b) {
  require_same(t, "add", a, b);
  auto av = t.value(a), bv = t.value(b);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return t.record("add", t.shape(a), std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
    auto g = tp.grad(self);
    for (Var in : {a, b}) {
      if (!tp.needs_grad(in)) continue;
      auto gi = tp.grad_mut(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same(t, "sub", a, b);
  auto av = t.value(a), bv = t.value(b);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return t.record("sub", t.shape(a), std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
    auto g = tp.grad(self);
    if (tp.needs_grad(a)) {
      auto ga = tp.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.needs_grad(b)) {
      auto gb = tp.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  require_same(t, "mul", a, b);
  auto av = t.value(a), bv = t.value(b);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return t.record("mul", t.shape(a), std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
    auto g = tp.grad(self);
    auto av = tp.value(a), bv = tp.value(b);
    if (tp.needs_grad(a)) {
      auto ga = tp.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.needs_grad(b)) {
      auto gb = tp.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Tape& t, Var x, double c) {
  return unary(t, "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var scale_by(Tape& t, Var x, Var s) {
  if (t.shape(s) != Shape{1, 1}) throw ShapeError("scale_by: factor must be 1x1, got " + to_string(t.shape(s)));
  auto xv = t.value(x);
  const double sv = t.value(s)[0];
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv;
  return t.record("scale_by", t.shape(x), std::move(out), {x, s}, [x, s](Tape& tp, Var self) {
    auto g = tp.grad(self);
    auto xv = tp.value(x);
    const double sv = tp.value(s)[0];
    if (tp.needs_grad(x)) {
      auto gx = tp.grad_mut(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
    if (tp.needs_grad(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      tp.grad_mut(s)[0] += acc;
    }
  });
}

Var sigmoid(Tape& t, Var x) {
  return unary(
      t, "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu(Tape& t, Var x) {
  return unary(
      t, "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var exp(Tape& t, Var x) {
  return unary(t, "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var abs(Tape& t, Var x) {
  return unary(
      t, "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var sum(Tape& t, Var x) {
  auto xv = t.value(x);
  double acc = 0.0;
  for (double v : xv) acc += v;
  return t.record("sum", {1, 1}, {acc}, {x}, [x](Tape& tp, Var self) {
    const double g = tp.grad(self)[0];
    auto gx = tp.grad_mut(x);
    for (double& v : gx) v += g;
  });
}

Var mean(Tape& t, Var x) {
  const std::size_t n = t.shape(x).size();
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(t, sum(t, x), 1.0 / static_cast<double>(n));
}

Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = t.shape(parts[0]).rows;
  std::size_t cols = 0;
  for (Var p : parts) {
    if (t.shape(p).rows != rows)
      throw ShapeError("concat_cols: row mismatch " + to_string(t.shape(parts[0])) + " vs " + to_string(t.shape(p)));
    cols += t.shape(p).cols;
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const std::size_t pc = t.shape(p).cols;
    auto pv = t.value(p);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * pc), pc,
                  out.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
    offset += pc;
  }
  return t.record("concat_cols", {rows, cols}, std::move(out), parts, [parts, rows, cols](Tape& tp, Var self) {
    auto g = tp.grad(self);
    std::size_t offset = 0;
    for (Var p : parts) {
      const std::size_t pc = tp.shape(p).cols;
      if (tp.needs_grad(p)) {
        auto gp = tp.grad_mut(p);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * cols + offset + c];
      }
      offset += pc;
    }
  });
}

Var slice_cols(Tape& t, Var x, std::size_t begin, std::size_t count) {
  const Shape s = t.shape(x);
  if (begin + count > s.cols)
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + to_string(s));
  auto xv = t.value(x);
  std::vector<double> out(s.rows * count);
  for (std::size_t r = 0; r < s.rows; ++r)
    for (std::size_t c = 0; c < count; ++c) out[r * count + c] = xv[r * s.cols + begin + c];
  return t.record("slice_cols", {s.rows, count}, std::move(out), {x}, [x, s, begin, count](Tape& tp, Var self) {
    auto g = tp.grad(self);
    auto gx = tp.grad_mut(x);
    for (std::size_t r = 0; r < s.rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * s.cols + begin + c] += g[r * count + c];
  });
}

}  // namespace ops

}  // namespace facmap::ad

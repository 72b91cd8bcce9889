#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "edit/tensor.hpp"

namespace edit::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Single-use record of one forward pass.
///
/// Nodes are appended in execution order, so reverse accumulation is a plain
/// walk from the last node to the first. backward() clears all gradients before
/// accumulating, which makes repeated calls return identical results.
class Tape {
 public:
  // Receives the gradient of the node's output and pushes input gradients via accumulate().
  using Backward = std::function<void(const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  // Records an op result. The node needs a gradient iff one of its inputs does.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(const char* op, Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  void backward(Var loss);
  // Gradient of the last backward() loss w.r.t. v; zeros when v was unreachable.
  Tensor grad(Var v) const;
  void accumulate(Var v, const Tensor& g);
  void accumulate(Var v, Tensor&& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    Backward backward;
    const char* op = "";
  };

  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var matmul(Var a, Var b);
// x [R×C] plus / times a row vector v of C entries, broadcast over rows.
Var add_row(Var x, Var v);
Var mul_row(Var x, Var v);
// v [L×C] added to every block of L rows of x.
Var add_tiled(Var x, Var v);
// Row r of x times s[r]; s is [R×1].
Var scale_rows(Var x, Var s);
// [B×C] -> [B·times×C], each row repeated consecutively.
Var repeat_rows(Var v, std::size_t times);
// Mean of consecutive groups of rows: [B·group×C] -> [B×C].
Var group_mean_rows(Var x, std::size_t group);
// Mean over axis 0 ([R×C] -> [1×C]) or over the last axis ([R×C] -> [R×1]).
Var mean_axis(Var x, int axis);
Var mean(Var x);
Var sum(Var x);
Var sigmoid(Var x);
Var gelu(Var x);
Var softmax(Var x);
Var layer_norm(Var x, double eps);
Var slice_cols(Var x, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
// Elementwise product with a constant mask; no gradient flows into the mask.
Var mask(Var x, const Tensor& m);
Var concat_cols(std::span<const Var> parts);
Var stop_gradient(Var x);
Var attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t heads);

/// Scales the reverse rule of every `op` node by `factor` on this thread while alive.
/// Exists so gradient checks can be shown to fail on a broken rule.
class ScopedRuleFault {
 public:
  ScopedRuleFault(std::string op, double factor);
  ~ScopedRuleFault();
  ScopedRuleFault(const ScopedRuleFault&) = delete;
  ScopedRuleFault& operator=(const ScopedRuleFault&) = delete;

 private:
  std::string prev_op_;
  double prev_factor_;
};

/// Result of a finite-difference gradient comparison.
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
};

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central-difference check of `analytic` against f at theta on the listed coordinates.
///
/// Relative error is |a - n| / max(1, |a|, |n|). Coordinates with excluded[i]
/// set are skipped and counted. f must be deterministic; two differing
/// evaluations at theta raise ContractError. h must lie in [1e-7, 1e-4].
GradCheckReport grad_check(const ScalarFn& f, std::span<const double> theta,
                           std::span<const double> analytic, std::span<const std::size_t> coords,
                           double h = 1e-6, const std::vector<bool>& excluded = {});

}  // namespace edit::ad

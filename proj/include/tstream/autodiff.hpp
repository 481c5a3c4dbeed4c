#pragma once

// Reverse-mode differentiation over a Wengert-style tape.
//
// Every primitive appends one node to the tape holding its output value and,
// when any input requires a gradient, a closure that propagates the output
// gradient back to its inputs. Nodes are appended after their inputs, so the
// tape is always in topological order and backward() is a single reverse scan.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tstream/tensor.hpp"

namespace tstream::nn {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // With record == false no gradient closures are stored (inference).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends the result of a primitive. A null `backward` marks an operation
  // without a gradient rule; reaching it in backward() throws.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward,
             const char* op_name);

  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient of the last backward() target with respect to `v`; zeros when
  // nothing flowed into it.
  Tensor grad(Var v) const;

  // For gradient rules: incoming gradient of node `id` and a mutable,
  // zero-initialised accumulator for an input node.
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }
  std::span<double> accumulator(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const char* op = "leaf";
    bool requires_grad = false;
    bool is_leaf = true;
  };

  bool record_;
  std::vector<Node> nodes_;
};

// ---- primitives -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// x[..., n] + b[n]
Var add_bias(Var x, Var b);
// a[..., m, k] @ b[..., k, n]; either side may be rank 2 and is then shared
// across the other side's leading batch dims.
Var matmul(Var a, Var b);
Var softmax(Var x, std::size_t axis);
Var log_softmax(Var x);  // last axis
// Normalises over the last axis, then gain * x_hat + bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var x);
Var softplus(Var x);
Var abs(Var x);
Var sum(Var x);
Var mean(Var x);

// out.flat[i] = x.flat[index[i]], or 0 where index[i] < 0. Covers reshape,
// permutation, slicing, replication, padding and embedding lookup.
Var gather(Var x, Shape out_shape, std::vector<std::ptrdiff_t> index);
Var reshape(Var x, Shape shape);
Var permute(Var x, const std::vector<std::size_t>& axes);
// Concatenates along axis 0; trailing extents must agree.
Var concat(std::span<const Var> parts);

// Applies an arbitrary function with no gradient rule (backward through it
// raises UnsupportedOpError).
Var apply_unrecorded(Var x, const std::function<Tensor(const Tensor&)>& fn);

// Composite helpers.
Var affine(Var x, Var weight, Var bias);

// Index table for permute() without touching a tape.
std::vector<std::ptrdiff_t> permute_index(const Shape& shape, const std::vector<std::size_t>& axes,
                                          Shape* out_shape);

// ---- gradient checking ----------------------------------------------------

using ScalarFunction = std::function<Var(Tape&, Var)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const ScalarFunction& f, const Tensor& x, double step = 1e-5);

}  // namespace tstream::nn

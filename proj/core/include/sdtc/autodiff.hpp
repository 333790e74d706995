#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "sdtc/tensor.hpp"

namespace sdtc {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Computation record for reverse-mode differentiation.
///
/// Operations append nodes in execution order, so the node list is already a
/// topological order; `backward` walks it in reverse. Nodes that do not depend
/// on any variable carry no backward function and are skipped. A tape is
/// single-threaded; distinct tapes share nothing.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  const Tensor& value(Var v) const;
  /// Gradient of the last `backward` loss w.r.t. `v`. Zero if `v` was not on the path.
  const Tensor& grad(Var v) const;

  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Used by operation implementations.
  Var record(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);
  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_at(std::size_t id) const { return nodes_[id].grad; }
  /// Mutable gradient buffer of an input node, or nullptr if it needs no gradient.
  double* grad_sink(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owner(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Differentiable operations. Binary element-wise ops require identical shapes.
namespace ad {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// a[n x m] + bias[m] on every row.
Var add_bias(Var a, Var bias);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);

/// Valid cross-correlation. input: [H,W,Cin] or [N,H,W,Cin]; kernels: [kh,kw,Cin,M];
/// bias: [M]. Output extents floor((H-kh)/sh)+1 by floor((W-kw)/sw)+1.
Var conv2d(Var input, Var kernels, Var bias, std::size_t stride_rows, std::size_t stride_cols);

Var softmax(Var x, std::size_t axis);

/// Reductions over one axis (removed from the shape) or over everything (shape [1]).
Var sum(Var x, std::optional<std::size_t> axis = std::nullopt);
Var mean(Var x, std::optional<std::size_t> axis = std::nullopt);
Var l2_norm(Var x, std::optional<std::size_t> axis = std::nullopt);

Var reshape(Var x, Shape shape);
/// Keeps indices [begin, end) of `axis`.
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
/// Picks one index of `axis` and drops that axis.
Var select(Var x, std::size_t axis, std::size_t index);

/// Capsule squashing along the last axis: v = |s|^2/(1+|s|^2) * s/(|s|+eps).
Var squash(Var s);
/// u: [N,I,D], transforms: [I,J,Da,D] -> predictions [N,I,J,Da], pred[n,i,j] = W[i,j] u[n,i].
Var capsule_predict(Var u, Var transforms);
/// predictions: [N,I,J,Da], coupling: constant [N,I,J] -> [N,J,Da], sum over i.
Var coupled_sum(Var predictions, const Tensor& coupling);

}  // namespace ad

/// Plain (non-recorded) softmax along `axis`, computed with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);

}  // namespace sdtc

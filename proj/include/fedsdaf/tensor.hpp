#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fedsdaf/rng.hpp"

namespace fedsdaf {

struct TensorImpl;

// Reverse-mode autodiff tensor. A Tensor is a cheap handle onto a shared
// buffer; ops build a DAG of backward closures that backward() replays in
// reverse topological order. Gradients persist (and accumulate across
// backward calls) only on requires_grad leaves; everything else is scratch.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  std::size_t ndim() const;
  // 2-D accessors; ShapeError when the tensor is not a matrix.
  std::size_t rows() const;
  std::size_t cols() const;

  const std::vector<double>& data() const;
  // Direct write access for optimizers and initializers. Only leaves may be
  // mutated; a graph output raises ContractError.
  std::vector<double>& mutable_data();
  double value() const;  // single-element tensors only
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  void set_requires_grad(bool v);  // leaves only
  bool has_node() const;
  const char* op() const;  // "leaf" when no node is attached

  const std::vector<double>& grad() const;
  void zero_grad();

  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_leaf(std::vector<std::size_t>, std::vector<double>, bool);
  friend Tensor make_result(std::vector<std::size_t>, std::vector<double>,
                            const char*, std::vector<Tensor>,
                            std::function<void(const std::vector<double>&)>);
};

// Scoped switch that stops ops from recording backward closures; used for
// evaluation passes and numeric differentiation.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise ops accept equal shapes, plus two broadcast forms against a
// matrix: a length-n vector (spread over rows) or an (m,1) column (spread
// over columns). Either operand may be the broadcast one.
Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdims);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdims);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
// Natural log. A positive floor clamps inputs below it (with zero gradient
// in the clamped region) so downstream losses never see log(0).
Tensor log(const Tensor& a, double floor = 0.0);

// Fused, numerically stable softmax. axis=1 normalizes each row, axis=0
// each column; 1-D tensors are treated as a single row.
Tensor softmax(const Tensor& a, std::size_t axis = 1);

// Fused layer norm over the last axis of a matrix with learnable gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Value copy with no graph link and requires_grad off.
Tensor detach(const Tensor& a);

// Seeds the sweep with d(loss)/d(loss) = 1 and accumulates into every
// requires_grad leaf reachable from `loss`. The argument must be a scalar
// attached to a graph; anything else raises ContractError.
void backward(const Tensor& loss);

struct GraphOp {
  std::string op;
  std::vector<std::size_t> shape;
  std::size_t arity = 0;
  const void* id = nullptr;               // stable per-tensor identity
  std::vector<const void*> parents;
};

// Topologically ordered listing of the graph below `root` (leaves included),
// for structural assertions in tests.
std::vector<GraphOp> trace_graph(const Tensor& root);

Tensor random_normal(std::vector<std::size_t> shape, Rng& rng, double stddev,
                     bool requires_grad = false);

}  // namespace fedsdaf
